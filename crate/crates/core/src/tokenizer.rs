//! Corpus-derived vocabulary: whole herb names and symptom words as single
//! tokens, dosages spelled digit by digit.
//!
//! `"ginger 10g, licorice 6g"` encodes as
//! `[ginger, 1, 0, g, ",", licorice, 6, g]`. Whitespace is not tokenized;
//! [`Vocabulary::decode`] restores it from the token classes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::prescription::PROMPT_MARKERS;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const GLYPHS: [&str; 14] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", ".", "g", ",", "\n"];
/// Markers that are always followed by one space in a rendered prompt.
const FIELD_MARKERS: [&str; 3] = ["Symptoms:", "History:", "Tongue:"];
const VOCAB_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {0} is out of range")]
    InvalidTokenId(TokenId),
    #[error("invalid vocabulary file: {0}")]
    InvalidFile(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_of: Vec<String>,
    id_of: HashMap<String, TokenId>,
    max_token_bytes: usize,
    has_spaced_tokens: bool,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: BTreeMap<String, TokenId>,
}

/// Digits, `.` and `g` render without spaces between them.
fn is_dosage_glyph(tok: &str) -> bool {
    tok == "." || tok == "g" || (tok.len() == 1 && tok.as_bytes()[0].is_ascii_digit())
}

fn separator(prev: &str, next: &str) -> &'static str {
    if FIELD_MARKERS.contains(&prev) {
        return if next == "|" { "  " } else { " " };
    }
    if prev == "\n" || next == "\n" || next == "," {
        return "";
    }
    if is_dosage_glyph(prev) && is_dosage_glyph(next) {
        return "";
    }
    " "
}

impl Vocabulary {
    /// Reserved ids first, then every herb name, symptom word, prompt marker
    /// and dosage glyph in sorted order.
    pub fn build(corpus: &Corpus) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut tokens: BTreeSet<String> = BTreeSet::new();
        tokens.extend(GLYPHS.iter().map(|s| s.to_string()));
        tokens.extend(PROMPT_MARKERS.iter().map(|s| s.to_string()));
        for r in corpus.records() {
            tokens.extend(r.prescription.herbs().map(|h| h.as_str().to_string()));
            for field in [&r.chief_complaint, &r.history, &r.tongue] {
                tokens.extend(field.split_whitespace().map(str::to_string));
            }
        }
        for reserved in RESERVED {
            tokens.remove(reserved);
        }
        let all = RESERVED.iter().map(|s| s.to_string()).chain(tokens).collect();
        Ok(Self::from_tokens(all))
    }

    fn from_tokens(token_of: Vec<String>) -> Self {
        let id_of = token_of
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        let max_token_bytes = token_of.iter().map(String::len).max().unwrap_or(1);
        let has_spaced_tokens = token_of.iter().any(|t| t.contains(' '));
        Self {
            token_of,
            id_of,
            max_token_bytes,
            has_spaced_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.token_of.get(id as usize).map(String::as_str)
    }

    /// Longest vocabulary token that `text` starts with, at most
    /// `max_token_bytes` long.
    fn longest_prefix(&self, text: &str) -> Option<(TokenId, usize)> {
        let mut end = text.len().min(self.max_token_bytes);
        while end > 0 {
            if text.is_char_boundary(end) {
                if let Some(id) = self.id(&text[..end]) {
                    return Some((id, end));
                }
            }
            end -= 1;
        }
        None
    }

    /// Multi-word token (a herb name containing spaces) starting `text` and
    /// ending at whitespace or end of input.
    fn spaced_prefix(&self, text: &str) -> Option<(TokenId, usize)> {
        let (id, len) = self.longest_prefix(text)?;
        let token = &self.token_of[id as usize];
        let at_boundary = text[len..].chars().next().is_none_or(char::is_whitespace);
        (token.contains(' ') && at_boundary).then_some((id, len))
    }

    /// Greedy longest-match segmentation. Whitespace other than `\n` is
    /// dropped; each maximal unmatched span becomes a single `UNK`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < text.len() {
            let rest = &text[pos..];
            let c = rest.chars().next().expect("non-empty");
            if c == '\n' {
                out.push(self.id("\n").unwrap_or(UNK));
                pos += 1;
                continue;
            }
            if c.is_whitespace() {
                pos += c.len_utf8();
                continue;
            }
            if self.has_spaced_tokens {
                if let Some((id, len)) = self.spaced_prefix(rest) {
                    out.push(id);
                    pos += len;
                    continue;
                }
            }
            let chunk_len = rest.find(char::is_whitespace).unwrap_or(rest.len());
            self.encode_chunk(&rest[..chunk_len], &mut out);
            pos += chunk_len;
        }
        out
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<TokenId>) {
        let mut i = 0;
        let mut in_unknown = false;
        while i < chunk.len() {
            match self.longest_prefix(&chunk[i..]) {
                Some((id, len)) => {
                    out.push(id);
                    i += len;
                    in_unknown = false;
                }
                None => {
                    if !in_unknown {
                        out.push(UNK);
                        in_unknown = true;
                    }
                    i += chunk[i..].chars().next().map_or(1, char::len_utf8);
                }
            }
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        let mut prev: Option<&str> = None;
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::InvalidTokenId(id))?;
            if let Some(p) = prev {
                out.push_str(separator(p, tok));
            }
            out.push_str(tok);
            prev = Some(tok);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            tokens: self
                .token_of
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), i as TokenId))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| TokenizerError::InvalidFile(e.to_string()))?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(TokenizerError::InvalidFile(format!("unsupported version {}", file.version)));
        }
        let n = file.tokens.len();
        let mut token_of = vec![None; n];
        for (tok, id) in file.tokens {
            let slot = token_of
                .get_mut(id as usize)
                .ok_or_else(|| TokenizerError::InvalidFile(format!("id {id} out of range")))?;
            if slot.replace(tok).is_some() {
                return Err(TokenizerError::InvalidFile(format!("id {id} assigned twice")));
            }
        }
        let token_of: Vec<String> = token_of
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| TokenizerError::InvalidFile("ids are not contiguous".into()))?;
        if token_of.len() < RESERVED.len() || token_of[..RESERVED.len()] != RESERVED {
            return Err(TokenizerError::InvalidFile("reserved tokens missing or misplaced".into()));
        }
        Ok(Self::from_tokens(token_of))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prescription::{ClinicalRecord, Prescription};

    fn corpus() -> Corpus {
        let rx = Prescription::parse_strict("ginger 10g, licorice 4.5g").unwrap();
        Corpus::new(vec![
            ClinicalRecord::new("bloating nausea", "2 yr reflux", "pale", rx.clone()).unwrap(),
            ClinicalRecord::new("belching", "", "", Prescription::parse_strict("bai zhu 9g").unwrap()).unwrap(),
        ])
    }

    #[test]
    fn herbs_are_single_tokens() {
        let v = Vocabulary::build(&corpus()).unwrap();
        assert!(v.id("ginger").is_some());
        assert!(v.id("licorice").is_some());
        assert_eq!(v.id("<pad>"), None);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
    }

    #[test]
    fn dosage_is_spelled_by_digit() {
        let v = Vocabulary::build(&corpus()).unwrap();
        let ids = v.encode("4.5g");
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["4", ".", "5", "g"]);
        let ids = v.encode("ginger 10g");
        assert_eq!(ids, vec![v.id("ginger").unwrap(), v.id("1").unwrap(), v.id("0").unwrap(), v.id("g").unwrap()]);
        assert_eq!(v.decode(&ids).unwrap(), "ginger 10g");
    }

    #[test]
    fn unknown_and_empty() {
        let v = Vocabulary::build(&corpus()).unwrap();
        assert_eq!(v.encode(""), Vec::<TokenId>::new());
        assert_eq!(v.encode("zzz"), vec![UNK]);
        assert_eq!(v.decode(&[]).unwrap(), "");
        assert!(matches!(v.decode(&[9999]), Err(TokenizerError::InvalidTokenId(9999))));
    }

    #[test]
    fn prompts_and_targets_round_trip() {
        let c = corpus();
        let v = Vocabulary::build(&c).unwrap();
        for r in c.records() {
            let p = r.render_prompt();
            assert_eq!(v.decode(&v.encode(&p)).unwrap(), p);
            let t = r.prescription.serialize();
            assert_eq!(v.decode(&v.encode(&t)).unwrap(), t);
        }
        assert_eq!(v.encode("bai zhu 9g").len(), 3);
    }

    #[test]
    fn deterministic_and_json_round_trip() {
        let a = Vocabulary::build(&corpus()).unwrap();
        let b = Vocabulary::build(&corpus()).unwrap();
        assert_eq!(a, b);
        assert_eq!(Vocabulary::from_json(&a.to_json()).unwrap(), a);
        assert!(Vocabulary::from_json(r#"{"version":9,"tokens":{}}"#).is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Vocabulary::build(&Corpus::default()), Err(TokenizerError::EmptyCorpus)));
    }
}
