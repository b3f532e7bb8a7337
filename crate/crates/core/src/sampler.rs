//! Autoregressive decoding with temperature, top-k and nucleus filtering.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{InferenceModel, LmError};
use crate::prescription::{ClinicalRecord, ParseWarning, Prescription};
use crate::rng::{self, Purpose};
use crate::tokenizer::{TokenId, TokenizerError, Vocabulary, BOS, EOS};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("prompt of {len} tokens leaves no room in a context of {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_k: 50,
            top_p: 0.7,
            temperature: 0.95,
            max_new_tokens: 160,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    /// Argmax decoding.
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            top_k: 1,
            top_p: 1.0,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.top_k == 0 {
            return Err(SamplerError::InvalidConfig("top_k must be >= 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(SamplerError::InvalidConfig(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(SamplerError::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Token ids ordered by descending logit, lower id first on ties.
fn ranked(logits: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order
}

/// Sampling distribution over the whole vocabulary: temperature, then the
/// `top_k` highest logits, then the shortest descending prefix of that
/// renormalized top-k distribution whose mass reaches `top_p`.
pub fn filter_logits(logits: &[f32], cfg: &SamplerConfig) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    if logits.is_empty() {
        return out;
    }
    let order = ranked(logits);
    let kept = &order[..cfg.top_k.min(order.len())];
    let max = logits[kept[0]] as f64 / cfg.temperature;
    let weights: Vec<f64> = kept
        .iter()
        .map(|&i| (logits[i] as f64 / cfg.temperature - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();

    let mut survivors = kept.len();
    if cfg.top_p < 1.0 {
        let mut mass = 0.0;
        for (n, w) in weights.iter().enumerate() {
            mass += w / total;
            if mass >= cfg.top_p {
                survivors = n + 1;
                break;
            }
        }
    }
    let kept_mass: f64 = weights[..survivors].iter().sum();
    for (&i, w) in kept[..survivors].iter().zip(&weights) {
        out[i] = w / kept_mass;
    }
    out
}

fn draw(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Generated tokens after `prompt`, without the prompt and without `EOS`.
/// Stops at `EOS`, after `max_new_tokens`, or when prompt plus output fill
/// the context.
pub fn generate_with_rng(
    model: &InferenceModel,
    prompt: &[TokenId],
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>, SamplerError> {
    cfg.validate()?;
    let max = model.config().max_seq_len;
    if prompt.is_empty() || prompt.len() >= max {
        return Err(SamplerError::PromptTooLong { len: prompt.len(), max });
    }
    let mut out = Vec::new();
    if cfg.max_new_tokens == 0 {
        return Ok(out);
    }
    let mut session = model.session();
    let mut logits = session.feed(prompt)?;
    loop {
        let next = draw(&filter_logits(&logits, cfg), rng) as TokenId;
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() == cfg.max_new_tokens || prompt.len() + out.len() == max {
            break;
        }
        logits = session.feed(&[next])?;
    }
    Ok(out)
}

pub fn generate(model: &InferenceModel, prompt: &[TokenId], cfg: &SamplerConfig) -> Result<Vec<TokenId>, SamplerError> {
    generate_with_rng(model, prompt, cfg, &mut rng::stream(cfg.seed, Purpose::Sampling, 0, 0))
}

/// Decoded model output and its lenient parse.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub text: String,
    pub prescription: Option<Prescription>,
    pub warnings: Vec<String>,
}

/// Renders the prompt, generates with the stream for `index`, decodes and
/// parses leniently.
pub fn predict_indexed(
    model: &InferenceModel,
    vocab: &Vocabulary,
    record: &ClinicalRecord,
    cfg: &SamplerConfig,
    index: u64,
) -> Result<Prediction, SamplerError> {
    let mut prompt = vec![BOS];
    prompt.extend(vocab.encode(&record.render_prompt()));
    let mut rng = rng::stream(cfg.seed, Purpose::Sampling, index, 0);
    let ids = generate_with_rng(model, &prompt, cfg, &mut rng)?;
    let text = vocab.decode(&ids)?;
    let (prescription, warnings) = Prescription::parse_lenient(&text);
    Ok(Prediction {
        text,
        prescription,
        warnings: warnings.iter().map(ParseWarning::to_string).collect(),
    })
}

pub fn predict_prescription(
    model: &InferenceModel,
    vocab: &Vocabulary,
    record: &ClinicalRecord,
    cfg: &SamplerConfig,
) -> Result<Prediction, SamplerError> {
    predict_indexed(model, vocab, record, cfg, 0)
}

/// One prediction per record; record `i` samples from stream `i`, so the
/// result does not depend on thread count.
pub fn predict_all(
    model: &InferenceModel,
    vocab: &Vocabulary,
    records: &[ClinicalRecord],
    cfg: &SamplerConfig,
) -> Result<Vec<Prediction>, SamplerError> {
    use rayon::prelude::*;
    records
        .par_iter()
        .enumerate()
        .map(|(i, r)| predict_indexed(model, vocab, r, cfg, i as u64))
        .collect()
}
