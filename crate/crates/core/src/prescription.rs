//! Prescriptions, clinical records and the target-string grammar.
//!
//! A prescription serializes as `"<herb> <grams>g"` items joined by `", "`,
//! e.g. `"ginger 10g, licorice 6g, rhubarb 4.5g"`. This string is the
//! language model's target sequence, and the same grammar is parsed back from
//! model output.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrescriptionError {
    #[error("invalid herb name {0:?}")]
    InvalidHerbName(String),
    #[error("invalid dosage {0}")]
    InvalidDosage(String),
    #[error("malformed item {0:?}")]
    MalformedItem(String),
    #[error("herb {0:?} appears more than once")]
    DuplicateHerb(String),
    #[error("prescription has no items")]
    EmptyPrescription,
    #[error("chief complaint is empty")]
    EmptyChiefComplaint,
}

/// Opaque herb identifier: non-empty, trimmed, free of `,` and newlines.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct HerbName(String);

impl HerbName {
    pub fn new(name: impl Into<String>) -> Result<Self, PrescriptionError> {
        let name = name.into();
        let valid = !name.is_empty()
            && name.trim() == name
            && !name.contains([',', '\n', '\r']);
        if valid {
            Ok(Self(name))
        } else {
            Err(PrescriptionError::InvalidHerbName(name))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for HerbName {
    type Error = PrescriptionError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<HerbName> for String {
    fn from(h: HerbName) -> String {
        h.0
    }
}

impl fmt::Display for HerbName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Positive dosage in grams with at most one fractional digit, stored
/// exactly as tenths of a gram.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Dosage {
    tenths: u32,
}

impl Dosage {
    pub fn from_tenths(tenths: u32) -> Result<Self, PrescriptionError> {
        if tenths == 0 {
            return Err(PrescriptionError::InvalidDosage("0".into()));
        }
        Ok(Self { tenths })
    }

    /// Accepts finite positive values that are whole tenths of a gram.
    pub fn from_grams(grams: f64) -> Result<Self, PrescriptionError> {
        let scaled = grams * 10.0;
        let rounded = scaled.round();
        if !grams.is_finite() || grams <= 0.0 || (scaled - rounded).abs() > 1e-6 || rounded > u32::MAX as f64 {
            return Err(PrescriptionError::InvalidDosage(grams.to_string()));
        }
        Self::from_tenths(rounded as u32)
    }

    pub fn tenths(self) -> u32 {
        self.tenths
    }

    pub fn grams(self) -> f64 {
        self.tenths as f64 / 10.0
    }

    /// Parses the numeric part of an item (`"10"`, `"4.5"`); no sign, no
    /// exponent, at most one fractional digit.
    pub fn parse(text: &str) -> Result<Self, PrescriptionError> {
        let bad = || PrescriptionError::InvalidDosage(text.to_string());
        let (whole, frac) = match text.split_once('.') {
            Some((w, f)) => (w, Some(f)),
            None => (text, None),
        };
        if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let whole: u32 = whole.parse().map_err(|_| bad())?;
        let frac = match frac {
            None => 0,
            Some(f) if f.len() == 1 && f.as_bytes()[0].is_ascii_digit() => (f.as_bytes()[0] - b'0') as u32,
            Some(_) => return Err(bad()),
        };
        let tenths = whole.checked_mul(10).and_then(|t| t.checked_add(frac)).ok_or_else(bad)?;
        Self::from_tenths(tenths).map_err(|_| bad())
    }
}

impl fmt::Display for Dosage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (whole, frac) = (self.tenths / 10, self.tenths % 10);
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            write!(f, "{whole}.{frac}")
        }
    }
}

impl Serialize for Dosage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.grams())
    }
}

impl<'de> Deserialize<'de> for Dosage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let grams = f64::deserialize(d)?;
        Dosage::from_grams(grams).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub herb: HerbName,
    pub grams: Dosage,
}

impl Item {
    pub fn new(herb: HerbName, grams: Dosage) -> Self {
        Self { herb, grams }
    }
}

/// Ordered, non-empty list of items with pairwise distinct herbs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Prescription {
    items: Vec<Item>,
}

impl Prescription {
    pub fn new(items: Vec<Item>) -> Result<Self, PrescriptionError> {
        if items.is_empty() {
            return Err(PrescriptionError::EmptyPrescription);
        }
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(&item.herb) {
                return Err(PrescriptionError::DuplicateHerb(item.herb.to_string()));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn herbs(&self) -> impl Iterator<Item = &HerbName> {
        self.items.iter().map(|i| &i.herb)
    }

    pub fn dosage_of(&self, herb: &HerbName) -> Option<Dosage> {
        self.items.iter().find(|i| &i.herb == herb).map(|i| i.grams)
    }

    /// Same items in a different order. `order` must be a permutation of
    /// `0..len`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        debug_assert_eq!(order.len(), self.items.len());
        Self {
            items: order.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }

    pub fn serialize(&self) -> String {
        self.to_string()
    }

    /// Exact inverse of [`Prescription::serialize`].
    pub fn parse_strict(s: &str) -> Result<Self, PrescriptionError> {
        if s.is_empty() {
            return Err(PrescriptionError::EmptyPrescription);
        }
        let items = s.split(", ").map(parse_item).collect::<Result<Vec<_>, _>>()?;
        Self::new(items)
    }

    /// Best-effort parse of model output. Malformed items are skipped and a
    /// repeated herb keeps its first occurrence; each event adds a warning.
    pub fn parse_lenient(s: &str) -> (Option<Self>, Vec<ParseWarning>) {
        let mut items: Vec<Item> = Vec::new();
        let mut warnings = Vec::new();
        for raw in s.split(',') {
            let text = raw.trim();
            if text.is_empty() {
                warnings.push(ParseWarning::EmptyItem);
                continue;
            }
            match parse_item(text) {
                Ok(item) => {
                    if items.iter().any(|i| i.herb == item.herb) {
                        warnings.push(ParseWarning::DuplicateHerb(item.herb.to_string()));
                    } else {
                        items.push(item);
                    }
                }
                Err(_) => warnings.push(ParseWarning::MalformedItem(text.to_string())),
            }
        }
        let rx = if items.is_empty() { None } else { Some(Self { items }) };
        (rx, warnings)
    }
}

impl fmt::Display for Prescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, item) in self.items.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{} {}g", item.herb, item.grams)?;
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for Prescription {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let items = Vec::<Item>::deserialize(d)?;
        Prescription::new(items).map_err(serde::de::Error::custom)
    }
}

fn parse_item(text: &str) -> Result<Item, PrescriptionError> {
    let malformed = || PrescriptionError::MalformedItem(text.to_string());
    let (herb, amount) = text.rsplit_once(' ').ok_or_else(malformed)?;
    let number = amount.strip_suffix('g').ok_or_else(malformed)?;
    let grams = Dosage::parse(number).map_err(|_| malformed())?;
    let herb = HerbName::new(herb).map_err(|_| malformed())?;
    Ok(Item::new(herb, grams))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum ParseWarning {
    EmptyItem,
    MalformedItem(String),
    DuplicateHerb(String),
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyItem => f.write_str("empty item"),
            Self::MalformedItem(s) => write!(f, "malformed item {s:?}"),
            Self::DuplicateHerb(h) => write!(f, "duplicate herb {h:?} dropped"),
        }
    }
}

/// Symptom description plus the prescription written for it.
///
/// Free-text fields are whitespace-normalized (runs collapsed to one space,
/// ends trimmed) so the rendered prompt has a single canonical spelling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord")]
pub struct ClinicalRecord {
    pub chief_complaint: String,
    pub history: String,
    pub tongue: String,
    pub prescription: Prescription,
}

#[derive(Deserialize)]
struct RawRecord {
    chief_complaint: String,
    #[serde(default)]
    history: String,
    #[serde(default)]
    tongue: String,
    prescription: Prescription,
}

impl TryFrom<RawRecord> for ClinicalRecord {
    type Error = PrescriptionError;
    fn try_from(r: RawRecord) -> Result<Self, Self::Error> {
        ClinicalRecord::new(&r.chief_complaint, &r.history, &r.tongue, r.prescription)
    }
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ClinicalRecord {
    pub fn new(
        chief_complaint: &str,
        history: &str,
        tongue: &str,
        prescription: Prescription,
    ) -> Result<Self, PrescriptionError> {
        let chief_complaint = normalize_whitespace(chief_complaint);
        if chief_complaint.is_empty() {
            return Err(PrescriptionError::EmptyChiefComplaint);
        }
        Ok(Self {
            chief_complaint,
            history: normalize_whitespace(history),
            tongue: normalize_whitespace(tongue),
            prescription,
        })
    }

    pub fn with_prescription(&self, prescription: Prescription) -> Self {
        Self {
            prescription,
            ..self.clone()
        }
    }

    pub fn render_prompt(&self) -> String {
        render_prompt(&self.chief_complaint, &self.history, &self.tongue)
    }
}

pub const PROMPT_MARKERS: [&str; 5] = ["Symptoms:", "History:", "Tongue:", "Prescription:", "|"];

/// `"Symptoms: <cc> | History: <history> | Tongue: <tongue>\nPrescription:"`
pub fn render_prompt(chief_complaint: &str, history: &str, tongue: &str) -> String {
    format!("Symptoms: {chief_complaint} | History: {history} | Tongue: {tongue}\nPrescription:")
}
