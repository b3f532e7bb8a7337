//! Corpus ingestion, splitting, statistics and permutation augmentation.

mod synthetic;

pub use synthetic::{generate_synthetic, generate_synthetic_with_map, SymptomEntry, SyntheticCorpus, SyntheticSpec};

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prescription::{ClinicalRecord, Dosage, HerbName, Item, Prescription};
use crate::rng::{self, Purpose};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: {reason}")]
    InvariantViolation { line: usize, reason: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("infeasible synthetic spec: {0}")]
    SpecInfeasible(String),
}

/// A list of records and the set of herbs they use.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    records: Vec<ClinicalRecord>,
    herb_vocabulary: BTreeSet<HerbName>,
}

#[derive(Deserialize)]
struct RawItem {
    herb: String,
    grams: f64,
}

#[derive(Deserialize)]
struct RawRecord {
    chief_complaint: String,
    history: String,
    tongue: String,
    prescription: Vec<RawItem>,
}

impl RawRecord {
    fn into_record(self) -> Result<ClinicalRecord, String> {
        let items = self
            .prescription
            .into_iter()
            .map(|i| {
                let herb = HerbName::new(i.herb).map_err(|e| e.to_string())?;
                let grams = Dosage::from_grams(i.grams).map_err(|e| format!("{herb}: {e}"))?;
                Ok(Item::new(herb, grams))
            })
            .collect::<Result<Vec<_>, String>>()?;
        let rx = Prescription::new(items).map_err(|e| e.to_string())?;
        ClinicalRecord::new(&self.chief_complaint, &self.history, &self.tongue, rx).map_err(|e| e.to_string())
    }
}

impl FromIterator<ClinicalRecord> for Corpus {
    fn from_iter<I: IntoIterator<Item = ClinicalRecord>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

impl Corpus {
    pub fn new(records: Vec<ClinicalRecord>) -> Self {
        let herb_vocabulary = records
            .iter()
            .flat_map(|r| r.prescription.herbs().cloned())
            .collect();
        Self {
            records,
            herb_vocabulary,
        }
    }

    pub fn records(&self) -> &[ClinicalRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ClinicalRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn herb_vocabulary(&self) -> &BTreeSet<HerbName> {
        &self.herb_vocabulary
    }

    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }

    /// One JSON object per line; blank lines are skipped. Line numbers in
    /// errors are 1-based.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Schema {
                line: idx + 1,
                message: e.to_string(),
            })?;
            let record = raw
                .into_record()
                .map_err(|reason| CorpusError::InvariantViolation { line: idx + 1, reason })?;
            records.push(record);
        }
        Ok(Self::new(records))
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<(), CorpusError> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Seeded random partition into `(train, test)`. The test part gets
    /// `round(len * test_fraction)` records; each part keeps corpus order.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(CorpusError::InvalidArgument(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        if self.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let n = self.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, Purpose::Split, 0, 0));
        let mut is_test = vec![false; n];
        for &i in &order[..n_test] {
            is_test[i] = true;
        }
        let (test, train): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .cloned()
            .zip(is_test)
            .partition(|(_, t)| *t);
        Ok((
            train.into_iter().map(|(r, _)| r).collect(),
            test.into_iter().map(|(r, _)| r).collect(),
        ))
    }

    pub fn stats(&self) -> Result<CorpusStats, CorpusError> {
        if self.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut counts: Vec<usize> = self.records.iter().map(|r| r.prescription.len()).collect();
        counts.sort_unstable();
        let n = counts.len();
        let median = if n % 2 == 1 {
            counts[n / 2] as f64
        } else {
            (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
        };
        let mean = counts.iter().sum::<usize>() as f64 / n as f64;
        let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(CorpusStats {
            size: n,
            category: self.herb_vocabulary.len(),
            median,
            mean,
            std: var.sqrt(),
        })
    }

    /// `k` independently shuffled copies of every record, laid out
    /// record-major (`i * k + copy`). Shuffles derive from
    /// `(seed, record index, copy index)`.
    pub fn augment_permute(&self, k: usize, seed: u64) -> Corpus {
        assert!(k >= 1, "augmentation factor must be at least 1");
        let mut out = Vec::with_capacity(self.len() * k);
        for (i, record) in self.records.iter().enumerate() {
            for copy in 0..k {
                let mut order: Vec<usize> = (0..record.prescription.len()).collect();
                order.shuffle(&mut rng::stream(seed, Purpose::Permute, i as u64, copy as u64));
                out.push(record.with_prescription(record.prescription.permuted(&order)));
            }
        }
        Corpus {
            records: out,
            herb_vocabulary: self.herb_vocabulary.clone(),
        }
    }
}

/// Herbs-per-prescription summary with the columns
/// `size | category | median | mean | std` (population std).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub size: usize,
    pub category: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

impl CorpusStats {
    pub const HEADER: &'static str = "dataset\tsize\tcategory\tmedian\tmean\tstd";

    pub fn table_row(&self, dataset: &str) -> String {
        format!(
            "{dataset}\t{}\t{}\t{}\t{:.2}\t{:.2}",
            self.size, self.category, self.median, self.mean, self.std
        )
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        write!(f, "{}", self.table_row("corpus"))
    }
}
