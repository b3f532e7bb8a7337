//! Herb-set precision/recall/F1 and dosage NMSE against an average-dosage
//! baseline.
//!
//! Counts are micro-averaged over the corpus. NMSE pools the squared relative
//! dosage errors of all matched herbs and divides by the total match count.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::prescription::{HerbName, Prescription};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no (true, predicted) pairs to evaluate")]
    EmptyInput,
    #[error("baseline needs a non-empty training corpus")]
    EmptyCorpus,
}

/// `2·tp / (2·tp + fp + fn)`, which equals `2PR / (P + R)`; 0 when tp = 0.
fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// True dosages by herb, sorted by name so sums run in a canonical order.
fn dosage_map(rx: &Prescription) -> BTreeMap<&HerbName, f64> {
    rx.items().iter().map(|i| (&i.herb, i.grams.grams())).collect()
}

/// `(precision, recall, f1)` of one prediction; all zero for an empty one.
pub fn herb_set_metrics(true_rx: &Prescription, pred: Option<&Prescription>) -> (f64, f64, f64) {
    let e = PairEval::new(true_rx, pred, None);
    (ratio(e.tp, e.tp + e.fp), ratio(e.tp, e.tp + e.fn_), f1_from_counts(e.tp, e.fp, e.fn_))
}

/// `(Σ ((w' − w) / w)², Z)` over herbs present in both prescriptions.
pub fn nmse_pair(true_rx: &Prescription, pred: Option<&Prescription>) -> (f64, usize) {
    let e = PairEval::new(true_rx, pred, None);
    (e.sum_sq_norm_err, e.matched)
}

/// Per-herb mean training dosage, with the mean over all training items as
/// the fallback for herbs never seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DosageBaseline {
    pub mean_grams: BTreeMap<HerbName, f64>,
    pub global_mean: f64,
}

impl DosageBaseline {
    pub fn predict(&self, herb: &HerbName) -> f64 {
        self.mean_grams.get(herb).copied().unwrap_or(self.global_mean)
    }
}

pub fn build_baseline(train: &Corpus) -> Result<DosageBaseline, MetricsError> {
    if train.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut acc: BTreeMap<HerbName, (f64, usize)> = BTreeMap::new();
    let (mut total, mut count) = (0.0, 0usize);
    for r in train.records() {
        for item in r.prescription.items() {
            let e = acc.entry(item.herb.clone()).or_default();
            e.0 += item.grams.grams();
            e.1 += 1;
            total += item.grams.grams();
            count += 1;
        }
    }
    Ok(DosageBaseline {
        mean_grams: acc.into_iter().map(|(h, (s, n))| (h, s / n as f64)).collect(),
        global_mean: total / count as f64,
    })
}

/// Counts and dosage errors of one (true, predicted) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEval {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Z, the number of correctly predicted herbs.
    pub matched: usize,
    pub sum_sq_norm_err: f64,
    /// Same sum with every matched dosage replaced by the baseline mean.
    pub sum_sq_norm_err_base: f64,
}

impl PairEval {
    pub fn new(true_rx: &Prescription, pred: Option<&Prescription>, baseline: Option<&DosageBaseline>) -> Self {
        let truth = dosage_map(true_rx);
        let predicted = pred.map(dosage_map).unwrap_or_default();
        let (mut err, mut err_base, mut matched) = (0.0, 0.0, 0usize);
        for (herb, &w) in &truth {
            let Some(&w_pred) = predicted.get(herb) else { continue };
            matched += 1;
            err += ((w_pred - w) / w).powi(2);
            if let Some(b) = baseline {
                err_base += ((b.predict(herb) - w) / w).powi(2);
            }
        }
        Self {
            tp: matched,
            fp: predicted.len() - matched,
            fn_: truth.len() - matched,
            matched,
            sum_sq_norm_err: err,
            sum_sq_norm_err_base: err_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when no herb was matched anywhere in the corpus.
    pub nmse: Option<f64>,
    pub nmse_base: Option<f64>,
    pub n_samples: usize,
    pub n_empty_predictions: usize,
    pub n_zero_match_samples: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub matched: usize,
}

impl EvalReport {
    pub const HEADER: &'static str = "Precision\tRecall\tF1-score\tNMSE\tNMSE_base";

    pub fn table_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        format!(
            "{:.4}\t{:.4}\t{:.4}\t{}\t{}",
            self.precision,
            self.recall,
            self.f1,
            opt(self.nmse),
            opt(self.nmse_base)
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        write!(f, "{}", self.table_row())
    }
}

/// Micro-averaged P/R/F1 and pooled NMSE over all pairs, reduced in input
/// order.
pub fn corpus_eval(
    pairs: &[(Prescription, Option<Prescription>)],
    baseline: &DosageBaseline,
) -> Result<EvalReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (mut tp, mut fp, mut fn_, mut matched) = (0, 0, 0, 0);
    let (mut err, mut err_base) = (0.0, 0.0);
    let (mut empty, mut zero_match) = (0, 0);
    for (truth, pred) in pairs {
        let e = PairEval::new(truth, pred.as_ref(), Some(baseline));
        tp += e.tp;
        fp += e.fp;
        fn_ += e.fn_;
        matched += e.matched;
        err += e.sum_sq_norm_err;
        err_base += e.sum_sq_norm_err_base;
        empty += usize::from(pred.is_none());
        zero_match += usize::from(e.matched == 0);
    }
    let pooled = |sum: f64| (matched > 0).then(|| sum / matched as f64);
    Ok(EvalReport {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: f1_from_counts(tp, fp, fn_),
        nmse: pooled(err),
        nmse_base: pooled(err_base),
        n_samples: pairs.len(),
        n_empty_predictions: empty,
        n_zero_match_samples: zero_match,
        tp,
        fp,
        fn_,
        matched,
    })
}
