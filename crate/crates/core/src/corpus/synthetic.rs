//! Seeded synthetic corpus with a known symptom → herb mapping.
//!
//! Every symptom token owns a fixed set of herbs, each with a fixed dosage.
//! A record draws `symptoms_per_record` distinct symptoms and prescribes the
//! union of their herb sets; when a herb belongs to several drawn symptoms
//! the lowest-numbered symptom sets its dosage. The union is then cut down or
//! padded to a herb count drawn from `N(mean, std)` clamped to `[1, n_herbs]`.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError};
use crate::prescription::{ClinicalRecord, Dosage, HerbName, Item, Prescription};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_records: usize,
    pub n_herbs: usize,
    pub herbs_per_rx_mean: f64,
    pub herbs_per_rx_std: f64,
    pub n_symptom_tokens: usize,
    pub symptoms_per_record: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_records: 2000,
            n_herbs: 50,
            herbs_per_rx_mean: 6.0,
            herbs_per_rx_std: 0.0,
            n_symptom_tokens: 40,
            symptoms_per_record: 3,
            rng_seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |msg: String| Err(CorpusError::SpecInfeasible(msg));
        if self.n_records == 0 || self.n_herbs == 0 || self.n_symptom_tokens == 0 || self.symptoms_per_record == 0 {
            return fail("n_records, n_herbs, n_symptom_tokens and symptoms_per_record must all be >= 1".into());
        }
        if self.symptoms_per_record > self.n_symptom_tokens {
            return fail(format!(
                "symptoms_per_record ({}) exceeds n_symptom_tokens ({})",
                self.symptoms_per_record, self.n_symptom_tokens
            ));
        }
        if !self.herbs_per_rx_mean.is_finite() || self.herbs_per_rx_mean < 1.0 {
            return fail(format!("herbs_per_rx_mean must be >= 1, got {}", self.herbs_per_rx_mean));
        }
        if self.herbs_per_rx_mean > self.n_herbs as f64 {
            return fail(format!(
                "herbs_per_rx_mean ({}) exceeds n_herbs ({})",
                self.herbs_per_rx_mean, self.n_herbs
            ));
        }
        if !self.herbs_per_rx_std.is_finite() || self.herbs_per_rx_std < 0.0 {
            return fail(format!("herbs_per_rx_std must be finite and >= 0, got {}", self.herbs_per_rx_std));
        }
        if self.n_symptom_tokens > SYMPTOM_ONSETS.len() * SYMPTOM_CODAS.len() * SYMPTOM_CODAS.len() {
            return fail(format!("at most {} symptom tokens can be named", SYMPTOM_ONSETS.len() * SYMPTOM_CODAS.len() * SYMPTOM_CODAS.len()));
        }
        if self.n_herbs > HERB_SYLLABLES.len() * HERB_SYLLABLES.len() * HERB_SYLLABLES.len() {
            return fail("too many herbs to name".into());
        }
        Ok(())
    }

    /// Herbs owned by each symptom token.
    pub fn herbs_per_symptom(&self) -> usize {
        ((self.herbs_per_rx_mean / self.symptoms_per_record as f64).round() as usize).clamp(1, self.n_herbs)
    }
}

/// Ground-truth herb set (with dosages) of one symptom token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomEntry {
    pub symptom: String,
    pub herbs: Vec<Item>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub symptom_map: Vec<SymptomEntry>,
    /// Default dosage per herb, used for padding herbs.
    pub base_dosage: Vec<Item>,
}

const HERB_SYLLABLES: [&str; 24] = [
    "bai", "zhu", "gan", "cao", "huang", "qi", "dang", "shen", "fu", "ling", "chen", "pi", "ban", "xia", "mu",
    "xiang", "sha", "ren", "zhi", "shi", "hou", "po", "chai", "hu",
];
const SYMPTOM_ONSETS: [&str; 12] = ["ab", "bel", "cra", "dys", "epi", "fla", "gas", "hea", "inf", "lax", "nau", "sto"];
const SYMPTOM_CODAS: [&str; 10] = ["ra", "to", "ni", "sel", "mar", "den", "lio", "pu", "vex", "zor"];
const TONGUE_WORDS: [&str; 8] = [
    "pale", "red", "crimson", "purple", "white-coated", "yellow-coated", "greasy", "thin-coated",
];
/// Typical single-herb doses in grams.
const DOSE_PALETTE: [u32; 9] = [3, 5, 6, 9, 10, 12, 15, 20, 30];
/// Per-symptom dose multipliers, in tenths.
const DOSE_FACTORS: [u32; 3] = [5, 10, 15];

fn herb_names(n: usize, seed: u64) -> Vec<HerbName> {
    let s = HERB_SYLLABLES.len();
    let mut combos: Vec<String> = Vec::with_capacity(s * s);
    for a in HERB_SYLLABLES {
        for b in HERB_SYLLABLES {
            if a != b {
                combos.push(format!("{a}{b}"));
            }
        }
    }
    let mut rng = rng::stream(seed, Purpose::SymptomMap, 0, 1);
    combos.shuffle(&mut rng);
    if n > combos.len() {
        let mut extra: Vec<String> = Vec::new();
        for a in HERB_SYLLABLES {
            for b in HERB_SYLLABLES {
                for c in HERB_SYLLABLES {
                    extra.push(format!("{a}{b}{c}"));
                }
            }
        }
        extra.shuffle(&mut rng);
        combos.extend(extra);
    }
    let mut seen = std::collections::HashSet::new();
    combos
        .into_iter()
        .filter(|c| seen.insert(c.clone()))
        .take(n)
        .map(|c| HerbName::new(c).expect("generated names are valid"))
        .collect()
}

fn symptom_words(n: usize, seed: u64) -> Vec<String> {
    let mut words = Vec::with_capacity(SYMPTOM_ONSETS.len() * SYMPTOM_CODAS.len() * SYMPTOM_CODAS.len());
    for o in SYMPTOM_ONSETS {
        for c in SYMPTOM_CODAS {
            words.push(format!("{o}{c}"));
        }
    }
    let mut rng = rng::stream(seed, Purpose::SymptomMap, 0, 2);
    words.shuffle(&mut rng);
    if n > words.len() {
        let mut extra = Vec::new();
        for o in SYMPTOM_ONSETS {
            for c1 in SYMPTOM_CODAS {
                for c2 in SYMPTOM_CODAS {
                    extra.push(format!("{o}{c1}{c2}"));
                }
            }
        }
        extra.shuffle(&mut rng);
        words.extend(extra);
    }
    words.truncate(n);
    words
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus, CorpusError> {
    generate_synthetic_with_map(spec).map(|s| s.corpus)
}

pub fn generate_synthetic_with_map(spec: &SyntheticSpec) -> Result<SyntheticCorpus, CorpusError> {
    spec.validate()?;
    let seed = spec.rng_seed;
    let herbs = herb_names(spec.n_herbs, seed);
    let symptoms = symptom_words(spec.n_symptom_tokens, seed);

    let mut map_rng = rng::stream(seed, Purpose::SymptomMap, 0, 0);
    let base_tenths: Vec<u32> = (0..spec.n_herbs)
        .map(|_| DOSE_PALETTE[map_rng.random_range(0..DOSE_PALETTE.len())] * 10)
        .collect();
    let per_symptom = spec.herbs_per_symptom();
    // (herb index, dosage in tenths) per symptom, in herb-index order.
    let owned: Vec<Vec<(usize, u32)>> = (0..spec.n_symptom_tokens)
        .map(|_| {
            let mut picks = index::sample(&mut map_rng, spec.n_herbs, per_symptom).into_vec();
            picks.sort_unstable();
            picks
                .into_iter()
                .map(|h| {
                    let factor = DOSE_FACTORS[map_rng.random_range(0..DOSE_FACTORS.len())];
                    (h, (base_tenths[h] * factor / 10).max(1))
                })
                .collect()
        })
        .collect();

    let count_dist = Normal::new(spec.herbs_per_rx_mean, spec.herbs_per_rx_std)
        .map_err(|e| CorpusError::SpecInfeasible(e.to_string()))?;

    let item = |h: usize, tenths: u32| Item::new(herbs[h].clone(), Dosage::from_tenths(tenths).expect("positive dose"));

    let mut records = Vec::with_capacity(spec.n_records);
    for r in 0..spec.n_records {
        let mut rng = rng::stream(seed, Purpose::Record, r as u64, 0);
        let drawn = index::sample(&mut rng, spec.n_symptom_tokens, spec.symptoms_per_record).into_vec();
        let chief_complaint = drawn.iter().map(|&s| symptoms[s].as_str()).collect::<Vec<_>>().join(" ");
        let tongue = TONGUE_WORDS[rng.random_range(0..TONGUE_WORDS.len())];
        let target = (count_dist.sample(&mut rng).round() as i64).clamp(1, spec.n_herbs as i64) as usize;

        let mut by_symptom = drawn.clone();
        by_symptom.sort_unstable();
        let mut chosen: Vec<(usize, u32)> = Vec::new();
        for s in by_symptom {
            for &(h, tenths) in &owned[s] {
                if !chosen.iter().any(|(c, _)| *c == h) {
                    chosen.push((h, tenths));
                }
            }
        }
        if chosen.len() > target {
            let mut keep = index::sample(&mut rng, chosen.len(), target).into_vec();
            keep.sort_unstable();
            chosen = keep.into_iter().map(|i| chosen[i]).collect();
        } else if chosen.len() < target {
            let pool: Vec<usize> = (0..spec.n_herbs).filter(|h| !chosen.iter().any(|(c, _)| c == h)).collect();
            let need = target - chosen.len();
            for i in index::sample(&mut rng, pool.len(), need) {
                chosen.push((pool[i], base_tenths[pool[i]]));
            }
        }
        chosen.shuffle(&mut rng);
        let rx = Prescription::new(chosen.into_iter().map(|(h, t)| item(h, t)).collect())
            .expect("distinct herbs by construction");
        records.push(ClinicalRecord::new(&chief_complaint, "", tongue, rx).expect("non-empty complaint"));
    }

    let symptom_map = symptoms
        .iter()
        .zip(&owned)
        .map(|(s, hs)| SymptomEntry {
            symptom: s.clone(),
            herbs: hs.iter().map(|&(h, t)| item(h, t)).collect(),
        })
        .collect();
    let base_dosage = (0..spec.n_herbs).map(|h| item(h, base_tenths[h])).collect();
    Ok(SyntheticCorpus {
        corpus: Corpus::new(records),
        symptom_map,
        base_dosage,
    })
}
