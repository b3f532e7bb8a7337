use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rxlora_core::corpus::Corpus;
use rxlora_core::metrics::{build_baseline, corpus_eval, herb_set_metrics, nmse_pair, DosageBaseline, MetricsError};
use rxlora_core::prescription::{ClinicalRecord, Dosage, HerbName, Item, Prescription};

fn rx(s: &str) -> Prescription {
    Prescription::parse_strict(s).unwrap()
}

fn herb(s: &str) -> HerbName {
    HerbName::new(s).unwrap()
}

fn flat_baseline(g: f64) -> DosageBaseline {
    DosageBaseline {
        mean_grams: BTreeMap::new(),
        global_mean: g,
    }
}

#[test]
fn worked_example() {
    let (p, r, f1) = herb_set_metrics(&rx("a 10g, b 5g, c 3g, d 2g"), Some(&rx("a 10g, b 5g, e 1g")));
    assert_eq!(p, 2.0 / 3.0);
    assert_eq!(r, 0.5);
    assert_eq!(f1, 4.0 / 7.0);
}

#[test]
fn identity_and_empty_prediction() {
    let t = rx("a 10g, b 5g");
    assert_eq!(herb_set_metrics(&t, Some(&t)), (1.0, 1.0, 1.0));
    assert_eq!(nmse_pair(&t, Some(&t)), (0.0, 2));
    assert_eq!(herb_set_metrics(&t, None), (0.0, 0.0, 0.0));
    assert_eq!(nmse_pair(&t, None), (0.0, 0));
}

#[test]
fn dosage_error_examples() {
    assert_eq!(nmse_pair(&rx("a 10g"), Some(&rx("a 20g"))), (1.0, 1));
    assert_eq!(nmse_pair(&rx("a 10g"), Some(&rx("b 10g"))), (0.0, 0));
    assert_eq!(herb_set_metrics(&rx("a 10g"), Some(&rx("b 10g"))), (0.0, 0.0, 0.0));
}

#[test]
fn corpus_without_matches_has_no_nmse() {
    let pairs = vec![(rx("a 10g"), None), (rx("b 10g"), Some(rx("c 4g")))];
    let report = corpus_eval(&pairs, &flat_baseline(5.0)).unwrap();
    assert_eq!(report.nmse, None);
    assert_eq!(report.nmse_base, None);
    assert_eq!(report.f1, 0.0);
    assert_eq!(report.n_empty_predictions, 1);
    assert_eq!(report.n_zero_match_samples, 2);
    assert!(report.table_row().ends_with("n/a\tn/a"));
    assert!(matches!(corpus_eval(&[], &flat_baseline(1.0)), Err(MetricsError::EmptyInput)));
}

#[test]
fn baseline_uses_training_means() {
    let train: Corpus = [rx("a 10g, b 2g"), rx("a 20g")]
        .into_iter()
        .map(|p| ClinicalRecord::new("x", "", "", p).unwrap())
        .collect();
    let b = build_baseline(&train).unwrap();
    assert_eq!(b.predict(&herb("a")), 15.0);
    assert_eq!(b.predict(&herb("b")), 2.0);
    assert!((b.predict(&herb("zzz")) - 32.0 / 3.0).abs() < 1e-12);
    assert!(matches!(build_baseline(&Corpus::default()), Err(MetricsError::EmptyCorpus)));

    let report = corpus_eval(&[(rx("a 10g"), Some(rx("a 10g")))], &b).unwrap();
    assert_eq!(report.nmse, Some(0.0));
    assert_eq!(report.nmse_base, Some(0.25));
}

fn random_rx(rng: &mut ChaCha8Rng, pool: usize) -> Prescription {
    let n = rng.random_range(1..=6);
    let mut ids: Vec<usize> = (0..pool).collect();
    ids.shuffle(rng);
    let items = ids[..n]
        .iter()
        .map(|i| Item::new(herb(&format!("h{i}")), Dosage::from_tenths(rng.random_range(1..=300)).unwrap()))
        .collect();
    Prescription::new(items).unwrap()
}

fn random_pairs(seed: u64, n: usize) -> Vec<(Prescription, Option<Prescription>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let t = random_rx(&mut rng, 10);
            let p = rng.random_bool(0.9).then(|| random_rx(&mut rng, 10));
            (t, p)
        })
        .collect()
}

/// Straightforward re-derivation of the corpus metrics with hash maps.
fn reference(pairs: &[(Prescription, Option<Prescription>)], base: &DosageBaseline) -> (f64, f64, f64, Option<f64>, Option<f64>) {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    let (mut errs, mut base_errs) = (Vec::new(), Vec::new());
    for (t, p) in pairs {
        let truth: HashMap<&str, f64> = t.items().iter().map(|i| (i.herb.as_str(), i.grams.grams())).collect();
        let pred: HashMap<&str, f64> = p
            .iter()
            .flat_map(|p| p.items())
            .map(|i| (i.herb.as_str(), i.grams.grams()))
            .collect();
        for (h, w_pred) in &pred {
            match truth.get(h) {
                Some(w) => {
                    tp += 1.0;
                    errs.push(((w_pred - w) / w).powi(2));
                    base_errs.push(((base.predict(&herb(h)) - w) / w).powi(2));
                }
                None => fp += 1.0,
            }
        }
        fn_ += truth.keys().filter(|h| !pred.contains_key(*h)).count() as f64;
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1, mean(&errs), mean(&base_errs))
}

#[test]
fn matches_reference_on_random_pairs() {
    let pairs = random_pairs(17, 1000);
    let mut base = flat_baseline(7.0);
    base.mean_grams.insert(herb("h3"), 12.5);
    let report = corpus_eval(&pairs, &base).unwrap();
    let (p, r, f1, nmse, nmse_base) = reference(&pairs, &base);
    assert!((report.precision - p).abs() < 1e-9);
    assert!((report.recall - r).abs() < 1e-9);
    assert!((report.f1 - f1).abs() < 1e-9);
    assert!((report.nmse.unwrap() - nmse.unwrap()).abs() < 1e-9);
    assert!((report.nmse_base.unwrap() - nmse_base.unwrap()).abs() < 1e-9);
}

proptest! {
    #[test]
    fn pair_metrics_are_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, p) = (random_rx(&mut rng, 8), random_rx(&mut rng, 8));
        let (pr, re, f1) = herb_set_metrics(&t, Some(&p));
        for v in [pr, re, f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(f1 <= pr.max(re) + 1e-15);
        let (_, z) = nmse_pair(&t, Some(&p));
        prop_assert_eq!(f1 == 0.0, z == 0);
    }

    #[test]
    fn corpus_metrics_ignore_pair_and_item_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = random_pairs(seed, 40);
        let base = flat_baseline(9.0);
        let a = corpus_eval(&pairs, &base).unwrap();
        let mut shuffled: Vec<_> = pairs
            .iter()
            .map(|(t, p)| {
                let mut order: Vec<usize> = (0..t.len()).collect();
                order.shuffle(&mut rng);
                (t.permuted(&order), p.clone())
            })
            .collect();
        shuffled.shuffle(&mut rng);
        let b = corpus_eval(&shuffled, &base).unwrap();
        prop_assert_eq!(a.tp, b.tp);
        prop_assert_eq!(a.f1, b.f1);
        prop_assert_eq!(a.matched, b.matched);
        let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(1.0),
            (None, None) => true,
            _ => false,
        };
        prop_assert!(close(a.nmse, b.nmse));
        prop_assert!(close(a.nmse_base, b.nmse_base));
    }

    #[test]
    fn nmse_is_scale_free(seed in any::<u64>(), scale in 2u32..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, p) = (random_rx(&mut rng, 6), random_rx(&mut rng, 6));
        let scaled = |rx: &Prescription| {
            let items = rx
                .items()
                .iter()
                .map(|i| Item::new(i.herb.clone(), Dosage::from_tenths(i.grams.tenths() * scale).unwrap()))
                .collect();
            Prescription::new(items).unwrap()
        };
        let (a, za) = nmse_pair(&t, Some(&p));
        let (b, zb) = nmse_pair(&scaled(&t), Some(&scaled(&p)));
        prop_assert_eq!(za, zb);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }
}
