use std::collections::BTreeMap;
use std::io::Cursor;

use proptest::prelude::*;
use rxlora_core::corpus::{generate_synthetic, generate_synthetic_with_map, Corpus, CorpusError, SyntheticSpec};
use rxlora_core::prescription::{ClinicalRecord, Dosage, HerbName, Item, Prescription};

fn record(cc: &str, items: &[(&str, u32)]) -> ClinicalRecord {
    let items = items
        .iter()
        .map(|(h, t)| Item::new(HerbName::new(*h).unwrap(), Dosage::from_tenths(*t).unwrap()))
        .collect();
    ClinicalRecord::new(cc, "", "", Prescription::new(items).unwrap()).unwrap()
}

fn sized_corpus(counts: &[usize]) -> Corpus {
    counts
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let names: Vec<String> = (0..k).map(|j| format!("herb{j}")).collect();
            let items: Vec<(&str, u32)> = names.iter().map(|n| (n.as_str(), 10 * (i as u32 + 1))).collect();
            record("ache", &items)
        })
        .collect()
}

const THREE_LINES: &str = r#"{"chief_complaint":"bloating","history":"","tongue":"pale","prescription":[{"herb":"ginger","grams":10}]}
{"chief_complaint":"nausea","history":"2 yr reflux","tongue":"red","prescription":[{"herb":"ginger","grams":6},{"herb":"licorice","grams":4.5}]}

{"chief_complaint":"belching","history":"","tongue":"","prescription":[{"herb":"bai zhu","grams":9}]}
"#;

#[test]
fn load_three_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    std::fs::write(&path, THREE_LINES).unwrap();
    let c = Corpus::load_jsonl(&path).unwrap();
    assert_eq!(c.len(), 3);
    let herbs: Vec<&str> = c.herb_vocabulary().iter().map(HerbName::as_str).collect();
    assert_eq!(herbs, ["bai zhu", "ginger", "licorice"]);

    let out = dir.path().join("out.jsonl");
    c.write_jsonl(&out).unwrap();
    assert_eq!(Corpus::load_jsonl(&out).unwrap(), c);
}

#[test]
fn zero_dosage_is_an_invariant_violation() {
    let text = "{\"chief_complaint\":\"a\",\"history\":\"\",\"tongue\":\"\",\"prescription\":[{\"herb\":\"x\",\"grams\":1}]}\n\
                {\"chief_complaint\":\"b\",\"history\":\"\",\"tongue\":\"\",\"prescription\":[{\"herb\":\"x\",\"grams\":0}]}\n";
    match Corpus::read_jsonl(Cursor::new(text)) {
        Err(CorpusError::InvariantViolation { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn schema_errors_carry_line_numbers() {
    let text = "{\"chief_complaint\":\"a\",\"prescription\":[]}\n";
    assert!(matches!(Corpus::read_jsonl(Cursor::new(text)), Err(CorpusError::Schema { line: 1, .. })));
}

#[test]
fn empty_file_is_an_empty_corpus() {
    let c = Corpus::read_jsonl(Cursor::new("")).unwrap();
    assert!(c.is_empty());
    assert!(matches!(c.stats(), Err(CorpusError::EmptyCorpus)));
    assert!(matches!(c.split(0.1, 1), Err(CorpusError::EmptyCorpus)));
}

#[test]
fn split_sizes_and_determinism() {
    let c = sized_corpus(&[3; 100]);
    let (train, test) = c.split(0.1, 7).unwrap();
    assert_eq!((train.len(), test.len()), (90, 10));
    let (train2, test2) = c.split(0.1, 7).unwrap();
    assert_eq!(train, train2);
    assert_eq!(test, test2);
    assert!(c.split(0.0, 7).is_err());
    assert!(c.split(1.0, 7).is_err());
}

#[test]
fn split_at_paper_scale_proportions() {
    let c = sized_corpus(&vec![1; 18_953]);
    let (train, test) = c.split(0.1, 3).unwrap();
    assert_eq!(train.len() + test.len(), 18_953);
    assert_eq!(test.len(), 1_895);
}

#[test]
fn stats_of_known_counts() {
    let s = sized_corpus(&[2, 4, 6]).stats().unwrap();
    assert_eq!(s.size, 3);
    assert_eq!(s.category, 6);
    assert_eq!(s.median, 4.0);
    assert_eq!(s.mean, 4.0);
    assert!((s.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((s.std - 1.633).abs() < 1e-3);

    let s = sized_corpus(&[5]).stats().unwrap();
    assert_eq!((s.median, s.mean, s.std), (5.0, 5.0, 0.0));
}

#[test]
fn synthetic_is_deterministic() {
    let spec = SyntheticSpec::default();
    assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    let other = SyntheticSpec { rng_seed: 2, ..spec };
    assert_ne!(generate_synthetic(&other).unwrap(), generate_synthetic(&SyntheticSpec::default()).unwrap());
}

#[test]
fn synthetic_counts_match_request() {
    for std in [0.0, 1.0, 2.0] {
        let spec = SyntheticSpec {
            herbs_per_rx_std: std,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.len(), 2000);
        assert!(c.records().iter().all(|r| (1..=50).contains(&r.prescription.len())));
        let s = c.stats().unwrap();
        assert!((s.mean - 6.0).abs() <= 1.0, "mean {} for std {std}", s.mean);
    }
}

#[test]
fn synthetic_herbs_come_from_symptoms_or_padding() {
    let spec = SyntheticSpec::default();
    let syn = generate_synthetic_with_map(&spec).unwrap();
    let map: BTreeMap<&str, &Vec<Item>> = syn.symptom_map.iter().map(|e| (e.symptom.as_str(), &e.herbs)).collect();
    let base: BTreeMap<&HerbName, Dosage> = syn.base_dosage.iter().map(|i| (&i.herb, i.grams)).collect();
    let mut padded = 0;
    for r in syn.corpus.records() {
        let owned: Vec<&Item> = r.chief_complaint.split(' ').flat_map(|s| map[s].iter()).collect();
        for item in r.prescription.items() {
            let from_symptom = owned.iter().any(|o| o.herb == item.herb && o.grams == item.grams);
            if !from_symptom {
                assert_eq!(base[&item.herb], item.grams);
                padded += 1;
            }
        }
    }
    assert!(padded > 0);
}

#[test]
fn infeasible_specs_name_the_constraint() {
    let spec = SyntheticSpec {
        herbs_per_rx_mean: 80.0,
        ..SyntheticSpec::default()
    };
    let err = generate_synthetic(&spec).unwrap_err().to_string();
    assert!(err.contains("n_herbs"), "{err}");
    let spec = SyntheticSpec {
        symptoms_per_record: 41,
        ..SyntheticSpec::default()
    };
    let err = generate_synthetic(&spec).unwrap_err().to_string();
    assert!(err.contains("symptoms_per_record"), "{err}");
}

#[test]
fn augmentation_sizes() {
    let c = sized_corpus(&[1, 3, 5, 2]);
    assert_eq!(c.augment_permute(1, 0).len(), 4);
    assert_eq!(c.augment_permute(20, 0).len(), 80);
    let single = sized_corpus(&[1]).augment_permute(7, 3);
    assert!(single.records().iter().all(|r| r == &sized_corpus(&[1]).records()[0]));
    assert_eq!(c.augment_permute(5, 9), c.augment_permute(5, 9));
}

fn sorted_items(rx: &Prescription) -> Vec<(String, u32)> {
    let mut v: Vec<_> = rx.items().iter().map(|i| (i.herb.as_str().to_string(), i.grams.tenths())).collect();
    v.sort();
    v
}

fn brute_stats(counts: &[usize]) -> (f64, f64, f64) {
    let n = counts.len() as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let var = counts.iter().map(|&c| (c as f64 - mean) * (c as f64 - mean)).sum::<f64>() / n;
    let mut sorted = counts.to_vec();
    sorted.sort();
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2] as f64
    } else {
        let m = sorted.len() / 2;
        0.5 * (sorted[m - 1] as f64 + sorted[m] as f64)
    };
    (median, mean, var.sqrt())
}

proptest! {
    #[test]
    fn augmentation_preserves_multisets(counts in prop::collection::vec(1usize..12, 1..20), k in 1usize..6, seed in any::<u64>()) {
        let c = sized_corpus(&counts);
        let aug = c.augment_permute(k, seed);
        prop_assert_eq!(aug.len(), c.len() * k);
        for (i, r) in c.records().iter().enumerate() {
            for copy in 0..k {
                let a = &aug.records()[i * k + copy];
                prop_assert_eq!(&a.chief_complaint, &r.chief_complaint);
                prop_assert_eq!(sorted_items(&a.prescription), sorted_items(&r.prescription));
            }
        }
        prop_assert_eq!(aug.herb_vocabulary(), c.herb_vocabulary());
    }

    #[test]
    fn split_is_a_partition(n in 2usize..200, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let c: Corpus = (0..n).map(|i| record(&format!("s{i}"), &[("x", 10)])).collect();
        let (train, test) = c.split(frac, seed).unwrap();
        prop_assert_eq!(test.len(), (n as f64 * frac).round() as usize);
        let mut all: Vec<&str> = train.records().iter().chain(test.records()).map(|r| r.chief_complaint.as_str()).collect();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn stats_match_brute_force(counts in prop::collection::vec(1usize..40, 1..60)) {
        let s = sized_corpus(&counts).stats().unwrap();
        let (median, mean, std) = brute_stats(&counts);
        prop_assert!((s.median - median).abs() < 1e-9);
        prop_assert!((s.mean - mean).abs() < 1e-9);
        prop_assert!((s.std - std).abs() < 1e-9);
    }
}
