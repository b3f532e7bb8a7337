use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rxlora_autodiff::Tensor;
use rxlora_core::lm::{forward_packed, load_checkpoint, save_adapters, save_base, AdapterMode, Bound, InferenceModel, LmError, ModelConfig, ModelParams};
use rxlora_autodiff::Tape;

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_seq_len: 48,
        lora_rank: 4,
        lora_alpha: 8.0,
    }
}

fn random_tensor(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Arc<Tensor> {
    let n = shape.iter().product();
    Arc::new(Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-std..std)).collect()).unwrap())
}

/// Adapters with non-zero `up` so they actually change the model.
fn trained_like(cfg: ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    p.adapters = p.adapters.map(|t| random_tensor(t.shape(), 0.1, &mut rng));
    p
}

fn random_tokens(len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

#[test]
fn logits_shape() {
    let p = ModelParams::init(small_config(64), 1).unwrap();
    let out = p.forward(&[4, 5, 6, 7, 8, 9, 10]).unwrap();
    assert_eq!(out.shape(), &[7, 64]);
    let desk = ModelParams::init(ModelConfig::desk_scale(64), 1).unwrap();
    assert_eq!(desk.forward(&[1, 2, 3, 4, 5, 6, 7]).unwrap().shape(), &[7, 64]);
}

#[test]
fn errors() {
    let p = ModelParams::init(small_config(16), 1).unwrap();
    assert!(matches!(p.forward(&vec![1; 49]), Err(LmError::SequenceTooLong { len: 49, max: 48 })));
    assert!(matches!(p.forward(&[16]), Err(LmError::TokenOutOfRange { id: 16, .. })));
    assert!(matches!(p.forward(&[]), Err(LmError::EmptySequence)));
    let bad = ModelConfig {
        n_heads: 3,
        ..small_config(16)
    };
    assert!(matches!(ModelParams::init(bad, 1), Err(LmError::InvalidConfig(_))));
}

#[test]
fn causality() {
    let cfg = small_config(40);
    let p = trained_like(cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let len = rng.random_range(2..20);
        let a = random_tokens(len, 40, &mut rng);
        let t = rng.random_range(0..len);
        let mut b = a.clone();
        b[t] = (b[t] + 1 + rng.random_range(0..38)) % 40;
        let (la, lb) = (p.forward(&a).unwrap(), p.forward(&b).unwrap());
        for row in 0..t {
            assert_eq!(la.row(row), lb.row(row), "row {row} changed after editing token {t}");
        }
    }
}

#[test]
fn zero_init_adapters_are_transparent() {
    let p = ModelParams::init(ModelConfig::desk_scale(90), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let toks = random_tokens(30, 90, &mut rng);
    let diff = p.forward(&toks).unwrap().max_abs_diff(&p.forward_base(&toks).unwrap());
    assert!(diff <= 1e-6, "{diff}");
}

#[test]
fn merge_matches_adapted_forward() {
    let cfg = small_config(50);
    let p = trained_like(cfg.clone(), 7);
    let merged = ModelParams {
        base: p.merge_adapters(),
        ..ModelParams::init(cfg, 99).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let toks = random_tokens(rng.random_range(1..40), 50, &mut rng);
        worst = worst.max(p.forward(&toks).unwrap().max_abs_diff(&merged.forward_base(&toks).unwrap()));
    }
    assert!(worst <= 1e-4, "{worst}");
    assert!(p.forward(&[1, 2, 3]).unwrap().max_abs_diff(&p.forward_base(&[1, 2, 3]).unwrap()) > 1e-3);
}

#[test]
fn merging_zero_adapters_is_identity() {
    let p = ModelParams::init(small_config(20), 4).unwrap();
    assert_eq!(p.merge_adapters(), p.base);
    let trained = trained_like(small_config(20), 4);
    let once = ModelParams {
        base: trained.merge_adapters(),
        ..p.clone()
    };
    assert_eq!(once.merge_adapters(), once.base);
}

#[test]
fn init_is_deterministic() {
    let cfg = small_config(30);
    assert_eq!(ModelParams::init(cfg.clone(), 1).unwrap(), ModelParams::init(cfg.clone(), 1).unwrap());
    assert_ne!(ModelParams::init(cfg.clone(), 1).unwrap(), ModelParams::init(cfg, 2).unwrap());
}

#[test]
fn adapter_sizes() {
    let cfg = ModelConfig::desk_scale(100);
    let p = ModelParams::init(cfg, 1).unwrap();
    let wq = &p.adapters.blocks[0].wq;
    assert_eq!(wq.down.numel() + wq.up.numel(), 16 * (128 + 128));
    let ff = &p.adapters.blocks[0].ff_in;
    assert_eq!(ff.down.numel() + ff.up.numel(), 16 * (128 + 512));
    assert!(ff.up.data().iter().all(|&v| v == 0.0));
    // 4 blocks of 6 linears, plus embedding and unembedding.
    assert_eq!(p.adapters.named().len(), 2 * (4 * 6 + 2));
}

#[test]
fn packed_forward_matches_separate_forwards() {
    let p = trained_like(small_config(30), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seqs: Vec<Vec<u32>> = (0..4).map(|i| random_tokens(5 + 3 * i, 30, &mut rng)).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &p, AdapterMode::Frozen);
    let out = forward_packed(&mut tape, &p.config, &bound, &refs).unwrap();
    let packed = tape.value(out);
    let mut row = 0;
    for s in &seqs {
        let single = p.forward(s).unwrap();
        for r in 0..s.len() {
            let d = packed.row(row).iter().zip(single.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(d <= 1e-5, "{d}");
            row += 1;
        }
    }
}

#[test]
fn kv_cache_matches_full_forward() {
    let p = trained_like(small_config(40), 9);
    let model = InferenceModel::new(&p);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let toks = random_tokens(30, 40, &mut rng);
    let full = p.forward(&toks).unwrap();
    let mut session = model.session();
    let first = session.feed(&toks[..10]).unwrap();
    let mut worst = full.row(9).iter().zip(&first).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    for (i, &t) in toks.iter().enumerate().skip(10) {
        let logits = session.feed(&[t]).unwrap();
        worst = worst.max(full.row(i).iter().zip(&logits).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max));
    }
    assert!(worst <= 1e-4, "{worst}");
    assert_eq!(session.len(), 30);
    assert!(matches!(session.feed(&vec![1; 19]), Err(LmError::SequenceTooLong { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = trained_like(small_config(25), 12);
    save_base(&p, dir.path().join("base.bin")).unwrap();
    save_adapters(&p, dir.path().join("adapters.bin")).unwrap();
    let back = load_checkpoint(dir.path().join("base.bin"), dir.path().join("adapters.bin")).unwrap();
    assert_eq!(back, p);

    let other = ModelParams::init(small_config(26), 1).unwrap();
    save_adapters(&other, dir.path().join("other.bin")).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path().join("base.bin"), dir.path().join("other.bin")),
        Err(LmError::ConfigMismatch)
    ));
    assert!(load_checkpoint(dir.path().join("adapters.bin"), dir.path().join("adapters.bin")).is_err());
}

#[test]
fn desk_scale_trainable_share() {
    let p = ModelParams::init(ModelConfig::desk_scale(120), 1).unwrap();
    let r = p.trainable_ratio();
    assert!(r > 0.0 && r < 1.0);
    assert_eq!(p.adapter_param_count(), 4 * 16 * (6 * 128 + 2 * 128 + 2 * 512 + 2 * 128) + 2 * 16 * (120 + 128));
}
