//! Decoder-only transformer whose base weights stay frozen while low-rank
//! adapters on every linear map and on the token embedding are trained.
//!
//! Weights are stored row-major with the input on the left, so a linear map
//! is `y = x · W` with `W: [in, out]`. Its adapter holds `down: [in, r]` and
//! `up: [r, out]` and adds `(alpha / r) · (x · down) · up`. For the token
//! embedding `down` is a `[vocab, r]` table looked up by token id. `up`
//! starts at zero, so a fresh adapter leaves the model unchanged.

mod checkpoint;
mod forward;
mod infer;

pub use checkpoint::{load_base, load_checkpoint, save_adapters, save_base, CHECKPOINT_VERSION};
pub use forward::{forward_packed, AdapterMode, Bound};
pub use infer::{InferenceModel, Session};

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use rxlora_autodiff::{ops, AutodiffError, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Purpose};
use crate::tokenizer::TokenId;

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds the context window of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: TokenId, vocab: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("adapter checkpoint config does not match the base checkpoint")]
    ConfigMismatch,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f32,
}

impl ModelConfig {
    /// d_model 128, 4 layers, 4 heads, d_ff 512, context 512, rank 16, alpha 32.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 512,
            lora_rank: 16,
            lora_alpha: 32.0,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let fail = |m: &str| Err(LmError::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return fail("vocab_size, d_model, n_layers and d_ff must be positive");
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail("d_model must be divisible by n_heads");
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1");
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2");
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return fail("lora_alpha must be positive");
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ff_in: T,
    pub ff_out: T,
}

impl<T> Block<T> {
    const NAMES: [&'static str; 10] = [
        "ln1.gain", "ln1.bias", "wq", "wk", "wv", "wo", "ln2.gain", "ln2.bias", "ff_in", "ff_out",
    ];

    fn refs(&self) -> [&T; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.ff_in,
            &self.ff_out,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.ff_in,
            &mut self.ff_out,
        ]
    }

    fn from_array([ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, ff_in, ff_out]: [T; 10]) -> Self {
        Self {
            ln1_gain,
            ln1_bias,
            wq,
            wk,
            wv,
            wo,
            ln2_gain,
            ln2_bias,
            ff_in,
            ff_out,
        }
    }
}

/// All frozen weights. Positional embeddings and layer norms have no adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Base<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<Block<T>>,
    pub ln_f_gain: T,
    pub ln_f_bias: T,
    pub unembed: T,
}

impl<T> Base<T> {
    /// Every tensor with its stable name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in Block::<T>::NAMES.iter().zip(b.refs()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f_bias));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.refs_mut());
        }
        out.extend([&mut self.ln_f_gain, &mut self.ln_f_bias, &mut self.unembed]);
        out
    }

    /// Applies `f` in [`Base::named`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Base<U> {
        let tok_emb = f(&self.tok_emb);
        let pos_emb = f(&self.pos_emb);
        let blocks = self.blocks.iter().map(|b| Block::from_array(b.refs().map(&mut f))).collect();
        Base {
            tok_emb,
            pos_emb,
            blocks,
            ln_f_gain: f(&self.ln_f_gain),
            ln_f_bias: f(&self.ln_f_bias),
            unembed: f(&self.unembed),
        }
    }
}

/// Low-rank pair attached to one base weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    /// `[in, r]`, or `[vocab, r]` for the embedding.
    pub down: T,
    /// `[r, out]`; zero at initialization.
    pub up: T,
}

impl<T> LoraAdapter<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LoraAdapter<U> {
        LoraAdapter {
            down: f(&self.down),
            up: f(&self.up),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters<T> {
    pub wq: LoraAdapter<T>,
    pub wk: LoraAdapter<T>,
    pub wv: LoraAdapter<T>,
    pub wo: LoraAdapter<T>,
    pub ff_in: LoraAdapter<T>,
    pub ff_out: LoraAdapter<T>,
}

impl<T> BlockAdapters<T> {
    const NAMES: [&'static str; 6] = ["wq", "wk", "wv", "wo", "ff_in", "ff_out"];

    fn refs(&self) -> [&LoraAdapter<T>; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.ff_in, &self.ff_out]
    }

    fn refs_mut(&mut self) -> [&mut LoraAdapter<T>; 6] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ff_in,
            &mut self.ff_out,
        ]
    }
}

/// One adapter per linear weight plus one for the token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters<T> {
    pub tok_emb: LoraAdapter<T>,
    pub blocks: Vec<BlockAdapters<T>>,
    pub unembed: LoraAdapter<T>,
}

impl<T> Adapters<T> {
    fn pairs(&self) -> Vec<(String, &LoraAdapter<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, a) in BlockAdapters::<T>::NAMES.iter().zip(b.refs()) {
                out.push((format!("blocks.{i}.{name}"), a));
            }
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Every tensor with its stable name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &T)> {
        self.pairs()
            .into_iter()
            .flat_map(|(n, a)| [(format!("{n}.down"), &a.down), (format!("{n}.up"), &a.up)])
            .collect()
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut adapters = vec![&mut self.tok_emb];
        for b in &mut self.blocks {
            adapters.extend(b.refs_mut());
        }
        adapters.push(&mut self.unembed);
        adapters.into_iter().flat_map(|a| [&mut a.down, &mut a.up]).collect()
    }

    /// Applies `f` in [`Adapters::named`] order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Adapters<U> {
        let tok_emb = self.tok_emb.map(&mut f);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockAdapters {
                wq: b.wq.map(&mut f),
                wk: b.wk.map(&mut f),
                wv: b.wv.map(&mut f),
                wo: b.wo.map(&mut f),
                ff_in: b.ff_in.map(&mut f),
                ff_out: b.ff_out.map(&mut f),
            })
            .collect();
        Adapters {
            tok_emb,
            blocks,
            unembed: self.unembed.map(&mut f),
        }
    }
}

#[derive(Debug, Clone)]
enum Init {
    Normal(Vec<usize>),
    Fill(Vec<usize>, f32),
}

impl Init {
    fn shape(&self) -> &[usize] {
        match self {
            Init::Normal(s) | Init::Fill(s, _) => s,
        }
    }

    fn materialize(&self, seed: u64, purpose: Purpose, index: u64) -> Tensor {
        let n: usize = self.shape().iter().product();
        let data = match self {
            Init::Fill(_, v) => vec![*v; n],
            Init::Normal(_) => {
                let dist = Normal::new(0.0f32, INIT_STD).expect("valid std");
                let mut rng = rng::stream(seed, purpose, index, 0);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
        };
        Tensor::new(self.shape().to_vec(), data).expect("shape matches data")
    }
}

fn base_layout(c: &ModelConfig) -> Base<Init> {
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    let block = || Block {
        ln1_gain: Init::Fill(vec![d], 1.0),
        ln1_bias: Init::Fill(vec![d], 0.0),
        wq: Init::Normal(vec![d, d]),
        wk: Init::Normal(vec![d, d]),
        wv: Init::Normal(vec![d, d]),
        wo: Init::Normal(vec![d, d]),
        ln2_gain: Init::Fill(vec![d], 1.0),
        ln2_bias: Init::Fill(vec![d], 0.0),
        ff_in: Init::Normal(vec![d, f]),
        ff_out: Init::Normal(vec![f, d]),
    };
    Base {
        tok_emb: Init::Normal(vec![v, d]),
        pos_emb: Init::Normal(vec![c.max_seq_len, d]),
        blocks: (0..c.n_layers).map(|_| block()).collect(),
        ln_f_gain: Init::Fill(vec![d], 1.0),
        ln_f_bias: Init::Fill(vec![d], 0.0),
        unembed: Init::Normal(vec![d, v]),
    }
}

fn adapter_layout(c: &ModelConfig) -> Adapters<Init> {
    let r = c.lora_rank;
    let pair = |rows: usize, cols: usize| LoraAdapter {
        down: Init::Normal(vec![rows, r]),
        up: Init::Fill(vec![r, cols], 0.0),
    };
    let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
    Adapters {
        tok_emb: pair(v, d),
        blocks: (0..c.n_layers)
            .map(|_| BlockAdapters {
                wq: pair(d, d),
                wk: pair(d, d),
                wv: pair(d, d),
                wo: pair(d, d),
                ff_in: pair(d, f),
                ff_out: pair(f, d),
            })
            .collect(),
        unembed: pair(d, v),
    }
}

pub type BaseWeights = Base<Arc<Tensor>>;
pub type AdapterWeights = Adapters<Arc<Tensor>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub base: BaseWeights,
    pub adapters: AdapterWeights,
}

impl ModelParams {
    /// Base weights ~ N(0, 0.02²) with unit layer-norm gains and zero biases;
    /// adapter `down` ~ N(0, 0.02²) and `up` = 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        let mut i = 0u64;
        let base = base_layout(&config).map(|init| {
            i += 1;
            Arc::new(init.materialize(seed, Purpose::ModelInit, i))
        });
        let mut j = 0u64;
        let adapters = adapter_layout(&config).map(|init| {
            j += 1;
            Arc::new(init.materialize(seed, Purpose::AdapterInit, j))
        });
        Ok(Self {
            config,
            base,
            adapters,
        })
    }

    /// Fresh adapters (`up` = 0) on top of the given base.
    pub fn with_fresh_adapters(config: ModelConfig, base: BaseWeights, seed: u64) -> Result<Self, LmError> {
        let mut params = Self::init(config, seed)?;
        params.base = base;
        Ok(params)
    }

    pub fn base_param_count(&self) -> usize {
        self.base.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn adapter_param_count(&self) -> usize {
        self.adapters.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// |Δθ| / |θ|.
    pub fn trainable_ratio(&self) -> f64 {
        self.adapter_param_count() as f64 / self.base_param_count() as f64
    }

    /// Folds every adapter into its base weight: `W' = W + (alpha / r) · down · up`.
    pub fn merge_adapters(&self) -> BaseWeights {
        let s = self.config.lora_scale();
        let fold = |w: &Arc<Tensor>, a: &LoraAdapter<Arc<Tensor>>| -> Arc<Tensor> {
            let delta = ops::matmul(&a.down, &a.up).expect("adapter shapes match");
            let mut merged = (**w).clone();
            for (m, d) in merged.data_mut().iter_mut().zip(delta.data()) {
                *m += s * d;
            }
            Arc::new(merged)
        };
        let a = &self.adapters;
        let mut base = self.base.clone();
        base.tok_emb = fold(&self.base.tok_emb, &a.tok_emb);
        base.unembed = fold(&self.base.unembed, &a.unembed);
        for (b, ad) in base.blocks.iter_mut().zip(&a.blocks) {
            b.wq = fold(&b.wq, &ad.wq);
            b.wk = fold(&b.wk, &ad.wk);
            b.wv = fold(&b.wv, &ad.wv);
            b.wo = fold(&b.wo, &ad.wo);
            b.ff_in = fold(&b.ff_in, &ad.ff_in);
            b.ff_out = fold(&b.ff_out, &ad.ff_out);
        }
        base
    }

    /// Logits `[len, vocab]` of the adapted model, without gradient tracking.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Tensor, LmError> {
        self.logits(tokens, AdapterMode::Frozen)
    }

    /// Logits of the base model alone.
    pub fn forward_base(&self, tokens: &[TokenId]) -> Result<Tensor, LmError> {
        self.logits(tokens, AdapterMode::Disabled)
    }

    fn logits(&self, tokens: &[TokenId], mode: AdapterMode) -> Result<Tensor, LmError> {
        let mut tape = rxlora_autodiff::Tape::new();
        let bound = Bound::new(&mut tape, self, mode);
        let out = forward_packed(&mut tape, &self.config, &bound, &[tokens])?;
        Ok(tape.value(out).clone())
    }
}
