//! Tape-free incremental decoding with a key/value cache over merged weights.

use rxlora_autodiff::ops::{self, gemm, Layout};
use rxlora_autodiff::Tensor;

use super::{BaseWeights, LmError, ModelConfig, ModelParams};
use crate::tokenizer::TokenId;

/// Adapters folded into the base weights, ready for generation.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    config: ModelConfig,
    weights: BaseWeights,
}

impl InferenceModel {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            config: params.config.clone(),
            weights: params.merge_adapters(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            model: self,
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }
}

/// Decoding state of one sequence.
pub struct Session<'m> {
    model: &'m InferenceModel,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

fn project(x: &[f32], rows: usize, w: &Tensor) -> Vec<f32> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; rows * n];
    gemm(rows, k, n, x, Layout::Normal, w.data(), Layout::Normal, &mut out, false);
    out
}

fn norm_rows(x: &[f32], width: usize, gain: &Tensor, bias: &Tensor) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        ops::layer_norm_row(src, gain.data(), bias.data(), dst);
    }
    out
}

impl Session<'_> {
    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens` and returns the next-token logits after the last one.
    pub fn feed(&mut self, tokens: &[TokenId]) -> Result<Vec<f32>, LmError> {
        let cfg = &self.model.config;
        let w = &self.model.weights;
        let n = tokens.len();
        if n == 0 {
            return Err(LmError::EmptySequence);
        }
        if self.len + n > cfg.max_seq_len {
            return Err(LmError::SequenceTooLong {
                len: self.len + n,
                max: cfg.max_seq_len,
            });
        }
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let p0 = self.len;

        let mut x = vec![0.0f32; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= cfg.vocab_size {
                return Err(LmError::TokenOutOfRange {
                    id: t,
                    vocab: cfg.vocab_size,
                });
            }
            let (e, p) = (w.tok_emb.row(t as usize), w.pos_emb.row(p0 + i));
            for (j, xv) in x[i * d..(i + 1) * d].iter_mut().enumerate() {
                *xv = e[j] + p[j];
            }
        }

        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let mut scores = vec![0.0f32; p0 + n];
        for (l, blk) in w.blocks.iter().enumerate() {
            let h = norm_rows(&x, d, &blk.ln1_gain, &blk.ln1_bias);
            let q = project(&h, n, &blk.wq);
            self.keys[l].extend(project(&h, n, &blk.wk));
            self.values[l].extend(project(&h, n, &blk.wv));
            let (kc, vc) = (&self.keys[l], &self.values[l]);

            let mut att = vec![0.0f32; n * d];
            for i in 0..n {
                let visible = p0 + i + 1;
                for head in 0..cfg.n_heads {
                    let off = head * dh;
                    let qi = &q[i * d + off..i * d + off + dh];
                    for (j, s) in scores[..visible].iter_mut().enumerate() {
                        let kj = &kc[j * d + off..j * d + off + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * inv_sqrt;
                    }
                    ops::softmax_in_place(&mut scores[..visible]);
                    let out = &mut att[i * d + off..i * d + off + dh];
                    for (j, &p) in scores[..visible].iter().enumerate() {
                        let vj = &vc[j * d + off..j * d + off + dh];
                        for (o, v) in out.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
            for (xv, o) in x.iter_mut().zip(project(&att, n, &blk.wo)) {
                *xv += o;
            }

            let h = norm_rows(&x, d, &blk.ln2_gain, &blk.ln2_bias);
            let mut f = project(&h, n, &blk.ff_in);
            for v in &mut f {
                *v = ops::gelu_scalar(*v);
            }
            for (xv, o) in x.iter_mut().zip(project(&f, n, &blk.ff_out)) {
                *xv += o;
            }
        }
        self.len += n;

        let last = norm_rows(&x[(n - 1) * d..], d, &w.ln_f_gain, &w.ln_f_bias);
        Ok(project(&last, 1, &w.unembed))
    }
}
