//! Recorded forward pass over one or more sequences packed row-wise.

use rxlora_autodiff::{Tape, Var};

use super::{Adapters, Base, LmError, LoraAdapter, ModelConfig, ModelParams};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    /// Base model only.
    Disabled,
    /// Adapters applied as constants.
    Frozen,
    /// Adapters recorded as trainable leaves.
    Trainable,
}

/// Model weights recorded on a tape. Base weights are always constants.
pub struct Bound {
    pub base: Base<Var>,
    pub adapters: Option<Adapters<Var>>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ModelParams, mode: AdapterMode) -> Self {
        let base = params.base.map(|t| tape.constant(t.clone()));
        let adapters = match mode {
            AdapterMode::Disabled => None,
            AdapterMode::Frozen => Some(params.adapters.map(|t| tape.constant(t.clone()))),
            AdapterMode::Trainable => Some(params.adapters.map(|t| tape.param(t.clone()))),
        };
        Self { base, adapters }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, adapter: Option<&LoraAdapter<Var>>, scale: f32) -> Result<Var, LmError> {
    let y = tape.matmul(x, w)?;
    let Some(a) = adapter else { return Ok(y) };
    let low = tape.matmul(x, a.down)?;
    let delta = tape.matmul(low, a.up)?;
    let delta = tape.scale(delta, scale)?;
    Ok(tape.add(y, delta)?)
}

/// Causal multi-head attention applied to each packed span separately.
fn attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    q: Var,
    k: Var,
    v: Var,
    spans: &[(usize, usize)],
) -> Result<Var, LmError> {
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f32).sqrt();
    let mut outputs = Vec::with_capacity(spans.len());
    for &(start, len) in spans {
        let (qs, ks, vs) = if spans.len() == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, start, len)?,
                tape.slice_rows(k, start, len)?,
                tape.slice_rows(v, start, len)?,
            )
        };
        // Head h owns rows h*dh..(h+1)*dh of the transposed projections.
        let qt = tape.transpose(qs)?;
        let kt = tape.transpose(ks)?;
        let vt = tape.transpose(vs)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_rows(qt, h * dh, dh)?;
            let qh = tape.transpose(qh)?;
            let kth = tape.slice_rows(kt, h * dh, dh)?;
            let vh = tape.slice_rows(vt, h * dh, dh)?;
            let vh = tape.transpose(vh)?;
            let scores = tape.matmul(qh, kth)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let scores = tape.causal_mask_fill(scores)?;
            let probs = tape.softmax(scores)?;
            let out = tape.matmul(probs, vh)?;
            heads.push(tape.transpose(out)?);
        }
        let merged = tape.concat_rows(&heads)?;
        outputs.push(tape.transpose(merged)?);
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        Ok(tape.concat_rows(&outputs)?)
    }
}

/// Logits `[Σ len, vocab]` for sequences stacked in order. Attention never
/// crosses sequence boundaries and positions restart at 0 for each one.
pub fn forward_packed(tape: &mut Tape, cfg: &ModelConfig, bound: &Bound, seqs: &[&[TokenId]]) -> Result<Var, LmError> {
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut spans = Vec::with_capacity(seqs.len());
    for seq in seqs {
        if seq.is_empty() {
            return Err(LmError::EmptySequence);
        }
        if seq.len() > cfg.max_seq_len {
            return Err(LmError::SequenceTooLong {
                len: seq.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = seq.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(LmError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        spans.push((ids.len(), seq.len()));
        ids.extend(seq.iter().map(|&t| t as usize));
        positions.extend(0..seq.len());
    }
    if spans.is_empty() {
        return Err(LmError::EmptySequence);
    }

    let s = cfg.lora_scale();
    let b = &bound.base;
    let ad = bound.adapters.as_ref();

    let mut x = tape.row_lookup(b.tok_emb, &ids)?;
    if let Some(a) = ad {
        let low = tape.row_lookup(a.tok_emb.down, &ids)?;
        let delta = tape.matmul(low, a.tok_emb.up)?;
        let delta = tape.scale(delta, s)?;
        x = tape.add(x, delta)?;
    }
    let pos = tape.row_lookup(b.pos_emb, &positions)?;
    x = tape.add(x, pos)?;

    for (l, blk) in b.blocks.iter().enumerate() {
        let ba = ad.map(|a| &a.blocks[l]);
        let h = tape.layer_norm(x, blk.ln1_gain, blk.ln1_bias)?;
        let q = linear(tape, h, blk.wq, ba.map(|a| &a.wq), s)?;
        let k = linear(tape, h, blk.wk, ba.map(|a| &a.wk), s)?;
        let v = linear(tape, h, blk.wv, ba.map(|a| &a.wv), s)?;
        let att = attention(tape, cfg, q, k, v, &spans)?;
        let o = linear(tape, att, blk.wo, ba.map(|a| &a.wo), s)?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x, blk.ln2_gain, blk.ln2_bias)?;
        let f = linear(tape, h, blk.ff_in, ba.map(|a| &a.ff_in), s)?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, blk.ff_out, ba.map(|a| &a.ff_out), s)?;
        x = tape.add(x, f)?;
    }
    let h = tape.layer_norm(x, b.ln_f_gain, b.ln_f_bias)?;
    linear(tape, h, b.unembed, ad.map(|a| &a.unembed), s)
}
