//! Supervised fine-tuning of the adapters with a prompt-masked token loss.
//!
//! Each training sequence is `BOS + prompt + target + EOS`. Only positions
//! that predict a target token or the final `EOS` enter the loss, which is
//! the mean token NLL of one sequence; an update averages that over the
//! sequences of its effective batch.

use std::io::Write;

use rayon::prelude::*;
use rxlora_autodiff::{Tape, Tensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::lm::{forward_packed, AdapterMode, Adapters, Bound, LmError, ModelParams};
use crate::prescription::ClinicalRecord;
use crate::rng::{self, Purpose};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("herb {0:?} is missing from the vocabulary")]
    UncoveredHerb(String),
    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFiniteLoss { step: usize, epoch: usize, detail: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Autodiff(#[from] rxlora_autodiff::AutodiffError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("callback failed: {0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    /// Exclude prompt positions from the loss.
    pub loss_masking: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            base_lr: 1e-3,
            batch_size: 16,
            grad_accum_steps: 8,
            seed: 1,
            loss_masking: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs, batch_size and grad_accum_steps must be >= 1".into(),
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn steps_per_epoch(&self, n_records: usize) -> usize {
        n_records.div_ceil(self.effective_batch())
    }
}

/// `base_lr · ½ · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(total_steps >= 1 && step <= total_steps, "step {step} outside 0..={total_steps}");
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// Model input with one optional next-token target per position.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<TokenId>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    pub fn new(prompt: &[TokenId], target: &[TokenId], loss_masking: bool) -> Self {
        let mut seq = Vec::with_capacity(prompt.len() + target.len() + 2);
        seq.push(BOS);
        seq.extend_from_slice(prompt);
        seq.extend_from_slice(target);
        seq.push(EOS);
        let first_scored = if loss_masking { 1 + prompt.len() } else { 1 };
        let targets = (1..seq.len())
            .map(|j| (j >= first_scored).then_some(seq[j] as usize))
            .collect();
        seq.pop();
        Self { input: seq, targets }
    }

    pub fn from_record(vocab: &Vocabulary, record: &ClinicalRecord, loss_masking: bool) -> Self {
        let prompt = vocab.encode(&record.render_prompt());
        let target = vocab.encode(&record.prescription.serialize());
        Self::new(&prompt, &target, loss_masking)
    }

    /// Full sequence length including the trailing `EOS`.
    pub fn sequence_len(&self) -> usize {
        self.input.len() + 1
    }
}

/// Mean NLL over the scored positions of `input`.
pub fn token_loss(params: &ModelParams, input: &[TokenId], targets: &[Option<usize>]) -> Result<f64, TrainError> {
    let logits = params.forward(input)?;
    Ok(rxlora_autodiff::ops::cross_entropy(&logits, targets)?)
}

/// Prompt-masked loss of `BOS + prompt + target + EOS`.
pub fn sequence_loss(params: &ModelParams, prompt: &[TokenId], target: &[TokenId]) -> Result<f64, TrainError> {
    let ex = Example::new(prompt, target, true);
    check_len(params, &ex)?;
    token_loss(params, &ex.input, &ex.targets)
}

fn check_len(params: &ModelParams, ex: &Example) -> Result<(), TrainError> {
    let max = params.config.max_seq_len;
    if ex.sequence_len() > max {
        return Err(LmError::SequenceTooLong {
            len: ex.sequence_len(),
            max,
        }
        .into());
    }
    Ok(())
}

/// Summed per-sequence losses and their adapter gradients for one packed
/// micro-batch.
fn micro_batch(params: &ModelParams, examples: &[&Example]) -> Result<(Adapters<Tensor>, Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, AdapterMode::Trainable);
    let inputs: Vec<&[TokenId]> = examples.iter().map(|e| e.input.as_slice()).collect();
    let logits = forward_packed(&mut tape, &params.config, &bound, &inputs)?;
    let mut total = None;
    let mut losses = Vec::with_capacity(examples.len());
    let mut offset = 0;
    for ex in examples {
        let rows = if examples.len() == 1 {
            logits
        } else {
            tape.slice_rows(logits, offset, ex.input.len())?
        };
        offset += ex.input.len();
        let loss = tape.cross_entropy(rows, &ex.targets)?;
        losses.push(tape.value(loss).item() as f64);
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.expect("non-empty micro-batch");
    tape.backward(total)?;
    let adapters = bound.adapters.expect("trainable adapters are bound");
    let grads = adapters.map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())));
    Ok((grads, losses))
}

/// Mean gradient of the per-sequence loss over `examples`, computed in
/// micro-batches of `batch_size` and summed in index order.
pub fn batch_gradients(
    params: &ModelParams,
    examples: &[&Example],
    batch_size: usize,
) -> Result<(Adapters<Tensor>, Vec<f64>), TrainError> {
    let parts: Vec<_> = examples
        .par_chunks(batch_size)
        .map(|chunk| micro_batch(params, chunk))
        .collect::<Result<_, _>>()?;
    let mut parts = parts.into_iter();
    let (mut grads, mut losses) = parts.next().expect("at least one example");
    for (g, l) in parts {
        for (acc, (_, part)) in grads.values_mut().into_iter().zip(g.named()) {
            for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                *a += b;
            }
        }
        losses.extend(l);
    }
    let inv = 1.0 / examples.len() as f32;
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    Ok((grads, losses))
}

/// Adaptive-moment optimizer state for the adapter tensors.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub lr: f64,
    pub running_loss: f64,
    first_moment: Adapters<Tensor>,
    second_moment: Adapters<Tensor>,
}

impl TrainState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = params.adapters.map(|t| Tensor::zeros(t.shape()));
        Self {
            step: 0,
            lr: 0.0,
            running_loss: 0.0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update with decoupled weight decay.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &Adapters<Tensor>, lr: f64) {
        self.step += 1;
        self.lr = lr;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let grads = grads.named();
        let params_mut = params.adapters.values_mut();
        let m = self.first_moment.values_mut();
        let v = self.second_moment.values_mut();
        for (((p, (_, g)), m), v) in params_mut.into_iter().zip(grads).zip(m).zip(v) {
            let p = std::sync::Arc::make_mut(p);
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi as f64 / c1;
                let vhat = vi as f64 / c2;
                let w = p.data()[i] as f64;
                p.data_mut()[i] = (w - lr * (mhat / (vhat.sqrt() + ADAM_EPS) + WEIGHT_DECAY * w)) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    /// CSV with header `step,epoch,lr,loss`.
    pub fn write_csv(&self, out: impl Write) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.entries {
            w.serialize(e).map_err(|e| TrainError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub enum TrainEvent<'a> {
    Step(&'a LogEntry),
    EpochEnd { epoch: usize, params: &'a ModelParams },
}

pub fn train(
    params: ModelParams,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog), TrainError> {
    train_with(params, corpus, vocab, cfg, |_| Ok(()))
}

/// Trains the adapters, calling `on_event` after every update and at the end
/// of every epoch.
pub fn train_with(
    mut params: ModelParams,
    corpus: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<(), TrainError>,
) -> Result<(ModelParams, TrainLog), TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if let Some(h) = corpus.herb_vocabulary().iter().find(|h| vocab.id(h.as_str()).is_none()) {
        return Err(TrainError::UncoveredHerb(h.to_string()));
    }
    let examples: Vec<Example> = corpus
        .records()
        .iter()
        .map(|r| Example::from_record(vocab, r, cfg.loss_masking))
        .collect();
    for ex in &examples {
        check_len(&params, ex)?;
    }

    let steps_per_epoch = cfg.steps_per_epoch(examples.len());
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut state = TrainState::new(&params);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(cfg.seed, Purpose::EpochOrder, epoch as u64, 0));
        for batch in order.chunks(cfg.effective_batch()) {
            let batch: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let (grads, losses) = batch_gradients(&params, &batch, cfg.batch_size)?;
            let loss = losses.iter().sum::<f64>() / losses.len() as f64;
            let grads_finite = grads.named().iter().all(|(_, g)| g.is_finite());
            if !loss.is_finite() || !grads_finite {
                return Err(TrainError::NonFiniteLoss {
                    step: state.step,
                    epoch,
                    detail: format!("loss {loss}, finite gradients: {grads_finite}"),
                });
            }
            let lr = cosine_lr(state.step, total_steps, cfg.base_lr);
            state.apply(&mut params, &grads, lr);
            state.running_loss = if state.step == 1 { loss } else { 0.98 * state.running_loss + 0.02 * loss };
            let entry = LogEntry {
                step: state.step,
                epoch,
                lr,
                loss,
            };
            log.entries.push(entry);
            on_event(TrainEvent::Step(&entry))?;
        }
        on_event(TrainEvent::EpochEnd { epoch, params: &params })?;
    }
    Ok((params, log))
}
