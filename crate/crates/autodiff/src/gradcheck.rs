//! Central finite-difference gradient checker.
//!
//! Only forward evaluation is used on the numerical side, so the check is
//! independent of the backward rules it verifies.

use std::sync::Arc;

use crate::{Result, Tape, Tensor, Var};

/// Fixed pseudo-random projection weight for output element `i`, so that
/// non-scalar outputs reduce to a scalar with a non-trivial gradient.
fn projection_weight(i: usize) -> f64 {
    let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    (h % 2001) as f64 / 1000.0 - 1.0
}

fn project(out: &Tensor) -> f64 {
    out.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v as f64 * projection_weight(i))
        .sum()
}

/// Worst normwise relative error between analytic and numerical gradients
/// over all inputs: `max |analytic - numeric| / max(|analytic|, |numeric|)`,
/// with the maxima taken over the entries of each input's gradient.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_input: Vec<f64>,
}

/// Compares backward-pass gradients of `build` against central differences
/// with step `eps`. `build` receives one tracked `Var` per input.
pub fn check<F>(inputs: &[Tensor], eps: f32, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(Arc::new(t.clone()))).collect();
    let out = build(&mut tape, &vars)?;
    let n = tape.value(out).numel();
    let weights = Tensor::new(vec![n, 1], (0..n).map(|i| projection_weight(i) as f32).collect())?;
    let w = tape.constant(Arc::new(weights));
    let flat = tape.reshape(out, &[1, n])?;
    let loss = tape.matmul(flat, w)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(Arc::new(t.clone()))).collect();
        let out = build(&mut tape, &vars)?;
        Ok(project(tape.value(out)))
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[idx].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[idx].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            // Use the perturbation actually representable in f32.
            let h = (orig + eps) as f64 - (orig - eps) as f64;
            let numeric = (plus - minus) / h;
            let a = analytic[idx].data()[j] as f64;
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        per_input.push(if scale > 0.0 { max_diff / scale } else { max_diff });
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
    })
}
