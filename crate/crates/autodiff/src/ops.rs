//! Untracked forward kernels.
//!
//! The tape records calls to these functions and adds the matching
//! vector-Jacobian products. They are also usable directly for inference,
//! where no gradients are needed.

use crate::{AutodiffError, Result, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// How a row-major operand is read by [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored `[rows, cols]` and used as is.
    Normal,
    /// Stored `[cols, rows]` and used transposed.
    Transposed,
}

/// `c (+)= a · b` for an `m×k` by `k×n` product.
///
/// `accumulate = false` overwrites `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_layout: Layout,
    b: &[f32],
    b_layout: Layout,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (it is `&mut`).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.require_2d("matmul")?;
    let (k2, n) = b.require_2d("matmul")?;
    if k != k2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            detail: format!("[{m}, {k}] x [{k2}, {n}]"),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), Layout::Normal, b.data(), Layout::Normal, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "add",
            detail: format!("{:?} + {:?}", a.shape(), b.shape()),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale(a: &Tensor, factor: f32) -> Tensor {
    let data = a.data().iter().map(|x| x * factor).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Gathers `table[ids[i]]` into row `i` of the output.
pub fn row_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, cols) = table.require_2d("row_lookup")?;
    let mut out = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        if id >= rows {
            return Err(AutodiffError::IndexOutOfRange { index: id, len: rows });
        }
        out.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![ids.len(), cols], out)
}

/// Row-wise softmax over the last dimension. Rows may hold `-inf` entries
/// (masked positions) as long as one entry is finite.
pub fn softmax(a: &Tensor) -> Result<Tensor> {
    let (_, cols) = a.require_2d("softmax")?;
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(a.shape().to_vec(), out)
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct RowStats {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, RowStats)> {
    let (rows, cols) = x.require_2d("layer_norm")?;
    if gain.numel() != cols || bias.numel() != cols {
        return Err(AutodiffError::ShapeMismatch {
            op: "layer_norm",
            detail: format!(
                "width {cols} vs gain {:?} / bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        });
    }
    let mut out = vec![0.0; rows * cols];
    let mut stats = RowStats {
        mean: Vec::with_capacity(rows),
        rstd: Vec::with_capacity(rows),
    };
    for r in 0..rows {
        let (mean, rstd) = layer_norm_row(x.row(r), gain.data(), bias.data(), &mut out[r * cols..(r + 1) * cols]);
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((Tensor::new(vec![rows, cols], out)?, stats))
}

/// Normalizes one row into `out`, returning `(mean, 1/std)`.
pub fn layer_norm_row(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) -> (f32, f32) {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

/// Tanh approximation of GELU, `0.5·x·(1 + tanh(z))` with
/// `z = √(2/π)·(x + 0.044715·x³)`, evaluated as `x·σ(2z)`.
pub fn gelu_scalar(x: f32) -> f32 {
    let z = GELU_C * (x + GELU_K * x * x * x);
    x / (1.0 + (-2.0 * z).exp())
}

pub fn gelu_grad_scalar(x: f32) -> f32 {
    let z = GELU_C * (x + GELU_K * x * x * x);
    let s = 1.0 / (1.0 + (-2.0 * z).exp());
    s + 2.0 * x * s * (1.0 - s) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|&x| gelu_scalar(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Mean token-level negative log-likelihood over the rows whose target is
/// `Some`. Accumulates in `f64`. Returns 0 when no row is counted.
pub fn cross_entropy(logits: &Tensor, targets: &[Option<usize>]) -> Result<f64> {
    let (rows, cols) = logits.require_2d("cross_entropy")?;
    if targets.len() != rows {
        return Err(AutodiffError::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("{rows} rows vs {} targets", targets.len()),
        });
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        if t >= cols {
            return Err(AutodiffError::IndexOutOfRange { index: t, len: cols });
        }
        total += row_nll(logits.row(r), t);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// `-log softmax(row)[target]` via log-sum-exp in `f64`.
pub fn row_nll(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    lse - row[target] as f64
}

/// Sets entry `(i, j)` to `-inf` where key `j` lies in the future of query `i`.
///
/// For a `[q, k]` score matrix with `k >= q`, query `i` sits at absolute
/// position `i + (k - q)`.
pub fn causal_mask_fill(a: &Tensor) -> Result<Tensor> {
    let (q, k) = a.require_2d("causal_mask_fill")?;
    if k < q {
        return Err(AutodiffError::ShapeMismatch {
            op: "causal_mask_fill",
            detail: format!("{q} queries over only {k} keys"),
        });
    }
    let offset = k - q;
    let mut out = a.data().to_vec();
    for i in 0..q {
        for v in &mut out[i * k + i + offset + 1..(i + 1) * k] {
            *v = f32::NEG_INFINITY;
        }
    }
    Tensor::new(vec![q, k], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.require_2d("transpose")?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), a.data().to_vec()).map_err(|_| AutodiffError::ShapeMismatch {
        op: "reshape",
        detail: format!("{:?} -> {shape:?}", a.shape()),
    })
}

/// Stacks 2-D tensors with equal column counts on top of each other.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(AutodiffError::ShapeMismatch {
            op: "concat_rows",
            detail: "no inputs".into(),
        });
    };
    let (_, cols) = first.require_2d("concat_rows")?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (r, c) = p.require_2d("concat_rows")?;
        if c != cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_rows",
                detail: format!("column count {c} vs {cols}"),
            });
        }
        rows += r;
        data.extend_from_slice(p.data());
    }
    Tensor::new(vec![rows, cols], data)
}

pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = a.require_2d("slice_rows")?;
    if start + len > rows {
        return Err(AutodiffError::ShapeMismatch {
            op: "slice_rows",
            detail: format!("rows {start}..{} of {rows}", start + len),
        });
    }
    Tensor::new(vec![len, cols], a.data()[start * cols..(start + len) * cols].to_vec())
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().map(|&v| v as f64).sum::<f64>() as f32)
}
