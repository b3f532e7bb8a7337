//! Dynamic tape recording forward operations for reverse-mode gradients.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations whose inputs are
//! all untracked are evaluated eagerly and stored as constants, so an
//! inference pass leaves no backward state behind.

use std::sync::Arc;

use crate::ops::{self, Layout, RowStats};
use crate::{AutodiffError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    /// Tracked leaf; receives accumulated gradients.
    Leaf,
    /// Untracked value with no recorded history.
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    RowLookup { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: RowStats },
    Gelu(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>> },
    CausalMask(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Debug mode: every op rejects NaN or infinite inputs (softmax still
    /// accepts `-inf` from causal masking).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf. Its gradient accumulates across `backward` calls.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an untracked value.
    pub fn constant(&mut self, value: Arc<Tensor>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stores a result, keeping its history only when some input is tracked.
    fn record(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if tracked { op } else { Op::Constant };
        self.push(Arc::new(value), op, tracked)
    }

    fn check(&self, op: &'static str, inputs: &[Var], allow_neg_inf: bool) -> Result<()> {
        if !self.check_finite {
            return Ok(());
        }
        for v in inputs {
            let ok = self.value(*v).data().iter().all(|x| {
                x.is_finite() || (allow_neg_inf && *x == f32::NEG_INFINITY)
            });
            if !ok {
                return Err(AutodiffError::NonFiniteInput { op });
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b], false)?;
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("add", &[a, b], false)?;
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.record(out, &[a, b], Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        self.check("scale", &[a], false)?;
        let out = ops::scale(self.value(a), factor);
        Ok(self.record(out, &[a], Op::Scale(a, factor)))
    }

    /// Embedding gather: row `i` of the result is `table[ids[i]]`.
    pub fn row_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check("row_lookup", &[table], false)?;
        let out = ops::row_lookup(self.value(table), ids)?;
        Ok(self.record(
            out,
            &[table],
            Op::RowLookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check("softmax", &[a], true)?;
        let out = ops::softmax(self.value(a))?;
        Ok(self.record(out, &[a], Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.check("layer_norm", &[x, gain, bias], false)?;
        let (out, stats) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        Ok(self.record(out, &[x, gain, bias], Op::LayerNorm { x, gain, bias, stats }))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check("gelu", &[a], false)?;
        let out = ops::gelu(self.value(a));
        Ok(self.record(out, &[a], Op::Gelu(a)))
    }

    /// Scalar mean negative log-likelihood over rows with a `Some` target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check("cross_entropy", &[logits], false)?;
        let loss = ops::cross_entropy(self.value(logits), targets)?;
        Ok(self.record(
            Tensor::scalar(loss as f32),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn causal_mask_fill(&mut self, a: Var) -> Result<Var> {
        self.check("causal_mask_fill", &[a], false)?;
        let out = ops::causal_mask_fill(self.value(a))?;
        Ok(self.record(out, &[a], Op::CausalMask(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.record(out, &[a], Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = ops::reshape(self.value(a), shape)?;
        Ok(self.record(out, &[a], Op::Reshape(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let out = {
            let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
            ops::concat_rows(&values)?
        };
        Ok(self.record(out, parts, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice_rows(self.value(src), start, len)?;
        Ok(self.record(out, &[src], Op::SliceRows { src, start }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check("sum", &[a], false)?;
        let out = ops::sum(self.value(a));
        Ok(self.record(out, &[a], Op::Sum(a)))
    }

    /// Propagates `d loss / d node` back to every tracked leaf and adds it to
    /// the leaf's gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(AutodiffError::NotScalar(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(AutodiffError::DisconnectedGraph);
        }

        let mut adj: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(&g) {
                            *e += d;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f32>>], target: Var, contribution: Vec<f32>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut adj[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Adjoint buffer of `target`, zero-filled on first use.
    fn slot<'a>(&self, adj: &'a mut [Option<Vec<f32>>], target: Var) -> &'a mut Vec<f32> {
        let n = self.nodes[target.0].value.numel();
        adj[target.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Only allocates when the receiving input is tracked.
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f32], adj: &mut [Option<Vec<f32>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                if self.wants(*a) {
                    let da = self.slot(adj, *a);
                    ops::gemm(m, n, k, g, Layout::Normal, bv.data(), Layout::Transposed, da, true);
                }
                if self.wants(*b) {
                    let db = self.slot(adj, *b);
                    ops::gemm(k, m, n, av.data(), Layout::Transposed, g, Layout::Normal, db, true);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(adj, *a, g.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Scale(a, f) => {
                self.accumulate(adj, *a, g.iter().map(|v| v * f).collect());
            }
            Op::RowLookup { table, ids } => {
                let tv = self.value(*table);
                let cols = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, s) in dt[id * cols..(id + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *d += s;
                    }
                }
                self.accumulate(adj, *table, dt);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let cols = xv.cols();
                let n = cols as f32;
                let mut dx = vec![0.0; xv.numel()];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..xv.rows() {
                    let (mean, rstd) = (stats.mean[r], stats.rstd[r]);
                    let xr = xv.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let mean_d: f32 = dxhat.iter().sum::<f32>() / n;
                    let mean_dx: f32 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / n;
                    for j in 0..cols {
                        dx[r * cols + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                self.accumulate(adj, *x, dx);
                self.accumulate(adj, *gain, dgain);
                self.accumulate(adj, *bias, dbias);
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let dx = xv.iter().zip(g).map(|(&x, d)| ops::gelu_grad_scalar(x) * d).collect();
                self.accumulate(adj, *a, dx);
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let cols = lv.cols();
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut dl = vec![0.0; lv.numel()];
                if count > 0 {
                    let w = g[0] as f64 / count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = lv.row(r);
                        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                        for j in 0..cols {
                            let p = (row[j] as f64 - max).exp() / z;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * cols + j] = ((p - onehot) * w) as f32;
                        }
                    }
                }
                self.accumulate(adj, *logits, dl);
            }
            Op::CausalMask(a) => {
                let (q, k) = (node.value.rows(), node.value.cols());
                let offset = k - q;
                let mut dx = g.to_vec();
                for r in 0..q {
                    dx[r * k + r + offset + 1..(r + 1) * k].fill(0.0);
                }
                self.accumulate(adj, *a, dx);
            }
            Op::Transpose(a) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                self.accumulate(adj, *a, ops::transpose(&gt)?.into_data());
            }
            Op::Reshape(a) => {
                self.accumulate(adj, *a, g.to_vec());
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if self.wants(*p) {
                        self.accumulate(adj, *p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceRows { src, start } => {
                let sv = self.value(*src);
                let cols = sv.cols();
                if self.wants(*src) {
                    let dx = self.slot(adj, *src);
                    for (d, s) in dx[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(adj, *a, vec![g[0]; n]);
            }
        }
        Ok(())
    }
}
