//! Dense f64 tensors and a recording tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every operation executed during a forward pass;
//! [`Graph::backward`] replays the record in reverse, accumulating
//! gradients. Parameters live outside the graph in a [`ParamStore`] and
//! are bound into a graph per forward pass, so one set of weights can
//! serve many independent graphs (training steps, decodes, checks).
//!
//! One graph and its variables form a single-owner unit: build, run
//! forward, run backward on one thread. Parallelism lives inside the
//! kernels (row-partitioned, deterministic), never across tape entries.

mod check;
mod kernels;

pub use check::{grad_check, grad_check_params, GradCheckReport, InputReport};
pub(crate) use kernels::{matmul_nn, matmul_nt, matmul_tn};

use crate::rng::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("softmax: row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("nll_loss: target {target} at step {position} out of range for {classes} classes")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        classes: usize,
    },
    #[error("backward: loss must be a scalar, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("non-finite gradient in parameter `{name}`")]
    NonFiniteGrad { name: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense real array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape,
                reason: "dimensions must be positive",
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: positive dims")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("filled: positive dims")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    /// Uniform init in (-scale, scale), deterministic under the rng.
    pub fn uniform(shape: Vec<usize>, scale: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(-scale, scale)).collect();
        Tensor::new(shape, data).expect("uniform: positive dims")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

}

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat set of named, trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(tensor.with_grad());
        self.names.push(name.into());
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .zip(self.names.iter())
            .enumerate()
            .map(|(i, (t, n))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.entries {
            t.zero_grad();
        }
    }
}

/// Loss reduction over steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// Index of a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNT { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    ConcatCols { xs: Vec<usize> },
    Average { xs: Vec<usize> },
    RowMask { x: usize, keep: Vec<bool> },
    RowScale { x: usize, factors: Vec<f64> },
    SoftmaxMasked { x: usize },
    LogSoftmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Gather { table: usize, indices: Vec<usize> },
    NllLoss { logp: usize, targets: Vec<usize>, reduction: Reduction, step_mask: Option<Vec<bool>> },
    Sum { x: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    binding: Option<ParamId>,
}

/// Recording tape. Operations execute eagerly and append a record used
/// by [`Graph::backward`] for reverse traversal; each record is visited
/// exactly once, in reverse execution order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
        binding: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
            binding,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad_of(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Materialize a variable's current value as a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is valid")
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf, None))
    }

    /// Copy a tensor in as a leaf; differentiable iff the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            Op::Leaf,
            None,
        )
    }

    /// Bind a stored parameter as a differentiable leaf. Gradients flow
    /// back to the store through [`Graph::export_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.shape.clone(), t.data.clone(), true, Op::Leaf, Some(id))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.clone(),
                reason: "expected a 2-D tensor",
            });
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.node(a).shape.clone(),
                right: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.node(a).data, &self.node(b).data, m, k, n, &mut out);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a: a.0, b: b.0 }, None))
    }

    /// Matrix product against a transposed right operand: `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                left: self.node(a).shape.clone(),
                right: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(&self.node(a).data, &self.node(b).data, m, k, n, &mut out);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::MatMulNT { a: a.0, b: b.0 }, None))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.node(a).shape.clone(),
                right: self.node(b).shape.clone(),
            });
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(self.node(b).data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        let shape = self.node(a).shape.clone();
        Ok(self.push(shape, data, rg, Op::Add { a: a.0, b: b.0 }, None))
    }

    /// Broadcast a `[d]` vector over the rows of `x[m×d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, d) = self.dims2(x, "add_row")?;
        let rs = &self.node(row).shape;
        if rs.len() != 1 || rs[0] != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.node(x).shape.clone(),
                right: rs.clone(),
            });
        }
        let rowv = &self.node(row).data;
        let mut data = self.node(x).data.clone();
        for r in 0..m {
            for j in 0..d {
                data[r * d + j] += rowv[j];
            }
        }
        let rg = self.node(x).requires_grad || self.node(row).requires_grad;
        Ok(self.push(vec![m, d], data, rg, Op::AddRow { x: x.0, row: row.0 }, None))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.node(x).data.iter().map(|v| v * c).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(shape, data, rg, Op::Scale { x: x.0, c }, None)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.node(x).data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.node(x).shape.clone();
        let rg = self.node(x).requires_grad;
        self.push(shape, data, rg, Op::Relu { x: x.0 }, None)
    }

    /// Concatenate 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat_cols",
                shape: vec![],
                reason: "needs at least one input",
            });
        }
        let (m, _) = self.dims2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let (mi, di) = self.dims2(v, "concat_cols")?;
            if mi != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.node(xs[0]).shape.clone(),
                    right: self.node(v).shape.clone(),
                });
            }
            widths.push(di);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&v, &d) in xs.iter().zip(widths.iter()) {
            let src = &self.node(v).data;
            for r in 0..m {
                data[r * total + offset..r * total + offset + d]
                    .copy_from_slice(&src[r * d..(r + 1) * d]);
            }
            offset += d;
        }
        let rg = xs.iter().any(|&v| self.node(v).requires_grad);
        let ids = xs.iter().map(|v| v.0).collect();
        Ok(self.push(vec![m, total], data, rg, Op::ConcatCols { xs: ids }, None))
    }

    /// Uniform mean of same-shape tensors (mean over a stacked leading axis).
    pub fn average(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "average",
                shape: vec![],
                reason: "needs at least one input",
            });
        }
        let shape = self.node(xs[0]).shape.clone();
        for &v in xs {
            if self.node(v).shape != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "average",
                    left: shape,
                    right: self.node(v).shape.clone(),
                });
            }
        }
        let inv = 1.0 / xs.len() as f64;
        let mut data = vec![0.0; self.node(xs[0]).data.len()];
        for &v in xs {
            for (o, &x) in data.iter_mut().zip(self.node(v).data.iter()) {
                *o += x;
            }
        }
        for o in &mut data {
            *o *= inv;
        }
        let rg = xs.iter().any(|&v| self.node(v).requires_grad);
        let ids = xs.iter().map(|v| v.0).collect();
        Ok(self.push(shape, data, rg, Op::Average { xs: ids }, None))
    }

    /// Zero out rows where `keep` is false.
    pub fn row_mask(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, d) = self.dims2(x, "row_mask")?;
        if keep.len() != m {
            return Err(TensorError::InvalidShape {
                op: "row_mask",
                shape: vec![keep.len()],
                reason: "keep mask length must equal row count",
            });
        }
        let mut data = self.node(x).data.clone();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                data[r * d..(r + 1) * d].fill(0.0);
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![m, d],
            data,
            rg,
            Op::RowMask {
                x: x.0,
                keep: keep.to_vec(),
            },
            None,
        ))
    }

    /// Scale each row of `x[m×d]` by its own factor.
    pub fn row_scale(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (m, d) = self.dims2(x, "row_scale")?;
        if factors.len() != m {
            return Err(TensorError::InvalidShape {
                op: "row_scale",
                shape: vec![factors.len()],
                reason: "one factor per row",
            });
        }
        let mut data = self.node(x).data.clone();
        for (r, &f) in factors.iter().enumerate() {
            for v in &mut data[r * d..(r + 1) * d] {
                *v *= f;
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![m, d],
            data,
            rg,
            Op::RowScale {
                x: x.0,
                factors: factors.to_vec(),
            },
            None,
        ))
    }

    /// Row-wise softmax with optional boolean mask (true = position kept).
    /// Masked positions get probability exactly zero; a fully-masked row
    /// is an error, never a NaN.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_masked")?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(TensorError::InvalidShape {
                    op: "softmax_masked",
                    shape: vec![mk.len()],
                    reason: "mask length must equal logits size",
                });
            }
            for r in 0..m {
                if !mk[r * n..(r + 1) * n].iter().any(|&b| b) {
                    return Err(TensorError::FullyMaskedRow { row: r });
                }
            }
        }
        let src = &self.node(x).data;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let xs = &src[r * n..(r + 1) * n];
            let live = |j: usize| mask.is_none_or(|mk| mk[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in xs.iter().enumerate() {
                if live(j) && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if live(j) {
                    let e = (xs[j] - max).exp();
                    data[r * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                data[r * n + j] /= sum;
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(
            vec![m, n],
            data,
            rg,
            Op::SoftmaxMasked { x: x.0 },
            None,
        ))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "log_softmax")?;
        let src = &self.node(x).data;
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let xs = &src[r * n..(r + 1) * n];
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                data[r * n + j] = xs[j] - max - log_sum;
            }
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(vec![m, n], data, rg, Op::LogSoftmax { x: x.0 }, None))
    }

    /// Per-row normalization to mean 0 / variance 1, then affine by
    /// `gamma` and `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        for (v, nm) in [(gamma, "gamma"), (beta, "beta")] {
            let s = &self.node(v).shape;
            if s.len() != 1 || s[0] != d {
                let _ = nm;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![m, d],
                    right: s.clone(),
                });
            }
        }
        let src = &self.node(x).data;
        let g = &self.node(gamma).data;
        let b = &self.node(beta).data;
        let mut data = vec![0.0; m * d];
        for r in 0..m {
            let xs = &src[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (xs[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.node(x).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        Ok(self.push(
            vec![m, d],
            data,
            rg,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            None,
        ))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`. Backward
    /// scatter-adds into the table gradient, so repeated indices
    /// accumulate.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding_gather")?;
        for &i in indices {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_gather",
                    index: i,
                    bound: v,
                });
            }
        }
        if indices.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "embedding_gather",
                shape: vec![0],
                reason: "needs at least one index",
            });
        }
        let src = &self.node(table).data;
        let mut data = vec![0.0; indices.len() * d];
        for (r, &i) in indices.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.node(table).requires_grad;
        Ok(self.push(
            vec![indices.len(), d],
            data,
            rg,
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
            None,
        ))
    }

    /// Negative log-likelihood over rows of log-probabilities. Steps with
    /// a false `step_mask` entry are excluded from the sum and the mean
    /// denominator.
    pub fn nll_loss(
        &mut self,
        log_probs: Var,
        targets: &[usize],
        reduction: Reduction,
        step_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (m, classes) = self.dims2(log_probs, "nll_loss")?;
        if targets.len() != m {
            return Err(TensorError::InvalidShape {
                op: "nll_loss",
                shape: vec![targets.len()],
                reason: "one target per log-probability row",
            });
        }
        if let Some(mk) = step_mask {
            if mk.len() != m {
                return Err(TensorError::InvalidShape {
                    op: "nll_loss",
                    shape: vec![mk.len()],
                    reason: "step mask length must equal row count",
                });
            }
        }
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::TargetOutOfRange {
                    position: i,
                    target: t,
                    classes,
                });
            }
        }
        let live = |i: usize| step_mask.is_none_or(|mk| mk[i]);
        let count = (0..m).filter(|&i| live(i)).count();
        if count == 0 {
            return Err(TensorError::InvalidShape {
                op: "nll_loss",
                shape: vec![m],
                reason: "all steps masked out",
            });
        }
        #[cfg(debug_assertions)]
        {
            let src = &self.node(log_probs).data;
            for r in 0..m {
                let s: f64 = src[r * classes..(r + 1) * classes]
                    .iter()
                    .map(|v| v.exp())
                    .sum();
                debug_assert!(
                    (s - 1.0).abs() < 1e-6,
                    "nll_loss expects log-probability rows (row {r} sums to {s})"
                );
            }
        }
        let src = &self.node(log_probs).data;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if live(i) {
                total -= src[i * classes + t];
            }
        }
        if reduction == Reduction::Mean {
            total /= count as f64;
        }
        let rg = self.node(log_probs).requires_grad;
        Ok(self.push(
            vec![1],
            vec![total],
            rg,
            Op::NllLoss {
                logp: log_probs.0,
                targets: targets.to_vec(),
                reduction,
                step_mask: step_mask.map(<[bool]>::to_vec),
            },
            None,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.node(x).data.iter().sum();
        let rg = self.node(x).requires_grad;
        self.push(vec![1], vec![total], rg, Op::Sum { x: x.0 }, None)
    }

    /// Reverse pass from a scalar loss. Each call computes fresh
    /// `∂loss/∂node` values and adds them into the accumulated per-node
    /// gradients, so two calls without reset produce doubled gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                numel: self.node(loss).data.len(),
            });
        }
        let n = self.nodes.len();
        let mut tmp: Vec<Option<Vec<f64>>> = vec![None; n];
        tmp[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(out_grad) = tmp[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            // fresh per-call gradient folds into the accumulated one
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, &g) in acc.iter_mut().zip(out_grad.iter()) {
                        *a += g;
                    }
                }
                slot @ None => *slot = Some(out_grad.clone()),
            }
            self.propagate(i, &out_grad, &mut tmp);
        }
        Ok(())
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn spread(tmp: &mut [Option<Vec<f64>>], idx: usize, len: usize, f: impl Fn(&mut [f64])) {
        let slot = tmp[idx].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, i: usize, dy: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    matmul_nt(dy, &self.nodes[b].data, m, n, k, &mut da);
                    Self::spread(tmp, a, m * k, |s| add_into(s, &da));
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    matmul_tn(&self.nodes[a].data, dy, m, k, n, &mut db);
                    Self::spread(tmp, b, k * n, |s| add_into(s, &db));
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[0];
                if self.needs(a) {
                    // dA = dC · B
                    let mut da = vec![0.0; m * k];
                    matmul_nn(dy, &self.nodes[b].data, m, n, k, &mut da);
                    Self::spread(tmp, a, m * k, |s| add_into(s, &da));
                }
                if self.needs(b) {
                    // dB = dCᵀ · A
                    let mut db = vec![0.0; n * k];
                    matmul_tn(dy, &self.nodes[a].data, m, n, k, &mut db);
                    Self::spread(tmp, b, n * k, |s| add_into(s, &db));
                }
            }
            Op::Add { a, b } => {
                for idx in [a, b] {
                    if self.needs(idx) {
                        Self::spread(tmp, idx, dy.len(), |s| add_into(s, dy));
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.needs(x) {
                    Self::spread(tmp, x, dy.len(), |s| add_into(s, dy));
                }
                if self.needs(row) {
                    let d = self.nodes[row].data.len();
                    let m = dy.len() / d;
                    Self::spread(tmp, row, d, |s| {
                        for r in 0..m {
                            for j in 0..d {
                                s[j] += dy[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if self.needs(x) {
                    Self::spread(tmp, x, dy.len(), |s| {
                        for (o, &g) in s.iter_mut().zip(dy.iter()) {
                            *o += c * g;
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if self.needs(x) {
                    let xv = &self.nodes[x].data;
                    Self::spread(tmp, x, dy.len(), |s| {
                        for ((o, &g), &v) in s.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                            if v > 0.0 {
                                *o += g;
                            }
                        }
                    });
                }
            }
            Op::ConcatCols { xs } => {
                let total = self.nodes[i].shape[1];
                let m = self.nodes[i].shape[0];
                let mut offset = 0;
                for idx in xs {
                    let d = self.nodes[idx].shape[1];
                    if self.needs(idx) {
                        Self::spread(tmp, idx, m * d, |s| {
                            for r in 0..m {
                                for j in 0..d {
                                    s[r * d + j] += dy[r * total + offset + j];
                                }
                            }
                        });
                    }
                    offset += d;
                }
            }
            Op::Average { xs } => {
                let inv = 1.0 / xs.len() as f64;
                for idx in xs {
                    if self.needs(idx) {
                        Self::spread(tmp, idx, dy.len(), |s| {
                            for (o, &g) in s.iter_mut().zip(dy.iter()) {
                                *o += inv * g;
                            }
                        });
                    }
                }
            }
            Op::RowMask { x, keep } => {
                if self.needs(x) {
                    let d = dy.len() / keep.len();
                    Self::spread(tmp, x, dy.len(), |s| {
                        for (r, &k) in keep.iter().enumerate() {
                            if k {
                                add_into(&mut s[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
                            }
                        }
                    });
                }
            }
            Op::RowScale { x, factors } => {
                if self.needs(x) {
                    let d = dy.len() / factors.len();
                    Self::spread(tmp, x, dy.len(), |s| {
                        for (r, &f) in factors.iter().enumerate() {
                            for j in 0..d {
                                s[r * d + j] += f * dy[r * d + j];
                            }
                        }
                    });
                }
            }
            Op::SoftmaxMasked { x } => {
                if self.needs(x) {
                    // dx_j = y_j (dy_j − Σ_k dy_k y_k); masked entries have
                    // y_j = 0 and receive exactly zero gradient.
                    let y = &self.nodes[i].data;
                    let n = self.nodes[i].shape[1];
                    let m = self.nodes[i].shape[0];
                    Self::spread(tmp, x, dy.len(), |s| {
                        for r in 0..m {
                            let ys = &y[r * n..(r + 1) * n];
                            let gs = &dy[r * n..(r + 1) * n];
                            let inner: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                s[r * n + j] += ys[j] * (gs[j] - inner);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax { x } => {
                if self.needs(x) {
                    // dx = dy − softmax(x) · row_sum(dy)
                    let y = &self.nodes[i].data;
                    let n = self.nodes[i].shape[1];
                    let m = self.nodes[i].shape[0];
                    Self::spread(tmp, x, dy.len(), |s| {
                        for r in 0..m {
                            let gs = &dy[r * n..(r + 1) * n];
                            let gsum: f64 = gs.iter().sum();
                            for j in 0..n {
                                s[r * n + j] += gs[j] - y[r * n + j].exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.nodes[gamma].data.len();
                let m = self.nodes[x].shape[0];
                let xv = &self.nodes[x].data;
                let gv = &self.nodes[gamma].data;
                if self.needs(beta) {
                    Self::spread(tmp, beta, d, |s| {
                        for r in 0..m {
                            add_into(s, &dy[r * d..(r + 1) * d]);
                        }
                    });
                }
                // per-row statistics are recomputed from the saved input
                let mut stats = Vec::with_capacity(m);
                for r in 0..m {
                    let xs = &xv[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    stats.push((mean, 1.0 / (var + eps).sqrt()));
                }
                if self.needs(gamma) {
                    Self::spread(tmp, gamma, d, |s| {
                        for r in 0..m {
                            let (mean, inv_std) = stats[r];
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean) * inv_std;
                                s[j] += dy[r * d + j] * xhat;
                            }
                        }
                    });
                }
                if self.needs(x) {
                    Self::spread(tmp, x, m * d, |s| {
                        for r in 0..m {
                            let (mean, inv_std) = stats[r];
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean) * inv_std;
                                let dxhat = dy[r * d + j] * gv[j];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            let inv_d = 1.0 / d as f64;
                            for j in 0..d {
                                let xhat = (xv[r * d + j] - mean) * inv_std;
                                let dxhat = dy[r * d + j] * gv[j];
                                s[r * d + j] += inv_std
                                    * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                            }
                        }
                    });
                }
            }
            Op::Gather { table, indices } => {
                if self.needs(table) {
                    let d = self.nodes[i].shape[1];
                    let len = self.nodes[table].data.len();
                    Self::spread(tmp, table, len, |s| {
                        for (r, &idx) in indices.iter().enumerate() {
                            add_into(&mut s[idx * d..(idx + 1) * d], &dy[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
            Op::NllLoss {
                logp,
                targets,
                reduction,
                step_mask,
            } => {
                if self.needs(logp) {
                    let classes = self.nodes[logp].shape[1];
                    let live = |i: usize| step_mask.as_ref().is_none_or(|mk| mk[i]);
                    let count = (0..targets.len()).filter(|&i| live(i)).count();
                    let w = match reduction {
                        Reduction::Sum => dy[0],
                        Reduction::Mean => dy[0] / count as f64,
                    };
                    Self::spread(tmp, logp, self.nodes[logp].data.len(), |s| {
                        for (r, &t) in targets.iter().enumerate() {
                            if live(r) {
                                s[r * classes + t] -= w;
                            }
                        }
                    });
                }
            }
            Op::Sum { x } => {
                if self.needs(x) {
                    let g = dy[0];
                    Self::spread(tmp, x, self.nodes[x].data.len(), |s| {
                        for o in s.iter_mut() {
                            *o += g;
                        }
                    });
                }
            }
        }
    }

    /// Move accumulated gradients of bound parameters into the store
    /// (adding to whatever is already there).
    pub fn export_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(grad)) = (node.binding, node.grad.as_ref()) {
                store.get_mut(id).accumulate_grad(grad);
            }
        }
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    debug_assert_eq!(acc.len(), src.len());
    for (a, &b) in acc.iter_mut().zip(src.iter()) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g
            .constant(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.])
            .unwrap();
        let b = g
            .constant(vec![3, 2], vec![1., 2., 3., 4., 5., 6.])
            .unwrap();
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c), &[1., 2., 3., 4., 5., 6.]);

        let a = g
            .constant(vec![2, 2], vec![1., 2., 3., 4.])
            .unwrap();
        let i2 = g.constant(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
        let p = g.matmul(a, i2).unwrap();
        assert_eq!(g.value(p), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_single_survivor() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = g.softmax_masked(x, None).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);

        let x2 = g.constant(vec![1, 2], vec![5.0, -3.0]).unwrap();
        let y2 = g.softmax_masked(x2, Some(&[true, false])).unwrap();
        assert_eq!(g.value(y2), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut g = Graph::new();
        let x = g.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = g.softmax_masked(x, None).unwrap();
        let got = g.value(y);
        let want = [0.09003, 0.24473, 0.66524];
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4, "{got:?}");
        }
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut g = Graph::new();
        let x = g.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        let err = g
            .softmax_masked(x, Some(&[true, true, false, false]))
            .unwrap_err();
        assert!(matches!(err, TensorError::FullyMaskedRow { row: 1 }));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gamma = g.constant(vec![3], vec![1.0; 3]).unwrap();
        let beta = g.constant(vec![3], vec![0.0; 3]).unwrap();
        let x = g.constant(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for v in g.value(y) {
            assert!(v.abs() < 1e-9);
        }

        let g2 = g.constant(vec![2], vec![1.0; 2]).unwrap();
        let b2 = g.constant(vec![2], vec![0.0; 2]).unwrap();
        let x2 = g.constant(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let y2 = g.layer_norm(x2, g2, b2, 1e-12).unwrap();
        let got = g.value(y2);
        assert!((got[0] + 1.0).abs() < 1e-6 && (got[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gather_first_row_and_accumulation() {
        let mut g = Graph::new();
        let table = g
            .leaf(&t2(3, 2, vec![1., 2., 3., 4., 5., 6.]).with_grad());
        let first = g.gather(table, &[0]).unwrap();
        assert_eq!(g.value(first), &[1., 2.]);

        let rep = g.gather(table, &[2, 2]).unwrap();
        let s = g.sum(rep);
        g.backward(s).unwrap();
        let grad = g.grad_of(table).unwrap();
        assert_eq!(grad, &[0., 0., 0., 0., 2., 2.]);
    }

    #[test]
    fn gather_out_of_range_names_index_and_bound() {
        let mut g = Graph::new();
        let table = g.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        let err = g.gather(table, &[5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('5') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn nll_uniform_closed_forms() {
        let v = 74;
        let mut g = Graph::new();
        let logits = g.constant(vec![1, v], vec![0.0; v]).unwrap();
        let logp = g.log_softmax(logits).unwrap();
        let loss = g.nll_loss(logp, &[10], Reduction::Sum, None).unwrap();
        assert!((g.value(loss)[0] - (v as f64).ln()).abs() < 1e-12);
        assert!((g.value(loss)[0] - 4.3041).abs() < 1e-4);

        let mut g = Graph::new();
        let logits = g.constant(vec![2, 12], vec![0.0; 24]).unwrap();
        let logp = g.log_softmax(logits).unwrap();
        let loss = g.nll_loss(logp, &[0, 11], Reduction::Sum, None).unwrap();
        assert!((g.value(loss)[0] - 2.0 * 12f64.ln()).abs() < 1e-12);
        assert!((g.value(loss)[0] - 4.9698).abs() < 1e-4);
    }

    #[test]
    fn nll_perfect_prediction_is_zero() {
        let mut g = Graph::new();
        // log-probabilities with probability ~1 on class 1
        let big = 100.0;
        let logits = g.constant(vec![1, 3], vec![0.0, big, 0.0]).unwrap();
        let logp = g.log_softmax(logits).unwrap();
        let loss = g.nll_loss(logp, &[1], Reduction::Sum, None).unwrap();
        assert!(g.value(loss)[0].abs() < 1e-12);
    }

    #[test]
    fn nll_target_out_of_range() {
        let mut g = Graph::new();
        let logits = g.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        let logp = g.log_softmax(logits).unwrap();
        let err = g.nll_loss(logp, &[3], Reduction::Sum, None).unwrap_err();
        assert!(matches!(err, TensorError::TargetOutOfRange { .. }));
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(2, 3, vec![1., 2., 3., 4., 5., 6.]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad_of(x).unwrap(), &[1.0; 6]);
        g.backward(s).unwrap();
        assert_eq!(g.grad_of(x).unwrap(), &[2.0; 6]);
    }

    #[test]
    fn backward_two_losses_accumulate() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap().with_grad());
        let s = g.sum(x);
        let d = g.scale(x, 2.0);
        let s2 = g.sum(d);
        g.backward(s).unwrap();
        g.backward(s2).unwrap();
        assert_eq!(g.grad_of(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(2, 2, vec![0.0; 4]).with_grad());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { numel: 4 }));
    }

    #[test]
    fn export_grads_accumulates_into_store() {
        let mut store = ParamStore::new();
        let id = store.add("w", t2(2, 2, vec![1., 2., 3., 4.]));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let s = g.sum(w);
        g.backward(s).unwrap();
        g.export_grads(&mut store);
        assert_eq!(store.get(id).grad().unwrap(), &[1.0; 4]);
        g.export_grads(&mut store);
        assert_eq!(store.get(id).grad().unwrap(), &[2.0; 4]);
    }

    #[test]
    fn row_mask_zeroes_rows_and_grads() {
        let mut g = Graph::new();
        let x = g.leaf(&t2(2, 2, vec![1., 2., 3., 4.]).with_grad());
        let y = g.row_mask(x, &[true, false]).unwrap();
        assert_eq!(g.value(y), &[1., 2., 0., 0.]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad_of(x).unwrap(), &[1., 1., 0., 0.]);
    }

    #[test]
    fn concat_and_average() {
        let mut g = Graph::new();
        let a = g.constant(vec![2, 1], vec![1., 2.]).unwrap();
        let b = g.constant(vec![2, 2], vec![3., 4., 5., 6.]).unwrap();
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.shape_of(c), &[2, 3]);
        assert_eq!(g.value(c), &[1., 3., 4., 2., 5., 6.]);

        let x = g.constant(vec![1, 2], vec![0.0, 4.0]).unwrap();
        let y = g.constant(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let m = g.average(&[x, y]).unwrap();
        assert_eq!(g.value(m), &[1.0, 2.0]);
    }
}
