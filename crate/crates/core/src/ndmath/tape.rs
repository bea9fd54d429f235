//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the [`Tape`] holding its forward value
//! and enough saved state to apply its vector-Jacobian product. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct ColumnMoments {
    pub mean: Vec<f64>,
    /// Biased (denominator `n`) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// How [`Tape::batch_norm_col`] obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    /// Use the first `rows` rows of the input; apply the result to all rows.
    Batch { rows: usize },
    /// Use fixed running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

pub const NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRowVec(Var, Var),
    MulRowVec(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    LayerNormRow {
        x: Var,
        inv_std: Vec<f64>,
    },
    BatchNormCol {
        x: Var,
        inv_std: Vec<f64>,
        stat_rows: Option<usize>,
    },
    ReduceSum(Var),
    ReduceMean(Var),
    PairwiseSqDist(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Pick {
        x: Var,
        cells: Vec<(usize, usize)>,
    },
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    StraightThrough {
        relaxed: Var,
        gate: Option<Tensor>,
    },
    SymmetrizeOr(Var),
    GcnNormalize {
        a: Var,
        inv_sqrt_deg: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` is unreachable.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Tensor::zeros(r, c)
        })
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::dim(op, format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .add(self.value(b))
            .map_err(|_| shape_err("add", self.shape(a), self.shape(b)))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| shape_err("sub", self.shape(a), self.shape(b)))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .hadamard(self.value(b))
            .map_err(|_| shape_err("hadamard", self.shape(a), self.shape(b)))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Hadamard(a, b), rg))
    }

    /// `x + 1·b` where `b` is a `1 × cols` row vector.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs != (1, xs.1) {
            return Err(shape_err("add_row", xs, bs));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..xs.0 {
            for (o, bb) in out.row_mut(i).iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRowVec(x, b), rg))
    }

    /// `x ⊙ 1·g` where `g` is a `1 × cols` row vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (xs, gs) = (self.shape(x), self.shape(g));
        if gs != (1, xs.1) {
            return Err(shape_err("mul_row", xs, gs));
        }
        let gv = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for i in 0..xs.0 {
            for (o, gg) in out.row_mut(i).iter_mut().zip(&gv) {
                *o *= gg;
            }
        }
        let rg = self.rg(&[x, g]);
        Ok(self.push(out, Op::MulRowVec(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).scale(k);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v + k);
        let rg = self.rg(&[x]);
        self.push(out, Op::Shift(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if let Some(bad) = v.data().iter().find(|&&e| e <= 0.0 || e.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = v.map(f64::ln);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let out = row_softmax(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::RowSoftmax(x), rg)
    }

    pub fn row_log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.clone();
        for i in 0..v.rows() {
            let r = out.row_mut(i);
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            for e in r.iter_mut() {
                *e -= lse;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::RowLogSoftmax(x), rg)
    }

    /// Per-row standardization (`ε = 1e-5`, population variance, no affine).
    pub fn layer_norm_row(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let mut out = v.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = out.row_mut(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            for e in r.iter_mut() {
                *e = (*e - mean) * s;
            }
            inv_std.push(s);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LayerNormRow { x, inv_std }, rg)
    }

    /// Per-column standardization (`ε = 1e-5`, no affine).
    ///
    /// With [`NormStats::Batch`] the moments come from the leading rows only
    /// and are returned so the caller can maintain running statistics.
    pub fn batch_norm_col(
        &mut self,
        x: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<ColumnMoments>)> {
        let v = self.value(x);
        let (rows, cols) = v.shape();
        let (mean, var, stat_rows) = match stats {
            NormStats::Batch { rows: s } => {
                if s == 0 || s > rows {
                    return Err(Error::Contract(format!(
                        "batch_norm_col: {s} statistic rows for a {rows}-row input"
                    )));
                }
                let mut mean = vec![0.0; cols];
                for i in 0..s {
                    for (m, e) in mean.iter_mut().zip(v.row(i)) {
                        *m += e;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= s as f64);
                let mut var = vec![0.0; cols];
                for i in 0..s {
                    for ((q, e), m) in var.iter_mut().zip(v.row(i)).zip(&mean) {
                        *q += (e - m) * (e - m);
                    }
                }
                var.iter_mut().for_each(|q| *q /= s as f64);
                (mean, var, Some(s))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::dim(
                        "batch_norm_col",
                        format!("running stats of width {} for {cols} columns", mean.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|q| 1.0 / (q + NORM_EPS).sqrt()).collect();
        let mut out = v.clone();
        for i in 0..rows {
            for ((e, m), s) in out.row_mut(i).iter_mut().zip(&mean).zip(&inv_std) {
                *e = (*e - m) * s;
            }
        }
        let moments = stat_rows.map(|count| ColumnMoments {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let rg = self.rg(&[x]);
        let out = self.push(
            out,
            Op::BatchNormCol {
                x,
                inv_std,
                stat_rows,
            },
            rg,
        );
        Ok((out, moments))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::ReduceSum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::ReduceMean(x), rg)
    }

    /// `D[i][j] = ‖h_i − h_j‖²`.
    pub fn pairwise_sq_dist(&mut self, h: Var) -> Var {
        let out = pairwise_sq_dist(self.value(h));
        let rg = self.rg(&[h]);
        self.push(out, Op::PairwiseSqDist(h), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.shape(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat_cols", (rows, 0), self.shape(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for i in 0..rows {
                out.row_mut(i)[offset..offset + c].copy_from_slice(v.row(i));
            }
            offset += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if start > end || end > rows {
            return Err(shape_err("slice_rows", (rows, cols), (start, end)));
        }
        let out = self.value(x).slice_rows(start, end);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Row lookup `out[r] = table[indices[r]]` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let rows = self.shape(table).0;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of range for a {rows}-row table"
            )));
        }
        let out = self.value(table).select_rows(indices);
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Column vector of the listed entries.
    pub fn pick(&mut self, x: Var, cells: &[(usize, usize)]) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        let v = self.value(x);
        let mut data = Vec::with_capacity(cells.len());
        for &(i, j) in cells {
            if i >= rows || j >= cols {
                return Err(shape_err("pick", (rows, cols), (i, j)));
            }
            data.push(v.get(i, j));
        }
        let out = Tensor::from_vec(cells.len(), 1, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::Pick {
                x,
                cells: cells.to_vec(),
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true with `fill`; those entries get
    /// no gradient.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.len() {
            return Err(Error::dim(
                "mask_fill",
                format!("mask of {} for {} entries", mask.len(), v.len()),
            ));
        }
        let mut out = v.clone();
        for (e, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *e = fill;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::MaskFill {
                x,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Straight-through estimator: the forward value is `hard`, the backward
    /// pass hands the incoming gradient to `relaxed` unchanged (multiplied by
    /// `gate` when given).
    pub fn straight_through(
        &mut self,
        hard: Tensor,
        relaxed: Var,
        gate: Option<Tensor>,
    ) -> Result<Var> {
        let rs = self.shape(relaxed);
        if hard.shape() != rs {
            return Err(shape_err("straight_through", hard.shape(), rs));
        }
        if let Some(g) = &gate {
            if g.shape() != rs {
                return Err(shape_err("straight_through", g.shape(), rs));
            }
        }
        let rg = self.rg(&[relaxed]);
        Ok(self.push(hard, Op::StraightThrough { relaxed, gate }, rg))
    }

    /// `A = B ∨ Bᵀ ∨ I` for a square binary `B`. Backward treats the OR as a
    /// sum: `dB = G + Gᵀ` off the diagonal.
    pub fn symmetrize_or(&mut self, b: Var) -> Result<Var> {
        let (r, c) = self.shape(b);
        if r != c {
            return Err(shape_err("symmetrize_or", (r, c), (c, r)));
        }
        let v = self.value(b);
        let out = Tensor::from_fn(r, r, |i, j| {
            if i == j || v.get(i, j) > 0.5 || v.get(j, i) > 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let rg = self.rg(&[b]);
        Ok(self.push(out, Op::SymmetrizeOr(b), rg))
    }

    /// `D^{-1/2} A D^{-1/2}` with `D = diag(rowsum(A))`.
    pub fn gcn_normalize(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(shape_err("gcn_normalize", (r, c), (c, r)));
        }
        let v = self.value(a);
        let mut inv_sqrt_deg = Vec::with_capacity(r);
        for i in 0..r {
            let d: f64 = v.row(i).iter().sum();
            if d <= 0.0 {
                return Err(Error::Domain {
                    op: "gcn_normalize",
                    detail: format!("node {i} has degree {d}"),
                });
            }
            inv_sqrt_deg.push(1.0 / d.sqrt());
        }
        let out = Tensor::from_fn(r, r, |i, j| v.get(i, j) * inv_sqrt_deg[i] * inv_sqrt_deg[j]);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GcnNormalize { a, inv_sqrt_deg }, rg))
    }

    /// Reverse sweep from a `1 × 1` loss. Gradients accumulate over every
    /// path; nodes unreachable from the loss report zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign_unchecked(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut da, 0.0);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut db, 0.0);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Hadamard(a, b) => {
                if self.requires_grad(*a) {
                    let da = g.hadamard(self.value(*b)).expect("shape");
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = g.hadamard(self.value(*a)).expect("shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRowVec(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::MulRowVec(x, gain) => {
                let gv = self.value(*gain);
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for i in 0..dx.rows() {
                        for (e, s) in dx.row_mut(i).iter_mut().zip(gv.data()) {
                            *e *= s;
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*gain) {
                    let xv = self.value(*x);
                    let mut dg = Tensor::zeros(1, gv.cols());
                    for i in 0..g.rows() {
                        for ((d, a), b) in dg.data_mut().iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                            *d += a * b;
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.scale(*k)),
            Op::Shift(x) => self.accumulate(grads, *x, g.clone()),
            Op::Exp(x) => self.accumulate(grads, *x, g.hadamard(out).expect("shape")),
            Op::Log(x) => {
                let dx = g.zip_map(self.value(*x), |a, b| a / b).expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Relu(x) => {
                let dx = g
                    .zip_map(self.value(*x), |a, b| if b > 0.0 { a } else { 0.0 })
                    .expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(out, |a, y| a * y * (1.0 - y)).expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                let dx = g
                    .zip_map(self.value(*x), |a, b| 2.0 * a * b)
                    .expect("shape");
                self.accumulate(grads, *x, dx);
            }
            Op::RowSoftmax(x) => {
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    let y = out.row(i);
                    let dot: f64 = g.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (d, yy) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = yy * (*d - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowLogSoftmax(x) => {
                let mut dx = g.clone();
                for i in 0..dx.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for (d, ly) in dx.row_mut(i).iter_mut().zip(out.row(i)) {
                        *d -= ly.exp() * total;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNormRow { x, inv_std } => {
                let cols = out.cols() as f64;
                let mut dx = g.clone();
                for (i, &s) in inv_std.iter().enumerate() {
                    let y = out.row(i);
                    let gr = g.row(i);
                    let mg = gr.iter().sum::<f64>() / cols;
                    let mgy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for ((d, a), b) in dx.row_mut(i).iter_mut().zip(gr).zip(y) {
                        *d = s * (a - mg - b * mgy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNormCol {
                x,
                inv_std,
                stat_rows,
            } => {
                let (rows, cols) = out.shape();
                let mut dx = g.clone();
                match stat_rows {
                    None => {
                        for i in 0..rows {
                            for (d, s) in dx.row_mut(i).iter_mut().zip(inv_std) {
                                *d *= s;
                            }
                        }
                    }
                    Some(s) => {
                        let s = *s;
                        let mut sum_g = vec![0.0; cols];
                        let mut sum_gy = vec![0.0; cols];
                        for i in 0..rows {
                            for (j, (a, b)) in g.row(i).iter().zip(out.row(i)).enumerate() {
                                sum_g[j] += a;
                                sum_gy[j] += a * b;
                            }
                        }
                        let inv_n = 1.0 / s as f64;
                        for i in 0..rows {
                            let y = out.row(i);
                            let d = dx.row_mut(i);
                            for j in 0..cols {
                                d[j] = if i < s {
                                    inv_std[j]
                                        * (d[j] - inv_n * sum_g[j] - inv_n * y[j] * sum_gy[j])
                                } else {
                                    inv_std[j] * d[j]
                                };
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ReduceSum(x) => {
                let (r, c) = self.shape(*x);
                self.accumulate(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::ReduceMean(x) => {
                let (r, c) = self.shape(*x);
                let k = if r * c == 0 {
                    0.0
                } else {
                    g.item() / (r * c) as f64
                };
                self.accumulate(grads, *x, Tensor::filled(r, c, k));
            }
            Op::PairwiseSqDist(h) => {
                let hv = self.value(*h);
                let m = hv.rows();
                // S = G + Gᵀ; dH = 2·(diag(rowsum S)·H − S·H)
                let s = Tensor::from_fn(m, m, |i, j| g.get(i, j) + g.get(j, i));
                let mut dh = Tensor::zeros(hv.rows(), hv.cols());
                gemm(&s, false, hv, false, &mut dh, 0.0);
                for i in 0..m {
                    let rs: f64 = s.row(i).iter().sum();
                    let hr = hv.row(i);
                    for (d, e) in dh.row_mut(i).iter_mut().zip(hr) {
                        *d = 2.0 * (rs * e - *d);
                    }
                }
                self.accumulate(grads, *h, dh);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let r = self.shape(p).0;
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice_rows(start, start + r));
                    }
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.requires_grad(p) {
                        let dp = Tensor::from_fn(r, c, |i, j| g.get(i, offset + j));
                        self.accumulate(grads, p, dp);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for i in 0..g.rows() {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { table, indices } => {
                let (r, c) = self.shape(*table);
                let mut dt = Tensor::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (d, e) in dt.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += e;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Pick { x, cells } => {
                let (r, c) = self.shape(*x);
                let mut dx = Tensor::zeros(r, c);
                for (k, &(i, j)) in cells.iter().enumerate() {
                    let cur = dx.get(i, j);
                    dx.set(i, j, cur + g.get(k, 0));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskFill { x, mask } => {
                let mut dx = g.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    if m {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::StraightThrough { relaxed, gate } => {
                let dr = match gate {
                    Some(gt) => g.hadamard(gt).expect("shape"),
                    None => g.clone(),
                };
                self.accumulate(grads, *relaxed, dr);
            }
            Op::SymmetrizeOr(b) => {
                let m = g.rows();
                let db = Tensor::from_fn(m, m, |i, j| {
                    if i == j {
                        0.0
                    } else {
                        g.get(i, j) + g.get(j, i)
                    }
                });
                self.accumulate(grads, *b, db);
            }
            Op::GcnNormalize { a, inv_sqrt_deg } => {
                let av = self.value(*a);
                let m = av.rows();
                let s = inv_sqrt_deg;
                let mut rc = vec![0.0; m];
                for i in 0..m {
                    for j in 0..m {
                        let w = g.get(i, j) * av.get(i, j);
                        if w != 0.0 {
                            rc[i] += w * s[j];
                            rc[j] += w * s[i];
                        }
                    }
                }
                let da = Tensor::from_fn(m, m, |k, l| {
                    g.get(k, l) * s[k] * s[l] - 0.5 * s[k] * s[k] * s[k] * rc[k]
                });
                self.accumulate(grads, *a, da);
            }
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, e) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += e;
        }
    }
    out
}

/// Row-wise softmax of a plain tensor.
pub fn row_softmax(v: &Tensor) -> Tensor {
    let mut out = v.clone();
    for i in 0..v.rows() {
        let r = out.row_mut(i);
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in r.iter_mut() {
            *e = (*e - m).exp();
            total += *e;
        }
        for e in r.iter_mut() {
            *e /= total;
        }
    }
    out
}

/// Squared Euclidean distances between all row pairs of a plain tensor.
pub fn pairwise_sq_dist(h: &Tensor) -> Tensor {
    let m = h.rows();
    let mut out = Tensor::zeros(m, m);
    for i in 0..m {
        let hi = h.row(i);
        for j in (i + 1)..m {
            let d: f64 = hi
                .iter()
                .zip(h.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}
