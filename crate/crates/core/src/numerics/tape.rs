//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and writes
//! `∂loss/∂param` into a [`ParamStore`]. Every op checks its output for
//! NaN/Inf and fails with the op's name instead of propagating.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::{matmul_into, sigmoid, softmax_in_place, Activation, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    Square(Var),
    Abs(Var),
    Sum(Var),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    SoftmaxRows(Var),
    Lerp {
        w: Var,
        a: Var,
        b: Var,
    },
    OrderViolation(Var, Var),
    RankingHinge {
        s: Var,
        alpha: f64,
        skip: Vec<(bool, bool)>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    AddGrid {
        a: Var,
        z: Var,
        cells: usize,
    },
    Attend {
        alpha: Var,
        feats: Var,
    },
    SelectRows {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Act(_, Activation::Tanh) => "tanh",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::ClampMinZero) => "clamp_min_zero",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Sum(_) => "sum",
            Op::RowNormalize { .. } => "row_normalize",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::SoftmaxRows(_) => "softmax",
            Op::Lerp { .. } => "lerp",
            Op::OrderViolation(..) => "order_violation",
            Op::RankingHinge { .. } => "ranking_hinge",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::AddGrid { .. } => "add_grid",
            Op::Attend { .. } => "attend",
            Op::SelectRows { .. } => "select_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(op.name()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    /// Untracked constant input.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input)
    }

    /// Tracked parameter; repeated lookups of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(t, Op::Param)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (ta.dims2(), tb.dims2());
        if ta.rank() != 2 || tb.rank() != 2 || k != k2 {
            return Err(Error::dim(format!("matmul of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// `x · wᵀ + b` with `x: [B×in]`, `w: [out×in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (rows, inp) = self.mat(x);
        let tw = self.value(w);
        if tw.rank() != 2 || tw.shape()[1] != inp {
            return Err(Error::dim(format!(
                "linear: input {:?} against weight {:?}",
                self.value(x).shape(),
                tw.shape()
            )));
        }
        let out_dim = tw.shape()[0];
        if let Some(b) = b {
            if self.value(b).len() != out_dim {
                return Err(Error::dim(format!(
                    "linear: bias {:?} for {out_dim} outputs",
                    self.value(b).shape()
                )));
            }
        }
        let xd = self.value(x).data();
        let wd = tw.data();
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xr = &xd[r * inp..(r + 1) * inp];
            for o in 0..out_dim {
                let wr = &wd[o * inp..(o + 1) * inp];
                out[r * out_dim + o] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        self.push(Tensor::matrix(rows, out_dim, out)?, Op::Linear { x, w, b })
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op.name(), ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.mat(a);
        let tr = self.value(row);
        if tr.len() != cols {
            return Err(Error::dim(format!(
                "add_row: row {:?} against {:?}",
                tr.shape(),
                self.value(a).shape()
            )));
        }
        let rd = tr.data().to_vec();
        let ta = self.value(a);
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            chunk.iter_mut().zip(&rd).for_each(|(x, r)| *x += r);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    pub fn act(&mut self, a: Var, kind: Activation) -> Result<Var> {
        let t = self.value(a).map(|v| kind.apply(v));
        self.push(t, Op::Act(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.act(a, Activation::Relu)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|v| v * v);
        self.push(t, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Divides each row by `sqrt(‖row‖² + eps)`; a zero row stays zero.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.dims2();
        let mut data = tx.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_mut(cols) {
            let r = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= r);
            norms.push(r);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::RowNormalize { x, norms })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (self.mat(a), self.mat(b));
        if ra != rb {
            return Err(Error::dim(format!("concat_cols: {ra} rows against {rb} rows")));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        self.push(Tensor::matrix(ra, ca + cb, data)?, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.mat(x);
        if len == 0 || start + len > cols {
            return Err(Error::dim(format!("slice_cols {start}..{} of {cols}", start + len)));
        }
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::matrix(rows, len, data)?, Op::SliceCols { x, start })
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.mat(table);
        if ids.is_empty() {
            return Err(Error::dim("gather with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!("token id {bad} outside table of {vocab} rows")));
        }
        let d = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&d[i * dim..(i + 1) * dim]);
        }
        let t = Tensor::matrix(ids.len(), dim, data)?;
        self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, cols) = tx.dims2();
        let mut data = tx.data().to_vec();
        data.chunks_mut(cols).for_each(softmax_in_place);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::SoftmaxRows(x))
    }

    /// `w·a + (1−w)·b` for a scalar node `w`.
    pub fn lerp(&mut self, w: Var, a: Var, b: Var) -> Result<Var> {
        if self.value(w).len() != 1 {
            return Err(Error::dim("lerp weight must be a scalar"));
        }
        let wv = self.value(w).item();
        self.zip_with(a, b, Op::Lerp { w, a, b }, |x, y| wv * x + (1.0 - wv) * y)
    }

    /// `S[i][j] = −‖max(0, y_j − x_i)‖²` for row sets `x: [B×d]`, `y: [M×d]`.
    pub fn order_violation(&mut self, x: Var, y: Var) -> Result<Var> {
        let ((b, d), (m, d2)) = (self.mat(x), self.mat(y));
        if d != d2 {
            return Err(Error::dim(format!("order_violation: widths {d} and {d2}")));
        }
        let (xd, yd) = (self.value(x).data(), self.value(y).data());
        let mut out = vec![0.0; b * m];
        for i in 0..b {
            for j in 0..m {
                out[i * m + j] = -violation_sq(&xd[i * d..(i + 1) * d], &yd[j * d..(j + 1) * d]);
            }
        }
        self.push(Tensor::matrix(b, m, out)?, Op::OrderViolation(x, y))
    }

    /// Pairwise hinge over a square score matrix whose diagonal holds the
    /// positive pairs: `Σ_b Σ_{j≠b} [α − S_bb + S_jb]₊ + [α − S_bb + S_bj]₊`.
    pub fn ranking_hinge(&mut self, s: Var, alpha: f64) -> Result<Var> {
        self.ranking_hinge_skipping(s, alpha, Vec::new())
    }

    /// [`Self::ranking_hinge`] without the terms flagged in `skip`:
    /// `skip[j·B + b] = (drop [α − S_bb + S_jb]₊, drop [α − S_bb + S_bj]₊)`.
    /// An empty `skip` keeps every term.
    pub fn ranking_hinge_skipping(&mut self, s: Var, alpha: f64, skip: Vec<(bool, bool)>) -> Result<Var> {
        let (b, m) = self.mat(s);
        if b != m {
            return Err(Error::dim(format!("ranking_hinge needs a square matrix, got {b}×{m}")));
        }
        if !skip.is_empty() && skip.len() != b * b {
            return Err(Error::dim(format!(
                "ranking_hinge: skip mask of {} for {b}×{b}",
                skip.len()
            )));
        }
        let sd = self.value(s).data();
        let mut total = 0.0;
        for_each_hinge(sd, b, alpha, &skip, |_, _, v| total += v);
        self.push(Tensor::scalar(total), Op::RankingHinge { s, alpha, skip })
    }

    /// Mean token cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.mat(logits);
        if targets.len() != rows {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        probs.chunks_mut(vocab).for_each(softmax_in_place);
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(Error::contract(format!("target {t} outside vocabulary of {vocab}")));
                }
                total -= probs[r * vocab + t].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `targets` in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let tl = self.value(logits);
        if targets.len() != tl.len() {
            return Err(Error::dim(format!(
                "bce_with_logits: {} targets for {:?}",
                targets.len(),
                tl.shape()
            )));
        }
        let total: f64 = tl
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Adds row `z[b]` to each of the `cells` rows `a[b·cells + i]`.
    pub fn add_grid(&mut self, a: Var, z: Var, cells: usize) -> Result<Var> {
        let ((ra, ca), (rz, cz)) = (self.mat(a), self.mat(z));
        if ca != cz || ra != rz * cells {
            return Err(Error::dim(format!(
                "add_grid: {ra}×{ca} grid rows against {rz}×{cz} with {cells} cells"
            )));
        }
        let zd = self.value(z).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for (r, row) in data.chunks_mut(ca).enumerate() {
            let b = r / cells;
            row.iter_mut().zip(&zd[b * cz..(b + 1) * cz]).for_each(|(x, z)| *x += z);
        }
        self.push(Tensor::matrix(ra, ca, data)?, Op::AddGrid { a, z, cells })
    }

    /// Weighted sum of grid rows: `out[b] = Σ_i alpha[b,i] · feats[b·N + i]`.
    pub fn attend(&mut self, alpha: Var, feats: Var) -> Result<Var> {
        let ((b, n), (rf, d)) = (self.mat(alpha), self.mat(feats));
        if rf != b * n {
            return Err(Error::dim(format!("attend: weights {b}×{n} over {rf} feature rows")));
        }
        let (ad, fd) = (self.value(alpha).data(), self.value(feats).data());
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let orow = &mut out[bi * d..(bi + 1) * d];
            for i in 0..n {
                let w = ad[bi * n + i];
                let f = &fd[(bi * n + i) * d..(bi * n + i + 1) * d];
                orow.iter_mut().zip(f).for_each(|(o, x)| *o += w * x);
            }
        }
        self.push(Tensor::matrix(b, d, out)?, Op::Attend { alpha, feats })
    }

    /// Row-wise choice: row `r` comes from `a` when `mask[r]`, else from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("select_rows", ta, tb)?;
        let (rows, cols) = ta.dims2();
        if mask.len() != rows {
            return Err(Error::dim(format!(
                "select_rows: mask of {} for {rows} rows",
                mask.len()
            )));
        }
        let mut data = tb.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                data[r * cols..(r + 1) * cols].copy_from_slice(&ta.data()[r * cols..(r + 1) * cols]);
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(
            t,
            Op::SelectRows {
                mask: mask.to_vec(),
                a,
                b,
            },
        )
    }

    /// Fills every parameter's gradient in `store` with `∂loss/∂param`.
    /// Parameters not reached by this graph receive zero gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, t) in store.iter_mut() {
            let g = match self.params.get(name) {
                Some(v) => grads[v.0].clone().unwrap_or_else(|| vec![0.0; t.len()]),
                None => vec![0.0; t.len()],
            };
            t.set_grad(g)?;
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to every node, indexed by node.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if gy.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(format!("backward through {}", node.op.name())));
            }
            self.propagate(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.mat(*a), self.mat(*b));
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gy[i * n + j] * bd[p * n + j];
                            gb[p * n + j] += ad[i * k + p] * gy[i * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::Linear { x, w, b } => {
                let (rows, inp) = self.mat(*x);
                let out_dim = self.value(*w).shape()[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = vec![0.0; rows * inp];
                let mut gw = vec![0.0; out_dim * inp];
                for r in 0..rows {
                    for o in 0..out_dim {
                        let g = gy[r * out_dim + o];
                        if g == 0.0 {
                            continue;
                        }
                        let wr = &wd[o * inp..(o + 1) * inp];
                        let xr = &xd[r * inp..(r + 1) * inp];
                        gx[r * inp..(r + 1) * inp]
                            .iter_mut()
                            .zip(wr)
                            .for_each(|(d, w)| *d += g * w);
                        gw[o * inp..(o + 1) * inp]
                            .iter_mut()
                            .zip(xr)
                            .for_each(|(d, x)| *d += g * x);
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *w, &gw);
                if let Some(b) = b {
                    let mut gb = vec![0.0; out_dim];
                    for row in gy.chunks(out_dim) {
                        gb.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy);
                accumulate(grads, *b, gy);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gy);
                let neg: Vec<f64> = gy.iter().map(|g| -g).collect();
                accumulate(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = gy.iter().zip(bd).map(|(g, b)| g * b).collect();
                let gb: Vec<f64> = gy.iter().zip(ad).map(|(g, a)| g * a).collect();
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, gy);
                let cols = self.value(*row).len();
                let mut gr = vec![0.0; cols];
                for chunk in gy.chunks(cols) {
                    gr.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                }
                accumulate(grads, *row, &gr);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = gy.iter().map(|g| g * c).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Act(a, kind) => {
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(y.data())
                    .map(|(g, &yv)| g * kind.derivative_from_output(yv))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Square(a) => {
                let ad = self.value(*a).data();
                let ga: Vec<f64> = gy.iter().zip(ad).map(|(g, x)| 2.0 * g * x).collect();
                accumulate(grads, *a, &ga);
            }
            Op::Abs(a) => {
                let ad = self.value(*a).data();
                let ga: Vec<f64> = gy
                    .iter()
                    .zip(ad)
                    .map(|(g, &x)| if x == 0.0 { 0.0 } else { g * x.signum() })
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![gy[0]; n]);
            }
            Op::RowNormalize { x, norms } => {
                let (_, cols) = y.dims2();
                let yd = y.data();
                let mut gx = vec![0.0; yd.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let yr = &yd[span.clone()];
                    let gr = &gy[span.clone()];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, g), yv) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *d = (g - yv * dot) / norm;
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::ConcatCols(a, b) => {
                let ((rows, ca), (_, cb)) = (self.mat(*a), self.mat(*b));
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for row in gy.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = self.mat(*x);
                let (_, len) = y.dims2();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, &gx);
            }
            Op::Gather { table, ids } => {
                let (vocab, dim) = self.mat(*table);
                let mut gt = vec![0.0; vocab * dim];
                for (r, &i) in ids.iter().enumerate() {
                    gt[i * dim..(i + 1) * dim]
                        .iter_mut()
                        .zip(&gy[r * dim..(r + 1) * dim])
                        .for_each(|(d, g)| *d += g);
                }
                accumulate(grads, *table, &gt);
            }
            Op::Reshape(x) => accumulate(grads, *x, gy),
            Op::SoftmaxRows(x) => {
                let (_, cols) = y.dims2();
                let mut gx = vec![0.0; gy.len()];
                for ((d, g), yr) in gx.chunks_mut(cols).zip(gy.chunks(cols)).zip(y.data().chunks(cols)) {
                    let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in d.iter_mut().zip(g).zip(yr) {
                        *dv = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Lerp { w, a, b } => {
                let wv = self.value(*w).item();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let gw: f64 = gy.iter().zip(ad.iter().zip(bd)).map(|(g, (x, y))| g * (x - y)).sum();
                let ga: Vec<f64> = gy.iter().map(|g| g * wv).collect();
                let gb: Vec<f64> = gy.iter().map(|g| g * (1.0 - wv)).collect();
                accumulate(grads, *w, &[gw]);
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
            Op::OrderViolation(x, yv) => {
                let ((b, d), (m, _)) = (self.mat(*x), self.mat(*yv));
                let (xd, yd) = (self.value(*x).data(), self.value(*yv).data());
                let mut gx = vec![0.0; b * d];
                let mut gyv = vec![0.0; m * d];
                for i in 0..b {
                    for j in 0..m {
                        let g = gy[i * m + j];
                        if g == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = yd[j * d + k] - xd[i * d + k];
                            if diff > 0.0 {
                                gx[i * d + k] += 2.0 * g * diff;
                                gyv[j * d + k] -= 2.0 * g * diff;
                            }
                        }
                    }
                }
                accumulate(grads, *x, &gx);
                accumulate(grads, *yv, &gyv);
            }
            Op::RankingHinge { s, alpha, skip } => {
                let (b, _) = self.mat(*s);
                let sd = self.value(*s).data();
                let mut gs = vec![0.0; b * b];
                for_each_hinge(sd, b, *alpha, skip, |pos, neg, _| {
                    gs[neg] += gy[0];
                    gs[pos] -= gy[0];
                });
                accumulate(grads, *s, &gs);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (_, vocab) = self.mat(*logits);
                let mut gl = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = gy[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = &mut gl[r * vocab..(r + 1) * vocab];
                            row.iter_mut()
                                .zip(&probs[r * vocab..(r + 1) * vocab])
                                .for_each(|(d, p)| *d = p * scale);
                            row[t] -= scale;
                        }
                    }
                }
                accumulate(grads, *logits, &gl);
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = gy[0] / targets.len() as f64;
                let gl: Vec<f64> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                    .collect();
                accumulate(grads, *logits, &gl);
            }
            Op::AddGrid { a, z, cells } => {
                accumulate(grads, *a, gy);
                let (rz, cz) = self.mat(*z);
                let mut gz = vec![0.0; rz * cz];
                for (r, row) in gy.chunks(cz).enumerate() {
                    let b = r / cells;
                    gz[b * cz..(b + 1) * cz].iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
                accumulate(grads, *z, &gz);
            }
            Op::Attend { alpha, feats } => {
                let ((b, n), (_, d)) = (self.mat(*alpha), self.mat(*feats));
                let (ad, fd) = (self.value(*alpha).data(), self.value(*feats).data());
                let mut ga = vec![0.0; b * n];
                let mut gf = vec![0.0; b * n * d];
                for bi in 0..b {
                    let g = &gy[bi * d..(bi + 1) * d];
                    for i in 0..n {
                        let row = bi * n + i;
                        let f = &fd[row * d..(row + 1) * d];
                        ga[row] = g.iter().zip(f).map(|(a, b)| a * b).sum();
                        let w = ad[row];
                        gf[row * d..(row + 1) * d]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(dst, gv)| *dst += w * gv);
                    }
                }
                accumulate(grads, *alpha, &ga);
                accumulate(grads, *feats, &gf);
            }
            Op::SelectRows { mask, a, b } => {
                let (_, cols) = y.dims2();
                let mut ga = vec![0.0; gy.len()];
                let mut gb = vec![0.0; gy.len()];
                for (r, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut ga } else { &mut gb };
                    dst[r * cols..(r + 1) * cols].copy_from_slice(&gy[r * cols..(r + 1) * cols]);
                }
                accumulate(grads, *a, &ga);
                accumulate(grads, *b, &gb);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// `‖max(0, y − x)‖²`.
/// Calls `f(positive index, contrastive index, value)` for every active
/// hinge term of a `b×b` score matrix.
fn for_each_hinge(sd: &[f64], b: usize, alpha: f64, skip: &[(bool, bool)], mut f: impl FnMut(usize, usize, f64)) {
    for p in 0..b {
        let pos = sd[p * b + p];
        for j in (0..b).filter(|&j| j != p) {
            let (skip_x, skip_y) = skip.get(j * b + p).copied().unwrap_or((false, false));
            let v = alpha - pos + sd[j * b + p];
            if !skip_x && v > 0.0 {
                f(p * b + p, j * b + p, v);
            }
            let v = alpha - pos + sd[p * b + j];
            if !skip_y && v > 0.0 {
                f(p * b + p, p * b + j, v);
            }
        }
    }
}

pub(crate) fn violation_sq(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = (b - a).max(0.0);
            d * d
        })
        .sum()
}

/// Sums same-shaped terms, typically scalar losses.
pub fn sum_all(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut iter = terms.iter();
    let first = *iter.next().ok_or_else(|| Error::contract("sum of no terms"))?;
    iter.try_fold(first, |acc, &t| g.add(acc, t))
}
