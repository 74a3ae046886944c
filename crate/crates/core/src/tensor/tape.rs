//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward values are computed eagerly as ops are pushed. A node needs a
//! gradient only if some trainable [`Parameter`] is upstream of it, so
//! subgraphs made purely of constants and frozen parameters cost nothing on
//! the backward pass. Parameter values are borrowed, never copied.

use std::borrow::Cow;

use super::param::{Gradients, ParamId, Parameter};
use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Probability clamp applied before taking logs in the BCE loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var, Vec<usize>),
    Sigmoid(Var),
    Bce(Var, f64),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            record: true,
        }
    }

    /// A tape that treats every parameter as a constant. Used for evaluation.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            record: false,
        }
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Cow::Owned(value), op, needs)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Registers a parameter. Frozen parameters (or any parameter on an
    /// inference tape) become constants.
    pub fn param(&mut self, p: &'a Parameter) -> Var {
        if self.record && p.trainable() {
            self.push(Cow::Borrowed(p.value()), Op::Param(p.id()), true)
        } else {
            self.push(Cow::Borrowed(p.value()), Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_owned(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push_owned(out, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.shape(), vb.shape()));
        }
        let mut out = va.clone();
        out.add_assign(vb)?;
        Ok(self.push_owned(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.cols();
        if vb.len() != c {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push_owned(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let out = self.value(x).map(|v| v * alpha);
        self.push_owned(out, Op::Scale(x, alpha), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push_owned(out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if d == 0 || g.len() != d || b.len() != d {
            return Err(Error::dim("layer_norm", vx.shape(), g.shape()));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(vx.shape());
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            let o = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                o[j] = g.data()[j] * h + b.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push_owned(out, op, &[x, gamma, beta]))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push_owned(out, Op::Gelu(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_rows(&vals)?;
        Ok(self.push_owned(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols needs at least one part"));
        };
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), v.shape()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start > end || end > vx.cols() {
            return Err(Error::contract(format!(
                "column slice {start}..{end} out of range for {:?}",
                vx.shape()
            )));
        }
        let mut data = Vec::with_capacity(vx.rows() * (end - start));
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..end]);
        }
        let out = Tensor::matrix(vx.rows(), end - start, data)?;
        Ok(self.push_owned(out, Op::SliceCols(x, start, end), &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(indices)?;
        Ok(self.push_owned(out, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    /// Mean of the selected rows, as a `1×c` matrix.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("mean over an empty row set"));
        }
        let vx = self.value(x);
        let c = vx.cols();
        let mut acc = vec![0.0; c];
        for &r in rows {
            if r >= vx.rows() {
                return Err(Error::contract(format!("row {r} out of range")));
            }
            for (a, v) in acc.iter_mut().zip(vx.row(r)) {
                *a += v;
            }
        }
        let n = rows.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let out = Tensor::matrix(1, c, acc)?;
        Ok(self.push_owned(out, Op::MeanRows(x, rows.to_vec()), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push_owned(out, Op::Sigmoid(x), &[x])
    }

    /// Binary cross-entropy of a single probability against `y ∈ {0,1}`.
    pub fn bce(&mut self, p: Var, y: f64) -> Result<Var> {
        let vp = self.value(p);
        if vp.len() != 1 {
            return Err(Error::dim("bce", vp.shape(), &[1]));
        }
        let out = Tensor::scalar(bce_loss(vp.item(), y));
        Ok(self.push_owned(out, Op::Bce(p, y), &[p]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rows() != targets.len() || targets.is_empty() {
            return Err(Error::dim("cross_entropy", vl.shape(), &[targets.len()]));
        }
        let probs = vl.softmax_rows();
        let c = vl.cols();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::contract(format!("target {t} out of range for {c} classes")));
            }
            loss -= probs.data()[r * c + t].max(f64::MIN_POSITIVE).ln();
        }
        let out = Tensor::scalar(loss / targets.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs: probs.into_data(),
        };
        Ok(self.push_owned(out, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_owned(out, Op::Sum(x), &[x])
    }

    /// Back-propagates from a scalar node, accumulating parameter gradients
    /// into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.needs_grad {
            return Ok(());
        }
        let mut slots: Vec<Option<Tensor>> = Vec::new();
        slots.resize_with(loss.0 + 1, || None);
        slots[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = slots[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        let da = g.matmul_t(self.value(*b))?;
                        self.accum(&mut slots, grads, *a, da)?;
                    }
                    if self.needs_grad(*b) {
                        let db = self.value(*a).t_matmul(&g)?;
                        self.accum(&mut slots, grads, *b, db)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs_grad(*a) {
                        let da = g.matmul(self.value(*b))?;
                        self.accum(&mut slots, grads, *a, da)?;
                    }
                    if self.needs_grad(*b) {
                        let db = g.t_matmul(self.value(*a))?;
                        self.accum(&mut slots, grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(*b) {
                        self.accum(&mut slots, grads, *b, g.clone())?;
                    }
                    self.accum(&mut slots, grads, *a, g)?;
                }
                Op::AddRow(x, bias) => {
                    if self.needs_grad(*bias) {
                        let shape = self.value(*bias).shape().to_vec();
                        let c = g.cols();
                        let mut db = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accum(&mut slots, grads, *bias, Tensor::new(shape, db)?)?;
                    }
                    self.accum(&mut slots, grads, *x, g)?;
                }
                Op::Scale(x, alpha) => {
                    let mut g = g;
                    g.scale_assign(*alpha);
                    self.accum(&mut slots, grads, *x, g)?;
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut dx = g;
                    for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for (d, y) in drow.iter_mut().zip(yrow) {
                            *d = y * (*d - dot);
                        }
                    }
                    self.accum(&mut slots, grads, *x, dx)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = g.cols();
                    let gv = self.value(*gamma).data();
                    if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                        let mut dg = vec![0.0; d];
                        let mut db = vec![0.0; d];
                        for (r, row) in g.data().chunks(d).enumerate() {
                            for j in 0..d {
                                dg[j] += row[j] * xhat[r * d + j];
                                db[j] += row[j];
                            }
                        }
                        let gshape = self.value(*gamma).shape().to_vec();
                        let bshape = self.value(*beta).shape().to_vec();
                        if self.needs_grad(*gamma) {
                            self.accum(&mut slots, grads, *gamma, Tensor::new(gshape, dg)?)?;
                        }
                        if self.needs_grad(*beta) {
                            self.accum(&mut slots, grads, *beta, Tensor::new(bshape, db)?)?;
                        }
                    }
                    if self.needs_grad(*x) {
                        let mut dx = Tensor::zeros(g.shape());
                        let n = d as f64;
                        for (r, row) in g.data().chunks(d).enumerate() {
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut sum_dxh = 0.0;
                            let mut sum_dxh_xh = 0.0;
                            for j in 0..d {
                                let dxh = row[j] * gv[j];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh[j];
                            }
                            let out = dx.row_mut(r);
                            for j in 0..d {
                                let dxh = row[j] * gv[j];
                                out[j] = inv_std[r] / n * (n * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                            }
                        }
                        self.accum(&mut slots, grads, *x, dx)?;
                    }
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(vx.data()) {
                        *d *= gelu_grad(v);
                    }
                    self.accum(&mut slots, grads, *x, dx)?;
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        if self.needs_grad(*p) {
                            let block = g.data()[offset * c..(offset + r) * c].to_vec();
                            let shape = self.value(*p).shape().to_vec();
                            self.accum(&mut slots, grads, *p, Tensor::new(shape, block)?)?;
                        }
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.needs_grad(*p) {
                            let mut block = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                block.extend_from_slice(
                                    &g.data()[r * total + offset..r * total + offset + w],
                                );
                            }
                            let shape = self.value(*p).shape().to_vec();
                            self.accum(&mut slots, grads, *p, Tensor::new(shape, block)?)?;
                        }
                        offset += w;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let vx = self.value(*x);
                    let c = vx.cols();
                    let w = end - start;
                    let mut dx = Tensor::zeros(vx.shape());
                    for r in 0..vx.rows() {
                        dx.data_mut()[r * c + start..r * c + end]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    self.accum(&mut slots, grads, *x, dx)?;
                }
                Op::GatherRows(x, indices) => {
                    let src = &self.nodes[x.0];
                    let c = g.cols();
                    if let Op::Param(id) = src.op {
                        // Scatter straight into the parameter's accumulator;
                        // embedding tables are large and mostly untouched.
                        let slot = grads.slot(id, src.value.shape());
                        for (k, &row) in indices.iter().enumerate() {
                            let dst = &mut slot.data_mut()[row * c..(row + 1) * c];
                            for (d, v) in dst.iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                                *d += v;
                            }
                        }
                    } else {
                        let mut dx = Tensor::zeros(src.value.shape());
                        for (k, &row) in indices.iter().enumerate() {
                            let dst = dx.row_mut(row);
                            for (d, v) in dst.iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                                *d += v;
                            }
                        }
                        self.accum(&mut slots, grads, *x, dx)?;
                    }
                }
                Op::MeanRows(x, rows) => {
                    let vx = self.value(*x);
                    let scale = 1.0 / rows.len() as f64;
                    let mut dx = Tensor::zeros(vx.shape());
                    for &r in rows {
                        for (d, v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                            *d += v * scale;
                        }
                    }
                    self.accum(&mut slots, grads, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let mut dx = g;
                    for (d, s) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d *= s * (1.0 - s);
                    }
                    self.accum(&mut slots, grads, *x, dx)?;
                }
                Op::Bce(p, y) => {
                    let pv = self.value(*p).item();
                    let d = if pv <= PROB_CLAMP || pv >= 1.0 - PROB_CLAMP {
                        0.0
                    } else {
                        -y / pv + (1.0 - y) / (1.0 - pv)
                    };
                    let shape = self.value(*p).shape().to_vec();
                    let dx = Tensor::new(shape, vec![d * g.item()])?;
                    self.accum(&mut slots, grads, *p, dx)?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let vl = self.value(*logits);
                    let c = vl.cols();
                    let scale = g.item() / targets.len() as f64;
                    let mut dx = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dx[r * c + t] -= 1.0;
                    }
                    dx.iter_mut().for_each(|v| *v *= scale);
                    let dx = Tensor::new(vl.shape().to_vec(), dx)?;
                    self.accum(&mut slots, grads, *logits, dx)?;
                }
                Op::Sum(x) => {
                    let dx = Tensor::full(self.value(*x).shape(), g.item());
                    self.accum(&mut slots, grads, *x, dx)?;
                }
            }
        }
        Ok(())
    }

    fn accum(
        &self,
        slots: &mut [Option<Tensor>],
        grads: &mut Gradients,
        v: Var,
        contrib: Tensor,
    ) -> Result<()> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return Ok(());
        }
        if let Op::Param(id) = node.op {
            return grads.slot(id, node.value.shape()).add_assign(&contrib);
        }
        match &mut slots[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            empty => {
                *empty = Some(contrib);
                Ok(())
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to `[1e-12, 1-1e-12]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
