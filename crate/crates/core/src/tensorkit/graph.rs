//! A reverse-mode tape over a fixed set of matrix operations.
//!
//! Every forward computation in the model is recorded on a [`Graph`]; calling
//! [`Graph::backward`] on a `1×1` node returns gradients for every trainable
//! parameter that contributed to it. Frozen parameters and constants never
//! receive gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensorkit::kernels::{self, sigmoid};
use crate::tensorkit::{Gradients, Matrix, ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Silu(Var),
    Softplus(Var),
    Softmax(Var),
    RmsNorm(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ShiftRows(Var, isize),
    CrossEntropy {
        logits: Var,
        target: Matrix,
        mask: Vec<bool>,
    },
    SquaredError {
        pred: Var,
        target: Matrix,
        mask: Vec<bool>,
    },
    SumScalars(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, false)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(x, bias), ng))
    }

    /// Scales every row of `x` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let value = self.value(x).mul_row(self.value(scale))?;
        let ng = self.ng(x) || self.ng(scale);
        Ok(self.push(value, Op::MulRow(x, scale), ng))
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, x: Var, mask: Matrix) -> Result<Var> {
        let value = self.value(x).zip_map(&mask, |a, b| a * b)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::MulConst(x, mask), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = kernels::silu(self.value(x));
        let ng = self.ng(x);
        self.push(value, Op::Silu(x), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::softplus);
        let ng = self.ng(x);
        self.push(value, Op::Softplus(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let value = kernels::softmax_rows_masked(self.value(x), causal);
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Row normalization without the learnable scale.
    pub fn rms_normalize(&mut self, x: Var, eps: f64) -> Var {
        let value = kernels::rms_normalize(self.value(x), eps);
        let ng = self.ng(x);
        self.push(value, Op::RmsNorm(x, eps), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, len)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::SliceCols(x, start), ng))
    }

    pub fn shift_rows(&mut self, x: Var, offset: isize) -> Var {
        let value = self.value(x).shift_rows(offset);
        let ng = self.ng(x);
        self.push(value, Op::ShiftRows(x, offset), ng)
    }

    /// `-Σ_r mask_r Σ_j target_rj · log softmax(logits)_rj` as a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, target: Matrix, mask: Vec<bool>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != target.shape() || mask.len() != lv.rows() {
            return Err(Error::dim(format!(
                "cross entropy logits {:?}, targets {:?}, mask {}",
                lv.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let logp = kernels::log_softmax_rows(lv);
        let mut total = 0.0;
        for r in 0..lv.rows() {
            if mask[r] {
                total -= target
                    .row(r)
                    .iter()
                    .zip(logp.row(r))
                    .map(|(t, l)| if *t == 0.0 { 0.0 } else { t * l })
                    .sum::<f64>();
            }
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::CrossEntropy {
                logits,
                target,
                mask,
            },
            ng,
        ))
    }

    /// `Σ_i mask_i (target_i − pred_i)²` over the entries of an `n×1` or `1×n` prediction.
    pub fn squared_error(&mut self, pred: Var, target: Matrix, mask: Vec<bool>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || mask.len() != pv.len() {
            return Err(Error::dim(format!(
                "squared error pred {:?}, target {:?}, mask {}",
                pv.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let total = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|((p, t), _)| (t - p) * (t - p))
            .sum::<f64>();
        let ng = self.ng(pred);
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::SquaredError { pred, target, mask },
            ng,
        ))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut total = 0.0;
        for &p in parts {
            let v = self.value(p);
            if v.shape() != (1, 1) {
                return Err(Error::dim("sum_scalars expects 1x1 nodes"));
            }
            total += v.get(0, 0);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::SumScalars(parts.to_vec()),
            ng,
        ))
    }

    /// Gradients of the scalar node `loss` with respect to every trainable parameter on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim("backward needs a 1x1 loss node"));
        }
        let mut grads = Gradients::new(self.store.len());
        let mut adj: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, d: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.add(*id, &g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.matmul_t(self.value(*b))?);
                    }
                    if self.ng(*b) {
                        send(*b, self.value(*a).t_matmul(&g)?);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.matmul(self.value(*b))?);
                    }
                    if self.ng(*b) {
                        send(*b, g.t_matmul(self.value(*a))?);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(x, bias) => {
                    send(*bias, g.sum_rows());
                    send(*x, g);
                }
                Op::MulRow(x, s) => {
                    if self.ng(*s) {
                        send(*s, g.zip_map(self.value(*x), |a, b| a * b)?.sum_rows());
                    }
                    if self.ng(*x) {
                        send(*x, g.mul_row(self.value(*s))?);
                    }
                }
                Op::MulConst(x, mask) => send(*x, g.zip_map(mask, |a, b| a * b)?),
                Op::Scale(x, s) => send(*x, g.scale(*s)),
                Op::Silu(x) => {
                    let d = g.zip_map(self.value(*x), |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })?;
                    send(*x, d);
                }
                Op::Softplus(x) => send(*x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv))?),
                Op::Softmax(x) => {
                    let p = &node.value;
                    let mut d = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = p.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, pv), gv) in d.row_mut(r).iter_mut().zip(p.row(r)).zip(g.row(r)) {
                            *o = pv * (gv - dot);
                        }
                    }
                    send(*x, d);
                }
                Op::RmsNorm(x, eps) => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let width = xv.cols() as f64;
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let ms = xv.row(r).iter().map(|v| v * v).sum::<f64>() / width + eps;
                        if ms == 0.0 {
                            continue;
                        }
                        let s = ms.sqrt();
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * dot / width) / s;
                        }
                    }
                    send(*x, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.ng(p) {
                            send(p, g.slice_rows(start, rows)?);
                        }
                        start += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        if self.ng(p) {
                            send(p, g.slice_cols(start, cols)?);
                        }
                        start += cols;
                    }
                }
                Op::SliceRows(x, start) => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        d.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    send(*x, d);
                }
                Op::SliceCols(x, start) => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(*x, d);
                }
                Op::ShiftRows(x, offset) => send(*x, g.shift_rows(-offset)),
                Op::CrossEntropy {
                    logits,
                    target,
                    mask,
                } => {
                    let upstream = g.get(0, 0);
                    let p = kernels::softmax_rows(self.value(*logits));
                    let mut d = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        if !mask[r] {
                            continue;
                        }
                        let mass: f64 = target.row(r).iter().sum();
                        for ((o, pv), tv) in d.row_mut(r).iter_mut().zip(p.row(r)).zip(target.row(r)) {
                            *o = upstream * (pv * mass - tv);
                        }
                    }
                    send(*logits, d);
                }
                Op::SquaredError { pred, target, mask } => {
                    let upstream = g.get(0, 0);
                    let pv = self.value(*pred);
                    let mut d = Matrix::zeros(pv.rows(), pv.cols());
                    for (i, o) in d.data_mut().iter_mut().enumerate() {
                        if mask[i] {
                            *o = -2.0 * upstream * (target.data()[i] - pv.data()[i]);
                        }
                    }
                    send(*pred, d);
                }
                Op::SumScalars(parts) => {
                    for &p in parts {
                        send(p, g.clone());
                    }
                }
            }
        }
        Ok(grads)
    }
}
