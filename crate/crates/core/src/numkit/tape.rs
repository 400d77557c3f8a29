//! Reverse-mode differentiation over a recorded list of matrix ops.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation
//! order, so walking the list backwards visits every node after all of its
//! consumers, exactly once.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use super::{NumError, ParamStore};
use crate::rng::Rng;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients of a scalar loss, keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Tanh, Activation::Sigmoid, Activation::Relu];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Vec<usize>),
    MulCol(Var, Var),
    SumCols(Var),
    SumAll(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mismatch(op: &'static str, detail: String) -> NumError {
    NumError::ShapeMismatch { op, detail }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFiniteValue { op: op_name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable parameter, copied from the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumError> {
        let value = store.get(name).ok_or_else(|| NumError::UnknownParameter(name.to_string()))?.clone();
        self.nodes.push(Node { value, op: Op::Param(name.to_string()), needs_grad: true });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A parameter that is read but not trained.
    pub fn frozen(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumError> {
        let value = store.get(name).ok_or_else(|| NumError::UnknownParameter(name.to_string()))?.clone();
        Ok(self.leaf(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        let value = super::tensor::matmul(x, y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", value, Op::MatMul(a, b), ng)
    }

    /// Adds a `1 x n` bias to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NumError> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let mut value = x.clone();
        let cols = x.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % cols];
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push("add_bias", value, Op::AddBias(a, bias), ng)
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumError> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(mismatch(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(name, value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var, NumError> {
        let value = self.value(a).map(|v| alpha * v);
        let ng = self.needs(a);
        self.push("scale", value, Op::Scale(a, alpha), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push("sigmoid", value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push("tanh", value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumError> {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push("relu", value, Op::Relu(a), ng)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var, NumError> {
        match act {
            Activation::Tanh => self.tanh(a),
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Relu => self.relu(a),
        }
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let value = softmax_rows(self.value(a));
        let ng = self.needs(a);
        self.push("softmax", value, Op::Softmax(a), ng)
    }

    /// Concatenates along columns; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = parts.first().map(|p| self.value(*p).rows()).unwrap_or(0);
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(mismatch("concat", "row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row_slice(r);
                value.row_slice_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push("concat", value, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(mismatch("slice_cols", format!("{start}..{end} of {:?}", x.shape())));
        }
        let mut value = Tensor::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            value.row_slice_mut(r).copy_from_slice(&x.row_slice(r)[start..end]);
        }
        let ng = self.needs(a);
        self.push("slice_cols", value, Op::Slice(a, start), ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(mismatch("gather", format!("row {bad} of {:?}", t.shape())));
        }
        let mut value = Tensor::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_slice_mut(r).copy_from_slice(t.row_slice(id));
        }
        let ng = self.needs(table);
        self.push("gather", value, Op::Gather(table, ids.to_vec()), ng)
    }

    /// Scales each row of `a` by the matching entry of the column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var, NumError> {
        let (x, col) = (self.value(a), self.value(c));
        if col.cols() != 1 || col.rows() != x.rows() {
            return Err(mismatch("mul_col", format!("{:?} * {:?}", x.shape(), col.shape())));
        }
        let mut value = x.clone();
        for r in 0..x.rows() {
            let s = col.data()[r];
            value.row_slice_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.needs(a) || self.needs(c);
        self.push("mul_col", value, Op::MulCol(a, c), ng)
    }

    /// Row sums as a column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, NumError> {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
        let value = Tensor::new(vec![x.rows(), 1], data)?;
        let ng = self.needs(a);
        self.push("sum_cols", value, Op::SumCols(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push("sum", value, Op::SumAll(a), ng)
    }

    /// Inverted dropout: in training, zeroes each unit with probability `p`
    /// and scales survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut Rng) -> Result<Var, NumError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumError::InvalidArgument(format!("dropout proportion {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let x = self.value(a);
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::new(
            x.shape().to_vec(),
            (0..x.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect(),
        )?;
        let m = self.leaf(mask);
        self.mul(a, m)
    }

    /// `sum_i weights[i] * -log softmax(logits_i)[targets[i]]`, a `1 x 1`
    /// node. `weights = None` means all ones.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var, NumError> {
        let x = self.value(logits);
        if targets.len() != x.rows() || weights.is_some_and(|w| w.len() != x.rows()) {
            return Err(mismatch("cross_entropy", format!("{} targets for {:?}", targets.len(), x.shape())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= x.cols()) {
            return Err(mismatch("cross_entropy", format!("target {bad} with {} classes", x.cols())));
        }
        let probs = softmax_rows(x);
        let weights = weights.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; targets.len()]);
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if w != 0.0 {
                // log-sum-exp form keeps saturated logits finite
                let row = x.row_slice(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += w * (lse - row[t]);
            }
        }
        let ng = self.needs(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights, probs };
        self.push("cross_entropy", Tensor::scalar(loss), op, ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter node.
    pub fn backward(&self, loss: Var) -> Result<Grads, NumError> {
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(mismatch("backward", format!("loss must be scalar, got {:?}", out.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);
        let mut params = Grads::new();

        fn acc<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
            grads[v.0].get_or_insert_with(|| Tensor::new(like.shape().to_vec(), vec![0.0; like.len()]).unwrap())
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => match params.get_mut(name) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        params.insert(name.clone(), g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.needs(*a) {
                        let ga = acc(&mut grads, *a, av);
                        gemm(&g, false, bv, true, ga.data_mut(), 1.0);
                    }
                    if self.needs(*b) {
                        let gb = acc(&mut grads, *b, bv);
                        gemm(av, true, &g, false, gb.data_mut(), 1.0);
                    }
                }
                Op::AddBias(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, &g).add_assign(&g);
                    }
                    if self.needs(*b) {
                        let bv = &self.nodes[b.0].value;
                        let gb = acc(&mut grads, *b, bv);
                        let cols = g.cols();
                        for (i, v) in g.data().iter().enumerate() {
                            gb.data_mut()[i % cols] += v;
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if self.needs(*a) {
                        acc(&mut grads, *a, &g).add_assign(&g);
                    }
                    if self.needs(*b) {
                        let gb = acc(&mut grads, *b, &g);
                        for (x, v) in gb.data_mut().iter_mut().zip(g.data()) {
                            *x += sign * v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (this, other) in [(a, b), (b, a)] {
                        if self.needs(*this) {
                            let ov = &self.nodes[other.0].value;
                            let gt = acc(&mut grads, *this, &g);
                            for ((x, gv), o) in gt.data_mut().iter_mut().zip(g.data()).zip(ov.data()) {
                                *x += gv * o;
                            }
                        }
                    }
                }
                Op::Scale(a, alpha) => {
                    let ga = acc(&mut grads, *a, &g);
                    for (x, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *x += alpha * v;
                    }
                }
                Op::Sigmoid(a) | Op::Tanh(a) | Op::Relu(a) => {
                    let y = &node.value;
                    let av = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, &g);
                    for i in 0..y.len() {
                        let yi = y.data()[i];
                        let d = match node.op {
                            Op::Sigmoid(_) => yi * (1.0 - yi),
                            Op::Tanh(_) => 1.0 - yi * yi,
                            _ => {
                                if av.data()[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        ga.data_mut()[i] += g.data()[i] * d;
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, &g);
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let out = ga.row_slice_mut(r);
                        for j in 0..yr.len() {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = &self.nodes[p.0].value;
                        let w = pv.cols();
                        if self.needs(*p) {
                            let gp = acc(&mut grads, *p, pv);
                            for r in 0..g.rows() {
                                let src = &g.row_slice(r)[off..off + w];
                                for (x, v) in gp.row_slice_mut(r).iter_mut().zip(src) {
                                    *x += v;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::Slice(a, start) => {
                    let av = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, av);
                    let w = g.cols();
                    for r in 0..g.rows() {
                        let dst = &mut ga.row_slice_mut(r)[*start..*start + w];
                        for (x, v) in dst.iter_mut().zip(g.row_slice(r)) {
                            *x += v;
                        }
                    }
                }
                Op::Gather(table, ids) => {
                    let tv = &self.nodes[table.0].value;
                    let gt = acc(&mut grads, *table, tv);
                    for (r, &id) in ids.iter().enumerate() {
                        for (x, v) in gt.row_slice_mut(id).iter_mut().zip(g.row_slice(r)) {
                            *x += v;
                        }
                    }
                }
                Op::MulCol(a, c) => {
                    let (av, cv) = (&self.nodes[a.0].value, &self.nodes[c.0].value);
                    if self.needs(*a) {
                        let ga = acc(&mut grads, *a, av);
                        for r in 0..g.rows() {
                            let s = cv.data()[r];
                            for (x, v) in ga.row_slice_mut(r).iter_mut().zip(g.row_slice(r)) {
                                *x += s * v;
                            }
                        }
                    }
                    if self.needs(*c) {
                        let gc = acc(&mut grads, *c, cv);
                        for r in 0..g.rows() {
                            let dot: f64 = g.row_slice(r).iter().zip(av.row_slice(r)).map(|(p, q)| p * q).sum();
                            gc.data_mut()[r] += dot;
                        }
                    }
                }
                Op::SumCols(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga = acc(&mut grads, *a, av);
                    for r in 0..av.rows() {
                        let gv = g.data()[r];
                        ga.row_slice_mut(r).iter_mut().for_each(|x| *x += gv);
                    }
                }
                Op::SumAll(a) => {
                    let av = &self.nodes[a.0].value;
                    let gv = g.data()[0];
                    acc(&mut grads, *a, av).data_mut().iter_mut().for_each(|x| *x += gv);
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let gv = g.data()[0];
                    let gl = acc(&mut grads, *logits, probs);
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let p = probs.row_slice(r);
                        let out = gl.row_slice_mut(r);
                        for j in 0..p.len() {
                            let y = if j == t { 1.0 } else { 0.0 };
                            out[j] += gv * w * (p[j] - y);
                        }
                    }
                }
            }
        }
        if params.values().any(|g| !g.is_finite()) {
            return Err(NumError::NonFiniteValue { op: "backward" });
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_values() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::row(vec![0.0, 0.0]));
        let s = t.softmax(z).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
        let sg = t.sigmoid(z).unwrap();
        assert_eq!(t.value(sg).data(), &[0.5, 0.5]);
        let logits = t.leaf(Tensor::row(vec![0.9f64.ln(), 0.1f64.ln()]));
        let ce = t.cross_entropy(logits, &[0], None).unwrap();
        assert!((t.value(ce).data()[0] - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 2));
        assert!(t.matmul(a, a).is_err());
        assert!(t.add(a, b).is_err());
        assert!(t.add_bias(a, b).is_err());
        assert!(t.slice_cols(a, 2, 4).is_err());
        assert!(t.gather(a, &[2]).is_err());
        assert!(t.cross_entropy(a, &[0], None).is_err());
        assert!(t.cross_entropy(a, &[0, 3], None).is_err());
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn non_finite_values_trip() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![1e308]));
        assert_eq!(t.scale(a, 10.0).unwrap_err(), NumError::NonFiniteValue { op: "scale" });
    }

    #[test]
    fn dropout_modes() {
        let mut rng = crate::rng::seeded(1);
        let mut t = Tape::new();
        let a = t.leaf(Tensor::filled(1, 10_000, 1.0));
        assert_eq!(t.dropout(a, 0.4, false, &mut rng).unwrap(), a);
        let d = t.dropout(a, 0.4, true, &mut rng).unwrap();
        let v = t.value(d);
        let zeros = v.data().iter().filter(|x| **x == 0.0).count();
        assert!((zeros as f64 / 10_000.0 - 0.4).abs() < 0.03);
        assert!(t.dropout(a, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn linear_square_gradient() {
        // y = w x, loss = y^2, w = 1, x = 2 -> dL/dw = 2 w x x = 8
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0));
        let mut t = Tape::new();
        let w = t.param(&store, "w").unwrap();
        let x = t.leaf(Tensor::scalar(2.0));
        let y = t.matmul(x, w).unwrap();
        let sq = t.mul(y, y).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g["w"].data(), &[8.0]);
    }
}
