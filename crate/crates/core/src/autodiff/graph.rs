//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in creation order, so node index order is a valid
//! topological order. Every backward rule is written in terms of graph ops:
//! when the backward pass records (`create_graph`), the returned gradients are
//! themselves differentiable, which is what Hessian-vector products use.

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Arithmetic precision of node values.
///
/// `F32` rounds every op result to single precision (storage emulation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Powf(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    IndexSelect { x: Var, axis: usize, idx: Vec<usize> },
    IndexAdd { x: Var, axis: usize, idx: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A dynamically built computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    /// When false, new nodes are recorded as constants (no parent links).
    record: bool,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// (outer, dim, inner) decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Graph {
            nodes: Vec::with_capacity(512),
            precision,
            record: true,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, mut value: Tensor, op: Op, parents: &[Var]) -> Var {
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        let rg = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let t = self.value(a).add(self.value(b));
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let t = self.value(a).sub(self.value(b));
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b)?;
        let t = self.value(a).zip(self.value(b), |x, y| x / y);
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("maximum", a, b)?;
        let t = self.value(a).zip(self.value(b), f64::max);
        Ok(self.push(t, Op::Maximum(a, b), &[a, b]))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("minimum", a, b)?;
        let t = self.value(a).zip(self.value(b), f64::min);
        Ok(self.push(t, Op::Minimum(a, b), &[a, b]))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| -v);
        self.push(t, Op::Neg(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).scale(c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Log(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        self.push(t, Op::Abs(x), &[x])
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let t = match p {
            2.0 => self.value(x).map(|v| v * v),
            3.0 => self.value(x).map(|v| v * v * v),
            -0.5 => self.value(x).map(|v| 1.0 / v.sqrt()),
            -1.5 => self.value(x).map(|v| 1.0 / (v * v.sqrt())),
            _ => self.value(x).map(|v| v.powf(p)),
        };
        self.push(t, Op::Powf(x, p), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same operand")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Transpose of a 2-D value.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(shape_err("transpose", self.shape(x), &[0, 0]));
        }
        let t = self.value(x).transpose2();
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let t = self.value(x).reshaped(shape);
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        if !tensor::broadcastable(self.shape(x), shape) {
            return Err(shape_err("broadcast_to", self.shape(x), shape));
        }
        let t = tensor::broadcast_to(self.value(x), shape);
        Ok(self.push(t, Op::BroadcastTo(x), &[x]))
    }

    /// Sums `x` down to a shape it broadcasts from.
    pub fn sum_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        if !tensor::broadcastable(shape, self.shape(x)) {
            return Err(shape_err("sum_to", self.shape(x), shape));
        }
        let t = tensor::sum_to(self.value(x), shape);
        Ok(self.push(t, Op::SumTo(x), &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        self.sum_to(x, &[]).expect("any shape sums to a scalar")
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", &shape, &[axis]));
        }
        shape[axis] = 1;
        self.sum_to(x, &shape)
    }

    /// Max along `axis`, keeping it with size 1. Gradient goes to the first maximizer.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("max_axis", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut bv = data[o * dim * inner + i];
                for d in 1..dim {
                    let v = data[(o * dim + d) * inner + i];
                    if v > bv {
                        bv = v;
                        best = d;
                    }
                }
                out.push(bv);
                argmax.push(best);
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        let t = Tensor::from_vec(&oshape, out);
        Ok(self.push(t, Op::MaxAxis { x, axis, argmax }, &[x]))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let t = Tensor::from_vec(&oshape, out);
        Ok(self.push(t, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Zero-pad `axis` to `size`, placing `x` at offset `start`.
    pub fn pad(&mut self, x: Var, axis: usize, start: usize, size: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + shape[axis] > size {
            return Err(shape_err("pad", &shape, &[axis, start, size]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * size * inner];
        for o in 0..outer {
            let dst = (o * size + start) * inner;
            out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = size;
        let t = Tensor::from_vec(&oshape, out);
        Ok(self.push(t, Op::Pad { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().enumerate().all(|(i, &d)| i == axis || d == first[i]);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        let t = Tensor::from_vec(&oshape, out);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Gather entries `idx` along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || idx.iter().any(|&i| i >= shape[axis]) {
            return Err(shape_err("index_select", &shape, idx));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * dim + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut oshape = shape;
        oshape[axis] = idx.len();
        let t = Tensor::from_vec(&oshape, out);
        Ok(self.push(
            t,
            Op::IndexSelect {
                x,
                axis,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Scatter-add slices of `x` along `axis` into a zero tensor with `size` entries there.
    pub fn index_add(&mut self, x: Var, axis: usize, idx: &[usize], size: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] != idx.len() || idx.iter().any(|&i| i >= size) {
            return Err(shape_err("index_add", &shape, idx));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * size * inner];
        for o in 0..outer {
            for (j, &i) in idx.iter().enumerate() {
                let s = (o * len + j) * inner;
                let d = (o * size + i) * inner;
                for k in 0..inner {
                    out[d + k] += src[s + k];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = size;
        let t = Tensor::from_vec(&oshape, out);
        Ok(self.push(
            t,
            Op::IndexAdd {
                x,
                axis,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    fn mask_const(&mut self, like: Var, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(like).map(f);
        self.constant(t)
    }

    /// Vector-Jacobian products of node `i` given upstream gradient `g`.
    fn vjp(&mut self, i: usize, g: Var) -> Vec<(Var, Var)> {
        const OK: &str = "backward shapes are consistent by construction";
        let op = self.nodes[i].op.clone();
        let y = Var(i);
        let need = |s: &Self, v: Var| s.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((a, g));
                out.push((b, g));
            }
            Op::Sub(a, b) => {
                out.push((a, g));
                if need(self, b) {
                    let n = self.neg(g);
                    out.push((b, n));
                }
            }
            Op::Mul(a, b) => {
                if need(self, a) {
                    let ga = self.mul(g, b).expect(OK);
                    out.push((a, ga));
                }
                if need(self, b) {
                    let gb = self.mul(g, a).expect(OK);
                    out.push((b, gb));
                }
            }
            Op::Div(a, b) => {
                if need(self, a) {
                    let ga = self.div(g, b).expect(OK);
                    out.push((a, ga));
                }
                if need(self, b) {
                    let t = self.div(y, b).expect(OK);
                    let t = self.mul(g, t).expect(OK);
                    let gb = self.neg(t);
                    out.push((b, gb));
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(self.nodes[i].op, Op::Maximum(..));
                let mask = self
                    .value(a)
                    .zip(self.value(b), |x, z| {
                        let pick_a = if is_max { x >= z } else { x <= z };
                        if pick_a {
                            1.0
                        } else {
                            0.0
                        }
                    });
                if need(self, a) {
                    let m = self.constant(mask.clone());
                    let ga = self.mul(g, m).expect(OK);
                    out.push((a, ga));
                }
                if need(self, b) {
                    let m = self.constant(mask.map(|v| 1.0 - v));
                    let gb = self.mul(g, m).expect(OK);
                    out.push((b, gb));
                }
            }
            Op::Neg(a) => {
                let n = self.neg(g);
                out.push((a, n));
            }
            Op::Scale(a, c) => {
                let s = self.scale(g, c);
                out.push((a, s));
            }
            Op::AddScalar(a) => out.push((a, g)),
            Op::Exp(a) => {
                let ga = self.mul(g, y).expect(OK);
                out.push((a, ga));
            }
            Op::Log(a) => {
                let ga = self.div(g, a).expect(OK);
                out.push((a, ga));
            }
            Op::Tanh(a) => {
                let yy = self.mul(y, y).expect(OK);
                let n = self.neg(yy);
                let d = self.add_scalar(n, 1.0);
                let ga = self.mul(g, d).expect(OK);
                out.push((a, ga));
            }
            Op::Sigmoid(a) => {
                let n = self.neg(y);
                let one_minus = self.add_scalar(n, 1.0);
                let d = self.mul(y, one_minus).expect(OK);
                let ga = self.mul(g, d).expect(OK);
                out.push((a, ga));
            }
            Op::Relu(a) => {
                let m = self.mask_const(a, |v| if v > 0.0 { 1.0 } else { 0.0 });
                let ga = self.mul(g, m).expect(OK);
                out.push((a, ga));
            }
            Op::Abs(a) => {
                let m = self.mask_const(a, |v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let ga = self.mul(g, m).expect(OK);
                out.push((a, ga));
            }
            Op::Powf(a, p) => {
                let d = if p == 1.0 {
                    g
                } else {
                    let pm = self.powf(a, p - 1.0);
                    self.mul(g, pm).expect(OK)
                };
                let ga = self.scale(d, p);
                out.push((a, ga));
            }
            Op::MatMul(a, b) => {
                if need(self, a) {
                    let bt = self.transpose(b).expect(OK);
                    let ga = self.matmul(g, bt).expect(OK);
                    out.push((a, ga));
                }
                if need(self, b) {
                    let at = self.transpose(a).expect(OK);
                    let gb = self.matmul(at, g).expect(OK);
                    out.push((b, gb));
                }
            }
            Op::Transpose(a) => {
                let ga = self.transpose(g).expect(OK);
                out.push((a, ga));
            }
            Op::Reshape(a) => {
                let s = self.shape(a).to_vec();
                let ga = self.reshape(g, &s).expect(OK);
                out.push((a, ga));
            }
            Op::BroadcastTo(a) => {
                let s = self.shape(a).to_vec();
                let ga = self.sum_to(g, &s).expect(OK);
                out.push((a, ga));
            }
            Op::SumTo(a) => {
                let s = self.shape(a).to_vec();
                let ga = self.broadcast_to(g, &s).expect(OK);
                out.push((a, ga));
            }
            Op::MaxAxis { x, axis, argmax } => {
                let s = self.shape(x).to_vec();
                let (outer, dim, inner) = split_axis(&s, axis);
                let mut mask = vec![0.0; outer * dim * inner];
                for o in 0..outer {
                    for k in 0..inner {
                        mask[(o * dim + argmax[o * inner + k]) * inner + k] = 1.0;
                    }
                }
                let m = self.constant(Tensor::from_vec(&s, mask));
                let gb = self.broadcast_to(g, &s).expect(OK);
                let gx = self.mul(gb, m).expect(OK);
                out.push((x, gx));
            }
            Op::Narrow { x, axis, start } => {
                let size = self.shape(x)[axis];
                let gx = self.pad(g, axis, start, size).expect(OK);
                out.push((x, gx));
            }
            Op::Pad { x, axis, start } => {
                let len = self.shape(x)[axis];
                let gx = self.narrow(g, axis, start, len).expect(OK);
                out.push((x, gx));
            }
            Op::Concat { parts, axis } => {
                let mut off = 0;
                for p in parts {
                    let len = self.shape(p)[axis];
                    if need(self, p) {
                        let gp = self.narrow(g, axis, off, len).expect(OK);
                        out.push((p, gp));
                    }
                    off += len;
                }
            }
            Op::IndexSelect { x, axis, idx } => {
                let size = self.shape(x)[axis];
                let gx = self.index_add(g, axis, &idx, size).expect(OK);
                out.push((x, gx));
            }
            Op::IndexAdd { x, axis, idx } => {
                let gx = self.index_select(g, axis, &idx).expect(OK);
                out.push((x, gx));
            }
        }
        out
    }

    /// Reverse-mode gradients of scalar `root` with respect to `wrt`.
    ///
    /// With `create_graph` the returned nodes are differentiable functions of
    /// the graph inputs; otherwise they are constants. Inputs that do not
    /// influence `root` receive zeros.
    pub fn backward(&mut self, root: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !self.shape(root).is_empty() {
            return Err(Error::NonScalarTarget(self.shape(root).to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Var>> = vec![None; n];
        let saved = self.record;
        self.record = create_graph;
        let seed = self.constant(Tensor::scalar(1.0));
        grads[root.0] = Some(seed);
        for i in (0..n).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (p, contrib) in self.vjp(i, g) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                grads[p.0] = Some(match grads[p.0] {
                    None => contrib,
                    Some(acc) => self.add(acc, contrib).expect("gradient shapes agree"),
                });
            }
        }
        let out = wrt
            .iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    self.constant(z)
                }
            })
            .collect();
        self.record = saved;
        Ok(out)
    }

    /// Numeric gradients of `root` with respect to `wrt`.
    pub fn gradients(&mut self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let gs = self.backward(root, wrt, false)?;
        Ok(gs.into_iter().map(|g| self.value(g).clone()).collect())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
