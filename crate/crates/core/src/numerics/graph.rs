//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value, so node ids are
//! topologically ordered by construction. [`Graph::backward`] walks the tape
//! in reverse and accumulates adjoints additively over fan-out.

use alloc::vec;
use alloc::vec::Vec;

use super::array::{axis_split, NumArray};
use crate::error::{contract, Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    ClampMin(NodeId, f64),
    Softmax(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Reshape(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: NumArray,
}

/// A recorded computation. Build it with the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of every leaf with respect to one scalar output.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<NumArray>>,
}

impl Gradients {
    /// Gradient of a leaf node. `None` for interior nodes.
    pub fn get(&self, id: NodeId) -> Option<&NumArray> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<NumArray> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &NumArray, b: &NumArray) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map(a: &NumArray, f: impl Fn(f64) -> f64) -> NumArray {
    NumArray::from_parts_unchecked(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &NumArray, b: &NumArray, f: impl Fn(f64, f64) -> f64) -> NumArray {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    NumArray::from_parts_unchecked(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_forward(x: &NumArray, axis: usize) -> NumArray {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..n {
                max = max.max(src[idx(i)]);
            }
            let mut total = 0.0;
            for i in 0..n {
                let e = libm::exp(src[idx(i)] - max);
                out[idx(i)] = e;
                total += e;
            }
            for i in 0..n {
                out[idx(i)] /= total;
            }
        }
    }
    NumArray::from_parts_unchecked(x.shape().to_vec(), out)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
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

    pub fn value(&self, id: NodeId) -> &NumArray {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: NumArray) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds an input. Leaves receive gradients; a leaf the caller never
    /// differentiates with respect to acts as a constant.
    pub fn leaf(&mut self, value: NumArray) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = NumArray::from_parts_unchecked(vec![m, n], out);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let value = zip(av, bv, f);
        Ok(self.push(make(a, b), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Adds a bias vector of length `cols` to every row of a `[rows, cols]` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (_, cols) = av.dims2()?;
        if bv.len() != cols {
            return Err(Error::Shape {
                op: "add_row",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let b = bv.data();
        let data = av
            .data()
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = NumArray::from_parts_unchecked(av.shape().to_vec(), data);
        Ok(self.push(Op::AddRow(a, bias), value))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = map(self.value(a), |x| x * s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = map(self.value(a), |x| x + s);
        self.push(Op::AddScalar(a), value)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), libm::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), libm::log);
        self.push(Op::Ln(a), value)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), |x| x * x);
        self.push(Op::Square(a), value)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), libm::sqrt);
        self.push(Op::Sqrt(a), value)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), |x| 1.0 / x);
        self.push(Op::Recip(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), |x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = map(self.value(a), softplus);
        self.push(Op::Softplus(a), value)
    }

    /// Elementwise `max(x, floor)`; zero gradient where the floor is active.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let value = map(self.value(a), |x| x.max(floor));
        self.push(Op::ClampMin(a, floor), value)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(contract!(
                "softmax axis {axis} out of range for {:?}",
                av.shape()
            ));
        }
        let value = softmax_forward(av, axis);
        Ok(self.push(Op::Softmax(a, axis), value))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = NumArray::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = NumArray::scalar(v.sum() / v.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(contract!(
                "sum axis {axis} out of range for {:?}",
                av.shape()
            ));
        }
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let src = av.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let base = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        let value = NumArray::from_parts_unchecked(reduced_shape(av.shape(), axis), out);
        Ok(self.push(Op::SumAxis(a, axis), value))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| contract!("concat needs at least one input"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(contract!("concat axis {axis} out of range for {base:?}"));
        }
        let mut extent = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = NumArray::from_parts_unchecked(shape, out);
        Ok(self.push(Op::Concat(parts.to_vec(), axis), value))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        if axis >= av.rank() || len == 0 || start + len > av.shape()[axis] {
            return Err(contract!(
                "slice [{start}, {}) on axis {axis} out of range for {:?}",
                start + len,
                av.shape()
            ));
        }
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let src = av.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let value = NumArray::from_parts_unchecked(shape, out);
        Ok(self.push(
            Op::Slice {
                input: a,
                axis,
                start,
            },
            value,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Reverse pass from a single-element node.
    ///
    /// Every leaf created before `output` receives a gradient; leaves that do
    /// not influence `output` receive exact zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(contract!(
                "backward needs a scalar output, got shape {:?}",
                out_val.shape()
            ));
        }
        let mut adj: Vec<Option<NumArray>> = vec![None; output.0 + 1];
        adj[output.0] = Some(NumArray::full(out_val.shape(), 1.0)?);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }

        for (idx, slot) in adj.iter_mut().enumerate() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if slot.is_none() {
                    *slot = Some(NumArray::zeros_like(&self.nodes[idx].value));
                }
            } else {
                *slot = None;
            }
        }
        Ok(Gradients { grads: adj })
    }

    fn propagate(&self, node: &Node, g: &NumArray, adj: &mut [Option<NumArray>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let gd = g.data();
                // dA = G · Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                // dB = Aᵀ · G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = av.data()[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for (o, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += a_ip * gv;
                        }
                    }
                }
                accumulate(adj, *a, NumArray::from_parts_unchecked(vec![m, k], da));
                accumulate(adj, *b, NumArray::from_parts_unchecked(vec![k, n], db));
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, zip(g, val(*b), |g, b| g * b));
                accumulate(adj, *b, zip(g, val(*a), |g, a| g * a));
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                accumulate(adj, *a, zip(g, bv, |g, b| g / b));
                // d(a/b)/db = -y/b
                let gy = zip(g, y, |g, y| g * y);
                accumulate(adj, *b, zip(&gy, bv, |gy, b| -gy / b));
            }
            Op::AddRow(a, bias) => {
                accumulate(adj, *a, g.clone());
                let bshape = val(*bias).shape().to_vec();
                let cols = val(*bias).len();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks_exact(cols) {
                    for (o, v) in db.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                accumulate(adj, *bias, NumArray::from_parts_unchecked(bshape, db));
            }
            Op::Scale(a, s) => accumulate(adj, *a, map(g, |x| x * s)),
            Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
            Op::Exp(a) => accumulate(adj, *a, zip(g, y, |g, y| g * y)),
            Op::Ln(a) => accumulate(adj, *a, zip(g, val(*a), |g, x| g / x)),
            Op::Square(a) => accumulate(adj, *a, zip(g, val(*a), |g, x| 2.0 * x * g)),
            Op::Sqrt(a) => accumulate(adj, *a, zip(g, y, |g, y| g / (2.0 * y))),
            Op::Recip(a) => accumulate(adj, *a, zip(g, y, |g, y| -g * y * y)),
            Op::Relu(a) => accumulate(
                adj,
                *a,
                zip(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::Sigmoid(a) => accumulate(adj, *a, zip(g, y, |g, y| g * y * (1.0 - y))),
            Op::Softplus(a) => accumulate(adj, *a, zip(g, val(*a), |g, x| g * sigmoid(x))),
            Op::ClampMin(a, floor) => accumulate(
                adj,
                *a,
                zip(g, val(*a), |g, x| if x >= *floor { g } else { 0.0 }),
            ),
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut dx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| gd[idx(i)] * yd[idx(i)]).sum();
                        for i in 0..n {
                            dx[idx(i)] = yd[idx(i)] * (gd[idx(i)] - dot);
                        }
                    }
                }
                accumulate(
                    adj,
                    *a,
                    NumArray::from_parts_unchecked(y.shape().to_vec(), dx),
                );
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                accumulate(adj, *a, map(val(*a), |_| gv));
            }
            Op::Mean(a) => {
                let av = val(*a);
                let gv = g.data()[0] / av.len() as f64;
                accumulate(adj, *a, map(av, |_| gv));
            }
            Op::SumAxis(a, axis) => {
                let av = val(*a);
                let (outer, n, inner) = axis_split(av.shape(), *axis);
                let gd = g.data();
                let mut dx = vec![0.0; av.len()];
                for o in 0..outer {
                    for i in 0..n {
                        let base = (o * n + i) * inner;
                        dx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(
                    adj,
                    *a,
                    NumArray::from_parts_unchecked(av.shape().to_vec(), dx),
                );
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(y.shape(), *axis);
                let gd = g.data();
                let mut pieces: Vec<Vec<f64>> = parts
                    .iter()
                    .map(|p| Vec::with_capacity(val(*p).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (k, p) in parts.iter().enumerate() {
                        let chunk = val(*p).shape()[*axis] * inner;
                        pieces[k].extend_from_slice(&gd[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                for (p, data) in parts.iter().zip(pieces) {
                    let shape = val(*p).shape().to_vec();
                    accumulate(adj, *p, NumArray::from_parts_unchecked(shape, data));
                }
            }
            Op::Slice { input, axis, start } => {
                let av = val(*input);
                let (outer, n, inner) = axis_split(av.shape(), *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![0.0; av.len()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    dx[to..to + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                accumulate(
                    adj,
                    *input,
                    NumArray::from_parts_unchecked(av.shape().to_vec(), dx),
                );
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                accumulate(
                    adj,
                    *a,
                    NumArray::from_parts_unchecked(shape, g.data().to_vec()),
                );
            }
        }
    }
}

fn accumulate(adj: &mut [Option<NumArray>], id: NodeId, delta: NumArray) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}
