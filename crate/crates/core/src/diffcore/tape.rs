//! Tape-based reverse-mode automatic differentiation over dense arrays.
//!
//! Every forward op appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! the parents. Nodes are created in topological order by construction, so
//! the graph is acyclic.
//!
//! Binary elementwise ops broadcast only in two cases: one operand is a
//! single element, or its shape is a trailing suffix of the other's.

use super::array::{split_axis, Array};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Relu,
    Tanh,
    Sin,
    Cos,
    Abs,
    Sigmoid,
    Neg,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Exp => "exp",
            Unary::Relu => "relu",
            Unary::Tanh => "tanh",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Abs => "abs",
            Unary::Sigmoid => "sigmoid",
            Unary::Neg => "neg",
            Unary::Square => "square",
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Exp => x.exp(),
            Unary::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Abs => x.abs(),
            Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Unary::Neg => -x,
            Unary::Square => x * x,
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Unary::Exp => y,
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Tanh => T::one() - y * y,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Neg => -T::one(),
            Unary::Square => x + x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// A fused operation with a hand-written vector-Jacobian product.
///
/// The forward value is computed by the caller and handed to
/// [`Tape::custom`]; the op only needs to know how to pull a gradient back.
pub trait CustomOp<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` for inputs it does not
    /// differentiate).
    fn backward(
        &self,
        inputs: &[&Array<T>],
        output: &Array<T>,
        grad_output: &Array<T>,
    ) -> Result<Vec<Option<Array<T>>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Slice { input: Var, axis: usize, start: usize },
    MaxPool { input: Var, axis: usize, argmax: Vec<usize> },
    Sum { input: Var, axis: usize },
    SumAll(Var),
    NormalizeL2 { input: Var, norms: Vec<T> },
    Broadcast(Var),
    Gather { input: Var, rows: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Scalar> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Unary(u, _) => u.name(),
            Op::Scale(..) => "scale",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::MaxPool { .. } => "max_pool",
            Op::Sum { .. } => "sum",
            Op::SumAll(_) => "sum_all",
            Op::NormalizeL2 { .. } => "normalize_l2",
            Op::Broadcast(_) => "broadcast",
            Op::Gather { .. } => "gather",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::Broadcast(a) => vec![*a],
            Op::Slice { input, .. }
            | Op::MaxPool { input, .. }
            | Op::Sum { input, .. }
            | Op::NormalizeL2 { input, .. }
            | Op::Gather { input, .. } => vec![*input],
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Array<T>,
    grad: Option<Array<T>>,
    requires_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// `true` if `small` can be broadcast against `big`.
fn broadcastable(small: &[usize], big: &[usize]) -> bool {
    let n: usize = small.iter().product();
    n == 1 || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Array<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue { op: op.tag() });
        }
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Array<T>) -> Result<Var> {
        self.push(Op::Leaf, value)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Array<T>) -> Result<Var> {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, value: T) -> Result<Var> {
        self.constant(Array::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient, or exact zeros when the node did not influence the loss.
    pub fn grad_or_zeros(&self, v: Var) -> Array<T> {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(self.shape(v).to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let out_shape = if sa == sb || broadcastable(sb, sa) {
            sa.to_vec()
        } else if broadcastable(sa, sb) {
            sb.to_vec()
        } else {
            let name = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::shape(name, sa, sb));
        };
        let (ad, bd) = (av.data(), bv.data());
        let (la, lb) = (ad.len(), bd.len());
        let n = la.max(lb);
        let data = (0..n)
            .map(|i| {
                let (x, y) = (ad[i % la], bd[i % lb]);
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let value = Array::new(out_shape, data)?;
        self.push(Op::Binary(kind, a, b), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `(m, k) · (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Array::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| kind.apply(x));
        self.push(Op::Unary(kind, a), value)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sin, a)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Cos, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero arrays".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let val = self.value(*v);
                let block = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Array::new(out_shape, data)?;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a), value)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&av.data()[base + start * inner..base + end * inner]);
        }
        let value = Array::new(out_shape, data)?;
        self.push(
            Op::Slice {
                input: a,
                axis,
                start,
            },
            value,
        )
    }

    /// Maximum along `axis`, which is removed from the shape. Ties resolve to
    /// the first index.
    pub fn max_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("max_pool", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let d = av.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = d[o * len * inner + i];
                for j in 1..len {
                    let v = d[(o * len + j) * inner + i];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                data.push(best_v);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Array::new(out_shape, data)?;
        self.push(
            Op::MaxPool {
                input: a,
                axis,
                argmax,
            },
            value,
        )
    }

    /// Sum along `axis`, which is removed from the shape.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = av.data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += d[(o * len + j) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Array::new(out_shape, data)?;
        self.push(Op::Sum { input: a, axis }, value)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Array::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::from_usize_lossy(n))
    }

    /// Unit-normalizes along the last axis. Zero rows stay zero.
    pub fn normalize_l2(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let w = *av.shape().last().unwrap_or(&1);
        let mut data = av.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / w.max(1));
        for row in data.chunks_mut(w.max(1)) {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            let denom = if n > T::zero() { n } else { T::one() };
            for x in row.iter_mut() {
                *x /= denom;
            }
            norms.push(denom);
        }
        let value = Array::new(av.shape().to_vec(), data)?;
        self.push(Op::NormalizeL2 { input: a, norms }, value)
    }

    /// Repeats `a` to `shape`; `a` must be a single element or a trailing
    /// suffix of `shape`.
    pub fn broadcast(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let av = self.value(a);
        if !broadcastable(av.shape(), &shape) {
            return Err(Error::shape("broadcast", av.shape(), &shape));
        }
        let d = av.data();
        let value = Array::from_fn(shape, |i| d[i % d.len()]);
        self.push(Op::Broadcast(a), value)
    }

    /// Selects entries along the leading axis (repetition allowed).
    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("gather", &shape, &[rows.len()]));
        }
        let w = av.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= shape[0] {
                return Err(Error::shape("gather", &shape, &[r]));
            }
            data.extend_from_slice(av.row(r));
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let value = Array::new(out_shape, data)?;
        self.push(
            Op::Gather {
                input: a,
                rows: rows.to_vec(),
            },
            value,
        )
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Array<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
        )
    }

    /// Populates gradients of every node reachable from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalarLoss(shape));
        }
        self.zero_grad();
        self.nodes[loss.0].grad = Some(Array::full(shape, T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.vjp(idx, &g)?;
            self.nodes[idx].grad = Some(g);
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(Error::NonFiniteValue {
                        op: self.nodes[idx].op.tag(),
                    });
                }
                match &mut self.nodes[parent.0].grad {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, g: &Array<T>) -> Result<Vec<(Var, Array<T>)>> {
        let node = &self.nodes[idx];
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (la, lb) = (av.len(), bv.len());
                let mut ga = vec![T::zero(); la];
                let mut gb = vec![T::zero(); lb];
                for (i, &gi) in gd.iter().enumerate() {
                    let (ia, ib) = (i % la, i % lb);
                    match kind {
                        Binary::Add => {
                            ga[ia] += gi;
                            gb[ib] += gi;
                        }
                        Binary::Sub => {
                            ga[ia] += gi;
                            gb[ib] -= gi;
                        }
                        Binary::Mul => {
                            ga[ia] += gi * bv.data()[ib];
                            gb[ib] += gi * av.data()[ia];
                        }
                    }
                }
                vec![
                    (*a, Array::new(av.shape().to_vec(), ga)?),
                    (*b, Array::new(bv.shape().to_vec(), gb)?),
                ]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = T::zero();
                        for j in 0..n {
                            s += gd[i * n + j] * bv.data()[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av.data()[i * k + p];
                        if x == T::zero() {
                            continue;
                        }
                        let row = &mut gb[p * n..(p + 1) * n];
                        for (r, &gv) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *r += x * gv;
                        }
                    }
                }
                vec![
                    (*a, Array::new(vec![m, k], ga)?),
                    (*b, Array::new(vec![k, n], gb)?),
                ]
            }
            Op::Unary(kind, a) => {
                let av = self.value(*a);
                let data = av
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(gd)
                    .map(|((&x, &y), &gi)| gi * kind.derivative(x, y))
                    .collect();
                vec![(*a, Array::new(av.shape().to_vec(), data)?)]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c).reshape(self.shape(*a).to_vec())?)],
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut grads: Vec<Vec<T>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(self.value(*v).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (j, v) in inputs.iter().enumerate() {
                        let block = self.shape(*v)[*axis] * inner;
                        grads[j].extend_from_slice(&gd[offset..offset + block]);
                        offset += block;
                    }
                }
                inputs
                    .iter()
                    .zip(grads)
                    .map(|(v, d)| Ok((*v, Array::new(self.shape(*v).to_vec(), d)?)))
                    .collect::<Result<_>>()?
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(self.shape(*a).to_vec())?)],
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let width = node.value.shape()[*axis] * inner;
                let mut data = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    data[base..base + width].copy_from_slice(&gd[o * width..(o + 1) * width]);
                }
                vec![(*input, Array::new(shape, data)?)]
            }
            Op::MaxPool {
                input,
                axis,
                argmax,
            } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut data = vec![T::zero(); shape.iter().product()];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        data[(o * len + argmax[k]) * inner + i] += gd[k];
                    }
                }
                vec![(*input, Array::new(shape, data)?)]
            }
            Op::Sum { input, axis } => {
                let shape = self.shape(*input).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut data = Vec::with_capacity(shape.iter().product());
                for o in 0..outer {
                    for _ in 0..len {
                        data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*input, Array::new(shape, data)?)]
            }
            Op::SumAll(a) => vec![(*a, Array::full(self.shape(*a).to_vec(), gd[0]))],
            Op::NormalizeL2 { input, norms } => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap_or(&1);
                let mut data = vec![T::zero(); y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * w..(r + 1) * w;
                    let dot: T = y[span.clone()]
                        .iter()
                        .zip(&gd[span.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for i in span {
                        data[i] = (gd[i] - y[i] * dot) / n;
                    }
                }
                vec![(*input, Array::new(self.shape(*input).to_vec(), data)?)]
            }
            Op::Broadcast(a) => {
                let shape = self.shape(*a).to_vec();
                let n: usize = shape.iter().product();
                let mut data = vec![T::zero(); n];
                for (i, &gi) in gd.iter().enumerate() {
                    data[i % n] += gi;
                }
                vec![(*a, Array::new(shape, data)?)]
            }
            Op::Gather { input, rows } => {
                let shape = self.shape(*input).to_vec();
                let w: usize = shape[1..].iter().product();
                let mut data = vec![T::zero(); shape.iter().product()];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &gi) in data[r * w..(r + 1) * w]
                        .iter_mut()
                        .zip(&gd[k * w..(k + 1) * w])
                    {
                        *d += gi;
                    }
                }
                vec![(*input, Array::new(shape, data)?)]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Array<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = op.backward(&values, &node.value, g)?;
                let mut out = Vec::new();
                for (v, gr) in inputs.iter().zip(grads) {
                    if let Some(gr) = gr {
                        if gr.shape() != self.shape(*v) {
                            return Err(Error::shape(op.name(), self.shape(*v), gr.shape()));
                        }
                        out.push((*v, gr));
                    }
                }
                out
            }
        };
        Ok(out)
    }
}

/// `out += a(m×k) · b(k×n)`, row-major.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * bv;
            }
        }
    }
}
