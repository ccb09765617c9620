//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in append order; since inputs always
//! exist before the node that consumes them, append order is a topological
//! order and [`Tape::backward`] simply walks the tape in reverse, visiting
//! each node once.
//!
//! ```
//! use dualcore::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum_all();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Padding};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_index_map, broadcast_shape, strides_of, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Neg,
    Relu,
    Sigmoid,
    Exp,
    /// `ln(clamp(x, lo, hi))`; zero gradient outside `(lo, hi)`.
    LnClamped(f64, f64),
    Scale(f64),
    Offset(f64),
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    Depthwise {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    /// `out[j] = in[index[j]]`; covers pooling, resizing, permutation.
    Gather {
        x: usize,
        index: Vec<usize>,
    },
    /// `out[map[i]] += in[i]`.
    ReduceSum {
        x: usize,
        map: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
        outer: usize,
        inners: Vec<usize>,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of operations.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one backward pass, indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `∂loss/∂var`; `None` when `var` does not influence the loss or was
    /// recorded as a constant.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn derived(&self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var<'_, T> {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?.shape();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for rank {}", first.len())));
        }
        let values: Vec<_> = xs.iter().map(|v| v.value()).collect();
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(Error::shape(format!("concat: {s:?} incompatible with {first:?} on axis {axis}")));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inners: Vec<usize> = values.iter().map(|v| v.shape()[axis..].iter().product()).collect();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (v, &inner) in values.iter().zip(&inners) {
                data.extend_from_slice(&v.data()[o * inner..(o + 1) * inner]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.derived(value, Op::Concat { xs: ids.clone(), outer, inners }, &ids))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        if !root.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let g = g.data();
            let mut acc = Accumulator { nodes: &nodes, grads: &mut grads };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Binary { kind, a, b } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let out_shape = node.value.shape();
                    let ma = broadcast_index_map(va.shape(), out_shape);
                    let mb = broadcast_index_map(vb.shape(), out_shape);
                    let (da, db) = (va.data(), vb.data());
                    acc.with(*a, |ga| match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            for (i, &gi) in g.iter().enumerate() {
                                ga[ma[i]] += gi;
                            }
                        }
                        BinaryKind::Mul => {
                            for (i, &gi) in g.iter().enumerate() {
                                ga[ma[i]] += gi * db[mb[i]];
                            }
                        }
                        BinaryKind::Div => {
                            for (i, &gi) in g.iter().enumerate() {
                                ga[ma[i]] += gi / db[mb[i]];
                            }
                        }
                    });
                    acc.with(*b, |gb| match kind {
                        BinaryKind::Add => {
                            for (i, &gi) in g.iter().enumerate() {
                                gb[mb[i]] += gi;
                            }
                        }
                        BinaryKind::Sub => {
                            for (i, &gi) in g.iter().enumerate() {
                                gb[mb[i]] -= gi;
                            }
                        }
                        BinaryKind::Mul => {
                            for (i, &gi) in g.iter().enumerate() {
                                gb[mb[i]] += gi * da[ma[i]];
                            }
                        }
                        BinaryKind::Div => {
                            for (i, &gi) in g.iter().enumerate() {
                                let bv = db[mb[i]];
                                gb[mb[i]] -= gi * da[ma[i]] / (bv * bv);
                            }
                        }
                    });
                }
                Op::Unary { kind, a } => {
                    let x = nodes[*a].value.data();
                    let y = node.value.data();
                    acc.with(*a, |ga| {
                        for i in 0..g.len() {
                            ga[i] += match *kind {
                                UnaryKind::Neg => -g[i],
                                UnaryKind::Relu => {
                                    if x[i] > T::zero() {
                                        g[i]
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnaryKind::Sigmoid => g[i] * y[i] * (T::one() - y[i]),
                                UnaryKind::Exp => g[i] * y[i],
                                UnaryKind::LnClamped(lo, hi) => {
                                    if x[i] > T::c(lo) && x[i] < T::c(hi) {
                                        g[i] / x[i]
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnaryKind::Scale(c) => g[i] * T::c(c),
                                UnaryKind::Offset(_) => g[i],
                            };
                        }
                    });
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc.with(*a, |ga| kernels::matmul_nt_acc(ga, g, vb, *m, *n, *k));
                    acc.with(*b, |gb| kernels::matmul_tn_acc(gb, va, g, *m, *k, *n));
                }
                Op::BatchMatMul { a, b, batch, a_batched, b_batched, m, k, n } => {
                    let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                    let (sa, sb, so) = (m * k, k * n, m * n);
                    acc.with(*a, |ga| {
                        for bi in 0..*batch {
                            let ao = if *a_batched { bi * sa } else { 0 };
                            let bo = if *b_batched { bi * sb } else { 0 };
                            kernels::matmul_nt_acc(
                                &mut ga[ao..ao + sa],
                                &g[bi * so..(bi + 1) * so],
                                &vb[bo..bo + sb],
                                *m,
                                *n,
                                *k,
                            );
                        }
                    });
                    acc.with(*b, |gb| {
                        for bi in 0..*batch {
                            let ao = if *a_batched { bi * sa } else { 0 };
                            let bo = if *b_batched { bi * sb } else { 0 };
                            kernels::matmul_tn_acc(
                                &mut gb[bo..bo + sb],
                                &va[ao..ao + sa],
                                &g[bi * so..(bi + 1) * so],
                                *m,
                                *k,
                                *n,
                            );
                        }
                    });
                }
                Op::Conv2d { x, w, geom } => {
                    let (vx, vw) = (nodes[*x].value.data(), nodes[*w].value.data());
                    let (gx, gw) = kernels::conv2d_backward(vx, vw, g, geom, acc.wants(*x), acc.wants(*w));
                    acc.add(*x, gx);
                    acc.add(*w, gw);
                }
                Op::Depthwise { x, w, geom } => {
                    let (vx, vw) = (nodes[*x].value.data(), nodes[*w].value.data());
                    let (gx, gw) = kernels::depthwise_backward(vx, vw, g, geom, acc.wants(*x), acc.wants(*w));
                    acc.add(*x, gx);
                    acc.add(*w, gw);
                }
                Op::Gather { x, index } => {
                    acc.with(*x, |gx| {
                        for (&src, &gi) in index.iter().zip(g) {
                            gx[src] += gi;
                        }
                    });
                }
                Op::ReduceSum { x, map } => {
                    acc.with(*x, |gx| {
                        for (d, &dst) in gx.iter_mut().zip(map) {
                            *d += g[dst];
                        }
                    });
                }
                Op::Reshape { x } => {
                    acc.with(*x, |gx| {
                        for (d, &gi) in gx.iter_mut().zip(g) {
                            *d += gi;
                        }
                    });
                }
                Op::Concat { xs, outer, inners } => {
                    let total: usize = inners.iter().sum();
                    let mut offset = 0;
                    for (&xid, &inner) in xs.iter().zip(inners) {
                        acc.with(xid, |gx| {
                            for o in 0..*outer {
                                let src = &g[o * total + offset..o * total + offset + inner];
                                for (d, &s) in gx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                        offset += inner;
                    }
                }
                Op::Softmax { x, outer, len, inner } => {
                    let y = node.value.data();
                    acc.with(*x, |gx| {
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let at = |l: usize| (o * len + l) * inner + i;
                                let mut dot = T::zero();
                                for l in 0..*len {
                                    dot += g[at(l)] * y[at(l)];
                                }
                                for l in 0..*len {
                                    gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                                }
                            }
                        }
                    });
                }
            }
        }
        // Intermediate gradients were consumed above; only leaves remain.
        Ok(Gradients { grads })
    }
}

struct Accumulator<'a, T: Scalar> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Accumulator<'_, T> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn with(&mut self, id: usize, f: impl FnOnce(&mut [T])) {
        if !self.wants(id) {
            return;
        }
        let slot = &mut self.grads[id];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape()));
        f(g.data_mut());
    }

    fn add(&mut self, id: usize, contribution: Option<Vec<T>>) {
        if let Some(c) = contribution {
            self.with(id, |g| {
                for (d, s) in g.iter_mut().zip(c) {
                    *d += s;
                }
            });
        }
    }
}

fn reduce_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::shape(format!("axis {a} out of range for rank {rank}")));
        }
        reduced[a] = true;
    }
    let mut out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| shape[d]).collect();
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let kept: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let out_strides = strides_of(&kept_shape);
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(kept.iter().zip(&out_strides).map(|(&d, s)| idx[d] * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok((map, out_shape))
}

#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn binary(self, other: Var<'t, T>, kind: BinaryKind) -> Result<Var<'t, T>> {
        let (va, vb) = (self.value(), other.value());
        let out_shape = broadcast_shape(va.shape(), vb.shape())?;
        let data: Vec<T> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| apply_binary(kind, x, y)).collect()
        } else {
            let ma = broadcast_index_map(va.shape(), &out_shape);
            let mb = broadcast_index_map(vb.shape(), &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| apply_binary(kind, va.data()[i], vb.data()[j])).collect()
        };
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.tape.derived(value, Op::Binary { kind, a: self.id, b: other.id }, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(self, kind: UnaryKind) -> Var<'t, T> {
        let v = self.value();
        let value = v.map(|x| match kind {
            UnaryKind::Neg => -x,
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Sigmoid => T::one() / (T::one() + (-x).exp()),
            UnaryKind::Exp => x.exp(),
            UnaryKind::LnClamped(lo, hi) => x.max(T::c(lo)).min(T::c(hi)).ln(),
            UnaryKind::Scale(c) => x * T::c(c),
            UnaryKind::Offset(c) => x + T::c(c),
        });
        self.tape.derived(value, Op::Unary { kind, a: self.id }, &[self.id])
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(UnaryKind::Neg)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(UnaryKind::Exp)
    }

    /// Natural log of `x` clamped to `[lo, hi]`.
    pub fn ln_clamped(self, lo: f64, hi: f64) -> Var<'t, T> {
        self.unary(UnaryKind::LnClamped(lo, hi))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        self.unary(UnaryKind::Scale(c))
    }

    pub fn offset(self, c: f64) -> Var<'t, T> {
        self.unary(UnaryKind::Offset(c))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (va, vb) = (self.value(), other.value());
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = Tensor::new(&[m, n], kernels::matmul(va.data(), vb.data(), m, k, n))?;
        Ok(self.tape.derived(value, Op::MatMul { a: self.id, b: other.id, m, k, n }, &[self.id, other.id]))
    }

    /// Batched `(B×m×k)·(B×k×n)`; either operand may have batch extent 1
    /// and is then shared across the batch.
    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (va, vb) = (self.value(), other.value());
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[2] != sb[1] {
            return Err(Error::shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let batch = match (sa[0], sb[0]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("bmm batch mismatch {sa:?} x {sb:?}"))),
        };
        let (m, k, n) = (sa[1], sa[2], sb[2]);
        let (a_batched, b_batched) = (sa[0] == batch && batch > 1, sb[0] == batch && batch > 1);
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            kernels::matmul_acc(
                &mut out[bi * m * n..(bi + 1) * m * n],
                &va.data()[ao..ao + m * k],
                &vb.data()[bo..bo + k * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        Ok(self.tape.derived(
            value,
            Op::BatchMatMul { a: self.id, b: other.id, batch, a_batched, b_batched, m, k, n },
            &[self.id, other.id],
        ))
    }

    /// 2-D cross-correlation, input `N×C×H×W`, kernel `O×C×KH×KW`.
    pub fn conv2d(self, kernel: Var<'t, T>, stride: usize, padding: Padding) -> Result<Var<'t, T>> {
        let (vx, vw) = (self.value(), kernel.value());
        let geom = ConvGeom::new(vx.shape(), vw.shape(), stride, padding)?;
        let value = Tensor::new(&geom.out_shape(), kernels::conv2d_forward(vx.data(), vw.data(), &geom))?;
        Ok(self.tape.derived(value, Op::Conv2d { x: self.id, w: kernel.id, geom }, &[self.id, kernel.id]))
    }

    /// Per-channel spatial convolution, kernel `C×1×K×K`, same padding.
    pub fn depthwise_conv2d(self, kernel: Var<'t, T>) -> Result<Var<'t, T>> {
        let (vx, vw) = (self.value(), kernel.value());
        let geom = kernels::depthwise_geom(vx.shape(), vw.shape())?;
        let value = Tensor::new(vx.shape(), kernels::depthwise_forward(vx.data(), vw.data(), &geom))?;
        Ok(self.tape.derived(value, Op::Depthwise { x: self.id, w: kernel.id, geom }, &[self.id, kernel.id]))
    }

    /// Gathers `out[j] = self[index[j]]` into a tensor of `shape`.
    pub fn gather(self, index: Vec<usize>, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= v.numel()) {
            return Err(Error::shape(format!("gather index {bad} out of range {}", v.numel())));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape.derived(value, Op::Gather { x: self.id, index }, &[self.id]))
    }

    /// Non-overlapping `factor×factor` max pooling over NCHW.
    pub fn maxpool2d(self, factor: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let (index, shape) = kernels::maxpool_argmax(v.data(), v.shape(), factor)?;
        self.gather(index, &shape)
    }

    /// Nearest-neighbour replication by an integer factor.
    pub fn upsample2d(self, factor: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample2d expects NCHW, got {s:?}")));
        }
        if factor == 0 {
            return Err(Error::config("upsample factor must be positive"));
        }
        let rows: Vec<usize> = (0..s[2] * factor).map(|i| i / factor).collect();
        let cols: Vec<usize> = (0..s[3] * factor).map(|i| i / factor).collect();
        let index = kernels::spatial_gather_index(&s, &rows, &cols);
        self.gather(index, &[s[0], s[1], s[2] * factor, s[3] * factor])
    }

    /// Nearest-neighbour resize to `out_h×out_w` using source row
    /// `floor(i·H/out_h)` (columns likewise).
    pub fn resize_nearest(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        let s = self.shape();
        if s.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::shape(format!("resize {s:?} to {out_h}x{out_w}")));
        }
        let rows: Vec<usize> = (0..out_h).map(|i| i * s[2] / out_h).collect();
        let cols: Vec<usize> = (0..out_w).map(|i| i * s[3] / out_w).collect();
        let index = kernels::spatial_gather_index(&s, &rows, &cols);
        self.gather(index, &[s[0], s[1], out_h, out_w])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.derived(value, Op::Reshape { x: self.id }, &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let n = v.numel();
        let positions = Tensor::<f64>::new(v.shape(), (0..n).map(|i| i as f64).collect())?.permute(perm)?;
        let index = positions.data().iter().map(|&p| p as usize).collect();
        let shape = positions.shape().to_vec();
        self.gather(index, &shape)
    }

    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let (map, out_shape) = reduce_map(v.shape(), axes)?;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&x, &dst) in v.data().iter().zip(&map) {
            out[dst] += x;
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.tape.derived(value, Op::ReduceSum { x: self.id, map }, &[self.id]))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let s = self.shape();
        let count: usize = axes.iter().filter_map(|&a| s.get(a)).product();
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    /// Maximum over `axes`; the gradient goes to the first maximal element.
    pub fn max_axes(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let v = self.value();
        let (map, out_shape) = reduce_map(v.shape(), axes)?;
        let mut best: Vec<Option<usize>> = vec![None; out_shape.iter().product()];
        for (i, &dst) in map.iter().enumerate() {
            match best[dst] {
                Some(b) if v.data()[b] >= v.data()[i] => {}
                _ => best[dst] = Some(i),
            }
        }
        let index = best.into_iter().map(|b| b.expect("non-empty reduction")).collect();
        self.gather(index, &out_shape)
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let rank = self.shape().len();
        self.sum_axes(&(0..rank).collect::<Vec<_>>()).expect("valid axes")
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let v = self.value();
        let s = v.shape();
        if axis >= s.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for rank {}", s.len())));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let x = v.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(x[at(l)]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (x[at(l)] - mx).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.tape.derived(value, Op::Softmax { x: self.id, outer, len, inner }, &[self.id]))
    }
}

#[inline]
fn apply_binary<T: Scalar>(kind: BinaryKind, x: T, y: T) -> T {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().value().data(), &[0.5]);
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1], &[10.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[11.0, 12.0]);
        let bad = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(a.add(bad), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().data(), &[11.0]);
        assert!(r.matmul(r).is_err());
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let g = tape.backward(x.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let g = tape.backward(x.mul(x).unwrap().sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let g = tape.backward(x.mul(c).unwrap().sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.maxpool2d(2).unwrap().value().data(), &[4.0]);

        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[1, 1, 2, 2], 5.0));
        let p = x.maxpool2d(2).unwrap();
        assert_eq!(p.value().data(), &[5.0]);
        let g = tape.backward(p.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(x.maxpool2d(2), Err(Error::Shape(_))));
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert!(x.upsample2d(1).unwrap().value().bit_eq(&x.value()));
        let u = x.upsample2d(2).unwrap();
        assert_eq!(u.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
        assert!(u.maxpool2d(2).unwrap().value().bit_eq(&x.value()));
        let g = tape.backward(u.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn reduce_softmax_concat_examples() {
        let tape = Tape::<f64>::new();
        let s = tape.constant(t(&[2], &[0.0, 0.0])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);

        let c = tape.constant(Tensor::full(&[1, 3, 4, 5], 2.5));
        let m = c.mean_axes(&[2, 3]).unwrap();
        assert_eq!(m.shape(), vec![1, 3]);
        assert!(m.value().data().iter().all(|&v| v == 2.5));

        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(cat.shape(), vec![1, 4, 4, 4]);
        assert_eq!(cat.value().data()[31], 0.0);
        assert_eq!(cat.value().data()[32], 1.0);
        assert!(matches!(a.sum_axes(&[4]), Err(Error::Shape(_))));
    }

    #[test]
    fn max_reduce_routes_to_first_maximum() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 3], &[1.0, 3.0, 3.0, 0.0, -1.0, -2.0]));
        let m = x.max_axes(&[1]).unwrap();
        assert_eq!(m.value().data(), &[3.0, 0.0]);
        let g = tape.backward(m.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = x.add(x).unwrap().mul(x).unwrap(); // 2x²
        let g = tape.backward(y.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[12.0]);
    }
}
