use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::{self as k, Conv1dGeom, Conv2dGeom};
use super::{numel, Tensor};

/// Kind tag of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    Silu,
    Linear,
    Conv2d,
    Conv1dTemporal,
    GroupNorm,
    Attention,
    Softmax,
    Concat,
    Reshape,
    Permute,
    Expand,
    Sum,
    Mean,
    Embedding,
    NearestDownsample,
    NearestUpsample,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, T),
    Silu(usize),
    Linear { x: usize, w: usize, b: Option<usize>, m: usize, k: usize, n: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: Conv2dGeom },
    Conv1dTemporal { x: usize, w: usize, b: Option<usize>, geom: Conv1dGeom },
    GroupNorm { x: usize, groups: usize, eps: T, mean: Vec<T>, rstd: Vec<T> },
    Attention { q: usize, k: usize, v: usize, probs: Vec<T>, bh: usize, l: usize, d: usize },
    Softmax(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Expand(usize),
    Sum(usize),
    Mean(usize),
    Embedding { table: usize, ids: Vec<usize> },
    NearestDownsample { x: usize, factor: usize },
    NearestUpsample { x: usize, factor: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::Silu(_) => OpKind::Silu,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Conv1dTemporal { .. } => OpKind::Conv1dTemporal,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
            Op::Attention { .. } => OpKind::Attention,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Expand(_) => OpKind::Expand,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::NearestDownsample { .. } => OpKind::NearestDownsample,
            Op::NearestUpsample { .. } => OpKind::NearestUpsample,
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::ScalarMul(a, _)
            | Op::Silu(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Expand(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Linear { x, w, b, .. } | Op::Conv2d { x, w, b, .. } | Op::Conv1dTemporal { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::GroupNorm { x, .. }
            | Op::Permute { x, .. }
            | Op::NearestDownsample { x, .. }
            | Op::NearestUpsample { x, .. } => vec![*x],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Embedding { table, .. } => vec![*table],
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run tape. Each operation appends one record whose inputs were
/// recorded earlier, so the record list is always in topological order.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients indexed by node id.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    visited: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }

    /// Node ids in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn op_kind(&self, id: usize) -> OpKind {
        self.nodes.borrow()[id].op.kind()
    }

    pub fn inputs_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].op.inputs()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, op });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let rg = self.needs(&op.inputs());
        self.push(value, rg, op)
    }

    /// Reverse sweep from a one-element loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut visited = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            visited.push(id);
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let out_shape = node.value.shape();
            let mut acc = |i: usize, contrib: Vec<T>| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, k::sum_to_shape(&g, out_shape, val(*a).shape()));
                    acc(*b, k::sum_to_shape(&g, out_shape, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, k::sum_to_shape(&g, out_shape, val(*a).shape()));
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    acc(*b, k::sum_to_shape(&neg, out_shape, val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    acc(*a, k::mul_grad(&g, vb.data(), vb.shape(), out_shape, va.shape()));
                    acc(*b, k::mul_grad(&g, va.data(), va.shape(), out_shape, vb.shape()));
                }
                Op::ScalarMul(a, s) => acc(*a, g.iter().map(|&v| v * *s).collect()),
                Op::Silu(a) => acc(*a, k::silu_backward(val(*a).data(), &g)),
                Op::Linear { x, w, b, m, k: kk, n } => {
                    let (dx, dw, db) = k::linear_backward(val(*x).data(), val(*w).data(), &g, *m, *kk, *n);
                    acc(*x, dx);
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = k::conv2d_backward(val(*x).data(), val(*w).data(), &g, geom);
                    acc(*x, dx);
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::Conv1dTemporal { x, w, b, geom } => {
                    let (dx, dw, db) = k::conv1d_temporal_backward(val(*x).data(), val(*w).data(), &g, geom);
                    acc(*x, dx);
                    acc(*w, dw);
                    if let Some(b) = b {
                        acc(*b, db);
                    }
                }
                Op::GroupNorm { x, groups, eps, mean, rstd } => {
                    let vx = val(*x);
                    let batch = vx.shape()[0];
                    acc(*x, k::group_norm_backward(vx.data(), &g, mean, rstd, *eps, batch, *groups));
                }
                Op::Attention { q, k: kv, v, probs, bh, l, d } => {
                    let (dq, dk, dv) =
                        k::attention_backward(val(*q).data(), val(*kv).data(), val(*v).data(), probs, &g, *bh, *l, *d);
                    acc(*q, dq);
                    acc(*kv, dk);
                    acc(*v, dv);
                }
                Op::Softmax(a) => {
                    let width = *out_shape.last().expect("softmax rank >= 1");
                    acc(*a, k::softmax_rows_backward(node.value.data(), &g, width));
                }
                Op::Concat { inputs, axis } => {
                    let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| val(i).shape().to_vec()).collect();
                    for (i, gi) in inputs.iter().zip(k::concat_backward(&g, &shapes, *axis)) {
                        acc(*i, gi);
                    }
                }
                Op::Reshape(a) => acc(*a, g),
                Op::Permute { x, perm } => {
                    let inv = k::inverse_permutation(perm);
                    acc(*x, k::permute(&g, out_shape, &inv));
                }
                Op::Expand(a) => acc(*a, k::sum_to_shape(&g, out_shape, val(*a).shape())),
                Op::Sum(a) => acc(*a, vec![g[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    acc(*a, vec![g[0] / T::c(n as f64); n]);
                }
                Op::Embedding { table, ids } => {
                    let ts = val(*table).shape();
                    acc(*table, k::embedding_backward(&g, ts[0], ts[1], ids));
                }
                Op::NearestDownsample { x, factor } => {
                    let s = val(*x).shape();
                    let (h, w) = (s[2], s[3]);
                    acc(*x, k::nearest_downsample_backward(&g, s[0] * s[1], h, w, *factor));
                }
                Op::NearestUpsample { x, factor } => {
                    let s = val(*x).shape();
                    acc(*x, k::nearest_upsample_backward(&g, s[0] * s[1], s[2], s[3], *factor));
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, visited })
    }
}

fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(op, format!("expected rank {rank}, got shape {shape:?}")));
    }
    Ok(())
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn binary(self, other: Var<'g, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = k::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()))
        })?;
        let data = k::broadcast_binary(a.data(), a.shape(), b.data(), b.shape(), &out_shape, f);
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let t = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.graph.record(t, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let t = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.graph.record(t, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let t = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.graph.record(t, Op::Mul(self.id, other.id)))
    }

    pub fn scalar_mul(self, s: T) -> Var<'g, T> {
        let t = self.value().scale(s);
        self.graph.record(t, Op::ScalarMul(self.id, s))
    }

    pub fn silu(self) -> Var<'g, T> {
        let v = self.value();
        let t = Tensor::from_parts(v.shape().to_vec(), k::silu(v.data()));
        self.graph.record(t, Op::Silu(self.id))
    }

    /// `x [..., in] · wᵀ + b` with `w [out, in]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (x, wv) = (self.value(), w.value());
        expect_rank("linear", wv.shape(), 2)?;
        let (n, kk) = (wv.shape()[0], wv.shape()[1]);
        let last = *x.shape().last().unwrap_or(&0);
        if last != kk {
            return Err(Error::shape("linear", format!("input {:?} vs weight {:?}", x.shape(), wv.shape())));
        }
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [n] {
                return Err(Error::shape("linear", format!("bias {:?} for {n} outputs", bv.shape())));
            }
        }
        let m = x.numel() / kk;
        let data = k::linear(x.data(), wv.data(), bv.as_deref().map(|t| t.data()), m, kk, n);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        let op = Op::Linear { x: self.id, w: w.id, b: b.map(|b| b.id), m, k: kk, n };
        Ok(self.graph.record(Tensor::from_parts(shape, data), op))
    }

    /// 2-D cross-correlation: `[B,C,H,W] ⋆ [O,C,kh,kw]` with zero padding.
    pub fn conv2d(self, w: Var<'g, T>, b: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (x, wv) = (self.value(), w.value());
        expect_rank("conv2d", x.shape(), 4)?;
        expect_rank("conv2d", wv.shape(), 4)?;
        let (xs, ws) = (x.shape(), wv.shape());
        if xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input channels {} vs kernel {:?}", xs[1], ws)));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if ws[2] > xs[2] + 2 * pad || ws[3] > xs[3] + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} exceeds padded extent of {:?}", ws[2], ws[3], xs),
            ));
        }
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [ws[0]] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", bv.shape(), ws[0])));
            }
        }
        let geom = Conv2dGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let data = k::conv2d(x.data(), wv.data(), bv.as_deref().map(|t| t.data()), &geom);
        let shape = vec![geom.batch, geom.cout, geom.out_h(), geom.out_w()];
        Ok(self.graph.record(Tensor::from_parts(shape, data), Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), geom }))
    }

    /// Convolution along the frame axis of `[B,C,N,H,W]` with kernel
    /// `[O,C,kt]`, `kt` odd, replicate-edge padding of `(kt-1)/2`.
    pub fn conv1d_temporal(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (x, wv) = (self.value(), w.value());
        expect_rank("conv1d_temporal", x.shape(), 5)?;
        expect_rank("conv1d_temporal", wv.shape(), 3)?;
        let (xs, ws) = (x.shape(), wv.shape());
        if xs[1] != ws[1] {
            return Err(Error::shape("conv1d_temporal", format!("input channels {} vs kernel {:?}", xs[1], ws)));
        }
        let kt = ws[2];
        if kt % 2 == 0 {
            return Err(Error::shape("conv1d_temporal", format!("kernel size {kt} must be odd")));
        }
        if kt > xs[2] {
            return Err(Error::shape("conv1d_temporal", format!("kernel size {kt} exceeds {} frames", xs[2])));
        }
        let bv = b.map(|b| b.value());
        if let Some(bv) = &bv {
            if bv.shape() != [ws[0]] {
                return Err(Error::shape("conv1d_temporal", format!("bias {:?}", bv.shape())));
            }
        }
        let geom = Conv1dGeom { batch: xs[0], cin: xs[1], frames: xs[2], spatial: xs[3] * xs[4], cout: ws[0], kt };
        let data = k::conv1d_temporal(x.data(), wv.data(), bv.as_deref().map(|t| t.data()), &geom);
        let shape = vec![xs[0], ws[0], xs[2], xs[3], xs[4]];
        let op = Op::Conv1dTemporal { x: self.id, w: w.id, b: b.map(|b| b.id), geom };
        Ok(self.graph.record(Tensor::from_parts(shape, data), op))
    }

    /// Group normalization of `[B, C, ...]` without affine parameters.
    /// Statistics span the channels of a group and every trailing axis.
    pub fn group_norm(self, groups: usize, eps: T) -> Result<Var<'g, T>> {
        let x = self.value();
        let xs = x.shape();
        if xs.len() < 2 {
            return Err(Error::shape("group_norm", format!("need [B, C, ...], got {xs:?}")));
        }
        if groups == 0 || xs[1] % groups != 0 {
            return Err(Error::shape("group_norm", format!("{groups} groups do not divide {} channels", xs[1])));
        }
        let out = k::group_norm(x.data(), xs[0], groups, eps);
        let t = Tensor::from_parts(xs.to_vec(), out.y);
        Ok(self.graph.record(t, Op::GroupNorm { x: self.id, groups, eps, mean: out.mean, rstd: out.rstd }))
    }

    /// `softmax(q·kᵀ/√d)·v` on `[B, heads, L, d]`.
    pub fn attention(self, key: Var<'g, T>, value: Var<'g, T>) -> Result<Var<'g, T>> {
        let (q, kv, v) = (self.value(), key.value(), value.value());
        expect_rank("attention", q.shape(), 4)?;
        if q.shape() != kv.shape() || q.shape() != v.shape() {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", q.shape(), kv.shape(), v.shape()),
            ));
        }
        let s = q.shape();
        let (bh, l, d) = (s[0] * s[1], s[2], s[3]);
        let (out, probs) = k::attention(q.data(), kv.data(), v.data(), bh, l, d);
        let op = Op::Attention { q: self.id, k: key.id, v: value.id, probs, bh, l, d };
        Ok(self.graph.record(Tensor::from_parts(s.to_vec(), out), op))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let x = self.value();
        let width = *x.shape().last().expect("rank >= 1");
        let t = Tensor::from_parts(x.shape().to_vec(), k::softmax_rows(x.data(), width));
        self.graph.record(t, Op::Softmax(self.id))
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut extent = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(base).enumerate().any(|(d, (a, b))| d != axis && a != b) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            extent += s[axis];
        }
        let slices: Vec<(&[T], &[usize])> = values.iter().map(|v| (v.data(), v.shape())).collect();
        let data = k::concat(&slices, axis);
        let mut shape = base.to_vec();
        shape[axis] = extent;
        let op = Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis };
        Ok(first.graph.record(Tensor::from_parts(shape, data), op))
    }

    /// Concatenate `[B, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        Self::concat(parts, 1)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let t = self.value().reshape(shape)?;
        Ok(self.graph.record(t, Op::Reshape(self.id)))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let mut seen = vec![false; perm.len()];
        if perm.len() != x.ndim() || perm.iter().any(|&p| p >= perm.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {}", x.ndim())));
        }
        let data = k::permute(x.data(), x.shape(), perm);
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        Ok(self.graph.record(Tensor::from_parts(shape, data), Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    /// Broadcast to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        match k::broadcast_shape(x.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("expand", format!("cannot expand {:?} to {shape:?}", x.shape()))),
        }
        let ones = vec![T::zero(); numel(shape)];
        let data = k::broadcast_binary(x.data(), x.shape(), &ones, shape, shape, |a, _| a);
        Ok(self.graph.record(Tensor::from_parts(shape.to_vec(), data), Op::Expand(self.id)))
    }

    pub fn sum(self) -> Var<'g, T> {
        let t = Tensor::scalar(self.value().sum());
        self.graph.record(t, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        let t = Tensor::scalar(self.value().mean());
        self.graph.record(t, Op::Mean(self.id))
    }

    /// Rows `ids` of a `[V, D]` table.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'g, T>> {
        let table = self.value();
        expect_rank("embedding", table.shape(), 2)?;
        let (rows, dim) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embedding", format!("id {bad} outside table of {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding", "empty id list"));
        }
        let data = k::embedding(table.data(), dim, ids);
        let t = Tensor::from_parts(vec![ids.len(), dim], data);
        Ok(self.graph.record(t, Op::Embedding { table: self.id, ids: ids.to_vec() }))
    }

    pub fn nearest_downsample(self, factor: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        expect_rank("nearest_downsample", x.shape(), 4)?;
        let s = x.shape();
        if factor == 0 || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::shape("nearest_downsample", format!("factor {factor} for {s:?}")));
        }
        let data = k::nearest_downsample(x.data(), s[0] * s[1], s[2], s[3], factor);
        let t = Tensor::from_parts(vec![s[0], s[1], s[2] / factor, s[3] / factor], data);
        Ok(self.graph.record(t, Op::NearestDownsample { x: self.id, factor }))
    }

    pub fn nearest_upsample(self, factor: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        expect_rank("nearest_upsample", x.shape(), 4)?;
        let s = x.shape();
        if factor == 0 {
            return Err(Error::shape("nearest_upsample", "factor must be positive"));
        }
        let data = k::nearest_upsample(x.data(), s[0] * s[1], s[2], s[3], factor);
        let t = Tensor::from_parts(vec![s[0], s[1], s[2] * factor, s[3] * factor], data);
        Ok(self.graph.record(t, Op::NearestUpsample { x: self.id, factor }))
    }
}
