//! Forward and backward kernels on raw row-major buffers.
//!
//! Shapes are validated by the callers in `graph.rs`; kernels assume
//! consistent extents. All reductions run in a fixed sequential order.

use crate::scalar::Scalar;

use super::numel;

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

// ----------------------------------------------------------------------------
// Broadcasting

/// Numpy-style broadcast of two shapes (right-aligned, extent 1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `input` laid over `out` (zero on broadcast axes).
fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let own = row_major_strides(input);
    let mut s = vec![0; nd];
    for i in 0..input.len() {
        let d = nd - input.len() + i;
        if input[i] != 1 {
            s[d] = own[i];
        }
    }
    s
}

/// Visit every output offset with the matching offsets into two inputs.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out_shape.len();
    let total = numel(out_shape);
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out_shape[nd - 1];
    let (la, lb) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    while o < total {
        for j in 0..last {
            f(oa + j * la, ob + j * lb, o + j);
        }
        o += last;
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = vec![T::zero(); numel(out_shape)];
    for_each_broadcast(out_shape, &sa, &sb, |ia, ib, io| out[io] = f(a[ia], b[ib]));
    out
}

/// Reduce a gradient of `out_shape` back onto a broadcast input of `in_shape`.
pub fn sum_to_shape<T: Scalar>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let s_in = broadcast_strides(in_shape, out_shape);
    let zeros = vec![0; out_shape.len()];
    let mut acc = vec![T::zero(); numel(in_shape)];
    for_each_broadcast(out_shape, &s_in, &zeros, |ii, _, io| acc[ii] += g[io]);
    acc
}

/// `mul` backward for one operand: reduce(g * other) onto its own shape.
pub fn mul_grad<T: Scalar>(
    g: &[T],
    other: &[T],
    other_shape: &[usize],
    out_shape: &[usize],
    in_shape: &[usize],
) -> Vec<T> {
    let prod = broadcast_binary(g, out_shape, other, other_shape, out_shape, |x, y| x * y);
    sum_to_shape(&prod, out_shape, in_shape)
}

// ----------------------------------------------------------------------------
// Pointwise

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward<T: Scalar>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| {
            let s = sigmoid(v);
            gv * (s + v * s * (T::one() - s))
        })
        .collect()
}

// ----------------------------------------------------------------------------
// Linear: x [M, in], w [out, in], b [out] -> [M, out]

pub fn linear<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), x, k as isize, 1, w, 1, k as isize, beta, &mut out, n as isize, 1);
    out
}

/// Returns (dx, dw, db).
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); m * k];
    T::gemm(m, n, k, T::one(), g, n as isize, 1, w, k as isize, 1, T::zero(), &mut dx, k as isize, 1);
    let mut dw = vec![T::zero(); n * k];
    T::gemm(n, m, k, T::one(), g, 1, n as isize, x, k as isize, 1, T::zero(), &mut dw, k as isize, 1);
    let mut db = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}

// ----------------------------------------------------------------------------
// conv2d (cross-correlation) via im2col

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn ck(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Output columns `oj` whose input column `oj*stride + k - pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(out: usize, stride: usize, k: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &Conv2dGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(wo, g.stride, kj, g.pad, g.w);
                for oi in 0..ho {
                    let d = &mut dst[oi * wo..(oi + 1) * wo];
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h || lo >= hi {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    let j0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        d[lo..hi].copy_from_slice(&src[j0..j0 + hi - lo]);
                    } else {
                        for (k, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[j0 + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(wo, g.stride, kj, g.pad, g.w);
                if lo >= hi {
                    continue;
                }
                let j0 = lo * g.stride + kj - g.pad;
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let s = &src[oi * wo + lo..oi * wo + hi];
                    let d = &mut dxc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    if g.stride == 1 {
                        for (a, &b) in d[j0..j0 + s.len()].iter_mut().zip(s) {
                            *a += b;
                        }
                    } else {
                        for (k, &b) in s.iter().enumerate() {
                            d[j0 + k * g.stride] += b;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &Conv2dGeom) -> Vec<T> {
    let plane = g.out_h() * g.out_w();
    let ck = g.ck();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * plane] };
    for bi in 0..g.batch {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let ob = &mut out[bi * out_sz..(bi + 1) * out_sz];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        if let Some(bias) = b {
            for (o, row) in ob.chunks_exact_mut(plane).enumerate() {
                row.fill(bias[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(g.cout, ck, plane, T::one(), w, ck as isize, 1, src, plane as isize, 1, beta, ob, plane as isize, 1);
    }
    out
}

/// Returns (dx, dw, db).
pub fn conv2d_backward<T: Scalar>(x: &[T], w: &[T], gout: &[T], g: &Conv2dGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = g.out_h() * g.out_w();
    let ck = g.ck();
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut dx = vec![T::zero(); g.batch * in_sz];
    let mut dw = vec![T::zero(); g.cout * ck];
    let mut db = vec![T::zero(); g.cout];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * plane] };
    let mut dcols = vec![T::zero(); ck * plane];
    for bi in 0..g.batch {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let gb = &gout[bi * out_sz..(bi + 1) * out_sz];
        for (o, row) in gb.chunks_exact(plane).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        // dw += gout_b [cout, plane] * cols^T [plane, ck]
        T::gemm(g.cout, plane, ck, T::one(), gb, plane as isize, 1, src, 1, plane as isize, T::one(), &mut dw, ck as isize, 1);
        // dcols = w^T [ck, cout] * gout_b [cout, plane]
        T::gemm(ck, g.cout, plane, T::one(), w, 1, ck as isize, gb, plane as isize, 1, T::zero(), &mut dcols, plane as isize, 1);
        let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
        if g.is_pointwise() {
            dxb.copy_from_slice(&dcols);
        } else {
            col2im(&dcols, g, dxb);
        }
    }
    (dx, dw, db)
}

// ----------------------------------------------------------------------------
// Temporal conv: x [B, C, N, S], w [O, C, kt], replicate-edge padding.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub cin: usize,
    pub frames: usize,
    pub spatial: usize,
    pub cout: usize,
    pub kt: usize,
}

impl Conv1dGeom {
    fn src_frame(&self, n: usize, j: usize) -> usize {
        let half = (self.kt - 1) / 2;
        (n + j).saturating_sub(half).min(self.frames - 1)
    }
}

fn gather_shift<T: Scalar>(xb: &[T], g: &Conv1dGeom, j: usize, dst: &mut [T]) {
    let (n, s) = (g.frames, g.spatial);
    for c in 0..g.cin {
        for f in 0..n {
            let src = g.src_frame(f, j);
            let from = &xb[(c * n + src) * s..(c * n + src + 1) * s];
            dst[(c * n + f) * s..(c * n + f + 1) * s].copy_from_slice(from);
        }
    }
}

pub fn conv1d_temporal<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &Conv1dGeom) -> Vec<T> {
    let ns = g.frames * g.spatial;
    let in_sz = g.cin * ns;
    let out_sz = g.cout * ns;
    let mut out = vec![T::zero(); g.batch * out_sz];
    let mut shifted = vec![T::zero(); in_sz];
    let wrs = (g.cin * g.kt) as isize;
    for bi in 0..g.batch {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let ob = &mut out[bi * out_sz..(bi + 1) * out_sz];
        if let Some(bias) = b {
            for (o, row) in ob.chunks_exact_mut(ns).enumerate() {
                row.fill(bias[o]);
            }
        }
        for j in 0..g.kt {
            gather_shift(xb, g, j, &mut shifted);
            let beta = if j == 0 && b.is_none() { T::zero() } else { T::one() };
            T::gemm(g.cout, g.cin, ns, T::one(), &w[j..], wrs, g.kt as isize, &shifted, ns as isize, 1, beta, ob, ns as isize, 1);
        }
    }
    out
}

pub fn conv1d_temporal_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &Conv1dGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, s) = (g.frames, g.spatial);
    let ns = n * s;
    let in_sz = g.cin * ns;
    let out_sz = g.cout * ns;
    let mut dx = vec![T::zero(); g.batch * in_sz];
    let mut dw = vec![T::zero(); g.cout * g.cin * g.kt];
    let mut db = vec![T::zero(); g.cout];
    let mut shifted = vec![T::zero(); in_sz];
    let mut dshift = vec![T::zero(); in_sz];
    let wrs = (g.cin * g.kt) as isize;
    for bi in 0..g.batch {
        let xb = &x[bi * in_sz..(bi + 1) * in_sz];
        let gb = &gout[bi * out_sz..(bi + 1) * out_sz];
        for (o, row) in gb.chunks_exact(ns).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
        for j in 0..g.kt {
            gather_shift(xb, g, j, &mut shifted);
            // dw_j [cout, cin] += gout_b [cout, ns] * shifted^T [ns, cin]
            T::gemm(g.cout, ns, g.cin, T::one(), gb, ns as isize, 1, &shifted, 1, ns as isize, T::one(), &mut dw[j..], wrs, g.kt as isize);
            // dshift [cin, ns] = w_j^T [cin, cout] * gout_b
            T::gemm(g.cin, g.cout, ns, T::one(), &w[j..], g.kt as isize, wrs, gb, ns as isize, 1, T::zero(), &mut dshift, ns as isize, 1);
            let dxb = &mut dx[bi * in_sz..(bi + 1) * in_sz];
            for c in 0..g.cin {
                for f in 0..n {
                    let src = g.src_frame(f, j);
                    let from = &dshift[(c * n + f) * s..(c * n + f + 1) * s];
                    let to = &mut dxb[(c * n + src) * s..(c * n + src + 1) * s];
                    for (t, &v) in to.iter_mut().zip(from) {
                        *t += v;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ----------------------------------------------------------------------------
// Group normalization over contiguous (batch, group) blocks.
//
// The reciprocal scale is 1/sqrt(max(var, eps)): groups whose variance
// exceeds eps are normalized exactly, flat groups map to zero.

pub struct GroupNormOut<T> {
    pub y: Vec<T>,
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm<T: Scalar>(x: &[T], batch: usize, groups: usize, eps: T) -> GroupNormOut<T> {
    let block = x.len() / (batch * groups);
    let nf = T::c(block as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(batch * groups);
    let mut rstd = Vec::with_capacity(batch * groups);
    for (xs, ys) in x.chunks_exact(block).zip(y.chunks_exact_mut(block)) {
        let m = xs.iter().copied().sum::<T>() / nf;
        let var = xs.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / nf;
        let r = T::one() / var.max(eps).sqrt();
        for (o, &v) in ys.iter_mut().zip(xs) {
            *o = (v - m) * r;
        }
        mean.push(m);
        rstd.push(r);
    }
    GroupNormOut { y, mean, rstd }
}

pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    mean: &[T],
    rstd: &[T],
    eps: T,
    batch: usize,
    groups: usize,
) -> Vec<T> {
    let block = x.len() / (batch * groups);
    let nf = T::c(block as f64);
    let mut dx = vec![T::zero(); x.len()];
    for (k, ((xs, gs), ds)) in x
        .chunks_exact(block)
        .zip(g.chunks_exact(block))
        .zip(dx.chunks_exact_mut(block))
        .enumerate()
    {
        let (m, r) = (mean[k], rstd[k]);
        let gmean = gs.iter().copied().sum::<T>() / nf;
        // When the floor is active the scale is constant and the variance
        // term drops out.
        let floor_active = T::one() / (r * r) <= eps;
        let gx = if floor_active {
            T::zero()
        } else {
            xs.iter().zip(gs).map(|(&v, &gv)| gv * (v - m) * r).sum::<T>() / nf
        };
        for ((d, &v), &gv) in ds.iter_mut().zip(xs).zip(gs) {
            let xhat = (v - m) * r;
            *d = r * (gv - gmean - xhat * gx);
        }
    }
    dx
}

// ----------------------------------------------------------------------------
// Softmax over the last axis

pub fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xs, ys) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (y, &v) in ys.iter_mut().zip(xs) {
            *y = (v - mx).exp();
            total += *y;
        }
        for y in ys.iter_mut() {
            *y /= total;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(y: &[T], g: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((ys, gs), ds) in y.chunks_exact(width).zip(g.chunks_exact(width)).zip(dx.chunks_exact_mut(width)) {
        let dot = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>();
        for ((d, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

// ----------------------------------------------------------------------------
// Scaled dot-product attention: q, k, v [BH, L, d]

pub fn attention<T: Scalar>(q: &[T], k: &[T], v: &[T], bh: usize, l: usize, d: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::c(d as f64).sqrt();
    let mut probs = vec![T::zero(); bh * l * l];
    let mut out = vec![T::zero(); bh * l * d];
    for i in 0..bh {
        let (qs, ks, vs) = (&q[i * l * d..(i + 1) * l * d], &k[i * l * d..(i + 1) * l * d], &v[i * l * d..(i + 1) * l * d]);
        let ps = &mut probs[i * l * l..(i + 1) * l * l];
        T::gemm(l, d, l, scale, qs, d as isize, 1, ks, 1, d as isize, T::zero(), ps, l as isize, 1);
        let sm = softmax_rows(ps, l);
        ps.copy_from_slice(&sm);
        T::gemm(l, l, d, T::one(), ps, l as isize, 1, vs, d as isize, 1, T::zero(), &mut out[i * l * d..(i + 1) * l * d], d as isize, 1);
    }
    (out, probs)
}

/// Returns (dq, dk, dv).
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    bh: usize,
    l: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::c(d as f64).sqrt();
    let mut dq = vec![T::zero(); bh * l * d];
    let mut dk = vec![T::zero(); bh * l * d];
    let mut dv = vec![T::zero(); bh * l * d];
    let mut dp = vec![T::zero(); l * l];
    for i in 0..bh {
        let r = i * l * d..(i + 1) * l * d;
        let (qs, ks, vs, gs) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &g[r.clone()]);
        let ps = &probs[i * l * l..(i + 1) * l * l];
        // dv = P^T g
        T::gemm(l, l, d, T::one(), ps, 1, l as isize, gs, d as isize, 1, T::zero(), &mut dv[r.clone()], d as isize, 1);
        // dP = g v^T
        T::gemm(l, d, l, T::one(), gs, d as isize, 1, vs, 1, d as isize, T::zero(), &mut dp, l as isize, 1);
        let ds = softmax_rows_backward(ps, &dp, l);
        // dq = dS k * scale, dk = dS^T q * scale
        T::gemm(l, l, d, scale, &ds, l as isize, 1, ks, d as isize, 1, T::zero(), &mut dq[r.clone()], d as isize, 1);
        T::gemm(l, l, d, scale, &ds, 1, l as isize, qs, d as isize, 1, T::zero(), &mut dk[r], d as isize, 1);
    }
    (dq, dk, dv)
}

// ----------------------------------------------------------------------------
// Layout ops

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[(&[T], &[usize])], axis: usize) -> Vec<T> {
    let outer = numel(&parts[0].1[..axis]);
    let total: usize = parts.iter().map(|(d, _)| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (data, shape) in parts {
            let chunk = numel(&shape[axis..]);
            out.extend_from_slice(&data[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

pub fn concat_backward<T: Scalar>(g: &[T], shapes: &[Vec<usize>], axis: usize) -> Vec<Vec<T>> {
    let outer = numel(&shapes[0][..axis]);
    let mut grads: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (gi, shape) in grads.iter_mut().zip(shapes) {
            let chunk = numel(&shape[axis..]);
            gi.extend_from_slice(&g[pos..pos + chunk]);
            pos += chunk;
        }
    }
    grads
}

pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); x.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |ii, _, io| out[io] = x[ii]);
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn embedding<T: Scalar>(table: &[T], dim: usize, ids: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        out.extend_from_slice(&table[id * dim..(id + 1) * dim]);
    }
    out
}

pub fn embedding_backward<T: Scalar>(g: &[T], rows: usize, dim: usize, ids: &[usize]) -> Vec<T> {
    let mut dt = vec![T::zero(); rows * dim];
    for (k, &id) in ids.iter().enumerate() {
        for (d, &v) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&g[k * dim..(k + 1) * dim]) {
            *d += v;
        }
    }
    dt
}

/// x [P, H, W] -> [P, H/f, W/f], keeping the top-left sample of each block.
pub fn nearest_downsample<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                out.push(x[p * h * w + i * f * w + j * f]);
            }
        }
    }
    out
}

pub fn nearest_downsample_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h / f, w / f);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                dx[p * h * w + i * f * w + j * f] = g[(p * ho + i) * wo + j];
            }
        }
    }
    dx
}

/// x [P, H, W] -> [P, H*f, W*f] by pixel replication.
pub fn nearest_upsample<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                out.push(x[p * h * w + (i / f) * w + j / f]);
            }
        }
    }
    out
}

pub fn nearest_upsample_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                dx[p * h * w + (i / f) * w + j / f] += g[(p * ho + i) * wo + j];
            }
        }
    }
    dx
}
