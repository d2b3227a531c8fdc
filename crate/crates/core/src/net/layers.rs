//! Building blocks of the video U-Net. Every block operates on frame-batched
//! features `[B·N, C, H, W]`; temporal blocks regroup frames internally.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Var;

use super::params::{Builder, ParamGroup, ParamId};

pub const NORM_EPS: f64 = 1e-5;

/// Parameters of one forward pass, bound to a graph.
pub(crate) struct Ctx<'g, T> {
    pub vars: Vec<Var<'g, T>>,
    /// Clips in the batch.
    pub batch: usize,
    /// Frames per clip in the current activations.
    pub frames: usize,
    pub temporal: bool,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        b.scoped(name, |b| Conv {
            w: b.normal("w", &[cout, cin, k, k], cin * k * k),
            b: b.zeros("b", &[cout]),
            stride,
            pad: k / 2,
        })
    }

    /// Weights and bias start at zero.
    pub fn zeroed<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        b.scoped(name, |b| Conv { w: b.zeros("w", &[cout, cin, k, k]), b: b.zeros("b", &[cout]), stride: 1, pad: k / 2 })
    }

    pub fn copy<T: Scalar>(&self, b: &mut Builder<'_, T>, name: &str) -> Self {
        b.scoped(name, |b| Conv { w: b.copy_of("w", self.w), b: b.copy_of("b", self.b), stride: self.stride, pad: self.pad })
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(ctx.p(self.w), Some(ctx.p(self.b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        b.scoped(name, |b| Linear { w: b.normal("w", &[cout, cin], cin), b: b.zeros("b", &[cout]) })
    }

    pub fn zeroed<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        b.scoped(name, |b| Linear { w: b.zeros("w", &[cout, cin]), b: b.zeros("b", &[cout]) })
    }

    pub fn copy<T: Scalar>(&self, b: &mut Builder<'_, T>, name: &str) -> Self {
        b.scoped(name, |b| Linear { w: b.copy_of("w", self.w), b: b.copy_of("b", self.b) })
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(ctx.p(self.w), Some(ctx.p(self.b)))
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub(crate) struct Norm {
    scale: ParamId,
    shift: ParamId,
    groups: usize,
    channels: usize,
}

impl Norm {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{groups} groups do not divide {channels} channels");
        b.scoped(name, |b| Norm {
            scale: b.ones("scale", &[channels]),
            shift: b.zeros("shift", &[channels]),
            groups,
            channels,
        })
    }

    pub fn copy<T: Scalar>(&self, b: &mut Builder<'_, T>, name: &str) -> Self {
        b.scoped(name, |b| Norm {
            scale: b.copy_of("scale", self.scale),
            shift: b.copy_of("shift", self.shift),
            groups: self.groups,
            channels: self.channels,
        })
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let c = self.channels;
        let h = x.group_norm(self.groups, T::c(NORM_EPS))?;
        let scale = ctx.p(self.scale).reshape(&[1, c, 1, 1])?;
        let shift = ctx.p(self.shift).reshape(&[1, c, 1, 1])?;
        h.mul(scale)?.add(shift)
    }
}

/// Conv residual block with a time/condition embedding projection. The first
/// normalization can be modulated by SPADE (γ, β).
#[derive(Clone, Debug)]
pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Linear,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    cout: usize,
}

impl ResBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        groups: usize,
    ) -> Self {
        b.scoped(name, |b| ResBlock {
            norm1: Norm::new(b, "norm1", cin, groups),
            conv1: Conv::new(b, "conv1", cin, cout, 3, 1),
            emb: Linear::new(b, "emb", emb_dim, cout),
            norm2: Norm::new(b, "norm2", cout, groups),
            conv2: Conv::new(b, "conv2", cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(b, "skip", cin, cout, 1, 1)),
            cout,
        })
    }

    pub fn copy<T: Scalar>(&self, b: &mut Builder<'_, T>, name: &str) -> Self {
        b.scoped(name, |b| ResBlock {
            norm1: self.norm1.copy(b, "norm1"),
            conv1: self.conv1.copy(b, "conv1"),
            emb: self.emb.copy(b, "emb"),
            norm2: self.norm2.copy(b, "norm2"),
            conv2: self.conv2.copy(b, "conv2"),
            skip: self.skip.as_ref().map(|s| s.copy(b, "skip")),
            cout: self.cout,
        })
    }

    /// `emb` is the activated embedding, one row per frame of `x`.
    pub fn forward<'g, T: Scalar>(
        &self,
        ctx: &Ctx<'g, T>,
        x: Var<'g, T>,
        emb: Var<'g, T>,
        spade: Option<(Var<'g, T>, Var<'g, T>)>,
    ) -> Result<Var<'g, T>> {
        let mut h = self.norm1.forward(ctx, x)?;
        if let Some((gamma, beta)) = spade {
            h = spade_modulate(h, gamma, beta)?;
        }
        let h = self.conv1.forward(ctx, h.silu())?;
        let rows = emb.shape()[0];
        let e = self.emb.forward(ctx, emb)?.reshape(&[rows, self.cout, 1, 1])?;
        let h = h.add(e)?;
        let h = self.conv2.forward(ctx, self.norm2.forward(ctx, h)?.silu())?;
        let skip = match &self.skip {
            Some(s) => s.forward(ctx, x)?,
            None => x,
        };
        skip.add(h)
    }
}

/// o = (γ + 1) ⊙ h̄ + β.
pub(crate) fn spade_modulate<'g, T: Scalar>(hbar: Var<'g, T>, gamma: Var<'g, T>, beta: Var<'g, T>) -> Result<Var<'g, T>> {
    hbar.mul(gamma)?.add(hbar)?.add(beta)
}

fn split_heads<'g, T: Scalar>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    // [R, L, C] -> [R, heads, L, d]
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])
}

fn merge_heads<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], s[1] * s[3]])
}

#[derive(Clone, Debug)]
struct Qkv {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl Qkv {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, c: usize, zero_out: bool) -> Self {
        Qkv {
            q: Linear::new(b, "q", c, c),
            k: Linear::new(b, "k", c, c),
            v: Linear::new(b, "v", c, c),
            out: if zero_out { Linear::zeroed(b, "out", c, c) } else { Linear::new(b, "out", c, c) },
        }
    }

    fn copy<T: Scalar>(&self, b: &mut Builder<'_, T>) -> Self {
        Qkv { q: self.q.copy(b, "q"), k: self.k.copy(b, "k"), v: self.v.copy(b, "v"), out: self.out.copy(b, "out") }
    }

    /// Multi-head self-attention over tokens `[R, L, C]`.
    fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, tokens: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
        let q = split_heads(self.q.forward(ctx, tokens)?, heads)?;
        let k = split_heads(self.k.forward(ctx, tokens)?, heads)?;
        let v = split_heads(self.v.forward(ctx, tokens)?, heads)?;
        self.out.forward(ctx, merge_heads(q.attention(k, v)?)?)
    }
}

/// Self-attention over the H·W positions of each frame.
#[derive(Clone, Debug)]
pub(crate) struct SpatialAttention {
    norm: Norm,
    qkv: Qkv,
    heads: usize,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize, heads: usize, groups: usize) -> Self {
        b.scoped(name, |b| SpatialAttention { norm: Norm::new(b, "norm", c, groups), qkv: Qkv::new(b, c, false), heads })
    }

    pub fn copy<T: Scalar>(&self, b: &mut Builder<'_, T>, name: &str) -> Self {
        b.scoped(name, |b| SpatialAttention { norm: self.norm.copy(b, "norm"), qkv: self.qkv.copy(b), heads: self.heads })
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (r, c, hw) = (s[0], s[1], s[2] * s[3]);
        let tokens = self.norm.forward(ctx, x)?.reshape(&[r, c, hw])?.permute(&[0, 2, 1])?;
        let out = self.qkv.forward(ctx, tokens, self.heads)?;
        x.add(out.permute(&[0, 2, 1])?.reshape(&s)?)
    }
}

/// Sinusoidal position code for `frames` positions of width `dim`.
fn frame_positions<T: Scalar>(frames: usize, dim: usize) -> crate::tensor::Tensor<T> {
    let enc = super::sinusoidal(&(0..frames).map(|f| f as f64).collect::<Vec<_>>(), dim);
    enc.reshape(&[1, frames, dim]).expect("frames x dim")
}

/// Self-attention across the frames at each spatial position. The output
/// projection starts at zero, so the block starts as the identity.
#[derive(Clone, Debug)]
pub(crate) struct TemporalAttention {
    norm: Norm,
    qkv: Qkv,
    heads: usize,
}

impl TemporalAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize, heads: usize, groups: usize) -> Self {
        b.with_group(ParamGroup::Temporal, |b| {
            b.scoped(name, |b| TemporalAttention { norm: Norm::new(b, "norm", c, groups), qkv: Qkv::new(b, c, true), heads })
        })
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (bsz, n, c, hw) = (ctx.batch, ctx.frames, s[1], s[2] * s[3]);
        let h = self.norm.forward(ctx, x)?.reshape(&[bsz, n, c, hw])?.permute(&[0, 3, 1, 2])?.reshape(&[bsz * hw, n, c])?;
        let pos = x.graph().constant(frame_positions(n, c));
        let tokens = h.add(pos)?;
        let out = self.qkv.forward(ctx, tokens, self.heads)?;
        let out = out.reshape(&[bsz, hw, n, c])?.permute(&[0, 2, 3, 1])?.reshape(&s)?;
        x.add(out)
    }
}

/// Residual temporal convolution with a zero-initialized `[C, C, kt]` kernel.
#[derive(Clone, Debug)]
pub(crate) struct TemporalConv {
    norm: Norm,
    w: ParamId,
    b: ParamId,
}

impl TemporalConv {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, c: usize, kt: usize, groups: usize) -> Self {
        b.with_group(ParamGroup::Temporal, |b| {
            b.scoped(name, |b| TemporalConv {
                norm: Norm::new(b, "norm", c, groups),
                w: b.zeros("w", &[c, c, kt]),
                b: b.zeros("b", &[c]),
            })
        })
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (bsz, n) = (ctx.batch, ctx.frames);
        let h = self.norm.forward(ctx, x)?.silu();
        let h = h.reshape(&[bsz, n, s[1], s[2], s[3]])?.permute(&[0, 2, 1, 3, 4])?;
        let h = h.conv1d_temporal(ctx.p(self.w), Some(ctx.p(self.b)))?;
        let h = h.permute(&[0, 2, 1, 3, 4])?.reshape(&s)?;
        x.add(h)
    }
}

/// Appearance injection at one point of the main branch.
#[derive(Clone, Debug)]
pub(crate) enum Injector {
    /// Zero-initialized 1×1 projection added to the block input.
    Add(Conv),
    /// Zero-initialized 3×3 convolutions producing γ and β.
    Spade { gamma: Conv, beta: Conv },
}

/// What an injector contributes to its block, computed from AppearNet
/// features and already spread over frames.
pub(crate) enum Injection<'g, T> {
    Add(Var<'g, T>),
    Spade(Var<'g, T>, Var<'g, T>),
}

impl Injector {
    pub fn compute<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, feat: Var<'g, T>) -> Result<Injection<'g, T>> {
        Ok(match self {
            Injector::Add(p) => Injection::Add(p.forward(ctx, feat)?),
            Injector::Spade { gamma, beta } => Injection::Spade(gamma.forward(ctx, feat)?, beta.forward(ctx, feat)?),
        })
    }
}

impl<'g, T: Scalar> Injection<'g, T> {
    pub fn map(self, f: impl Fn(Var<'g, T>) -> Result<Var<'g, T>>) -> Result<Self> {
        Ok(match self {
            Injection::Add(a) => Injection::Add(f(a)?),
            Injection::Spade(g, b) => Injection::Spade(f(g)?, f(b)?),
        })
    }
}
