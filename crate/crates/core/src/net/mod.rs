//! Toy 3-D U-Net with zero-initialized temporal layers, the AppearNet branch
//! and the four appearance-injection variants.

mod layers;
mod params;

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

use layers::{
    Conv, Ctx, Injection, Injector, Linear, Norm, ResBlock, SpatialAttention, TemporalAttention, TemporalConv,
};
pub use layers::NORM_EPS;
pub use params::{Param, ParamGroup, ParamId, ParamStore};

/// How the conditioning frame(s) reach the denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InjectionMode {
    /// Appearance frames concatenated to z_t on channels; AppearNet unused.
    Concat,
    /// AppearNet features added at the decoder levels.
    AddToDec,
    /// AppearNet features added at the encoder and decoder levels.
    AddToEncDec,
    /// SPADE denormalization at the encoder and decoder levels.
    AddToEncDecSpade,
}

impl InjectionMode {
    pub const ALL: [InjectionMode; 4] =
        [InjectionMode::Concat, InjectionMode::AddToDec, InjectionMode::AddToEncDec, InjectionMode::AddToEncDecSpade];

    pub fn name(self) -> &'static str {
        match self {
            InjectionMode::Concat => "concat",
            InjectionMode::AddToDec => "add-dec",
            InjectionMode::AddToEncDec => "add-encdec",
            InjectionMode::AddToEncDecSpade => "add-encdec-spade",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown injection mode `{s}`")))
    }

    pub fn uses_appearnet(self) -> bool {
        self != InjectionMode::Concat
    }

    fn injects_encoder(self) -> bool {
        matches!(self, InjectionMode::AddToEncDec | InjectionMode::AddToEncDecSpade)
    }
}

impl std::fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// Latent channels C.
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Level indices (0 = finest) that carry spatial and temporal attention.
    /// The middle block always has attention.
    pub attention_levels: Vec<usize>,
    pub head_channels: usize,
    pub temporal_kernel: usize,
    pub num_frames: usize,
    /// Latent height and width.
    pub resolution: usize,
    /// Real condition ids are `0..cond_vocab_size`; `cond_vocab_size` itself is
    /// the null id.
    pub cond_vocab_size: usize,
    pub cond_embed_dim: usize,
    pub injection_mode: InjectionMode,
    pub norm_groups: usize,
    /// Add z_t to the output, so the layers learn ε − z_t. At high noise ε is
    /// almost z_t and the plain network struggles to reproduce it exactly.
    pub input_skip: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_levels: vec![1, 2],
            head_channels: 32,
            temporal_kernel: 3,
            num_frames: 9,
            resolution: 16,
            cond_vocab_size: 6,
            cond_embed_dim: 64,
            injection_mode: InjectionMode::AddToEncDecSpade,
            norm_groups: 8,
            input_skip: true,
        }
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>> {
    let v = value.trim().trim_start_matches('[').trim_end_matches(']');
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad integer `{s}` in list"))))
        .collect()
}

fn fmt_list(v: &[usize]) -> String {
    format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn level_channels(&self, j: usize) -> usize {
        self.base_channels * self.channel_multipliers[j]
    }

    pub fn null_cond(&self) -> usize {
        self.cond_vocab_size
    }

    fn heads(&self, channels: usize) -> usize {
        (channels / self.head_channels).max(1)
    }

    /// Width of the time/condition embedding.
    pub fn embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.in_channels == 0 || self.base_channels == 0 || self.num_frames == 0 || self.head_channels == 0 {
            return bad("channel, frame and head counts must be positive".into());
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad(format!("bad channel multipliers {:?}", self.channel_multipliers));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("attention level {l} outside {} levels", self.levels()));
        }
        let down = 1usize << (self.levels() - 1);
        if self.resolution == 0 || self.resolution % down != 0 {
            return bad(format!("resolution {} not divisible by {down}", self.resolution));
        }
        if self.temporal_kernel == 0 || self.temporal_kernel % 2 == 0 {
            return bad(format!("temporal kernel {} must be odd", self.temporal_kernel));
        }
        if self.cond_embed_dim == 0 {
            return bad("cond_embed_dim must be positive".into());
        }
        for j in 0..self.levels() {
            let c = self.level_channels(j);
            if c % self.norm_groups != 0 || self.base_channels % self.norm_groups != 0 {
                return bad(format!("{} groups do not divide {c} channels", self.norm_groups));
            }
            if c % self.heads(c) != 0 {
                return bad(format!("{c} channels do not split into {} heads", self.heads(c)));
            }
        }
        Ok(())
    }

    /// Config keys and values in the `key = value` spelling.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("channel_multipliers", fmt_list(&self.channel_multipliers)),
            ("attention_levels", fmt_list(&self.attention_levels)),
            ("head_channels", self.head_channels.to_string()),
            ("temporal_kernel", self.temporal_kernel.to_string()),
            ("num_frames", self.num_frames.to_string()),
            ("resolution", self.resolution.to_string()),
            ("cond_vocab_size", self.cond_vocab_size.to_string()),
            ("cond_embed_dim", self.cond_embed_dim.to_string()),
            ("injection_mode", self.injection_mode.name().to_string()),
            ("norm_groups", self.norm_groups.to_string()),
            ("input_skip", self.input_skip.to_string()),
        ]
    }

    /// Set one field. Returns `Ok(false)` if the key is not a model key.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let int = |v: &str| -> Result<usize> {
            v.trim().parse().map_err(|_| Error::InvalidArgument(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "in_channels" => self.in_channels = int(value)?,
            "base_channels" => self.base_channels = int(value)?,
            "channel_multipliers" => self.channel_multipliers = parse_list(value)?,
            "attention_levels" => self.attention_levels = parse_list(value)?,
            "head_channels" => self.head_channels = int(value)?,
            "temporal_kernel" => self.temporal_kernel = int(value)?,
            "num_frames" => self.num_frames = int(value)?,
            "resolution" => self.resolution = int(value)?,
            "cond_vocab_size" => self.cond_vocab_size = int(value)?,
            "cond_embed_dim" => self.cond_embed_dim = int(value)?,
            "injection_mode" => self.injection_mode = InjectionMode::parse(value.trim())?,
            "norm_groups" => self.norm_groups = int(value)?,
            "input_skip" => {
                self.input_skip = value.trim().parse().map_err(|_| {
                    Error::InvalidArgument(format!("`{key}` expects true or false, got `{value}`"))
                })?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Sinusoidal code `[len, dim]`: sines in the first half, cosines in the
/// second, frequencies 10000^(−i/half). An odd trailing column is zero.
pub fn sinusoidal<T: Scalar>(positions: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); positions.len() * dim];
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data[r * dim + i] = T::c((p * freq).sin());
            data[r * dim + half + i] = T::c((p * freq).cos());
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("sized above")
}

/// N copies of z_c along a new leading frame axis.
pub fn appearnet_input<T: Scalar>(z_c: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
    if frames == 0 {
        return Err(Error::InvalidArgument("need at least one frame".into()));
    }
    let mut shape = vec![frames];
    shape.extend_from_slice(z_c.shape());
    let mut data = Vec::with_capacity(frames * z_c.numel());
    for _ in 0..frames {
        data.extend_from_slice(z_c.data());
    }
    Tensor::new(shape, data)
}

/// Frame i = (1 − i/(N−1))·z_first + (i/(N−1))·z_last.
pub fn tsr_appearnet_input<T: Scalar>(z_first: &Tensor<T>, z_last: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
    if frames < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 frames, got {frames}")));
    }
    if z_first.shape() != z_last.shape() {
        return Err(Error::shape("tsr_appearnet_input", format!("{:?} vs {:?}", z_first.shape(), z_last.shape())));
    }
    let items: Vec<Tensor<T>> = (0..frames)
        .map(|i| {
            let w = i as f64 / (frames - 1) as f64;
            let (a, b) = (T::c(1.0 - w), T::c(w));
            z_first.zip_map(z_last, |f, l| a * f + b * l)
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&items)
}

/// (γ + 1)⊙GN(h) + β with γ = conv_γ(f_a), β = conv_β(f_a): both 3×3 convs
/// with bias, given as `[C_h, C_f, 3, 3]` weights. `h` and `f_a` are
/// `[B, C, H, W]` with matching batch and spatial extent.
pub fn spade_inject<T: Scalar>(
    h: &Tensor<T>,
    f_a: &Tensor<T>,
    groups: usize,
    gamma: (&Tensor<T>, &Tensor<T>),
    beta: (&Tensor<T>, &Tensor<T>),
) -> Result<Tensor<T>> {
    let (hs, fs) = (h.shape(), f_a.shape());
    if hs.len() != 4 || fs.len() != 4 || hs[0] != fs[0] || hs[2..] != fs[2..] {
        return Err(Error::shape("spade_inject", format!("h {hs:?} vs f_a {fs:?}")));
    }
    let g = Graph::new();
    let hv = g.constant(h.clone());
    let fv = g.constant(f_a.clone());
    let conv = |(w, b): (&Tensor<T>, &Tensor<T>)| {
        let k = w.shape().get(2).copied().unwrap_or(1);
        fv.conv2d(g.constant(w.clone()), Some(g.constant(b.clone())), 1, k / 2)
    };
    let (gm, bt) = (conv(gamma)?, conv(beta)?);
    let hbar = hv.group_norm(groups, T::c(NORM_EPS))?;
    Ok((*layers::spade_modulate(hbar, gm, bt)?.value()).clone())
}

/// Conditioning frames for a batch of clips.
#[derive(Clone, Debug, PartialEq)]
pub enum Appearance<T> {
    /// One center frame per clip, `[B, C, H, W]`, replicated over frames.
    Center(Tensor<T>),
    /// A full per-frame sequence per clip, `[B, N, C, H, W]`.
    Sequence(Tensor<T>),
}

/// One batched model evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput<T> {
    /// Noisy latents `[B, N, C, H, W]`.
    pub z_t: Tensor<T>,
    /// Diffusion time per clip on the step scale 0..=T (fractional allowed).
    pub t: Vec<f64>,
    pub cond: Vec<usize>,
    pub appearance: Appearance<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Run the temporal layers. Off gives the frame-by-frame spatial network.
    pub temporal: bool,
    /// Apply AppearNet injection (ignored in concat mode).
    pub inject: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { temporal: true, inject: true }
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: Option<SpatialAttention>,
    tattn: Option<TemporalAttention>,
    tconv: TemporalConv,
    /// Downsample (encoder) or upsample conv (decoder).
    resample: Option<Conv>,
}

#[derive(Clone, Debug)]
struct Middle {
    res1: ResBlock,
    attn: SpatialAttention,
    tattn: TemporalAttention,
    tconv: TemporalConv,
    res2: ResBlock,
}

/// Spatial encoder and middle of AppearNet.
#[derive(Clone, Debug)]
struct AppearNet {
    conv_in: Conv,
    levels: Vec<(ResBlock, Option<SpatialAttention>, Option<Conv>)>,
    mid_res1: ResBlock,
    mid_attn: SpatialAttention,
    mid_res2: ResBlock,
}

#[derive(Clone, Debug)]
struct Injectors {
    enc: Vec<Injector>,
    mid: Option<Injector>,
    dec: Vec<Injector>,
}

#[derive(Debug)]
pub struct UNet3D<T> {
    config: UNetConfig,
    params: ParamStore<T>,
    time_in: Linear,
    time_out: Linear,
    cond_table: ParamId,
    cond_proj: Linear,
    conv_in: Conv,
    down: Vec<Level>,
    mid: Middle,
    /// Decoder levels, coarsest first.
    up: Vec<Level>,
    out_norm: Norm,
    out_conv: Conv,
    appearnet: Option<AppearNet>,
    injectors: Option<Injectors>,
    appearnet_calls: AtomicUsize,
}

impl<T: Scalar> Clone for UNet3D<T> {
    fn clone(&self) -> Self {
        UNet3D {
            config: self.config.clone(),
            params: self.params.clone(),
            time_in: self.time_in.clone(),
            time_out: self.time_out.clone(),
            cond_table: self.cond_table,
            cond_proj: self.cond_proj.clone(),
            conv_in: self.conv_in.clone(),
            down: self.down.clone(),
            mid: self.mid.clone(),
            up: self.up.clone(),
            out_norm: self.out_norm.clone(),
            out_conv: self.out_conv.clone(),
            appearnet: self.appearnet.clone(),
            injectors: self.injectors.clone(),
            appearnet_calls: AtomicUsize::new(self.appearnet_calls.load(Ordering::Relaxed)),
        }
    }
}

/// AppearNet features: one per encoder level, then the middle output.
struct Features<'g, T> {
    levels: Vec<Var<'g, T>>,
    mid: Var<'g, T>,
}

impl<T: Scalar> UNet3D<T> {
    /// Build a model with weights drawn from `seed`.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut b = params::Builder::new(&mut store, &mut rng);
        let cfg = &config;
        let g = cfg.norm_groups;
        let e = cfg.embed_dim();
        let kt = cfg.temporal_kernel;
        let levels = cfg.levels();

        let time_in = Linear::new(&mut b, "time.in", cfg.base_channels, e);
        let time_out = Linear::new(&mut b, "time.out", e, e);
        let cond_table = b.normal("cond.table", &[cfg.cond_vocab_size + 1, cfg.cond_embed_dim], 1);
        let cond_proj = Linear::new(&mut b, "cond.proj", cfg.cond_embed_dim, e);

        let cin = if cfg.injection_mode == InjectionMode::Concat { 2 * cfg.in_channels } else { cfg.in_channels };
        let conv_in = Conv::new(&mut b, "conv_in", cin, cfg.base_channels, 3, 1);

        let mut down = Vec::with_capacity(levels);
        let mut ch = cfg.base_channels;
        for j in 0..levels {
            let co = cfg.level_channels(j);
            let attn = cfg.attention_levels.contains(&j);
            let level = b.scoped(format!("down{j}"), |b| Level {
                res: ResBlock::new(b, "res", ch, co, e, g),
                attn: attn.then(|| SpatialAttention::new(b, "attn", co, cfg.heads(co), g)),
                tattn: attn.then(|| TemporalAttention::new(b, "tattn", co, cfg.heads(co), g)),
                tconv: TemporalConv::new(b, "tconv", co, kt, g),
                resample: (j + 1 < levels).then(|| Conv::new(b, "down", co, co, 3, 2)),
            });
            down.push(level);
            ch = co;
        }

        let mid = b.scoped("mid", |b| Middle {
            res1: ResBlock::new(b, "res1", ch, ch, e, g),
            attn: SpatialAttention::new(b, "attn", ch, cfg.heads(ch), g),
            tattn: TemporalAttention::new(b, "tattn", ch, cfg.heads(ch), g),
            tconv: TemporalConv::new(b, "tconv", ch, kt, g),
            res2: ResBlock::new(b, "res2", ch, ch, e, g),
        });

        let mut up = Vec::with_capacity(levels);
        for j in (0..levels).rev() {
            let co = cfg.level_channels(j);
            let attn = cfg.attention_levels.contains(&j);
            let level = b.scoped(format!("up{j}"), |b| Level {
                res: ResBlock::new(b, "res", ch + co, co, e, g),
                attn: attn.then(|| SpatialAttention::new(b, "attn", co, cfg.heads(co), g)),
                tattn: attn.then(|| TemporalAttention::new(b, "tattn", co, cfg.heads(co), g)),
                tconv: TemporalConv::new(b, "tconv", co, kt, g),
                resample: (j > 0).then(|| Conv::new(b, "up", co, co, 3, 1)),
            });
            up.push(level);
            ch = co;
        }

        let out_norm = Norm::new(&mut b, "out.norm", ch, g);
        let out_conv = Conv::new(&mut b, "out.conv", ch, cfg.in_channels, 3, 1);

        // AppearNet copies the trained weights and draws nothing from the rng,
        // so the main branch is identical across modes for a given seed.
        let appearnet = cfg.injection_mode.uses_appearnet().then(|| {
            b.scoped("appearnet", |b| AppearNet {
                conv_in: conv_in.copy(b, "conv_in"),
                levels: down
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        b.scoped(format!("down{j}"), |b| {
                            (
                                l.res.copy(b, "res"),
                                l.attn.as_ref().map(|a| a.copy(b, "attn")),
                                l.resample.as_ref().map(|c| c.copy(b, "down")),
                            )
                        })
                    })
                    .collect(),
                mid_res1: b.scoped("mid", |b| mid.res1.copy(b, "res1")),
                mid_attn: b.scoped("mid", |b| mid.attn.copy(b, "attn")),
                mid_res2: b.scoped("mid", |b| mid.res2.copy(b, "res2")),
            })
        });

        let injectors = cfg.injection_mode.uses_appearnet().then(|| {
            let spade = cfg.injection_mode == InjectionMode::AddToEncDecSpade;
            let make = |b: &mut params::Builder<'_, T>, name: String, cf: usize, ch: usize| {
                b.scoped(name, |b| {
                    if spade {
                        Injector::Spade {
                            gamma: Conv::zeroed(b, "gamma", cf, ch, 3),
                            beta: Conv::zeroed(b, "beta", cf, ch, 3),
                        }
                    } else {
                        Injector::Add(Conv::zeroed(b, "proj", cf, ch, 1))
                    }
                })
            };
            b.scoped("inject", |b| {
                let mut enc = Vec::new();
                let mut dec = Vec::new();
                let mut mid_inj = None;
                if cfg.injection_mode.injects_encoder() {
                    let mut ch = cfg.base_channels;
                    for j in 0..levels {
                        enc.push(make(b, format!("enc{j}"), cfg.level_channels(j), ch));
                        ch = cfg.level_channels(j);
                    }
                    mid_inj = Some(make(b, "mid".into(), ch, ch));
                }
                let mut ch = cfg.level_channels(levels - 1);
                for j in (0..levels).rev() {
                    let co = cfg.level_channels(j);
                    dec.push(make(b, format!("dec{j}"), co, ch + co));
                    ch = co;
                }
                Injectors { enc, mid: mid_inj, dec }
            })
        });

        drop(b);
        Ok(UNet3D {
            config,
            params: store,
            time_in,
            time_out,
            cond_table,
            cond_proj,
            conv_in,
            down,
            mid,
            up,
            out_norm,
            out_conv,
            appearnet,
            injectors,
            appearnet_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replace all parameter values. Names, groups and shapes must match this
    /// architecture.
    pub fn load_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Format(format!("{} parameters for a model with {}", params.len(), self.params.len())));
        }
        for (have, new) in self.params.iter().zip(params.iter()) {
            if have.name != new.name || have.group != new.group || have.value.shape() != new.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not fit `{}` {:?}",
                    new.name,
                    new.value.shape(),
                    have.name,
                    have.value.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// How many forward passes evaluated the AppearNet branch.
    pub fn appearnet_calls(&self) -> usize {
        self.appearnet_calls.load(Ordering::Relaxed)
    }

    /// Names of AppearNet parameters, including the injection projections.
    pub fn is_appearnet_param(name: &str) -> bool {
        name.starts_with("appearnet.") || name.starts_with("inject.")
    }

    fn check_input(&self, input: &NetInput<T>) -> Result<(usize, usize)> {
        let s = input.z_t.shape();
        let c = &self.config;
        if s.len() != 5 || s[2] != c.in_channels || s[3] != s[4] || s[3] % (1 << (c.levels() - 1)) != 0 {
            return Err(Error::shape("forward", format!("z_t {s:?} for {} channels", c.in_channels)));
        }
        let (bsz, n) = (s[0], s[1]);
        if input.t.len() != bsz || input.cond.len() != bsz {
            return Err(Error::shape(
                "forward",
                format!("{bsz} clips but {} times and {} condition ids", input.t.len(), input.cond.len()),
            ));
        }
        if let Some(&bad) = input.cond.iter().find(|&&id| id > c.null_cond()) {
            return Err(Error::InvalidArgument(format!("condition id {bad} beyond null id {}", c.null_cond())));
        }
        let ok = match &input.appearance {
            Appearance::Center(a) => a.shape().len() == 4 && a.shape()[0] == bsz && a.shape()[1..] == s[2..],
            Appearance::Sequence(a) => a.shape() == s,
        };
        if !ok {
            let a = match &input.appearance {
                Appearance::Center(a) | Appearance::Sequence(a) => a.shape(),
            };
            return Err(Error::shape("forward", format!("appearance {a:?} for z_t {s:?}")));
        }
        Ok((bsz, n))
    }

    /// Batched forward on a graph with parameters bound by
    /// [`ParamStore::bind`]. Returns the predicted noise `[B, N, C, H, W]`.
    pub fn forward_on<'g>(
        &self,
        graph: &'g Graph<T>,
        params: &[Var<'g, T>],
        input: &NetInput<T>,
        opts: ForwardOptions,
    ) -> Result<Var<'g, T>> {
        let (bsz, n) = self.check_input(input)?;
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!("{} bound parameters for {}", params.len(), self.params.len())));
        }
        let cfg = &self.config;
        let s = input.z_t.shape().to_vec();
        let frame_shape = [bsz * n, s[2], s[3], s[4]];
        let ctx = Ctx { vars: params.to_vec(), batch: bsz, frames: n, temporal: opts.temporal };

        // Time + condition embedding, one row per clip.
        let tcode = graph.constant(sinusoidal(&input.t, cfg.base_channels));
        let temb = self.time_out.forward(&ctx, self.time_in.forward(&ctx, tcode)?.silu())?;
        let cemb = self.cond_proj.forward(&ctx, ctx.p(self.cond_table).embedding(&input.cond)?)?;
        let emb_clip = temb.add(cemb)?.silu();
        let e = cfg.embed_dim();
        let emb = emb_clip.reshape(&[bsz, 1, e])?.expand(&[bsz, n, e])?.reshape(&[bsz * n, e])?;

        let z = graph.constant(input.z_t.clone()).reshape(&frame_shape)?;
        let x = match (&input.appearance, cfg.injection_mode) {
            (Appearance::Center(a), InjectionMode::Concat) => {
                let rep = graph.constant(a.clone()).reshape(&[bsz, 1, s[2], s[3], s[4]])?;
                let rep = rep.expand(&s)?.reshape(&frame_shape)?;
                Var::concat_channels(&[z, rep])?
            }
            (Appearance::Sequence(a), InjectionMode::Concat) => {
                Var::concat_channels(&[z, graph.constant(a.clone()).reshape(&frame_shape)?])?
            }
            _ => z,
        };

        let inject = cfg.injection_mode.uses_appearnet() && opts.inject;
        let injections = if inject { Some(self.injections(&ctx, input, emb_clip, emb)?) } else { None };
        let (enc_inj, mut mid_inj, dec_inj) = match injections {
            Some((a, b, c)) => (a.into_iter().map(Some).collect(), b, c.into_iter().map(Some).collect()),
            None => (vec![], None, vec![]),
        };
        let mut enc_inj: Vec<Option<Injection<'g, T>>> = enc_inj;
        let mut dec_inj: Vec<Option<Injection<'g, T>>> = dec_inj;
        enc_inj.resize_with(cfg.levels(), || None);
        dec_inj.resize_with(cfg.levels(), || None);

        let mut h = self.conv_in.forward(&ctx, x)?;
        let mut skips = Vec::with_capacity(cfg.levels());
        for (level, inj) in self.down.iter().zip(enc_inj.iter_mut()) {
            h = self.level_body(&ctx, level, h, emb, inj.take())?;
            skips.push(h);
            if let Some(d) = &level.resample {
                h = d.forward(&ctx, h)?;
            }
        }

        let m = &self.mid;
        h = apply_res(&ctx, &m.res1, h, emb, mid_inj.take())?;
        h = m.attn.forward(&ctx, h)?;
        if ctx.temporal {
            h = m.tattn.forward(&ctx, h)?;
            h = m.tconv.forward(&ctx, h)?;
        }
        h = m.res2.forward(&ctx, h, emb, None)?;

        for (level, inj) in self.up.iter().zip(dec_inj.iter_mut()) {
            let skip = skips.pop().expect("one skip per level");
            h = Var::concat_channels(&[h, skip])?;
            h = self.level_body(&ctx, level, h, emb, inj.take())?;
            if let Some(u) = &level.resample {
                h = u.forward(&ctx, h.nearest_upsample(2)?)?;
            }
        }

        let out = self.out_conv.forward(&ctx, self.out_norm.forward(&ctx, h)?.silu())?;
        let out = if cfg.input_skip { out.add(z)? } else { out };
        out.reshape(&s)
    }

    fn level_body<'g>(
        &self,
        ctx: &Ctx<'g, T>,
        level: &Level,
        h: Var<'g, T>,
        emb: Var<'g, T>,
        inj: Option<Injection<'g, T>>,
    ) -> Result<Var<'g, T>> {
        let mut h = apply_res(ctx, &level.res, h, emb, inj)?;
        if let Some(a) = &level.attn {
            h = a.forward(ctx, h)?;
        }
        if ctx.temporal {
            if let Some(ta) = &level.tattn {
                h = ta.forward(ctx, h)?;
            }
            h = level.tconv.forward(ctx, h)?;
        }
        Ok(h)
    }

    /// Run AppearNet and the injectors. Center appearance is encoded once per
    /// clip and spread over the frames afterwards.
    #[allow(clippy::type_complexity)]
    fn injections<'g>(
        &self,
        ctx: &Ctx<'g, T>,
        input: &NetInput<T>,
        emb_clip: Var<'g, T>,
        emb_frames: Var<'g, T>,
    ) -> Result<(Vec<Injection<'g, T>>, Option<Injection<'g, T>>, Vec<Injection<'g, T>>)> {
        self.appearnet_calls.fetch_add(1, Ordering::Relaxed);
        let net = self.appearnet.as_ref().expect("appearnet modes build the branch");
        let inj = self.injectors.as_ref().expect("appearnet modes build injectors");
        let graph = emb_clip.graph();
        let (bsz, n) = (ctx.batch, ctx.frames);
        let s = input.z_t.shape();
        let (x, emb, spread) = match &input.appearance {
            Appearance::Center(a) => (graph.constant(a.clone()), emb_clip, true),
            Appearance::Sequence(a) => {
                (graph.constant(a.clone()).reshape(&[bsz * n, s[2], s[3], s[4]])?, emb_frames, false)
            }
        };
        let feats = self.run_appearnet(ctx, net, x, emb)?;
        let spread_fn = |v: Var<'g, T>| -> Result<Var<'g, T>> {
            if !spread {
                return Ok(v);
            }
            let vs = v.shape();
            let mut five = vec![bsz, 1];
            five.extend_from_slice(&vs[1..]);
            let mut full = five.clone();
            full[1] = n;
            let mut flat = vec![bsz * n];
            flat.extend_from_slice(&vs[1..]);
            v.reshape(&five)?.expand(&full)?.reshape(&flat)
        };
        let enc = if self.config.injection_mode.injects_encoder() {
            inj.enc
                .iter()
                .zip(&feats.levels)
                .map(|(i, &f)| i.compute(ctx, f)?.map(spread_fn))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let mid = match &inj.mid {
            Some(i) => Some(i.compute(ctx, feats.mid)?.map(spread_fn)?),
            None => None,
        };
        let dec = inj
            .dec
            .iter()
            .zip(feats.levels.iter().rev())
            .map(|(i, &f)| i.compute(ctx, f)?.map(spread_fn))
            .collect::<Result<Vec<_>>>()?;
        Ok((enc, mid, dec))
    }

    fn run_appearnet<'g>(
        &self,
        ctx: &Ctx<'g, T>,
        net: &AppearNet,
        x: Var<'g, T>,
        emb: Var<'g, T>,
    ) -> Result<Features<'g, T>> {
        let mut h = net.conv_in.forward(ctx, x)?;
        let mut levels = Vec::with_capacity(net.levels.len());
        for (res, attn, down) in &net.levels {
            h = res.forward(ctx, h, emb, None)?;
            if let Some(a) = attn {
                h = a.forward(ctx, h)?;
            }
            levels.push(h);
            if let Some(d) = down {
                h = d.forward(ctx, h)?;
            }
        }
        h = net.mid_res1.forward(ctx, h, emb, None)?;
        h = net.mid_attn.forward(ctx, h)?;
        h = net.mid_res2.forward(ctx, h, emb, None)?;
        Ok(Features { levels, mid: h })
    }

    /// Forward without gradient tracking.
    pub fn forward_batch(&self, input: &NetInput<T>, opts: ForwardOptions) -> Result<Tensor<T>> {
        let g = Graph::new();
        let params = self.params.bind(&g, false);
        let out = self.forward_on(&g, &params, input, opts)?;
        Ok(unwrap_rc(out.value()))
    }

    /// Predicted noise for one clip `z_t: [N, C, H, W]` at step-scale time `t`
    /// with center frame `z_c: [C, H, W]`.
    pub fn forward(&self, z_t: &Tensor<T>, t: f64, z_c: &Tensor<T>, cond: usize) -> Result<Tensor<T>> {
        let input = single_clip(z_t, t, cond, Appearance::Center(add_batch(z_c)?))?;
        Ok(self.forward_batch(&input, ForwardOptions::default())?.index0(0))
    }

    /// The spatial network applied to each frame on its own, with the temporal
    /// layers skipped. Same input and output layout as [`Self::forward_batch`].
    pub fn forward_per_frame(&self, input: &NetInput<T>) -> Result<Tensor<T>> {
        let (bsz, n) = self.check_input(input)?;
        let s = input.z_t.shape();
        let per_clip_frame = s[2] * s[3] * s[4];
        let mut out = vec![T::zero(); input.z_t.numel()];
        for f in 0..n {
            let slice = |src: &Tensor<T>| -> Result<Tensor<T>> {
                let mut data = Vec::with_capacity(bsz * per_clip_frame);
                for b in 0..bsz {
                    let off = (b * n + f) * per_clip_frame;
                    data.extend_from_slice(&src.data()[off..off + per_clip_frame]);
                }
                Tensor::new(vec![bsz, 1, s[2], s[3], s[4]], data)
            };
            let appearance = match &input.appearance {
                Appearance::Center(a) => Appearance::Center(a.clone()),
                Appearance::Sequence(a) => Appearance::Sequence(slice(a)?),
            };
            let sub = NetInput { z_t: slice(&input.z_t)?, t: input.t.clone(), cond: input.cond.clone(), appearance };
            let y = self.forward_batch(&sub, ForwardOptions { temporal: false, inject: true })?;
            for b in 0..bsz {
                let off = (b * n + f) * per_clip_frame;
                out[off..off + per_clip_frame]
                    .copy_from_slice(&y.data()[b * per_clip_frame..(b + 1) * per_clip_frame]);
            }
        }
        Tensor::new(s.to_vec(), out)
    }
}

fn apply_res<'g, T: Scalar>(
    ctx: &Ctx<'g, T>,
    res: &ResBlock,
    h: Var<'g, T>,
    emb: Var<'g, T>,
    inj: Option<Injection<'g, T>>,
) -> Result<Var<'g, T>> {
    match inj {
        None => res.forward(ctx, h, emb, None),
        Some(Injection::Add(a)) => res.forward(ctx, h.add(a)?, emb, None),
        Some(Injection::Spade(g, b)) => res.forward(ctx, h, emb, Some((g, b))),
    }
}

fn unwrap_rc<T: Clone>(v: std::rc::Rc<T>) -> T {
    std::rc::Rc::try_unwrap(v).unwrap_or_else(|rc| (*rc).clone())
}

fn add_batch<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

/// Wrap a single clip as a batch of one.
pub fn single_clip<T: Scalar>(z_t: &Tensor<T>, t: f64, cond: usize, appearance: Appearance<T>) -> Result<NetInput<T>> {
    Ok(NetInput { z_t: add_batch(z_t)?, t: vec![t], cond: vec![cond], appearance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in InjectionMode::ALL {
            assert_eq!(InjectionMode::parse(m.name()).unwrap(), m);
        }
        assert!(InjectionMode::parse("spade").is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let c = UNetConfig { channel_multipliers: vec![1, 3], attention_levels: vec![], ..UNetConfig::default() };
        let mut d = UNetConfig::default();
        for (k, v) in c.to_kv() {
            assert!(d.apply_kv(k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(!d.apply_kv("learning_rate", "1").unwrap());
    }

    #[test]
    fn sinusoid_rows() {
        let s = sinusoidal::<f64>(&[0.0, 1.0], 4);
        assert_eq!(&s.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((s.data()[4] - 1f64.sin()).abs() < 1e-15);
    }
}
