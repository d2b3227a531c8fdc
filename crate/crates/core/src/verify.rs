//! Named property suites with a plain-text report of measured values against
//! tolerances.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{class_frechet, frechet_distance, FeatureStats, Featurizer, DEFAULT_FEATURIZER_SEED};
use crate::net::{spade_inject, Appearance, ForwardOptions, InjectionMode, NetInput, UNet3D, UNetConfig};
use crate::prior::{initial_sampling_noise, make_training_noise, q_sample, shift_noise, AppearancePrior, VideoClip};
use crate::rng::Rng;
use crate::sampler::{integrate, sample, sample_from_noise, GaussianOracle, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::gradcheck::{self, GradCheck};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{make_dataset, SpriteDatasetConfig};

pub const SUITES: [&str; 7] = ["gradients", "moments", "zeroinit", "shifted-init", "gaussian-ode", "schedule", "frechet"];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub measured: f64,
    /// Pass when `measured <= tolerance`.
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
    /// Wall time per suite in seconds.
    pub timings: Vec<(&'static str, f64)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, suite: &'static str, name: impl Into<String>, measured: f64, tolerance: f64) {
        let passed = measured <= tolerance;
        self.checks.push(Check { suite, name: name.into(), measured, tolerance, passed });
    }

    /// One `suite.check = PASS|FAIL measured=... tolerance=...` line per check.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{}.{} = {verdict} measured={:e} tolerance={:e}", c.suite, c.name, c.measured, c.tolerance);
        }
        for (suite, secs) in &self.timings {
            let _ = writeln!(s, "{suite}.seconds = {secs:.2}");
        }
        let _ = writeln!(s, "result = {}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }

    pub fn suite_passed(&self, suite: &str) -> bool {
        self.checks.iter().filter(|c| c.suite == suite).all(|c| c.passed)
    }
}

/// Run one suite by name, or every suite for `all`.
pub fn run(suite: &str) -> Result<Report> {
    let names: Vec<&'static str> = match suite {
        "all" => SUITES.to_vec(),
        s => vec![*SUITES.iter().find(|n| **n == s).ok_or_else(|| Error::UnknownSuite(s.to_string()))?],
    };
    let mut report = Report::default();
    for name in names {
        let t0 = Instant::now();
        match name {
            "gradients" => gradients(&mut report)?,
            "moments" => moments(&mut report)?,
            "zeroinit" => zeroinit(&mut report)?,
            "shifted-init" => shifted_init(&mut report)?,
            "gaussian-ode" => gaussian_ode(&mut report)?,
            "schedule" => schedule(&mut report)?,
            "frechet" => frechet(&mut report)?,
            _ => unreachable!(),
        }
        report.timings.push((name, t0.elapsed().as_secs_f64()));
    }
    Ok(report)
}

pub const GRAD_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
/// The network loss sums hundreds of outputs; a larger step keeps round-off
/// below the error floor on entries whose true gradient is zero (attention
/// key biases).
const NET_GRAD_STEP: f64 = 1e-4;

/// Contract an output with fixed random weights so every output element
/// reaches the loss with a distinct coefficient.
fn probe<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let r = Tensor::randn(&out.shape(), &mut Rng::new(seed));
    Ok(out.mul(out.graph().constant(r))?.sum())
}

fn grad_check(
    report: &mut Report,
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
) -> Result<()> {
    let r: GradCheck = gradcheck::check(inputs, GRAD_STEP, |g, v| probe(f(g, v)?, 99))?;
    // A check against vanishing gradients proves nothing.
    let measured = if r.max_abs_grad > 1e-6 { r.max_rel_err } else { f64::INFINITY };
    report.push("gradients", name, measured, GRAD_TOL);
    Ok(())
}

fn small_model_config(mode: InjectionMode) -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        head_channels: 8,
        norm_groups: 4,
        cond_embed_dim: 8,
        num_frames: 3,
        resolution: 4,
        channel_multipliers: vec![1, 2],
        attention_levels: vec![1],
        injection_mode: mode,
        ..UNetConfig::default()
    }
}

fn gradients(report: &mut Report) -> Result<()> {
    let mut rng = Rng::new(7);
    let mut rn = |shape: &[usize]| Tensor::<f64>::randn(shape, &mut rng);
    grad_check(report, "add", &[rn(&[2, 3]), rn(&[1, 3])], |_, v| v[0].add(v[1]))?;
    grad_check(report, "sub", &[rn(&[2, 3]), rn(&[2, 1])], |_, v| v[0].sub(v[1]))?;
    grad_check(report, "mul", &[rn(&[2, 3]), rn(&[2, 3])], |_, v| v[0].mul(v[1]))?;
    grad_check(report, "scalar_mul", &[rn(&[4])], |_, v| Ok(v[0].scalar_mul(-1.7)))?;
    grad_check(report, "silu", &[rn(&[2, 5])], |_, v| Ok(v[0].silu()))?;
    grad_check(report, "linear", &[rn(&[3, 4]), rn(&[2, 4]), rn(&[2])], |_, v| v[0].linear(v[1], Some(v[2])))?;
    grad_check(report, "conv2d", &[rn(&[2, 2, 5, 5]), rn(&[3, 2, 3, 3]), rn(&[3])], |_, v| {
        v[0].conv2d(v[1], Some(v[2]), 1, 1)
    })?;
    grad_check(report, "conv2d_strided", &[rn(&[1, 2, 6, 6]), rn(&[2, 2, 3, 3])], |_, v| v[0].conv2d(v[1], None, 2, 1))?;
    grad_check(report, "conv1d_temporal", &[rn(&[1, 2, 4, 2, 2]), rn(&[3, 2, 3]), rn(&[3])], |_, v| {
        v[0].conv1d_temporal(v[1], Some(v[2]))
    })?;
    grad_check(report, "group_norm", &[rn(&[2, 4, 3, 3])], |_, v| v[0].group_norm(2, 1e-5))?;
    grad_check(report, "attention", &[rn(&[1, 2, 3, 4]), rn(&[1, 2, 3, 4]), rn(&[1, 2, 3, 4])], |_, v| {
        v[0].attention(v[1], v[2])
    })?;
    grad_check(report, "softmax", &[rn(&[3, 4])], |_, v| Ok(v[0].softmax()))?;
    grad_check(report, "concat", &[rn(&[2, 1, 3]), rn(&[2, 2, 3])], |_, v| Var::concat(&[v[0], v[1]], 1))?;
    grad_check(report, "reshape", &[rn(&[2, 6])], |_, v| v[0].reshape(&[3, 4]))?;
    grad_check(report, "permute", &[rn(&[2, 3, 4])], |_, v| v[0].permute(&[2, 0, 1]))?;
    grad_check(report, "expand", &[rn(&[1, 3, 1])], |_, v| v[0].expand(&[2, 3, 4]))?;
    grad_check(report, "sum", &[rn(&[3, 2])], |g, v| Ok(v[0].mul(g.constant(Tensor::full(&[3, 2], 0.3)))?.sum()))?;
    grad_check(report, "mean", &[rn(&[3, 2])], |_, v| Ok(v[0].mul(v[0])?.mean()))?;
    grad_check(report, "embedding", &[rn(&[4, 3])], |_, v| v[0].embedding(&[2, 0, 2]))?;
    grad_check(report, "nearest_downsample", &[rn(&[1, 2, 4, 4])], |_, v| v[0].nearest_downsample(2))?;
    grad_check(report, "nearest_upsample", &[rn(&[1, 2, 2, 2])], |_, v| v[0].nearest_upsample(2))?;
    model_gradients(report)
}

/// Full network forward pass: analytic gradients of every parameter tensor,
/// at three entries each, against central differences.
fn model_gradients(report: &mut Report) -> Result<()> {
    let cfg = small_model_config(InjectionMode::AddToEncDecSpade);
    let mut model = UNet3D::<f64>::new(cfg.clone(), 3)?;
    let mut rng = Rng::new(4);
    // Open the zero-initialized branches so every path carries gradient.
    for p in model.params_mut().iter_mut() {
        let n = Tensor::randn(p.value.shape(), &mut rng);
        p.value = p.value.add(&n.scale(0.1))?;
    }
    let (n, c, r) = (cfg.num_frames, cfg.in_channels, cfg.resolution);
    let input = NetInput {
        z_t: Tensor::randn(&[2, n, c, r, r], &mut rng),
        t: vec![17.0, 640.0],
        cond: vec![1, cfg.null_cond()],
        appearance: Appearance::Center(Tensor::randn(&[2, c, r, r], &mut rng)),
    };
    let weights = Tensor::randn(input.z_t.shape(), &mut rng);
    let loss_of = |m: &UNet3D<f64>| -> Result<f64> {
        let out = m.forward_batch(&input, ForwardOptions::default())?;
        Ok(out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let g = Graph::new();
    let params = model.params().bind(&g, true);
    let out = model.forward_on(&g, &params, &input, ForwardOptions::default())?;
    let loss = out.mul(g.constant(weights.clone()))?.sum();
    let grads = g.backward(loss)?;
    let analytic: Vec<Option<Tensor<f64>>> = params.iter().map(|p| grads.get(*p).cloned()).collect();
    drop(grads);

    let mut worst: f64 = 0.0;
    let mut largest: f64 = 0.0;
    for i in 0..model.params().len() {
        let numel = model.params().iter().nth(i).expect("index in range").value.numel();
        let mut entries = vec![0, numel / 2, numel - 1];
        entries.dedup();
        for e in entries {
            let base = model.params().iter().nth(i).expect("index in range").value.data()[e];
            let mut eval_at = |v: f64| -> Result<f64> {
                let p = model.params_mut().iter_mut().nth(i).expect("index in range");
                let mut d = p.value.data().to_vec();
                d[e] = v;
                p.value = Tensor::new(p.value.shape().to_vec(), d)?;
                loss_of(&model)
            };
            let numeric = (eval_at(base + NET_GRAD_STEP)? - eval_at(base - NET_GRAD_STEP)?) / (2.0 * NET_GRAD_STEP);
            eval_at(base)?;
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[e]);
            worst = worst.max(gradcheck::relative_error(a, numeric));
            largest = largest.max(a.abs());
        }
    }
    let measured = if largest > 1e-6 { worst } else { f64::INFINITY };
    report.push("gradients", "full_network", measured, GRAD_TOL);
    Ok(())
}

pub const MOMENT_DRAWS: usize = 100_000;

/// Monte Carlo mean and variance of q_sample with the prior-augmented noise,
/// in units of their standard errors.
fn moments(report: &mut Report) -> Result<()> {
    let s = NoiseSchedule::default();
    let z0 = [0.7, -0.4];
    let zc = [-0.9, 0.5];
    let n = MOMENT_DRAWS;
    let zc_t = Tensor::new(vec![2, 1, 1], zc.to_vec())?;
    let z0_t = Tensor::from_fn(&[n, 2, 1, 1], |i| z0[i % 2]);
    let mut rng = Rng::new(21);
    for t in [1, 250, 500, 1000] {
        for lambda in [0.0, 0.03, 0.1] {
            let eps_n = Tensor::randn(&[n, 2, 1, 1], &mut rng);
            let eps = make_training_noise(&eps_n, &zc_t, lambda)?;
            let zt = q_sample(&z0_t, t, &eps, &s)?;
            let ab = s.alpha_bar(t)?;
            let var_true = 1.0 - ab;
            let (mut mean_z, mut var_z): (f64, f64) = (0.0, 0.0);
            for e in 0..2 {
                let xs: Vec<f64> = zt.data().iter().skip(e).step_by(2).copied().collect();
                let m = xs.iter().sum::<f64>() / n as f64;
                let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                let expect = ab.sqrt() * z0[e] + var_true.sqrt() * lambda * zc[e];
                mean_z = mean_z.max((m - expect).abs() / (var_true / n as f64).sqrt());
                var_z = var_z.max((v - var_true).abs() / (var_true * (2.0 / (n - 1) as f64).sqrt()));
            }
            report.push("moments", format!("mean_se[t={t},lambda={lambda}]"), mean_z, 3.0);
            report.push("moments", format!("var_se[t={t},lambda={lambda}]"), var_z, 5.0);
        }
    }
    Ok(())
}

pub const ZERO_INIT_TOL: f64 = 1e-6;
pub const SPADE_TOL: f64 = 1e-12;

/// Fresh networks against their frame-by-frame counterpart (20 inputs over
/// the four injection modes), and SPADE with zero projections against plain
/// group normalization.
fn zeroinit(report: &mut Report) -> Result<()> {
    let mut rng = Rng::new(31);
    for (k, mode) in InjectionMode::ALL.into_iter().enumerate() {
        let cfg = UNetConfig { num_frames: 5, resolution: 8, ..small_model_config(mode) };
        let model = UNet3D::<f64>::new(cfg.clone(), 40 + k as u64)?;
        let (n, c, r) = (cfg.num_frames, cfg.in_channels, cfg.resolution);
        let mut worst: f64 = 0.0;
        for i in 0..5 {
            let appearance = if i % 2 == 0 {
                Appearance::Center(Tensor::randn(&[1, c, r, r], &mut rng))
            } else {
                Appearance::Sequence(Tensor::randn(&[1, n, c, r, r], &mut rng))
            };
            let input = NetInput {
                z_t: Tensor::randn(&[1, n, c, r, r], &mut rng),
                t: vec![1.0 + rng.below(1000) as f64],
                cond: vec![rng.below(cfg.cond_vocab_size + 1)],
                appearance,
            };
            let full = model.forward_batch(&input, ForwardOptions::default())?;
            let frames = model.forward_per_frame(&input)?;
            worst = worst.max(full.max_abs_diff(&frames));
        }
        report.push("zeroinit", format!("frame_by_frame[{mode}]"), worst, ZERO_INIT_TOL);
    }

    let h = Tensor::<f64>::randn(&[2, 8, 4, 4], &mut rng).scale(3.0).add(&Tensor::full(&[2, 8, 4, 4], 0.5))?;
    let fa = Tensor::<f64>::randn(&[2, 6, 4, 4], &mut rng);
    let (w0, b0) = (Tensor::zeros(&[8, 6, 3, 3]), Tensor::zeros(&[8]));
    let spade = spade_inject(&h, &fa, 4, (&w0, &b0), (&w0, &b0))?;
    let g = Graph::new();
    let gn = g.constant(h).group_norm(4, crate::net::NORM_EPS)?.value();
    report.push("zeroinit", "spade_equals_group_norm", spade.max_abs_diff(&gn), SPADE_TOL);
    Ok(())
}

pub const PRIOR_GRID: [f64; 3] = [0.0, 0.03, 0.1];
pub const GAMMA_GRID: [f64; 3] = [0.0, 0.02, 0.05];

/// Prior-enabled sampling against prior-free sampling from manually shifted
/// noise, over the (λ, γ) grid. Any difference fails.
fn shifted_init(report: &mut Report) -> Result<()> {
    let cfg = small_model_config(InjectionMode::AddToEncDecSpade);
    let mut model = UNet3D::<f64>::new(cfg.clone(), 5)?;
    let mut rng = Rng::new(6);
    for p in model.params_mut().iter_mut() {
        let n = Tensor::randn(p.value.shape(), &mut rng);
        p.value = p.value.add(&n.scale(0.05))?;
    }
    let s = NoiseSchedule::default();
    let zc = Tensor::<f64>::randn(&[cfg.in_channels, cfg.resolution, cfg.resolution], &mut rng);
    let appearance = Appearance::Center(zc.reshape(&[1, cfg.in_channels, cfg.resolution, cfg.resolution])?);
    let mut worst: f64 = 0.0;
    for lambda in PRIOR_GRID {
        for gamma in GAMMA_GRID {
            let prior = AppearancePrior::new(lambda, gamma)?;
            let sc = SamplerConfig { steps: 3, guidance_scale: 2.0, prior, seed: 9, always_uncond: false };
            let with_prior = sample(&model, &zc, 1, &sc, &s)?;
            let plain = initial_sampling_noise(&zc, cfg.num_frames, &AppearancePrior::none(), &mut Rng::new(9));
            let shifted = shift_noise(&plain, &zc, lambda + gamma)?;
            let sc0 = SamplerConfig { prior: AppearancePrior::none(), ..sc };
            let manual = sample_from_noise(&model, shifted, appearance.clone(), 1, &sc0, &s)?;
            let bitwise = with_prior.latent.data().iter().zip(manual.latent.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            let d = if bitwise { 0.0 } else { with_prior.latent.max_abs_diff(&manual.latent).max(f64::MIN_POSITIVE) };
            worst = worst.max(d);
        }
    }
    report.push("shifted-init", "max_abs_diff", worst, 0.0);
    Ok(())
}

pub const ODE_CLIPS: usize = 10_000;
pub const ODE_MEAN: f64 = 1.0;
pub const ODE_STD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct OdeResult {
    pub mean_rel_err: f64,
    pub var_rel_err: f64,
    /// RMS distance from a fine-step reference started at the same noise.
    pub err_200: f64,
    pub err_400: f64,
}

impl OdeResult {
    pub fn ratio(&self) -> f64 {
        self.err_400 / self.err_200
    }
}

/// Sample 10⁴ clips of data N(m, s²) with the closed-form optimal predictor.
pub fn gaussian_ode_run() -> Result<OdeResult> {
    let s = NoiseSchedule::default();
    let prior = AppearancePrior::default();
    let oracle = GaussianOracle { mean: ODE_MEAN, std: ODE_STD, mu: prior.lambda(), schedule: s.clone() };
    let zc = Tensor::<f64>::ones(&[1, 2, 2]);
    let clips = ODE_CLIPS;
    let init = initial_sampling_noise(&zc, 4 * clips, &prior, &mut Rng::new(10)).reshape(&[clips, 4, 1, 2, 2])?;
    let cond = vec![0; clips];
    let run = |steps: usize| {
        let cfg = SamplerConfig { steps, guidance_scale: 1.0, prior, ..SamplerConfig::default() };
        integrate(&oracle, init.clone(), &cond, &cfg, &s)
    };
    let z200 = run(200)?;
    let z400 = run(400)?;
    let reference = run(12_800)?;
    let n = z200.numel() as f64;
    let mean = z200.mean();
    let var = z200.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let rms = |z: &Tensor<f64>| (z.data().iter().zip(reference.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    Ok(OdeResult {
        mean_rel_err: (mean - ODE_MEAN).abs() / ODE_MEAN,
        var_rel_err: (var - ODE_STD * ODE_STD).abs() / (ODE_STD * ODE_STD),
        err_200: rms(&z200),
        err_400: rms(&z400),
    })
}

fn gaussian_ode(report: &mut Report) -> Result<()> {
    let r = gaussian_ode_run()?;
    report.push("gaussian-ode", "mean_rel_err", r.mean_rel_err, 0.01);
    report.push("gaussian-ode", "var_rel_err", r.var_rel_err, 0.05);
    report.push("gaussian-ode", "err400_over_err200", r.ratio(), 0.6);
    Ok(())
}

/// Schedule identities: decreasing ᾱ, ᾱ against a straight product, the
/// continuous form hitting the discrete values at the knots.
fn schedule(report: &mut Report) -> Result<()> {
    let s = NoiseSchedule::default();
    let ab = s.alpha_bars();
    let worst_increase = ab.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    // Strictly decreasing: the largest step must be negative.
    report.push("schedule", "alpha_bar_decreasing", worst_increase, -f64::MIN_POSITIVE);
    let mut prod = 1.0;
    let mut worst: f64 = 0.0;
    for (i, b) in s.betas().iter().enumerate() {
        prod *= 1.0 - b;
        worst = worst.max((prod - ab[i]).abs() / prod);
    }
    report.push("schedule", "alpha_bar_product_rel", worst, 1e-12);
    let mut knot: f64 = 0.0;
    for t in 1..=s.steps() {
        let (c, _) = s.continuous(t as f64 / s.steps() as f64)?;
        knot = knot.max((c - s.alpha_bar(t)?).abs());
    }
    report.push("schedule", "continuous_at_knots", knot, 1e-15);
    Ok(())
}

/// Clips per class in each half of the Fréchet sanity check.
pub const FRECHET_CLIPS: usize = 256;

/// Real-vs-real split against real-vs-class-shuffled, and the 1-D closed form.
fn frechet(report: &mut Report) -> Result<()> {
    let cfg = SpriteDatasetConfig { clips_per_class: FRECHET_CLIPS, ..SpriteDatasetConfig::default() };
    let a = make_dataset::<f32>(&cfg)?;
    let b = make_dataset::<f32>(&SpriteDatasetConfig { seed: cfg.seed + 1, ..cfg.clone() })?;
    let shuffled: Vec<_> =
        b.iter().map(|c| VideoClip { condition_id: (c.condition_id + 1) % cfg.num_classes, ..c.clone() }).collect();
    let f = Featurizer::new(cfg.channels, DEFAULT_FEATURIZER_SEED);
    let split = class_frechet(&f, &a, &b)?;
    let shuffle = class_frechet(&f, &a, &shuffled)?;
    report.push("frechet", "split_over_shuffled", split / shuffle, 0.1);

    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m1, m2) = (rng.normal(), rng.normal());
        let (v1, v2) = (rng.uniform() * 4.0, rng.uniform() * 4.0);
        let one = |m, v| FeatureStats { mean: vec![m], cov: vec![v], count: 2 };
        let got = frechet_distance(&one(m1, v1), &one(m2, v2))?;
        worst = worst.max((got - ((m1 - m2).powi(2) + v1 + v2 - 2.0 * (v1 * v2).sqrt())).abs());
    }
    report.push("frechet", "closed_form_1d", worst, 1e-10);
    Ok(())
}
