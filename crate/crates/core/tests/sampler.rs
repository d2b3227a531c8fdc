use std::cell::Cell;

use vidiff_core::net::{Appearance, InjectionMode, UNet3D, UNetConfig};
use vidiff_core::prior::{initial_sampling_noise, shift_noise, AppearancePrior};
use vidiff_core::sampler::{
    integrate, ode_step, sample, sample_from_noise, Denoiser, GaussianOracle, SamplerConfig,
};
use vidiff_core::{Error, NoiseSchedule, Result, Rng, Tensor};

fn tiny_model(seed: u64) -> UNet3D<f64> {
    let cfg = UNetConfig {
        base_channels: 8,
        head_channels: 8,
        norm_groups: 4,
        cond_embed_dim: 8,
        num_frames: 3,
        resolution: 4,
        channel_multipliers: vec![1, 2],
        attention_levels: vec![1],
        injection_mode: InjectionMode::AddToEncDecSpade,
        ..UNetConfig::default()
    };
    let mut m = UNet3D::new(cfg, seed).unwrap();
    // Open the zero-initialized paths so every branch shapes the output.
    let mut rng = Rng::new(seed + 100);
    for p in m.params_mut().iter_mut() {
        let n = Tensor::<f64>::randn(p.value.shape(), &mut rng);
        p.value = p.value.add(&n.scale(0.05)).unwrap();
    }
    m
}

#[test]
fn forced_fixed_point_leaves_z_unchanged() {
    let s = NoiseSchedule::default();
    let mut rng = Rng::new(1);
    let z = Tensor::<f64>::randn(&[2, 3], &mut rng);
    for x in [1.0, 0.73, 0.2, 0.001] {
        let (ab, _) = s.continuous(x).unwrap();
        let f = z.scale((1.0 - ab).sqrt());
        let next = ode_step(&z, x, -0.01f64.min(x), &f, &s).unwrap();
        assert!(next.max_abs_diff(&z) < 1e-15, "x = {x}");
    }
}

#[test]
fn null_step_is_identity() {
    let s = NoiseSchedule::default();
    let mut rng = Rng::new(2);
    let z = Tensor::<f64>::randn(&[5], &mut rng);
    let f = Tensor::<f64>::randn(&[5], &mut rng);
    assert_eq!(ode_step(&z, 0.5, 0.0, &f, &s).unwrap(), z);
}

#[test]
fn stepping_at_zero_is_singular() {
    let s = NoiseSchedule::default();
    let z = Tensor::<f64>::ones(&[2]);
    assert!(matches!(ode_step(&z, 0.0, 0.0, &z, &s), Err(Error::SingularStep(_))));
    assert!(ode_step(&z, 0.1, -0.2, &z, &s).is_err());
    assert!(ode_step(&z, 0.1, 0.05, &z, &s).is_err());
}

#[test]
fn constant_beta_linear_ode_matches_closed_form() {
    // β(x) = T·b everywhere; with f = 0 the ODE is dz = −(β/2) z dx, so
    // z(0.5) = z(1)·exp(β/4).
    let steps = 1000;
    let b = 0.002;
    let s = NoiseSchedule::linear(steps, b, b).unwrap();
    let beta = steps as f64 * b;
    let z1 = 0.7;
    let mut z = Tensor::new(vec![1], vec![z1]).unwrap();
    let zero = Tensor::<f64>::zeros(&[1]);
    let n = 1000;
    let dx = -0.5 / n as f64;
    for k in 0..n {
        z = ode_step(&z, 1.0 + k as f64 * dx, dx, &zero, &s).unwrap();
    }
    let exact = z1 * (beta / 4.0).exp();
    let rel = (z.item() - exact).abs() / exact;
    assert!(rel < 1e-3, "{rel}");
}

struct Counting<'a, D> {
    inner: &'a D,
    calls: Cell<usize>,
}

impl<D: Denoiser<f64>> Denoiser<f64> for Counting<'_, D> {
    fn predict(&self, z: &Tensor<f64>, x: f64, cond: &[usize]) -> Result<Tensor<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(z, x, cond)
    }

    fn null_cond(&self) -> usize {
        self.inner.null_cond()
    }
}

#[test]
fn unit_guidance_skips_null_evaluation() {
    let m = tiny_model(3);
    let s = NoiseSchedule::default();
    let mut rng = Rng::new(4);
    let zc = Tensor::<f64>::randn(&[4, 4, 4], &mut rng);
    let init = Tensor::<f64>::randn(&[1, 3, 4, 4, 4], &mut rng);
    let den = vidiff_core::sampler::ModelDenoiser {
        model: &m,
        appearance: Appearance::Center(zc.reshape(&[1, 4, 4, 4]).unwrap()),
        train_steps: s.steps(),
    };
    let cfg = SamplerConfig { steps: 4, guidance_scale: 1.0, ..Default::default() };
    let skip = Counting { inner: &den, calls: Cell::new(0) };
    let a = integrate(&skip, init.clone(), &[2], &cfg, &s).unwrap();
    let forced = Counting { inner: &den, calls: Cell::new(0) };
    let b = integrate(&forced, init, &[2], &SamplerConfig { always_uncond: true, ..cfg }, &s).unwrap();
    assert_eq!(skip.calls.get(), 4);
    assert_eq!(forced.calls.get(), 8);
    assert_eq!(a, b);
}

#[test]
fn sampling_is_deterministic() {
    let m = tiny_model(5);
    let s = NoiseSchedule::default();
    let zc = Tensor::<f64>::randn(&[4, 4, 4], &mut Rng::new(6));
    let cfg = SamplerConfig { steps: 5, seed: 77, ..Default::default() };
    let a = sample(&m, &zc, 1, &cfg, &s).unwrap();
    let b = sample(&m, &zc, 1, &cfg, &s).unwrap();
    assert_eq!(a, b);
    let c = sample(&m, &zc, 1, &SamplerConfig { seed: 78, ..cfg }, &s).unwrap();
    assert_ne!(a.latent, c.latent);
}

#[test]
fn prior_only_changes_the_initial_noise() {
    let m = tiny_model(7);
    let s = NoiseSchedule::default();
    let zc = Tensor::<f64>::randn(&[4, 4, 4], &mut Rng::new(8));
    let appearance = Appearance::Center(zc.reshape(&[1, 4, 4, 4]).unwrap());
    for lambda in [0.0, 0.03, 0.1] {
        for gamma in [0.0, 0.02, 0.05] {
            let prior = AppearancePrior::new(lambda, gamma).unwrap();
            let cfg = SamplerConfig { steps: 3, prior, seed: 9, ..Default::default() };
            let with_prior = sample(&m, &zc, 0, &cfg, &s).unwrap();

            let plain = initial_sampling_noise(&zc, 3, &AppearancePrior::none(), &mut Rng::new(9));
            let shifted = shift_noise(&plain, &zc, lambda + gamma).unwrap();
            let cfg0 = SamplerConfig { prior: AppearancePrior::none(), ..cfg };
            let manual = sample_from_noise(&m, shifted, appearance.clone(), 0, &cfg0, &s).unwrap();
            assert_eq!(with_prior.latent, manual.latent, "lambda {lambda}, gamma {gamma}");
        }
    }
}

#[test]
fn gaussian_oracle_recovers_data_moments() {
    let (m, sd) = (1.0, 0.2);
    let s = NoiseSchedule::default();
    let prior = AppearancePrior::default();
    let oracle = GaussianOracle { mean: m, std: sd, mu: prior.lambda(), schedule: s.clone() };
    let zc = Tensor::<f64>::ones(&[1, 2, 2]);
    let clips = 10_000;
    let init = initial_sampling_noise(&zc, 4 * clips, &prior, &mut Rng::new(10)).reshape(&[clips, 4, 1, 2, 2]).unwrap();
    let cfg = SamplerConfig { steps: 200, guidance_scale: 1.0, prior, ..Default::default() };
    let z = integrate(&oracle, init, &vec![0; clips], &cfg, &s).unwrap();
    let n = z.numel() as f64;
    let mean = z.mean();
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((mean - m).abs() / m < 0.01, "mean {mean}");
    assert!((var - sd * sd).abs() / (sd * sd) < 0.05, "var {var}");
}

#[test]
fn oracle_predicts_noise_at_the_marginal_mean() {
    // At z = E[z_x] the optimal prediction is the prior mean itself.
    let s = NoiseSchedule::default();
    let o = GaussianOracle { mean: 0.4, std: 0.3, mu: 0.05, schedule: s };
    for x in [0.1, 0.5, 1.0] {
        let (mean, _) = o.marginal(x).unwrap();
        let f = Denoiser::<f64>::predict(&o, &Tensor::full(&[1], mean), x, &[0]).unwrap();
        assert!((f.item() - 0.05).abs() < 1e-15);
    }
}
