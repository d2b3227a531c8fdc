use statrs::distribution::{ContinuousCDF, Normal};
use vidiff_core::prior::{initial_sampling_noise, make_training_noise, q_sample, shift_noise};
use vidiff_core::{AppearancePrior, NoiseSchedule, Rng, Tensor};

const DRAWS: usize = 100_000;

fn frame() -> Tensor<f64> {
    Tensor::new(vec![1, 2, 2], vec![0.8, -0.5, 0.1, -1.0]).unwrap()
}

fn clip() -> Tensor<f64> {
    Tensor::from_fn(&[3, 1, 2, 2], |i| (i as f64 * 0.37).sin())
}

/// Per-element sample mean and variance of `draw` over `DRAWS` calls.
fn moments(len: usize, mut draw: impl FnMut() -> Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (mut s, mut s2) = (vec![0.0; len], vec![0.0; len]);
    for _ in 0..DRAWS {
        for (k, v) in draw().data().iter().enumerate() {
            s[k] += v;
            s2[k] += v * v;
        }
    }
    let n = DRAWS as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
    let var = s2.iter().zip(&mean).map(|(q, m)| (q - n * m * m) / (n - 1.0)).collect();
    (mean, var)
}

#[test]
fn zero_lambda_and_zero_center_leave_noise_unchanged() {
    let eps = Tensor::randn(&[3, 1, 2, 2], &mut Rng::new(1));
    assert_eq!(make_training_noise(&eps, &frame(), 0.0).unwrap(), eps);
    assert_eq!(make_training_noise(&eps, &Tensor::zeros(&[1, 2, 2]), 0.7).unwrap(), eps);
}

#[test]
fn training_noise_mean_is_lambda_times_center() {
    let zc = frame();
    let mut rng = Rng::new(2);
    let (mean, _) = moments(12, || make_training_noise(&Tensor::randn(&[3, 1, 2, 2], &mut rng), &zc, 0.03).unwrap());
    let se = 1.0 / (DRAWS as f64).sqrt();
    for (k, m) in mean.iter().enumerate() {
        let want = 0.03 * zc.data()[k % 4];
        assert!((m - want).abs() < 3.0 * se, "element {k}: {m} vs {want}");
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let eps = Tensor::<f64>::zeros(&[3, 1, 2, 2]);
    assert!(make_training_noise(&eps, &Tensor::zeros(&[1, 3, 2]), 0.03).is_err());
    assert!(q_sample(&clip(), 1, &Tensor::zeros(&[3, 1, 2, 3]), &NoiseSchedule::default()).is_err());
}

#[test]
fn q_sample_rejects_out_of_range_steps() {
    let s = NoiseSchedule::default();
    let eps = Tensor::zeros(&[3, 1, 2, 2]);
    assert!(q_sample(&clip(), 0, &eps, &s).is_err());
    assert!(q_sample(&clip(), 1001, &eps, &s).is_err());
}

#[test]
fn first_step_barely_perturbs() {
    let s = NoiseSchedule::default();
    let z0 = clip();
    let eps = Tensor::randn(&[3, 1, 2, 2], &mut Rng::new(3));
    let zt = q_sample(&z0, 1, &eps, &s).unwrap();
    let bound = (1.0 - s.alpha_bar(1).unwrap()).sqrt();
    let norm = |t: &Tensor<f64>| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = norm(&zt.sub(&z0).unwrap()) / norm(&z0);
    // |z_1 − z0| ≤ (1 − √ᾱ)|z0| + √(1−ᾱ)|ε|
    let ab = s.alpha_bar(1).unwrap();
    assert!(rel <= (1.0 - ab.sqrt()) + bound * norm(&eps) / norm(&z0));
    assert!(rel < 0.2);
}

#[test]
fn q_sample_moments_and_frame_independence() {
    let s = NoiseSchedule::default();
    let (z0, zc) = (clip(), frame());
    for (t, lambda) in [(250, 0.03), (1000, 0.1)] {
        let ab = s.alpha_bar(t).unwrap();
        let mut rng = Rng::new(t as u64);
        let mut cross = 0.0;
        let (mean, var) = moments(12, || {
            let eps = make_training_noise(&Tensor::randn(&[3, 1, 2, 2], &mut rng), &zc, lambda).unwrap();
            let z = q_sample(&z0, t, &eps, &s).unwrap();
            // Element 0 of frames 0 and 1, centered on the analytic mean.
            let m = |k: usize| ab.sqrt() * z0.data()[k] + (1.0 - ab).sqrt() * lambda * zc.data()[k % 4];
            cross += (z.data()[0] - m(0)) * (z.data()[4] - m(4));
            z
        });
        let n = DRAWS as f64;
        let v = 1.0 - ab;
        for k in 0..12 {
            let want = ab.sqrt() * z0.data()[k] + v.sqrt() * lambda * zc.data()[k % 4];
            assert!((mean[k] - want).abs() < 3.0 * (v / n).sqrt(), "t={t} mean {k}");
            assert!((var[k] - v).abs() < 5.0 * v * (2.0 / (n - 1.0)).sqrt(), "t={t} var {k}: {}", var[k]);
        }
        // Covariance of independent frames has standard error v/√n.
        assert!((cross / n).abs() < 4.0 * v / n.sqrt(), "t={t} cross-frame covariance {}", cross / n);
    }
}

#[test]
fn vanilla_initial_noise_is_standard_normal() {
    let draws = initial_sampling_noise(&Tensor::<f64>::zeros(&[1, 10, 10]), 1000, &AppearancePrior::none(), &mut Rng::new(4));
    let mut v = draws.into_data();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let cdf = Normal::new(0.0, 1.0).unwrap();
    let d = v
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf.cdf(x);
            (f - i as f64 / n).abs().max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max);
    // Asymptotic 1% critical value of the one-sample KS statistic.
    assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn initial_noise_is_shifted_by_lambda_plus_gamma() {
    let zc = frame();
    let prior = AppearancePrior::new(0.03, 0.02).unwrap();
    let mut rng = Rng::new(5);
    let (mean, var) = moments(12, || initial_sampling_noise(&zc, 3, &prior, &mut rng));
    let se = 1.0 / (DRAWS as f64).sqrt();
    for k in 0..12 {
        assert!((mean[k] - 0.05 * zc.data()[k % 4]).abs() < 3.0 * se);
        assert!((var[k] - 1.0).abs() < 5.0 * (2.0 / DRAWS as f64).sqrt());
    }
}

#[test]
fn initial_noise_is_deterministic_and_reduces_to_plain_draws() {
    let zc = frame();
    let prior = AppearancePrior::new(0.03, 0.02).unwrap();
    let a = initial_sampling_noise(&zc, 3, &prior, &mut Rng::new(6));
    assert_eq!(a, initial_sampling_noise(&zc, 3, &prior, &mut Rng::new(6)));
    // Same stream, no prior: exactly the standard-normal draws.
    let plain = initial_sampling_noise(&zc, 3, &AppearancePrior::none(), &mut Rng::new(6));
    assert_eq!(plain, Tensor::randn(&[3, 1, 2, 2], &mut Rng::new(6)));
    assert_eq!(shift_noise(&plain, &zc, 0.05).unwrap(), a);
}

#[test]
fn per_frame_means_follow_each_frame() {
    let mean = clip();
    let prior = AppearancePrior::new(0.5, 0.5).unwrap();
    let a = initial_sampling_noise(&mean, 99, &prior, &mut Rng::new(7));
    assert_eq!(a.shape(), mean.shape());
    let plain: Tensor<f64> = Tensor::randn(&[3, 1, 2, 2], &mut Rng::new(7));
    for k in 0..12 {
        assert_eq!(a.data()[k], mean.data()[k] + plain.data()[k]);
    }
}
