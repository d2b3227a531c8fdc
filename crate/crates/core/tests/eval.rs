use nalgebra::DMatrix;
use vidiff_core::eval::{
    class_frechet, frechet_distance, temporal_consistency, to_byte, write_ppm, FeatureStats, Featurizer, FEATURE_DIM,
};
use vidiff_core::study::{eval_run, EvalOptions};
use vidiff_core::train::{make_dataset, read_dataset, write_dataset, SpriteDatasetConfig, Trainer, TrainConfig};
use vidiff_core::{NoiseSchedule, Rng, Tensor, UNetConfig, UNet3D, VideoClip};

fn stats(mean: Vec<f64>, cov: Vec<f64>) -> FeatureStats {
    FeatureStats { mean, cov, count: 1000 }
}

fn random_spd(d: usize, rng: &mut Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.normal());
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn clip(frames: &[f64]) -> VideoClip<f64> {
    let t = Tensor::new(vec![frames.len(), 1, 1, 2], frames.iter().flat_map(|&v| [v, v]).collect()).unwrap();
    VideoClip::new(t, 2, 0).unwrap()
}

#[test]
fn one_dimensional_closed_form() {
    for (m1, v1, m2, v2) in [(0.0, 1.0, 0.0, 1.0), (1.5, 0.25, -0.5, 4.0), (3.0, 2.0, 3.0, 0.0), (-1.0, 0.0, 2.0, 0.0)] {
        let got = frechet_distance(&stats(vec![m1], vec![v1]), &stats(vec![m2], vec![v2])).unwrap();
        let want = (m1 - m2) * (m1 - m2) + v1 + v2 - 2.0 * (v1 * v2 as f64).sqrt();
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn diagonal_covariances_reduce_to_per_axis_terms() {
    let (va, vb) = ([0.5, 2.0, 1.0], [1.5, 0.1, 1.0]);
    let diag = |v: &[f64; 3]| (0..9).map(|k| if k % 4 == 0 { v[k / 4] } else { 0.0 }).collect();
    let a = stats(vec![0.0, 1.0, 2.0], diag(&va));
    let b = stats(vec![1.0, 1.0, 0.0], diag(&vb));
    let want: f64 = 1.0 + 4.0 + (0..3).map(|i| (va[i].sqrt() - vb[i].sqrt()).powi(2)).sum::<f64>();
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-10);
}

#[test]
fn two_dimensional_trace_root_oracle() {
    // For 2×2 PSD M, tr √M = √(tr M + 2√det M), and √A B √A has the trace
    // and determinant of AB.
    let mut rng = Rng::new(11);
    for _ in 0..20 {
        let (a, b) = (random_spd(2, &mut rng), random_spd(2, &mut rng));
        let ab = &a * &b;
        let cross = (ab.trace() + 2.0 * (a.determinant() * b.determinant()).sqrt()).sqrt();
        let (ma, mb) = (vec![rng.normal(), rng.normal()], vec![rng.normal(), rng.normal()]);
        let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
        let want = mean + a.trace() + b.trace() - 2.0 * cross;
        let got = frechet_distance(&stats(ma, flat(&a)), &stats(mb, flat(&b))).unwrap();
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn distance_is_symmetric_and_zero_on_itself() {
    let mut rng = Rng::new(12);
    let d = 6;
    let a = stats((0..d).map(|_| rng.normal()).collect(), flat(&random_spd(d, &mut rng)));
    let b = stats((0..d).map(|_| rng.normal()).collect(), flat(&random_spd(d, &mut rng)));
    let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
    assert!((ab - ba).abs() < 1e-9 * ab);
    assert!(frechet_distance(&a, &a).unwrap() < 1e-9);
    assert!(frechet_distance(&a, &stats(vec![0.0; 3], vec![0.0; 9])).is_err());
}

#[test]
fn feature_stats_match_two_pass_oracle() {
    let mut rng = Rng::new(13);
    let feats: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.normal() * 3.0 + 1.0).collect()).collect();
    let s = FeatureStats::from_features(&feats).unwrap();
    let n = feats.len() as f64;
    for i in 0..5 {
        let mi = feats.iter().map(|f| f[i]).sum::<f64>() / n;
        assert!((s.mean[i] - mi).abs() < 1e-12);
        for j in 0..5 {
            let mj = feats.iter().map(|f| f[j]).sum::<f64>() / n;
            let c = feats.iter().map(|f| (f[i] - mi) * (f[j] - mj)).sum::<f64>() / (n - 1.0);
            assert!((s.cov[i * 5 + j] - c).abs() < 1e-10);
        }
    }
    let same = FeatureStats::from_features(&vec![vec![1.0, 2.0]; 7]).unwrap();
    assert!(same.cov.iter().all(|&v| v == 0.0));
    assert!(FeatureStats::from_features(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn linear_featurizer_is_affine_in_the_clip() {
    let cfg = SpriteDatasetConfig { clips_per_class: 1, ..Default::default() };
    let clips = make_dataset::<f64>(&cfg).unwrap();
    let mut f = Featurizer::new(4, 3);
    f.linear = true;
    let (a, b) = (&clips[0], &clips[1]);
    let mix = VideoClip::new(a.latent.zip_map(&b.latent, |x, y| 0.25 * x + 0.75 * y).unwrap(), 2, 0).unwrap();
    let (ea, eb, em) = (f.embed(a).unwrap(), f.embed(b).unwrap(), f.embed(&mix).unwrap());
    assert_eq!(em.len(), FEATURE_DIM);
    for k in 0..FEATURE_DIM {
        assert!((em[k] - (0.25 * ea[k] + 0.75 * eb[k])).abs() < 1e-10);
    }
}

#[test]
fn featurizer_sees_motion() {
    let cfg = SpriteDatasetConfig { clips_per_class: 1, ..Default::default() };
    let a = make_dataset::<f64>(&cfg).unwrap().remove(0);
    let frozen_data: Vec<f64> = (0..a.frames()).flat_map(|_| a.center_frame().into_data()).collect();
    let frozen = VideoClip::new(Tensor::new(a.latent.shape().to_vec(), frozen_data).unwrap(), 2, 0).unwrap();
    let f = Featurizer::new(4, 0);
    let (ea, ef) = (f.embed(&a).unwrap(), f.embed(&frozen).unwrap());
    let dist: f64 = ea.iter().zip(&ef).map(|(x, y)| (x - y).powi(2)).sum();
    assert!(dist > 1e-4, "moving and frozen clips embed too closely: {dist}");
}

#[test]
fn temporal_consistency_examples() {
    assert_eq!(temporal_consistency(&clip(&[0.3, 0.3, 0.3])).unwrap(), 0.0);
    assert_eq!(temporal_consistency(&clip(&[0.0, 2.0])).unwrap(), 2.0);
    let fwd = temporal_consistency(&clip(&[0.0, 0.5, -1.0, 2.0])).unwrap();
    let rev = temporal_consistency(&clip(&[2.0, -1.0, 0.5, 0.0])).unwrap();
    assert_eq!(fwd, rev);
    assert!((fwd - (0.5 + 1.5 + 3.0) / 3.0).abs() < 1e-15);
    assert!(temporal_consistency(&clip(&[1.0])).is_err());
}

#[test]
fn ppm_bytes_round_and_clamp() {
    assert_eq!([to_byte(-1.0), to_byte(1.0), to_byte(0.0), to_byte(3.0), to_byte(-7.0)], [0, 255, 128, 255, 0]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ppm");
    write_ppm(&clip(&[-1.0, 1.0]), 1, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes, [b"P6\n2 1\n255\n".as_slice(), &[255; 6]].concat());
}

#[test]
fn real_split_scores_far_below_class_shuffle() {
    let cfg = SpriteDatasetConfig { clips_per_class: 64, ..Default::default() };
    let a = make_dataset::<f32>(&cfg).unwrap();
    let b = make_dataset::<f32>(&SpriteDatasetConfig { seed: 1, ..cfg.clone() }).unwrap();
    let shuffled: Vec<_> = b
        .iter()
        .map(|c| VideoClip { condition_id: (c.condition_id + 1) % cfg.num_classes, ..c.clone() })
        .collect();
    let f = Featurizer::new(4, 0);
    let real = class_frechet(&f, &a, &b).unwrap();
    let shuf = class_frechet(&f, &a, &shuffled).unwrap();
    assert!(real < 0.1 * shuf, "real {real} shuffled {shuf}");
}

#[test]
fn manifest_round_trip_and_errors() {
    let cfg = SpriteDatasetConfig { clips_per_class: 2, ..Default::default() };
    let clips = make_dataset::<f32>(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&clips, dir.path()).unwrap();
    assert_eq!(read_dataset::<f32>(dir.path()).unwrap(), clips);
    assert_eq!(read_dataset::<f32>(&manifest).unwrap(), clips);

    std::fs::write(&manifest, "clip_00000.atns 0\n").unwrap();
    let err = read_dataset::<f32>(dir.path()).unwrap_err().to_string();
    assert!(err.contains(":1"), "{err}");
    std::fs::write(&manifest, "").unwrap();
    assert!(read_dataset::<f32>(dir.path()).is_err());
    std::fs::write(&manifest, "missing.atns 0 2\n").unwrap();
    assert!(read_dataset::<f32>(dir.path()).is_err());
}

fn tiny_model() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        head_channels: 8,
        norm_groups: 4,
        cond_embed_dim: 8,
        channel_multipliers: vec![1, 2],
        attention_levels: vec![1],
        num_frames: 5,
        resolution: 12,
        ..UNetConfig::default()
    }
}

#[test]
fn eval_run_is_deterministic_and_writes_report() {
    let data = SpriteDatasetConfig { resolution: 12, frames: 5, clips_per_class: 1, max_speed: 0.8, ..Default::default() };
    let heldout = make_dataset::<f32>(&data).unwrap();
    let model = UNet3D::new(tiny_model(), 0).unwrap();
    let train = TrainConfig { steps: 2, batch_size: 2, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, train, NoiseSchedule::default()).unwrap();
    trainer.step(&heldout).unwrap();
    let ckpt = trainer.to_checkpoint();
    let opts = EvalOptions {
        per_class: 1,
        sampler: vidiff_core::sampler::SamplerConfig { steps: 3, ..Default::default() },
        featurizer_seed: 0,
        dump_clips: 1,
    };
    let dir = tempfile::tempdir().unwrap();
    let r1 = eval_run(&ckpt, &heldout, &opts, &dir.path().join("a")).unwrap();
    let r2 = eval_run(&ckpt, &heldout, &opts, &dir.path().join("b")).unwrap();
    assert_eq!(r1.to_text(), r2.to_text());
    assert_eq!(r1.metrics.samples, 6);
    assert!(r1.metrics.frechet.is_finite() && r1.metrics.center_mse.is_finite());
    let text = std::fs::read_to_string(dir.path().join("a/report.txt")).unwrap();
    assert_eq!(text, r1.to_text());
    assert!(dir.path().join("a/sample_000_frame_04.ppm").exists());
}
