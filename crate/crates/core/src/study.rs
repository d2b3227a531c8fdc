//! Toy-scale training studies (the injection/prior ablation and the
//! interpolation endpoint check) and checkpoint evaluation. Samples are drawn
//! for a held-out set and scored against it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::eval::{
    endpoint_mse, eval_subset, evaluate_samples, write_ppm, Featurizer, SampleMetrics, DEFAULT_FEATURIZER_SEED,
};
use crate::net::{InjectionMode, UNet3D, UNetConfig};
use crate::prior::{AppearancePrior, VideoClip, DEFAULT_GAMMA, DEFAULT_LAMBDA};
use crate::sampler::{interpolate_batch, sample_batch, SamplerConfig};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::train::{make_dataset, Checkpoint, SpriteDatasetConfig, TrainConfig, TrainMode, Trainer};

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    /// Architecture shared by every arm; the injection mode is overridden.
    pub model: UNetConfig,
    pub steps: u64,
    pub batch_size: usize,
    /// One rate for both parameter groups.
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub train_clips_per_class: usize,
    pub train_data_seed: u64,
    pub heldout_data_seed: u64,
    pub eval_per_class: usize,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub featurizer_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            model: UNetConfig {
                base_channels: 8,
                head_channels: 8,
                norm_groups: 4,
                cond_embed_dim: 16,
                channel_multipliers: vec![1, 2, 2],
                attention_levels: vec![2],
                ..UNetConfig::default()
            },
            steps: 5000,
            batch_size: 4,
            lr: 1e-3,
            seeds: vec![0, 1, 2],
            train_clips_per_class: 64,
            train_data_seed: 0,
            heldout_data_seed: 1,
            eval_per_class: 16,
            sample_steps: 50,
            guidance_scale: 1.0,
            lambda: DEFAULT_LAMBDA,
            gamma: DEFAULT_GAMMA,
            featurizer_seed: DEFAULT_FEATURIZER_SEED,
        }
    }
}

impl StudyConfig {
    fn data(&self, seed: u64, clips_per_class: usize) -> SpriteDatasetConfig {
        SpriteDatasetConfig {
            resolution: self.model.resolution,
            channels: self.model.in_channels,
            frames: self.model.num_frames,
            clips_per_class,
            seed,
            ..SpriteDatasetConfig::default()
        }
    }

    fn train_config(&self, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            lr_temporal: self.lr,
            lr_spatial: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            prior_lambda: lambda,
            seed,
            ..TrainConfig::default()
        }
    }

    fn sampler(&self, lambda: f64, seed: u64) -> Result<SamplerConfig> {
        let gamma = if lambda == 0.0 { 0.0 } else { self.gamma };
        Ok(SamplerConfig {
            steps: self.sample_steps,
            guidance_scale: self.guidance_scale,
            prior: AppearancePrior::new(lambda, gamma)?,
            seed,
            always_uncond: false,
        })
    }
}

/// One trained variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arm {
    pub mode: InjectionMode,
    pub lambda: f64,
}

impl Arm {
    pub fn label(&self) -> String {
        format!("{} lambda={}", self.mode, self.lambda)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: Arm,
    pub seed: u64,
    pub metrics: SampleMetrics,
    /// Mean loss over the last tenth of training.
    pub final_loss: f64,
    pub seconds: f64,
}

/// Train for `trainer.config.steps` steps; returns the mean loss of the last
/// tenth.
fn run_training<T: Scalar>(trainer: &mut Trainer<T>, data: &[VideoClip<T>]) -> Result<f64> {
    let steps = trainer.config.steps;
    let tail = (steps / 10).max(1);
    let mut acc = 0.0;
    for s in 0..steps {
        let loss = trainer.step(data)?;
        if s + tail >= steps {
            acc += loss;
        }
    }
    Ok(acc / tail.min(steps).max(1) as f64)
}

/// Train one arm and score its samples on the held-out conditioning set.
pub fn run_arm<T: Scalar>(
    cfg: &StudyConfig,
    arm: Arm,
    seed: u64,
    train: &[VideoClip<T>],
    heldout: &[VideoClip<T>],
    featurizer: &Featurizer,
) -> Result<ArmResult> {
    let start = Instant::now();
    let model = UNet3D::new(UNetConfig { injection_mode: arm.mode, ..cfg.model.clone() }, seed)?;
    let schedule = NoiseSchedule::default();
    let mut trainer = Trainer::new(model, cfg.train_config(arm.lambda, seed), schedule.clone())?;
    let final_loss = run_training(&mut trainer, train)?;

    let cond = eval_subset(heldout, cfg.eval_per_class);
    let centers: Vec<_> = cond.iter().map(|c| c.center_frame()).collect();
    let ids: Vec<_> = cond.iter().map(|c| c.condition_id).collect();
    let generated = sample_batch(&trainer.model, &centers, &ids, &cfg.sampler(arm.lambda, seed)?, &schedule)?;
    let metrics = evaluate_samples(featurizer, heldout, &generated, &cond)?;
    Ok(ArmResult { arm, seed, metrics, final_loss, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationReport {
    pub results: Vec<ArmResult>,
}

impl AblationReport {
    pub const SPADE: Arm = Arm { mode: InjectionMode::AddToEncDecSpade, lambda: DEFAULT_LAMBDA };
    pub const NO_PRIOR: Arm = Arm { mode: InjectionMode::AddToEncDecSpade, lambda: 0.0 };
    pub const DEC_ONLY: Arm = Arm { mode: InjectionMode::AddToDec, lambda: DEFAULT_LAMBDA };

    pub fn frechet(&self, arm: Arm, seed: u64) -> Option<f64> {
        self.results.iter().find(|r| r.arm == arm && r.seed == seed).map(|r| r.metrics.frechet)
    }

    fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.results.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn count(&self, wins: impl Fn(f64, f64) -> bool, other: Arm) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&s| match (self.frechet(Self::SPADE, s), self.frechet(other, s)) {
                (Some(a), Some(b)) => wins(a, b),
                _ => false,
            })
            .count()
    }

    /// Seeds where training with the prior scores strictly lower.
    pub fn prior_wins(&self) -> usize {
        self.count(|a, b| a < b, Self::NO_PRIOR)
    }

    /// Seeds where encoder+decoder SPADE injection scores no higher than
    /// decoder-only addition.
    pub fn spade_wins(&self) -> usize {
        self.count(|a, b| a <= b, Self::DEC_ONLY)
    }

    /// Mean center-frame MSE of the default arm.
    pub fn base_center_mse(&self) -> Option<f64> {
        let v: Vec<f64> = self.results.iter().filter(|r| r.arm == Self::SPADE).map(|r| r.metrics.center_mse).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out += &format!(
                "{} seed={} frechet={:.6} temporal_consistency={:.6} center_mse={:.6} final_loss={:.6} seconds={:.0}\n",
                r.arm.label(),
                r.seed,
                r.metrics.frechet,
                r.metrics.temporal_consistency,
                r.metrics.center_mse,
                r.final_loss,
                r.seconds
            );
        }
        let n = self.seeds().len();
        out += &format!("prior_wins = {}/{n}\nspade_wins = {}/{n}\n", self.prior_wins(), self.spade_wins());
        out
    }
}

/// Train and score the three arms for every seed. `progress` sees each
/// result as it lands.
pub fn run_ablation<T: Scalar>(cfg: &StudyConfig, mut progress: impl FnMut(&ArmResult)) -> Result<AblationReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let train = make_dataset::<T>(&cfg.data(cfg.train_data_seed, cfg.train_clips_per_class))?;
    let heldout = make_dataset::<T>(&cfg.data(cfg.heldout_data_seed, cfg.eval_per_class))?;
    let featurizer = Featurizer::new(cfg.model.in_channels, cfg.featurizer_seed);
    let mut report = AblationReport::default();
    for &seed in &cfg.seeds {
        for arm in [AblationReport::SPADE, AblationReport::NO_PRIOR, AblationReport::DEC_ONLY] {
            let r = run_arm(cfg, arm, seed, &train, &heldout, &featurizer)?;
            progress(&r);
            report.results.push(r);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsrResult {
    /// Mean per-pixel MSE of generated first and last frames against the
    /// frames they were conditioned on.
    pub endpoint_mse: f64,
    pub samples: usize,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Train an interpolation model with the default injection and measure how
/// well its samples keep the conditioning endpoints.
pub fn run_tsr<T: Scalar>(cfg: &StudyConfig, seed: u64) -> Result<TsrResult> {
    let start = Instant::now();
    let data = |s, per_class| cfg.data(s, per_class).tsr();
    let train = make_dataset::<T>(&data(cfg.train_data_seed, cfg.train_clips_per_class))?;
    let heldout = make_dataset::<T>(&data(cfg.heldout_data_seed, cfg.eval_per_class))?;
    let frames = train[0].frames();
    let model_cfg = UNetConfig { injection_mode: AblationReport::SPADE.mode, num_frames: frames, ..cfg.model.clone() };
    let schedule = NoiseSchedule::default();
    let mut trainer =
        Trainer::new(UNet3D::new(model_cfg, seed)?, cfg.train_config(cfg.lambda, seed).tsr(), schedule.clone())?;
    let final_loss = run_training(&mut trainer, &train)?;

    let cond = eval_subset(&heldout, cfg.eval_per_class);
    let pairs: Vec<_> = cond.iter().map(|c| (c.first_frame(), c.last_frame())).collect();
    let generated = interpolate_batch(&trainer.model, &pairs, &cfg.sampler(cfg.lambda, seed)?, &schedule)?;
    Ok(TsrResult { endpoint_mse: endpoint_mse(&generated, &cond), samples: generated.len(), final_loss, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Conditioning clips per class taken from the held-out set.
    pub per_class: usize,
    pub sampler: SamplerConfig,
    pub featurizer_seed: u64,
    /// Samples whose frames are written as PPM files.
    pub dump_clips: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: TrainMode,
    pub checkpoint_step: u64,
    pub options: EvalOptions,
    pub metrics: SampleMetrics,
    /// Interpolation checkpoints only.
    pub endpoint_mse: Option<f64>,
}

impl EvalReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let o = &self.options;
        let m = &self.metrics;
        let mut lines = vec![
            ("mode", self.mode.name().to_string()),
            ("checkpoint_step", self.checkpoint_step.to_string()),
            ("samples", m.samples.to_string()),
            ("per_class", o.per_class.to_string()),
            ("sample_steps", o.sampler.steps.to_string()),
            ("guidance_scale", format!("{:?}", o.sampler.guidance_scale)),
            ("prior_lambda", format!("{:?}", o.sampler.prior.lambda())),
            ("prior_gamma", format!("{:?}", o.sampler.prior.gamma())),
            ("seed", o.sampler.seed.to_string()),
            ("featurizer_seed", o.featurizer_seed.to_string()),
            ("frechet", format!("{:?}", m.frechet)),
            ("temporal_consistency", format!("{:?}", m.temporal_consistency)),
            ("real_temporal_consistency", format!("{:?}", m.real_temporal_consistency)),
            ("center_mse", format!("{:?}", m.center_mse)),
        ];
        if let Some(e) = self.endpoint_mse {
            lines.push(("endpoint_mse", format!("{e:?}")));
        }
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Sample for the first `per_class` held-out clips of each class with the
/// checkpoint's model, score the samples against the held-out set and write
/// `report.txt` plus PPM frames into `out_dir`.
///
/// Base checkpoints condition on each clip's center frame and label;
/// interpolation checkpoints on its first and last frames.
pub fn eval_run<T: Scalar>(
    ckpt: &Checkpoint<T>,
    heldout: &[VideoClip<T>],
    opts: &EvalOptions,
    out_dir: &Path,
) -> Result<EvalReport> {
    let model = ckpt.model()?;
    let cfg = model.config();
    let want = [cfg.num_frames, cfg.in_channels, cfg.resolution, cfg.resolution];
    if let Some(c) = heldout.iter().find(|c| c.latent.shape() != want) {
        return Err(Error::shape("eval_run", format!("model expects clips {want:?}, dataset has {:?}", c.latent.shape())));
    }
    let cond = eval_subset(heldout, opts.per_class);
    if cond.is_empty() {
        return Err(Error::InvalidArgument("no held-out clips to condition on".into()));
    }
    let (generated, endpoint) = match ckpt.train.mode {
        TrainMode::Base => {
            let centers: Vec<_> = cond.iter().map(|c| c.center_frame()).collect();
            let ids: Vec<_> = cond.iter().map(|c| c.condition_id).collect();
            (sample_batch(&model, &centers, &ids, &opts.sampler, &ckpt.schedule)?, None)
        }
        TrainMode::Tsr => {
            let pairs: Vec<_> = cond.iter().map(|c| (c.first_frame(), c.last_frame())).collect();
            let mut g = interpolate_batch(&model, &pairs, &opts.sampler, &ckpt.schedule)?;
            // Score against the labels of the clips they interpolate.
            for (clip, c) in g.iter_mut().zip(&cond) {
                clip.condition_id = c.condition_id;
            }
            let e = endpoint_mse(&g, &cond);
            (g, Some(e))
        }
    };
    let featurizer = Featurizer::new(cfg.in_channels, opts.featurizer_seed);
    let metrics = evaluate_samples(&featurizer, heldout, &generated, &cond)?;
    let report =
        EvalReport { mode: ckpt.train.mode, checkpoint_step: ckpt.step, options: opts.clone(), metrics, endpoint_mse: endpoint };
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.txt"), report.to_text())?;
    for (i, clip) in generated.iter().take(opts.dump_clips).enumerate() {
        write_clip_ppm(clip, &out_dir.join(format!("sample_{i:03}")))?;
    }
    Ok(report)
}

/// One PPM per frame, `<prefix>_frame_<f>.ppm`.
pub fn write_clip_ppm<T: Scalar>(clip: &VideoClip<T>, prefix: &Path) -> Result<Vec<PathBuf>> {
    let stem = prefix.file_name().and_then(|s| s.to_str()).unwrap_or("clip");
    (0..clip.frames())
        .map(|f| {
            let path = prefix.with_file_name(format!("{stem}_frame_{f:02}.ppm"));
            write_ppm(clip, f, &path)?;
            Ok(path)
        })
        .collect()
}
