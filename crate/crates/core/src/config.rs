//! Flat `key = value` run configuration covering model, schedule, data,
//! training, sampling and evaluation.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::UNetConfig;
use crate::prior::{AppearancePrior, DEFAULT_GAMMA};
use crate::sampler::{SamplerConfig, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::train::{SpriteDatasetConfig, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Data keys; resolution, channels and frames come from the model.
    pub data_seed: u64,
    pub clips_per_class: usize,
    pub num_classes: usize,
    pub fps: Option<u32>,
    pub min_speed: f64,
    pub max_speed: f64,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub prior_gamma: f64,
    pub sample_seed: u64,
    pub eval_per_class: usize,
    pub featurizer_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = NoiseSchedule::default();
        let d = SpriteDatasetConfig::default();
        RunConfig {
            model: UNetConfig::default(),
            train: TrainConfig::default(),
            schedule: s.kind(),
            diffusion_steps: s.steps(),
            beta_start: s.beta_start(),
            beta_end: s.beta_end(),
            data_seed: d.seed,
            clips_per_class: d.clips_per_class,
            num_classes: d.num_classes,
            fps: None,
            min_speed: d.min_speed,
            max_speed: d.max_speed,
            sample_steps: DEFAULT_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            prior_gamma: DEFAULT_GAMMA,
            sample_seed: 0,
            eval_per_class: 16,
            featurizer_seed: crate::eval::DEFAULT_FEATURIZER_SEED,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            match cfg.set(k, v) {
                Ok(true) => {}
                Ok(false) => return Err(err(format!("unknown key `{k}`"))),
                Err(e) => return Err(err(e.to_string())),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Set one key. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.model.apply_kv(key, value)? || self.train.apply_kv(key, value)? {
            return Ok(true);
        }
        fn num<F: std::str::FromStr>(key: &str, v: &str) -> Result<F> {
            v.parse().map_err(|_| Error::InvalidArgument(format!("`{key}` cannot take `{v}`")))
        }
        match key {
            "schedule" => {
                self.schedule = ScheduleKind::parse(value)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown schedule `{value}`")))?
            }
            "diffusion_steps" => self.diffusion_steps = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "clips_per_class" => self.clips_per_class = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "fps" => self.fps = Some(num(key, value)?),
            "min_speed" => self.min_speed = num(key, value)?,
            "max_speed" => self.max_speed = num(key, value)?,
            "sample_steps" => self.sample_steps = num(key, value)?,
            "guidance_scale" => self.guidance_scale = num(key, value)?,
            "prior_gamma" => self.prior_gamma = num(key, value)?,
            "sample_seed" => self.sample_seed = num(key, value)?,
            "eval_per_class" => self.eval_per_class = num(key, value)?,
            "featurizer_seed" => self.featurizer_seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Override every seed (training, data order stays with `data_seed`).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.sample_seed = seed;
        self
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.diffusion_steps, self.beta_start, self.beta_end)
    }

    pub fn dataset(&self) -> SpriteDatasetConfig {
        let base = SpriteDatasetConfig {
            resolution: self.model.resolution,
            channels: self.model.in_channels,
            frames: self.model.num_frames,
            num_classes: self.num_classes,
            clips_per_class: self.clips_per_class,
            min_speed: self.min_speed,
            max_speed: self.max_speed,
            seed: self.data_seed,
            ..SpriteDatasetConfig::default()
        };
        let base = match self.train.mode {
            TrainMode::Base => base,
            TrainMode::Tsr => SpriteDatasetConfig { frames: self.model.num_frames, ..base.tsr() },
        };
        match self.fps {
            Some(fps) => SpriteDatasetConfig { fps, ..base },
            None => base,
        }
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        let gamma = if self.train.prior_lambda == 0.0 { 0.0 } else { self.prior_gamma };
        Ok(SamplerConfig {
            steps: self.sample_steps,
            guidance_scale: self.guidance_scale,
            prior: AppearancePrior::new(self.train.prior_lambda, gamma)?,
            seed: self.sample_seed,
            always_uncond: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.noise_schedule()?;
        self.dataset().validate()?;
        self.sampler()?.validate()?;
        if self.num_classes > self.model.cond_vocab_size {
            return Err(Error::InvalidArgument(format!(
                "{} classes do not fit a condition vocabulary of {}",
                self.num_classes, self.model.cond_vocab_size
            )));
        }
        Ok(())
    }
}
