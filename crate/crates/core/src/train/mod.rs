//! Training on synthetic sprite clips: noise-prior loss, condition dropout,
//! split-learning-rate Adam and resumable checkpoints.

mod checkpoint;
mod data;
mod manifest;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{
    centroid, clip_rng, make_dataset, render, sample_sprite, synth_clip, Motion, Shape, SpriteDatasetConfig,
    SpriteParams,
};
pub use manifest::{read_dataset, write_dataset, MANIFEST};
pub use optim::Adam;

use crate::error::{Error, Result};
use crate::net::{tsr_appearnet_input, Appearance, ForwardOptions, NetInput, UNet3D};
use crate::prior::{make_training_noise, q_sample, VideoClip, DEFAULT_LAMBDA};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Center-frame conditioning with text condition dropout.
    Base,
    /// First/last-frame interpolation; the text condition is always null.
    Tsr,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Base => "base",
            TrainMode::Tsr => "tsr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(TrainMode::Base),
            "tsr" => Ok(TrainMode::Tsr),
            _ => Err(Error::InvalidArgument(format!("unknown training mode `{s}`"))),
        }
    }
}

pub const DEFAULT_LR_TEMPORAL: f64 = 2e-5;
pub const DEFAULT_DROP_RATE: f64 = 0.1;

/// Rng stream of the training loop; dataset clips use their own streams.
const TRAIN_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_temporal: f64,
    pub lr_spatial: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub cond_drop_rate: f64,
    pub prior_lambda: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Weight EMA is not implemented; only 0 (off) is accepted.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_temporal: DEFAULT_LR_TEMPORAL,
            lr_spatial: DEFAULT_LR_TEMPORAL / 10.0,
            batch_size: 4,
            steps: 1000,
            cond_drop_rate: DEFAULT_DROP_RATE,
            prior_lambda: DEFAULT_LAMBDA,
            seed: 0,
            mode: TrainMode::Base,
            checkpoint_every: 0,
            ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// Interpolation training: every step uses the null condition.
    pub fn tsr(self) -> Self {
        TrainConfig { mode: TrainMode::Tsr, cond_drop_rate: 1.0, ..self }
    }

    /// Set both learning rates from the temporal one, spatial = temporal / 10.
    pub fn with_lr(self, lr_temporal: f64) -> Self {
        TrainConfig { lr_temporal, lr_spatial: lr_temporal / 10.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr_temporal > 0.0 && self.lr_spatial > 0.0) {
            return bad(format!("learning rates must be positive, got {} and {}", self.lr_temporal, self.lr_spatial));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_rate) {
            return bad(format!("cond_drop_rate {} outside [0, 1]", self.cond_drop_rate));
        }
        if !(self.prior_lambda >= 0.0 && self.prior_lambda.is_finite()) {
            return bad(format!("prior_lambda {} must be >= 0", self.prior_lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.ema_decay != 0.0 {
            return bad("weight EMA is not implemented; set ema_decay = 0".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr_temporal", format!("{:?}", self.lr_temporal)),
            ("lr_spatial", format!("{:?}", self.lr_spatial)),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("cond_drop_rate", format!("{:?}", self.cond_drop_rate)),
            ("prior_lambda", format!("{:?}", self.prior_lambda)),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.name().to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("ema_decay", format!("{:?}", self.ema_decay)),
        ]
    }

    /// Set one field. Returns `Ok(false)` for keys that are not training keys.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let float = || v.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("`{key}` expects a number, got `{v}`")));
        let int = || v.parse::<u64>().map_err(|_| Error::InvalidArgument(format!("`{key}` expects an integer, got `{v}`")));
        match key {
            "lr_temporal" => self.lr_temporal = float()?,
            "lr_spatial" => self.lr_spatial = float()?,
            "batch_size" => self.batch_size = int()? as usize,
            "steps" => self.steps = int()?,
            "cond_drop_rate" => self.cond_drop_rate = float()?,
            "prior_lambda" => self.prior_lambda = float()?,
            "seed" => self.seed = int()?,
            "mode" => self.mode = TrainMode::parse(v)?,
            "checkpoint_every" => self.checkpoint_every = int()?,
            "ema_decay" => self.ema_decay = float()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A prepared training batch: model input plus the regression target.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T> {
    pub input: NetInput<T>,
    /// Full training noise ε = λ·z^c + ε_n, `[B, N, C, H, W]`.
    pub target: Tensor<T>,
    /// Integer step t per clip.
    pub steps: Vec<usize>,
}

/// Draw noise, steps and condition dropout for `clips`.
///
/// Per clip, in order: t uniform in 1..=T, ε_n in row-major order, then the
/// dropout coin (base mode only). Base mode conditions on the center frame;
/// TSR mode on the interpolation of the first and last frames, which is also
/// the per-frame prior mean, and always uses the null condition.
pub fn prepare_batch<T: Scalar>(
    clips: &[&VideoClip<T>],
    rng: &mut Rng,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    null_cond: usize,
) -> Result<TrainBatch<T>> {
    let first = clips.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let shape = first.latent.shape().to_vec();
    let mut z_t = Vec::with_capacity(clips.len());
    let mut target = Vec::with_capacity(clips.len());
    let mut appear = Vec::with_capacity(clips.len());
    let mut steps = Vec::with_capacity(clips.len());
    let mut cond = Vec::with_capacity(clips.len());
    for clip in clips {
        if clip.latent.shape() != shape.as_slice() {
            return Err(Error::shape("prepare_batch", format!("{:?} vs {shape:?}", clip.latent.shape())));
        }
        let t = 1 + rng.below(schedule.steps());
        let eps_n = Tensor::randn(&shape, rng);
        let mean = match config.mode {
            TrainMode::Base => clip.center_frame(),
            TrainMode::Tsr => tsr_appearnet_input(&clip.first_frame(), &clip.last_frame(), clip.frames())?,
        };
        let eps = make_training_noise(&eps_n, &mean, config.prior_lambda)?;
        z_t.push(q_sample(&clip.latent, t, &eps, schedule)?);
        target.push(eps);
        appear.push(mean);
        steps.push(t);
        let drop = match config.mode {
            TrainMode::Base => rng.bernoulli(config.cond_drop_rate),
            TrainMode::Tsr => true,
        };
        cond.push(if drop { null_cond } else { clip.condition_id });
    }
    let appearance = match config.mode {
        TrainMode::Base => Appearance::Center(Tensor::stack(&appear)?),
        TrainMode::Tsr => Appearance::Sequence(Tensor::stack(&appear)?),
    };
    let input = NetInput {
        z_t: Tensor::stack(&z_t)?,
        t: steps.iter().map(|&t| t as f64).collect(),
        cond,
        appearance,
    };
    Ok(TrainBatch { input, target: Tensor::stack(&target)?, steps })
}

/// Mean of (pred − target)² over all elements.
pub fn mse<'g, T: Scalar>(pred: Var<'g, T>, target: &Tensor<T>) -> Result<Var<'g, T>> {
    let d = pred.sub(pred.graph().constant(target.clone()))?;
    Ok(d.mul(d)?.mean())
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads<T: Scalar>(model: &UNet3D<T>, batch: &TrainBatch<T>) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let g = Graph::new();
    let params = model.params().bind(&g, true);
    let pred = model.forward_on(&g, &params, &batch.input, ForwardOptions::default())?;
    let loss = mse(pred, &batch.target)?;
    let value = loss.value().item().f64();
    let mut grads = g.backward(loss)?;
    Ok((value, params.iter().map(|p| grads.take(*p)).collect()))
}

/// Loss of one batch without gradients.
pub fn batch_loss<T: Scalar>(model: &UNet3D<T>, batch: &TrainBatch<T>) -> Result<f64> {
    let pred = model.forward_batch(&batch.input, ForwardOptions::default())?;
    let n = pred.numel() as f64;
    let sum: f64 = pred.data().iter().zip(batch.target.data()).map(|(p, t)| (p.f64() - t.f64()).powi(2)).sum();
    Ok(sum / n)
}

/// Model, optimizer and loop state.
#[derive(Debug)]
pub struct Trainer<T> {
    pub model: UNet3D<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    rng: Rng,
    step: u64,
}

impl<T: Scalar> Clone for Trainer<T> {
    fn clone(&self) -> Self {
        Trainer {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            config: self.config.clone(),
            schedule: self.schedule.clone(),
            rng: self.rng.clone(),
            step: self.step,
        }
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: UNet3D<T>, config: TrainConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(model.params(), config.lr_spatial, config.lr_temporal);
        let rng = Rng::with_stream(config.seed, TRAIN_STREAM);
        Ok(Trainer { model, optimizer, config, schedule, rng, step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn rng(&self) -> &Rng {
        &self.rng
    }

    /// Draw a batch from `data` with this trainer's rng.
    pub fn next_batch(&mut self, data: &[VideoClip<T>]) -> Result<TrainBatch<T>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let picks: Vec<&VideoClip<T>> =
            (0..self.config.batch_size).map(|_| &data[self.rng.below(data.len())]).collect();
        let null = self.model.config().null_cond();
        prepare_batch(&picks, &mut self.rng, &self.schedule, &self.config, null)
    }

    /// One Adam step on a given batch. Returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &TrainBatch<T>) -> Result<f64> {
        let (loss, grads) = loss_and_grads(&self.model, batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { value: loss, step: self.step });
        }
        self.optimizer.step(self.model.params_mut(), &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Draw a batch and take one step.
    pub fn step(&mut self, data: &[VideoClip<T>]) -> Result<f64> {
        let batch = self.next_batch(data)?;
        self.train_step(&batch)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model_config: self.model.config().clone(),
            schedule: self.schedule.clone(),
            train: self.config.clone(),
            params: self.model.params().clone(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            rng: self.rng.state(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let mut model = UNet3D::new(ckpt.model_config.clone(), 0)?;
        model.load_params(ckpt.params)?;
        Ok(Trainer {
            model,
            optimizer: ckpt.optimizer,
            config: ckpt.train,
            schedule: ckpt.schedule,
            rng: Rng::from_state(ckpt.rng),
            step: ckpt.step,
        })
    }
}
