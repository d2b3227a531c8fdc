//! Appearance noise prior: training noise λ·z^c + ε_n, the forward process
//! built on it, and the shifted initial noise used by the ODE sampler.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.03;
pub const DEFAULT_GAMMA: f64 = 0.02;

/// Frame-rate tags of base and interpolation clips.
pub const BASE_FPS: u32 = 2;
pub const TSR_FPS: u32 = 8;

/// λ (training and inference) and γ (inference-only extra strength).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppearancePrior {
    lambda: f64,
    gamma: f64,
}

impl Default for AppearancePrior {
    fn default() -> Self {
        AppearancePrior { lambda: DEFAULT_LAMBDA, gamma: DEFAULT_GAMMA }
    }
}

impl AppearancePrior {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0 && gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "prior strengths must be finite and non-negative, got lambda={lambda}, gamma={gamma}"
            )));
        }
        Ok(AppearancePrior { lambda, gamma })
    }

    /// λ = γ = 0: plain DDPM.
    pub fn none() -> Self {
        AppearancePrior { lambda: 0.0, gamma: 0.0 }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Mean coefficient of the initial sampling noise.
    pub fn sampling_strength(&self) -> f64 {
        self.lambda + self.gamma
    }
}

/// A latent clip `[N, C, H, W]` with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip<T> {
    pub latent: Tensor<T>,
    pub fps: u32,
    pub condition_id: usize,
}

impl<T: Scalar> VideoClip<T> {
    pub fn new(latent: Tensor<T>, fps: u32, condition_id: usize) -> Result<Self> {
        if latent.ndim() != 4 {
            return Err(Error::shape("VideoClip", format!("expected [N,C,H,W], got {:?}", latent.shape())));
        }
        Ok(VideoClip { latent, fps, condition_id })
    }

    pub fn frames(&self) -> usize {
        self.latent.shape()[0]
    }

    /// Frame shape `[C, H, W]`.
    pub fn frame_shape(&self) -> &[usize] {
        &self.latent.shape()[1..]
    }

    pub fn center_index(&self) -> usize {
        self.frames() / 2
    }

    pub fn frame(&self, i: usize) -> Tensor<T> {
        self.latent.index0(i)
    }

    /// z^c, the middle frame.
    pub fn center_frame(&self) -> Tensor<T> {
        self.frame(self.center_index())
    }

    pub fn first_frame(&self) -> Tensor<T> {
        self.frame(0)
    }

    pub fn last_frame(&self) -> Tensor<T> {
        self.frame(self.frames() - 1)
    }
}

/// `frame` is either one `[C, H, W]` frame shared by all frames of `video`, or
/// a per-frame mean with the full video shape.
fn check_frame(op: &'static str, video: &[usize], frame: &Tensor<impl Scalar>) -> Result<()> {
    if video.len() != 4 || (&video[1..] != frame.shape() && video != frame.shape()) {
        return Err(Error::shape(op, format!("video {video:?} vs frame {:?}", frame.shape())));
    }
    Ok(())
}

/// Adds `strength · z_c` to every frame of `noise` (frame by frame when `z_c`
/// has the full shape of `noise`).
fn add_center_shift<T: Scalar>(noise: &Tensor<T>, z_c: &Tensor<T>, strength: f64) -> Tensor<T> {
    let s = T::c(strength);
    let per_frame = z_c.numel();
    let zc = z_c.data();
    Tensor::from_fn(noise.shape(), |i| s * zc[i % per_frame] + noise.data()[i])
}

/// ε^i = λ·z^c + ε_n^i for every frame i.
pub fn make_training_noise<T: Scalar>(eps_n: &Tensor<T>, z_c: &Tensor<T>, lambda: f64) -> Result<Tensor<T>> {
    check_frame("make_training_noise", eps_n.shape(), z_c)?;
    Ok(add_center_shift(eps_n, z_c, lambda))
}

/// z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε.
pub fn q_sample<T: Scalar>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    let ab = schedule.alpha_bar(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", format!("{:?} vs {:?}", z0.shape(), eps.shape())));
    }
    let (a, b) = (T::c(ab.sqrt()), T::c((1.0 - ab).sqrt()));
    z0.zip_map(eps, |x, e| a * x + b * e)
}

/// Initial ODE state: (λ+γ)·z^c + a fresh standard-normal draw per frame.
/// Draws are taken in row-major order of `[frames, C, H, W]`. A 4-D `z_c` is a
/// per-frame mean and fixes the frame count itself.
pub fn initial_sampling_noise<T: Scalar>(
    z_c: &Tensor<T>,
    frames: usize,
    prior: &AppearancePrior,
    rng: &mut Rng,
) -> Tensor<T> {
    let shape = match z_c.ndim() {
        4 => z_c.shape().to_vec(),
        _ => [&[frames][..], z_c.shape()].concat(),
    };
    let eps = Tensor::randn(&shape, rng);
    add_center_shift(&eps, z_c, prior.sampling_strength())
}

/// Shift an existing noise tensor by `strength · z_c` (used to reproduce the
/// prior outside the sampler).
pub fn shift_noise<T: Scalar>(noise: &Tensor<T>, z_c: &Tensor<T>, strength: f64) -> Result<Tensor<T>> {
    check_frame("shift_noise", noise.shape(), z_c)?;
    Ok(add_center_shift(noise, z_c, strength))
}
