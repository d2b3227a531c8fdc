//! Synthetic sprite clips: one soft-edged disc or square per clip, moving
//! according to its class.

use crate::error::{Error, Result};
use crate::prior::{VideoClip, BASE_FPS, TSR_FPS};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    Rotate,
    Scale,
}

impl Motion {
    pub const ALL: [Motion; 6] = [
        Motion::TranslateLeft,
        Motion::TranslateRight,
        Motion::TranslateUp,
        Motion::TranslateDown,
        Motion::Rotate,
        Motion::Scale,
    ];

    pub fn from_class(class_id: usize) -> Result<Self> {
        Self::ALL
            .get(class_id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("class id {class_id} outside 0..{}", Self::ALL.len())))
    }

    pub fn name(self) -> &'static str {
        match self {
            Motion::TranslateLeft => "translate-left",
            Motion::TranslateRight => "translate-right",
            Motion::TranslateUp => "translate-up",
            Motion::TranslateDown => "translate-down",
            Motion::Rotate => "rotate",
            Motion::Scale => "scale",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteDatasetConfig {
    pub resolution: usize,
    pub channels: usize,
    pub frames: usize,
    pub fps: u32,
    pub num_classes: usize,
    pub clips_per_class: usize,
    /// Sprite speed range in pixels per frame at the base frame rate. Clips
    /// at a higher `fps` move proportionally less per frame.
    pub min_speed: f64,
    pub max_speed: f64,
    pub seed: u64,
}

impl Default for SpriteDatasetConfig {
    fn default() -> Self {
        SpriteDatasetConfig {
            resolution: 16,
            channels: 4,
            frames: 9,
            fps: BASE_FPS,
            num_classes: 6,
            clips_per_class: 16,
            min_speed: 0.5,
            max_speed: 1.0,
            seed: 0,
        }
    }
}

impl SpriteDatasetConfig {
    /// Interpolation clips: 5 frames at the higher frame rate.
    pub fn tsr(self) -> Self {
        SpriteDatasetConfig { frames: 5, fps: TSR_FPS, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes == 0 || self.num_classes > Motion::ALL.len() {
            return bad(format!("num_classes must be in 1..={}", Motion::ALL.len()));
        }
        if self.resolution < 12 || self.channels == 0 || self.frames == 0 || self.fps == 0 {
            return bad("resolution must be >= 12 and channels, frames, fps positive".into());
        }
        if !(0.0 <= self.min_speed && self.min_speed <= self.max_speed) {
            return bad(format!("bad speed range [{}, {}]", self.min_speed, self.max_speed));
        }
        let travel = self.max_speed * self.frame_step() * (self.frames.saturating_sub(1)) as f64;
        let smallest = 2.0 * (MIN_RADIUS * std::f64::consts::SQRT_2 + EDGE);
        if travel + smallest > self.resolution as f64 {
            return bad(format!("sprites travelling {travel} px do not fit in {} px", self.resolution));
        }
        Ok(())
    }

    /// Fraction of a base-rate frame that one frame of this dataset spans.
    fn frame_step(&self) -> f64 {
        BASE_FPS as f64 / self.fps as f64
    }
}

const MIN_RADIUS: f64 = 2.0;
/// Distance from the sprite outline to the outermost pixel center that must
/// exist for the filtered image to hold the whole sprite: half the edge ramp
/// plus half the filter support.
const EDGE: f64 = 1.0;
/// Quadrature points per pixel and axis for the pixel filter.
const SUBSAMPLES: usize = 4;
const MAX_RADIUS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteParams {
    pub motion: Motion,
    pub shape: Shape,
    /// Center in pixels at frame 0; pixel `(i, j)` has its center at
    /// `(j + 0.5, i + 0.5)`.
    pub x0: f64,
    pub y0: f64,
    pub radius: f64,
    pub angle0: f64,
    /// Pixels per frame of this clip.
    pub speed: f64,
    pub brightness: f64,
}

impl SpriteParams {
    /// (x, y, radius, angle) at frame `f`.
    pub fn state(&self, f: usize) -> (f64, f64, f64, f64) {
        let d = self.speed * f as f64;
        let (x, y) = match self.motion {
            Motion::TranslateLeft => (self.x0 - d, self.y0),
            Motion::TranslateRight => (self.x0 + d, self.y0),
            Motion::TranslateUp => (self.x0, self.y0 - d),
            Motion::TranslateDown => (self.x0, self.y0 + d),
            _ => (self.x0, self.y0),
        };
        let r = match self.motion {
            Motion::Scale => self.radius + 0.25 * d,
            _ => self.radius,
        };
        let angle = match self.motion {
            Motion::Rotate => self.angle0 + d / self.radius,
            _ => self.angle0,
        };
        (x, y, r, angle)
    }
}

/// Draw sprite parameters for `class_id`. Draw order: shape, speed, radius,
/// brightness, angle, then the start position.
pub fn sample_sprite(class_id: usize, rng: &mut Rng, config: &SpriteDatasetConfig) -> Result<SpriteParams> {
    config.validate()?;
    if class_id >= config.num_classes {
        return Err(Error::InvalidArgument(format!("class id {class_id} outside 0..{}", config.num_classes)));
    }
    let motion = Motion::from_class(class_id)?;
    let shape = match motion {
        // A rotating disc would be static.
        Motion::Rotate => {
            rng.uniform();
            Shape::Square
        }
        _ if rng.uniform() < 0.5 => Shape::Disc,
        _ => Shape::Square,
    };
    let speed = rng.uniform_range(config.min_speed, config.max_speed) * config.frame_step();
    let res = config.resolution as f64;
    let travel = speed * (config.frames - 1) as f64;
    let (moving, grow) = match motion {
        Motion::Scale => (0.0, 0.25 * travel),
        Motion::Rotate => (0.0, 0.0),
        _ => (travel, 0.0),
    };
    // Squares reach √2·r at the corners; keep the whole sprite in frame.
    let corner = if shape == Shape::Square { std::f64::consts::SQRT_2 } else { 1.0 };
    let cap = ((res - moving) / 2.0 - EDGE) / corner - grow;
    let radius = rng.uniform_range(MIN_RADIUS, MAX_RADIUS.min(cap).max(MIN_RADIUS));
    let brightness = rng.uniform_range(0.3, 1.0);
    let angle0 = rng.uniform_range(0.0, std::f64::consts::FRAC_PI_2);

    let reach = (radius + grow) * corner + EDGE;
    let span = |moving: bool| {
        let need = if moving { travel } else { 0.0 };
        (reach, (res - reach - need).max(reach))
    };
    let (hx, hy) = match motion {
        Motion::TranslateLeft | Motion::TranslateRight => (true, false),
        Motion::TranslateUp | Motion::TranslateDown => (false, true),
        _ => (false, false),
    };
    let (lx, ux) = span(hx);
    let (ly, uy) = span(hy);
    let mut x0 = rng.uniform_range(lx, ux);
    let mut y0 = rng.uniform_range(ly, uy);
    if motion == Motion::TranslateLeft {
        x0 = res - x0;
    }
    if motion == Motion::TranslateUp {
        y0 = res - y0;
    }
    Ok(SpriteParams { motion, shape, x0, y0, radius, angle0, speed, brightness })
}

/// Soft coverage in [0, 1] with a one-pixel linear edge ramp.
fn coverage(shape: Shape, dx: f64, dy: f64, r: f64, angle: f64) -> f64 {
    let dist = match shape {
        Shape::Disc => (dx * dx + dy * dy).sqrt() - r,
        Shape::Square => {
            let (s, c) = angle.sin_cos();
            let u = c * dx + s * dy;
            let v = -s * dx + c * dy;
            u.abs().max(v.abs()) - r
        }
    };
    (0.5 - dist).clamp(0.0, 1.0)
}

/// Channel `k` is a copy of the coverage map with its own background and
/// foreground levels, alternating polarity.
fn channel_levels(k: usize, brightness: f64) -> (f64, f64) {
    let shift = 0.15 * (k / 2) as f64;
    if k % 2 == 0 {
        (-1.0 + shift, brightness - shift)
    } else {
        (brightness - shift, -1.0 + shift)
    }
}

/// Coverage of every pixel: the soft sprite filtered with a separable tent
/// of half-width one pixel. Tents sum to one and reproduce linear functions,
/// so image mass and centroid equal those of the continuous sprite up to
/// quadrature error.
fn pixel_coverage(p: &SpriteParams, f: usize, r: usize, out: &mut [f64]) {
    let (x, y, rad, angle) = p.state(f);
    let q = SUBSAMPLES;
    let fine = (r + 1) * q;
    // Soft coverage on a fine grid offset half a pixel outside the image.
    let pos = |k: usize| (k as f64 + 0.5) / q as f64 - 0.5;
    let mut grid = vec![0.0; fine * fine];
    for a in 0..fine {
        for b in 0..fine {
            grid[a * fine + b] = coverage(p.shape, pos(b) - x, pos(a) - y, rad, angle);
        }
    }
    // Tent weights for the 2q fine points around a pixel center.
    let w: Vec<f64> = (0..2 * q)
        .map(|k| {
            let d = (k as f64 + 0.5) / q as f64 - 1.0;
            (1.0 - d.abs()) / q as f64
        })
        .collect();
    for i in 0..r {
        for j in 0..r {
            let mut acc = 0.0;
            for (ka, wa) in w.iter().enumerate() {
                let row = &grid[(i * q + ka) * fine + j * q..(i * q + ka) * fine + j * q + 2 * q];
                acc += wa * row.iter().zip(&w).map(|(g, wb)| g * wb).sum::<f64>();
            }
            out[i * r + j] = acc.min(1.0);
        }
    }
}

/// Render `[N, C, H, W]` with values in [−1, 1].
pub fn render<T: Scalar>(p: &SpriteParams, config: &SpriteDatasetConfig) -> Tensor<T> {
    let (n, c, r) = (config.frames, config.channels, config.resolution);
    let mut data = vec![T::zero(); n * c * r * r];
    let mut cov = vec![0.0; r * r];
    for f in 0..n {
        pixel_coverage(p, f, r, &mut cov);
        for k in 0..c {
            let (bg, fg) = channel_levels(k, p.brightness);
            let plane = &mut data[(f * c + k) * r * r..(f * c + k + 1) * r * r];
            for (d, &a) in plane.iter_mut().zip(&cov) {
                *d = T::c(bg + (fg - bg) * a);
            }
        }
    }
    Tensor::new(vec![n, c, r, r], data).expect("sized above")
}

pub fn synth_clip<T: Scalar>(class_id: usize, rng: &mut Rng, config: &SpriteDatasetConfig) -> Result<VideoClip<T>> {
    let p = sample_sprite(class_id, rng, config)?;
    VideoClip::new(render(&p, config), config.fps, class_id)
}

/// Intensity-weighted centroid (x, y) of channel 0 of frame `f`.
pub fn centroid<T: Scalar>(clip: &VideoClip<T>, f: usize) -> (f64, f64) {
    let s = clip.latent.shape();
    let (c, r) = (s[1], s[2]);
    let plane = &clip.latent.data()[f * c * r * r..(f * c + 1) * r * r];
    let bg = plane.iter().map(|v| v.f64()).fold(f64::INFINITY, f64::min);
    let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
    for i in 0..r {
        for j in 0..r {
            let w = plane[i * r + j].f64() - bg;
            m += w;
            mx += w * (j as f64 + 0.5);
            my += w * (i as f64 + 0.5);
        }
    }
    (mx / m, my / m)
}

/// Class-major list of clips; clip `k` of class `c` uses its own rng stream,
/// so any clip can be regenerated on its own.
pub fn make_dataset<T: Scalar>(config: &SpriteDatasetConfig) -> Result<Vec<VideoClip<T>>> {
    config.validate()?;
    let mut clips = Vec::with_capacity(config.num_classes * config.clips_per_class);
    for c in 0..config.num_classes {
        for k in 0..config.clips_per_class {
            let mut rng = clip_rng(config, c, k);
            clips.push(synth_clip(c, &mut rng, config)?);
        }
    }
    Ok(clips)
}

pub fn clip_rng(config: &SpriteDatasetConfig, class_id: usize, index: usize) -> Rng {
    Rng::with_stream(config.seed, (class_id * config.clips_per_class + index) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_in_range() {
        let cfg = SpriteDatasetConfig::default();
        for c in 0..6 {
            let clip: VideoClip<f64> = synth_clip(c, &mut Rng::new(c as u64), &cfg).unwrap();
            assert!(clip.latent.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(clip.latent.shape(), &[9, 4, 16, 16]);
        }
    }

    #[test]
    fn rejects_bad_class() {
        let cfg = SpriteDatasetConfig { num_classes: 4, ..Default::default() };
        assert!(synth_clip::<f64>(4, &mut Rng::new(0), &cfg).is_err());
    }
}
