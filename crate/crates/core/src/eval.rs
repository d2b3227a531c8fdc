//! Desk-scale video metrics: a fixed random-convolution featurizer, Gaussian
//! Fréchet distance between feature sets, and a temporal consistency score.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::prior::VideoClip;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::kernels::{conv2d, Conv2dGeom};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 64;
pub const DEFAULT_FEATURIZER_SEED: u64 = 0xfea7;

const STAGE1: usize = 16;
const STAGE2: usize = 32;
/// Frames seen by the first (space-time) stage.
const TIME_KERNEL: usize = 3;
const MOTION_GAIN: f64 = 3.0;

struct Stage {
    w: Vec<f64>,
    b: Vec<f64>,
    cin: usize,
    cout: usize,
    stride: usize,
}

impl Stage {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let w = (0..cout * cin * 9).map(|_| std * rng.normal()).collect();
        let b = (0..cout).map(|_| 0.1 * rng.normal()).collect();
        Stage { w, b, cin, cout, stride }
    }

    fn apply(&self, x: &[f64], batch: usize, h: usize, w: usize, linear: bool) -> (Vec<f64>, usize, usize) {
        let g = Conv2dGeom { batch, cin: self.cin, h, w, cout: self.cout, kh: 3, kw: 3, stride: self.stride, pad: 1 };
        let mut y = conv2d(x, &self.w, Some(&self.b), &g);
        if !linear {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        (y, g.out_h(), g.out_w())
    }
}

/// Seed-determined random conv net mapping a clip `[N, C, H, W]` to a
/// `FEATURE_DIM` vector: a 3-frame space-time stage, two spatial stages, then
/// the mean over time and space.
pub struct Featurizer {
    channels: usize,
    stages: [Stage; 3],
    /// Skip the ReLUs, making the embedding affine in the clip.
    pub linear: bool,
}

impl Featurizer {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut first = Stage::new(TIME_KERNEL * channels, STAGE1, 2, &mut rng);
        // Half of the first-stage filters sum to zero over time, so they
        // respond to motion only; they get a larger gain since frame-to-frame
        // changes are small next to the frames themselves.
        let per_frame = channels * 9;
        for o in 0..STAGE1 / 2 {
            let w = &mut first.w[o * TIME_KERNEL * per_frame..(o + 1) * TIME_KERNEL * per_frame];
            for i in 0..per_frame {
                let m = (0..TIME_KERNEL).map(|k| w[k * per_frame + i]).sum::<f64>() / TIME_KERNEL as f64;
                (0..TIME_KERNEL).for_each(|k| w[k * per_frame + i] = MOTION_GAIN * (w[k * per_frame + i] - m));
            }
        }
        let stages = [
            first,
            Stage::new(STAGE1, STAGE2, 2, &mut rng),
            Stage::new(STAGE2, FEATURE_DIM, 1, &mut rng),
        ];
        Featurizer { channels, stages, linear: false }
    }

    pub fn embed<T: Scalar>(&self, clip: &VideoClip<T>) -> Result<Vec<f64>> {
        let s = clip.latent.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if c != self.channels {
            return Err(Error::shape("featurize", format!("featurizer expects {} channels, clip has {c}", self.channels)));
        }
        // Short clips repeat their last frame so every clip yields a window.
        let windows = n.saturating_sub(TIME_KERNEL - 1).max(1);
        let plane = c * h * w;
        let data = clip.latent.data();
        let mut x = Vec::with_capacity(windows * TIME_KERNEL * plane);
        for f in 0..windows {
            for k in 0..TIME_KERNEL {
                let src = (f + k).min(n - 1);
                x.extend(data[src * plane..(src + 1) * plane].iter().map(|v| v.f64()));
            }
        }
        let (mut x, mut h, mut w) = (x, h, w);
        for st in &self.stages {
            (x, h, w) = st.apply(&x, windows, h, w, self.linear);
        }
        let per = (windows * h * w) as f64;
        let mut out = vec![0.0; FEATURE_DIM];
        for win in x.chunks_exact(FEATURE_DIM * h * w) {
            for (o, ch) in out.iter_mut().zip(win.chunks_exact(h * w)) {
                *o += ch.iter().sum::<f64>();
            }
        }
        out.iter_mut().for_each(|v| *v /= per);
        Ok(out)
    }

    pub fn featurize<T: Scalar>(&self, clips: &[VideoClip<T>]) -> Result<FeatureStats> {
        let feats = clips.iter().map(|c| self.embed(c)).collect::<Result<Vec<_>>>()?;
        FeatureStats::from_features(&feats)
    }
}

/// Featurize with the default network for the clips' channel count.
pub fn featurize<T: Scalar>(clips: &[VideoClip<T>], seed: u64) -> Result<FeatureStats> {
    let first = clips.first().ok_or_else(|| Error::InvalidArgument("featurize needs at least one clip".into()))?;
    Featurizer::new(first.latent.shape()[1], seed).featurize(clips)
}

/// Sample mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, normalized by `count − 1` (zero for one sample).
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn from_features(feats: &[Vec<f64>]) -> Result<Self> {
        let d = feats.first().ok_or_else(|| Error::InvalidArgument("no features".into()))?.len();
        if feats.iter().any(|f| f.len() != d) {
            return Err(Error::shape("feature stats", "feature vectors differ in length"));
        }
        let n = feats.len();
        let mut mean = vec![0.0; d];
        for f in feats {
            mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for f in feats {
            let c: Vec<f64> = f.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        let denom = n.saturating_sub(1).max(1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(FeatureStats { mean, cov, count: n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fewer samples than `d + 1`: the covariance is rank deficient.
    pub fn is_degenerate(&self) -> bool {
        self.count < self.dim() + 1
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }
}

fn eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Linalg("non-finite matrix entry".into()));
    }
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::try_new(sym, 1e-14, 10_000).ok_or_else(|| Error::Linalg("eigendecomposition did not converge".into()))
}

/// Symmetric square root with negative eigenvalues clamped to zero.
fn sqrtm_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m)?;
    let root = DVector::from_iterator(e.eigenvalues.len(), e.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose())
}

/// Fréchet distance between the Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet", format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = sqrtm_psd(sa.clone())?;
    let inner = eigen(&root_a * &sb * &root_a)?;
    let cross: f64 = inner.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Mean over classes of the Fréchet distance between each class's clips in
/// `a` and in `b`. Classes missing from either set are skipped.
pub fn class_frechet<T: Scalar>(featurizer: &Featurizer, a: &[VideoClip<T>], b: &[VideoClip<T>]) -> Result<f64> {
    let classes = a.iter().map(|c| c.condition_id).max().unwrap_or(0) + 1;
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..classes {
        let pick = |set: &[VideoClip<T>]| -> Vec<VideoClip<T>> {
            set.iter().filter(|v| v.condition_id == c).cloned().collect()
        };
        let (ca, cb) = (pick(a), pick(b));
        if ca.is_empty() || cb.is_empty() {
            continue;
        }
        total += frechet_distance(&featurizer.featurize(&ca)?, &featurizer.featurize(&cb)?)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument("no class appears in both sets".into()));
    }
    Ok(total / used as f64)
}

/// Mean over adjacent frame pairs of the RMS frame difference.
pub fn temporal_consistency<T: Scalar>(clip: &VideoClip<T>) -> Result<f64> {
    let n = clip.frames();
    if n < 2 {
        return Err(Error::InvalidArgument("temporal consistency needs at least 2 frames".into()));
    }
    let plane = clip.latent.numel() / n;
    let d = clip.latent.data();
    let mut total = 0.0;
    for f in 0..n - 1 {
        let ss: f64 = (0..plane).map(|i| (d[(f + 1) * plane + i].f64() - d[f * plane + i].f64()).powi(2)).sum();
        total += (ss / plane as f64).sqrt();
    }
    Ok(total / (n - 1) as f64)
}

/// Map [−1, 1] to a byte, rounding half away from zero.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary PPM of frame `f`. Channels 0..3 become RGB; fewer channels are
/// repeated.
pub fn write_ppm<T: Scalar>(clip: &VideoClip<T>, f: usize, path: &Path) -> Result<()> {
    let s = clip.latent.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = &clip.latent.data()[f * c * h * w..(f + 1) * c * h * w];
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for k in 0..3 {
            bytes.push(to_byte(plane[k.min(c - 1) * h * w + i].f64()));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Metrics of a model's samples against held-out real clips.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub frechet: f64,
    pub temporal_consistency: f64,
    pub real_temporal_consistency: f64,
    /// MSE between each sample's center frame and the frame it was
    /// conditioned on.
    pub center_mse: f64,
    pub samples: usize,
}

/// Mean squared difference over every pixel of the given frame pairs.
pub fn frame_mse<T: Scalar>(pairs: &[(Tensor<T>, Tensor<T>)]) -> f64 {
    let (mut se, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        se += a.data().iter().zip(b.data()).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>();
        n += a.numel();
    }
    se / n.max(1) as f64
}

/// Frame MSE of generated first and last frames against the conditioning
/// clips' endpoints.
pub fn endpoint_mse<T: Scalar>(generated: &[VideoClip<T>], conditioning: &[&VideoClip<T>]) -> f64 {
    let pairs: Vec<_> = generated
        .iter()
        .zip(conditioning)
        .flat_map(|(g, c)| [(g.first_frame(), c.first_frame()), (g.last_frame(), c.last_frame())])
        .collect();
    frame_mse(&pairs)
}

/// The first `per_class` held-out clips of each class, in class order.
pub fn eval_subset<T: Scalar>(heldout: &[VideoClip<T>], per_class: usize) -> Vec<&VideoClip<T>> {
    let classes = heldout.iter().map(|c| c.condition_id).max().map_or(0, |m| m + 1);
    (0..classes)
        .flat_map(|c| heldout.iter().filter(move |v| v.condition_id == c).take(per_class))
        .collect()
}

/// Sample one clip per chosen held-out clip, conditioned on its center frame
/// and class, and score the samples against all of `heldout`.
pub fn evaluate_samples<T: Scalar>(
    featurizer: &Featurizer,
    heldout: &[VideoClip<T>],
    generated: &[VideoClip<T>],
    conditioning: &[&VideoClip<T>],
) -> Result<SampleMetrics> {
    if generated.len() != conditioning.len() || generated.is_empty() {
        return Err(Error::InvalidArgument("one sample per conditioning clip expected".into()));
    }
    let frechet = class_frechet(featurizer, generated, heldout)?;
    let mean_tc = |set: &mut dyn Iterator<Item = &VideoClip<T>>| -> Result<f64> {
        let v = set.map(temporal_consistency).collect::<Result<Vec<_>>>()?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let tc = mean_tc(&mut generated.iter())?;
    let real_tc = mean_tc(&mut conditioning.iter().copied())?;
    let centers: Vec<_> = generated.iter().zip(conditioning).map(|(g, c)| (g.center_frame(), c.center_frame())).collect();
    Ok(SampleMetrics {
        frechet,
        temporal_consistency: tc,
        real_temporal_consistency: real_tc,
        center_mse: frame_mse(&centers),
        samples: generated.len(),
    })
}
