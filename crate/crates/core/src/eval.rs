//! Video Fréchet distance with a frozen space-time feature extractor, plus warping
//! diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use vidsynth_tensor::{no_grad, Float, Init, ParamStore, Tensor};

use crate::error::{contract, Error, Result};
use crate::warp::{masked_l1, warp};

/// Streaming mean and scatter of feature vectors. Partial accumulators merge associatively.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(dim: usize) -> Self {
        GaussianStats {
            count: 0,
            mean: DVector::zeros(dim),
            scatter: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = features.first() else {
            return contract("no feature vectors");
        };
        let mut s = GaussianStats::new(first.len());
        for f in features {
            s.push(f)?;
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return contract(format!("feature of length {} pushed into {}-dim stats", x.len(), self.dim()));
        }
        let x = DVector::from_column_slice(x);
        self.count += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &x - &self.mean;
        self.scatter += &delta * delta2.transpose();
        Ok(())
    }

    pub fn merge(&mut self, other: &GaussianStats) -> Result<()> {
        if other.dim() != self.dim() {
            return contract("merging stats of different dimension");
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean += &delta * (nb / n);
        self.scatter += &other.scatter + &delta * delta.transpose() * (na * nb / n);
        self.count += other.count;
        Ok(())
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased sample covariance, symmetrised.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.count < 2 {
            return Err(Error::Numerical(format!(
                "covariance needs at least 2 samples, have {}",
                self.count
            )));
        }
        let c = &self.scatter / (self.count - 1) as f64;
        Ok((&c + c.transpose()) * 0.5)
    }
}

/// Relative imaginary residue tolerated in the eigenvalues of the covariance product.
const IMAG_TOLERANCE: f64 = 1e-6;

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 sqrt(S_a S_b))`.
///
/// The trace of the square root is the sum of square roots of the eigenvalues of `S_a S_b`,
/// taken from its real Schur form.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return contract(format!("stats dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    frechet_from_moments(a.mean(), &a.covariance()?, b.mean(), &b.covariance()?)
}

pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return contract("mean/covariance dimensions disagree");
    }
    let product = cov_a * cov_b;
    let schur = product
        .try_schur(1e-14, 10_000)
        .ok_or_else(|| Error::Numerical("matrix square root did not converge".into()))?;
    let eig = schur.complex_eigenvalues();
    let scale = eig.iter().map(|z| z.norm()).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let zero_cut = d as f64 * f64::EPSILON * scale;
    let mut trace_sqrt = 0.0;
    for z in eig.iter() {
        if z.im.abs() > IMAG_TOLERANCE * scale {
            return Err(Error::Numerical(format!(
                "covariance product has eigenvalue {z} with imaginary part beyond tolerance"
            )));
        }
        if z.re < -IMAG_TOLERANCE * scale {
            return Err(Error::Numerical(format!(
                "covariance product has negative eigenvalue {}",
                z.re
            )));
        }
        // Roundoff-level eigenvalues of a rank-deficient product would otherwise contribute
        // their square roots.
        if z.re > zero_cut {
            trace_sqrt += z.re.sqrt();
        }
    }
    let dist = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
    let eps = 1e-9 * (1.0 + cov_a.trace() + cov_b.trace());
    if dist < -eps {
        return Err(Error::Numerical(format!("Fréchet distance {dist} is negative")));
    }
    Ok(dist.max(0.0))
}

/// Which clips are cut from each video for feature extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipPolicy {
    pub length: usize,
    pub stride: usize,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        ClipPolicy { length: 8, stride: 4 }
    }
}

impl ClipPolicy {
    /// Clip start indices within a video of `frames` frames.
    pub fn starts(&self, frames: usize) -> Vec<usize> {
        if frames < self.length || self.stride == 0 {
            return Vec::new();
        }
        (0..=frames - self.length).step_by(self.stride).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub temporal_kernel: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            seed: 1234,
            feature_dim: 64,
            temporal_kernel: 3,
        }
    }
}

/// Frozen random three-layer space-time convolutional network followed by global average
/// pooling. Each layer is a valid convolution in time (kernel `temporal_kernel`) and a
/// stride-2 3x3 convolution in space, with ReLU.
#[derive(Debug, Clone)]
pub struct VideoFeatureExtractor {
    config: ExtractorConfig,
    // layers[l][tau] = (weight, bias) for temporal tap tau.
    layers: Vec<Vec<(Tensor<f64>, Tensor<f64>)>>,
}

impl VideoFeatureExtractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.feature_dim == 0 || config.temporal_kernel == 0 {
            return Err(Error::Config("extractor needs positive feature_dim and temporal_kernel".into()));
        }
        let store = ParamStore::<f64>::new(config.seed);
        let root = store.root().sub("extractor");
        let widths = [3, 16, 32, config.feature_dim];
        let mut layers = Vec::new();
        for l in 0..3 {
            let (cin, cout) = (widths[l], widths[l + 1]);
            let std = (2.0 / (cin * 9 * config.temporal_kernel) as f64).sqrt();
            let mut taps = Vec::new();
            for tau in 0..config.temporal_kernel {
                let p = root.sub(format!("l{l}.t{tau}"));
                let w = p.var("weight", &[cout, cin, 3, 3], Init::Normal { mean: 0.0, std })?;
                let b = p.var("bias", &[cout], Init::Uniform { lo: -0.05, hi: 0.05 })?;
                w.set_trainable(false);
                b.set_trainable(false);
                taps.push((w.tensor(), b.tensor()));
            }
            layers.push(taps);
        }
        Ok(VideoFeatureExtractor { config, layers })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    /// Minimum clip length the extractor accepts.
    pub fn min_frames(&self) -> usize {
        3 * (self.config.temporal_kernel - 1) + 1
    }

    /// One feature vector per batch element of the clip (frames `[B, 3, H, W]`).
    pub fn features<T: Float>(&self, clip: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
        if clip.len() < self.min_frames() {
            return contract(format!(
                "clip of {} frames is shorter than the extractor's {}",
                clip.len(),
                self.min_frames()
            ));
        }
        let shape = clip[0].shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || clip.iter().any(|f| f.shape() != shape.as_slice()) {
            return contract("clip frames must share one [B, 3, H, W] shape");
        }
        no_grad(|| {
            let mut h: Vec<Tensor<f64>> = clip.iter().map(|f| f.cast::<f64>()).collect();
            for taps in &self.layers {
                let k = taps.len();
                let mut next = Vec::with_capacity(h.len() + 1 - k);
                for t in 0..=h.len() - k {
                    let mut acc: Option<Tensor<f64>> = None;
                    for (tau, (w, b)) in taps.iter().enumerate() {
                        let y = h[t + tau].conv2d(w, Some(b), 2, 1)?;
                        acc = Some(match acc {
                            Some(a) => a.add(&y)?,
                            None => y,
                        });
                    }
                    next.push(acc.expect("nonempty kernel").relu());
                }
                h = next;
            }
            let (b, c, hh, ww) = h[0].dims4()?;
            let plane = hh * ww;
            let norm = (h.len() * plane) as f64;
            let mut out = vec![vec![0.0; c]; b];
            for frame in &h {
                let d = frame.data();
                for (bi, row) in out.iter_mut().enumerate() {
                    for (ci, v) in row.iter_mut().enumerate() {
                        let off = (bi * c + ci) * plane;
                        *v += d[off..off + plane].iter().sum::<f64>() / norm;
                    }
                }
            }
            Ok(out)
        })
    }

    /// Cuts every video into clips per `policy` and accumulates their features. Videos are
    /// sequences of `[B, 3, H, W]` frames.
    pub fn accumulate<T: Float>(&self, videos: &[Vec<Tensor<T>>], policy: &ClipPolicy) -> Result<GaussianStats> {
        let mut stats = GaussianStats::new(self.config.feature_dim);
        let mut geometry: Option<Vec<usize>> = None;
        for video in videos {
            for s in policy.starts(video.len()) {
                let clip = &video[s..s + policy.length];
                match &geometry {
                    Some(g) if g.as_slice() != clip[0].shape()[1..].as_ref() => {
                        return contract("videos have different clip geometry");
                    }
                    None => geometry = Some(clip[0].shape()[1..].to_vec()),
                    _ => {}
                }
                for f in self.features(clip)? {
                    stats.push(&f)?;
                }
            }
        }
        if stats.count() < 2 {
            return contract(format!("need at least 2 clips for statistics, got {}", stats.count()));
        }
        Ok(stats)
    }
}

/// Fréchet distance between the clip statistics of two video sets.
pub fn video_fid<T: Float>(
    real: &[Vec<Tensor<T>>],
    generated: &[Vec<Tensor<T>>],
    extractor: &VideoFeatureExtractor,
    policy: &ClipPolicy,
) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return contract("video_fid needs nonempty real and generated sets");
    }
    let a = extractor.accumulate(real, policy)?;
    let b = extractor.accumulate(generated, policy)?;
    frechet_distance(&a, &b)
}

/// Mean over transitions of the masked L1 between `warp(x_t, w_t)` and `x_{t+1}`.
pub fn warp_error<T: Float>(frames: &[Tensor<T>], flows: &[Tensor<T>], validity: &[Tensor<T>]) -> Result<f64> {
    if frames.len() < 2 || flows.len() + 1 != frames.len() || validity.len() != flows.len() {
        return contract(format!(
            "warp error needs T frames with T-1 flows and masks; got {}, {}, {}",
            frames.len(),
            flows.len(),
            validity.len()
        ));
    }
    let mut total = 0.0;
    for t in 0..flows.len() {
        let warped = no_grad(|| warp(&frames[t], &flows[t]))?;
        total += masked_l1(&warped, &frames[t + 1], &validity[t])?;
    }
    Ok(total / flows.len() as f64)
}

/// [`warp_error`] of generated frames under ground-truth flow.
pub fn temporal_flicker<T: Float>(
    generated: &[Tensor<T>],
    true_flows: &[Tensor<T>],
    validity: &[Tensor<T>],
) -> Result<f64> {
    warp_error(generated, true_flows, validity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mu: &[f64], cov_diag: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        (
            DVector::from_column_slice(mu),
            DMatrix::from_diagonal(&DVector::from_column_slice(cov_diag)),
        )
    }

    #[test]
    fn closed_form_cases() {
        let (ma, ca) = stats(&[0.0, 0.0], &[1.0, 1.0]);
        let (mb, cb) = stats(&[1.0, 0.0], &[4.0, 4.0]);
        let d = frechet_from_moments(&ma, &ca, &mb, &cb).unwrap();
        assert!((d - 3.0).abs() < 1e-6, "{d}");
        let (mc, _) = stats(&[2f64.sqrt(), 2f64.sqrt()], &[1.0, 1.0]);
        let d = frechet_from_moments(&ma, &ca, &mc, &ca).unwrap();
        assert!((d - 4.0).abs() < 1e-6, "{d}");
        assert!(frechet_from_moments(&ma, &ca, &ma, &ca).unwrap().abs() < 1e-8);
    }

    #[test]
    fn identical_features_have_zero_covariance() {
        let f = vec![vec![0.3, -1.0, 2.0]; 5];
        let s = GaussianStats::from_features(&f).unwrap();
        assert!(s.covariance().unwrap().iter().all(|&v| v.abs() < 1e-15));
        assert!(GaussianStats::from_features(&f[..1]).unwrap().covariance().is_err());
    }

    #[test]
    fn clip_policy_starts() {
        let p = ClipPolicy::default();
        assert_eq!(p.starts(12), vec![0, 4]);
        assert_eq!(p.starts(8), vec![0]);
        assert!(p.starts(7).is_empty());
        assert_eq!(p.starts(120).len(), 29);
    }

    #[test]
    fn static_zero_flow_has_no_warp_error() {
        let f = Tensor::<f64>::full(0.3, &[1, 3, 4, 4]);
        let frames = vec![f.clone(), f.clone(), f];
        let flows = vec![Tensor::zeros(&[1, 2, 4, 4]); 2];
        let valid = vec![Tensor::ones(&[1, 1, 4, 4]); 2];
        assert_eq!(warp_error(&frames, &flows, &valid).unwrap(), 0.0);
        assert!(warp_error(&frames, &flows[..1], &valid).is_err());
    }
}
