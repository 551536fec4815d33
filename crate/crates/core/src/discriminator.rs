//! Conditional image discriminator, flow-conditioned multi-rate video discriminator, and
//! the random sampling operators that feed them.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vidsynth_tensor::{Conv2d, Float, Param, ParamPath, ParamStore, Tensor};

use crate::error::{contract, Error, Result};
use crate::warp::chain_flows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Frames per video clip.
    pub k: usize,
    pub spatial_scales: usize,
    pub temporal_scales: usize,
    /// Width of the first patch-network layer.
    pub ndf: usize,
    /// Stride-2 layers per patch network.
    pub n_layers: usize,
    /// Also feed the clip's one-hot source maps to the video discriminator.
    pub video_uses_source: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            k: 3,
            spatial_scales: 2,
            temporal_scales: 3,
            ndf: 8,
            n_layers: 3,
            video_uses_source: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("clip length k = {} must be at least 2", self.k)));
        }
        if self.spatial_scales < 1 || self.temporal_scales < 1 || self.ndf < 1 || self.n_layers < 1 {
            return Err(Error::Config(
                "discriminator scales, width and depth must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Frame stride of temporal scale `sigma` (1-based): `k^(sigma - 1)`.
    pub fn stride(&self, sigma: usize) -> usize {
        self.k.pow(sigma as u32 - 1)
    }

    /// A temporal scale is used only when the sequence has at least `k^sigma` frames.
    pub fn scale_active(&self, sigma: usize, frames: usize) -> bool {
        sigma >= 1 && sigma <= self.temporal_scales && frames >= self.k.pow(sigma as u32)
    }

    pub fn active_temporal_scales(&self, frames: usize) -> Vec<usize> {
        (1..=self.temporal_scales)
            .filter(|&s| self.scale_active(s, frames))
            .collect()
    }

    /// Input channels of the video discriminator: frames plus flows (plus sources).
    pub fn video_channels(&self, num_classes: usize) -> usize {
        let base = 3 * self.k + 2 * (self.k - 1);
        if self.video_uses_source {
            base + self.k * num_classes
        } else {
            base
        }
    }
}

const SLOPE: f64 = 0.2;

/// PatchGAN: 4x4 convolutions with padding 2, `n_layers` stride-2 layers, one stride-1
/// layer, then a one-channel score map.
#[derive(Debug, Clone)]
pub struct PatchNet<T: Float> {
    convs: Vec<Conv2d<T>>,
}

/// Intermediate activations (for feature matching) and the final patch scores.
#[derive(Debug, Clone)]
pub struct PatchOutput<T: Float> {
    pub features: Vec<Tensor<T>>,
    pub score: Tensor<T>,
}

impl<T: Float> PatchNet<T> {
    pub fn new(path: &ParamPath<T>, cin: usize, ndf: usize, n_layers: usize) -> Result<Self> {
        let mut convs = vec![Conv2d::new(&path.sub("l0"), cin, ndf, 4, 2, 2, true)?];
        let mut nf = ndf;
        for n in 1..n_layers {
            let next = (nf * 2).min(512);
            convs.push(Conv2d::new(&path.sub(format!("l{n}")), nf, next, 4, 2, 2, true)?);
            nf = next;
        }
        let next = (nf * 2).min(512);
        convs.push(Conv2d::new(&path.sub(format!("l{n_layers}")), nf, next, 4, 1, 2, true)?);
        convs.push(Conv2d::new(&path.sub("score"), next, 1, 4, 1, 2, true)?);
        Ok(PatchNet { convs })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<PatchOutput<T>> {
        let mut h = x.clone();
        let mut features = Vec::with_capacity(self.convs.len() - 1);
        let last = self.convs.len() - 1;
        for (i, c) in self.convs[..last].iter().enumerate() {
            h = c.forward(&h)?;
            if i > 0 {
                h = h.instance_norm(1e-5)?;
            }
            h = h.leaky_relu(SLOPE);
            features.push(h.clone());
        }
        let score = self.convs[last].forward(&h)?;
        Ok(PatchOutput { features, score })
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
}

/// Patch networks applied to the input and to 2x2-average-pooled copies of it.
#[derive(Debug, Clone)]
pub struct MultiScalePatch<T: Float> {
    nets: Vec<PatchNet<T>>,
}

impl<T: Float> MultiScalePatch<T> {
    pub fn new(path: &ParamPath<T>, cin: usize, cfg: &DiscriminatorConfig) -> Result<Self> {
        let nets = (0..cfg.spatial_scales)
            .map(|s| PatchNet::new(&path.sub(format!("s{s}")), cin, cfg.ndf, cfg.n_layers))
            .collect::<Result<_>>()?;
        Ok(MultiScalePatch { nets })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Vec<PatchOutput<T>>> {
        let mut input = x.clone();
        let mut out = Vec::with_capacity(self.nets.len());
        for (s, net) in self.nets.iter().enumerate() {
            if s > 0 {
                input = input.avg_pool2d(2)?;
            }
            out.push(net.forward(&input)?);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        self.nets.iter().flat_map(|n| n.params()).collect()
    }
}

/// Spatial extent of a patch score map for an `n`-pixel input side.
pub fn patch_score_size(n: usize, n_layers: usize) -> usize {
    let mut n = n;
    for _ in 0..n_layers {
        n = (n + 4 - 4) / 2 + 1;
    }
    n + 2
}

/// Scores `(frame, one-hot source)` pairs.
#[derive(Debug, Clone)]
pub struct ImageDiscriminator<T: Float> {
    net: MultiScalePatch<T>,
    num_classes: usize,
}

impl<T: Float> ImageDiscriminator<T> {
    pub fn new(cfg: &DiscriminatorConfig, num_classes: usize, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(ImageDiscriminator {
            net: MultiScalePatch::new(&store.root().sub("d_image"), 3 + num_classes, cfg)?,
            num_classes,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, labels: &Tensor<T>) -> Result<Vec<PatchOutput<T>>> {
        let (b, c, h, w) = x.dims4()?;
        let (lb, lc, lh, lw) = labels.dims4()?;
        if c != 3 || lc != self.num_classes || (b, h, w) != (lb, lh, lw) {
            return contract(format!(
                "image discriminator input mismatch: frame {:?}, labels {:?}",
                x.shape(),
                labels.shape()
            ));
        }
        self.net.forward(&Tensor::cat(&[x.clone(), labels.clone()], 1)?)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        self.net.params()
    }
}

/// One patch network stack per temporal scale, scoring `k` frames with their `k - 1` flows.
#[derive(Debug, Clone)]
pub struct VideoDiscriminator<T: Float> {
    config: DiscriminatorConfig,
    nets: Vec<MultiScalePatch<T>>,
    channels: usize,
}

impl<T: Float> VideoDiscriminator<T> {
    pub fn new(cfg: &DiscriminatorConfig, num_classes: usize, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.video_channels(num_classes);
        let root = store.root().sub("d_video");
        let nets = (1..=cfg.temporal_scales)
            .map(|sigma| MultiScalePatch::new(&root.sub(format!("t{sigma}")), channels, cfg))
            .collect::<Result<_>>()?;
        Ok(VideoDiscriminator {
            config: cfg.clone(),
            nets,
            channels,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Scores an assembled clip (see [`assemble_clip`]) at temporal scale `sigma`.
    pub fn forward(&self, sigma: usize, clip: &Tensor<T>) -> Result<Vec<PatchOutput<T>>> {
        if sigma == 0 || sigma > self.nets.len() {
            return contract(format!("temporal scale {sigma} not in 1..={}", self.nets.len()));
        }
        if clip.dims4()?.1 != self.channels {
            return contract(format!(
                "video clip has {} channels, expected {}",
                clip.shape()[1],
                self.channels
            ));
        }
        self.nets[sigma - 1].forward(clip)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        self.nets.iter().flat_map(|n| n.params()).collect()
    }
}

/// Index of a uniformly drawn `(frame, source)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImagePairSample {
    pub index: usize,
}

/// Uniform over `0..frames`.
pub fn sample_image_pair<R: Rng>(frames: usize, rng: &mut R) -> Result<ImagePairSample> {
    if frames == 0 {
        return contract("cannot sample a frame from an empty sequence");
    }
    Ok(ImagePairSample {
        index: rng.random_range(0..frames),
    })
}

/// `k` frames `start, start + stride, ...` and, for each consecutive pair, the span of
/// original transitions whose flows are chained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoClipSample {
    pub start: usize,
    pub stride: usize,
    pub frames: Vec<usize>,
    /// `(first transition, count)`; transition `t` maps frame `t + 1` onto frame `t`.
    pub flow_spans: Vec<(usize, usize)>,
}

impl VideoClipSample {
    pub fn new(start: usize, k: usize, stride: usize) -> Self {
        VideoClipSample {
            start,
            stride,
            frames: (0..k).map(|j| start + j * stride).collect(),
            flow_spans: (0..k - 1).map(|j| (start + j * stride, stride)).collect(),
        }
    }

    pub fn span(&self) -> usize {
        self.frames.last().map_or(0, |l| l + 1 - self.start)
    }
}

/// Uniform draw over every admissible start for a `k`-frame clip with the given stride.
pub fn sample_video_clip<R: Rng>(
    frames: usize,
    k: usize,
    stride: usize,
    rng: &mut R,
) -> Result<VideoClipSample> {
    if k < 2 || stride == 0 {
        return contract("clip needs k >= 2 and a positive stride");
    }
    let span = (k - 1) * stride + 1;
    if frames < span {
        return contract(format!(
            "{frames} frames cannot hold a {k}-frame clip with stride {stride}"
        ));
    }
    Ok(VideoClipSample::new(rng.random_range(0..=frames - span), k, stride))
}

/// Channel-concatenates the clip's frames and its (chained) flows, optionally followed by
/// its source maps.
pub fn assemble_clip<T: Float>(
    frames: &[Tensor<T>],
    flows: &[Tensor<T>],
    sources: Option<&[Tensor<T>]>,
    sample: &VideoClipSample,
) -> Result<Tensor<T>> {
    if sample.frames.last().is_some_and(|&l| l >= frames.len()) {
        return contract("clip reads past the last frame");
    }
    let mut parts: Vec<Tensor<T>> = sample.frames.iter().map(|&i| frames[i].clone()).collect();
    for &(start, len) in &sample.flow_spans {
        parts.push(chain_flows(flows, start, len)?);
    }
    if let Some(src) = sources {
        parts.extend(sample.frames.iter().map(|&i| src[i].clone()));
    }
    Ok(Tensor::cat(&parts, 1)?)
}
