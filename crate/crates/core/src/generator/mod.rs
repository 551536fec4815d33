//! Sequential frame generator: flow/mask/hallucination networks over a sliding window of
//! source maps and previously generated frames, stacked coarse to fine.

mod encoder;
mod gmm;
mod network;

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vidsynth_tensor::{Conv2d, Float, Param, ParamStore, Tensor};

use crate::error::{contract, Error, Result};
use crate::warp::{compose, compose_fg_bg, warp};
use network::{Branch, Encoder};

pub use encoder::{instance_pool, FeatureEncoder};
pub use gmm::{
    fit_feature_model, paint_features, sample_features, sample_instance_vectors,
    GaussianComponent, InstanceFeatureModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Number of past frames conditioning each step.
    pub window: usize,
    /// Coarse-to-fine stages; stage 1 runs at `1 / 2^(scales - 1)` of the working size.
    pub scales: usize,
    /// Channel width of the coarsest stage; each finer stage halves it.
    pub base_channels: usize,
    /// Stride-2 convolutions in the coarsest stage's encoders.
    pub downsamples: usize,
    pub res_blocks: usize,
    pub local_res_blocks: usize,
    pub num_classes: usize,
    pub fg_bg: bool,
    /// Flow-warp path; when off the mask is fixed to 1 and no flow is predicted.
    pub flow_warp: bool,
    pub feature_dim: usize,
    pub multimodal: bool,
    /// Feed instance features to the flow/mask networks as well as the image networks.
    pub features_to_flow: bool,
    /// Flow head output is `max_flow * conv(...)`.
    pub max_flow: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            window: 2,
            scales: 2,
            base_channels: 32,
            downsamples: 3,
            res_blocks: 4,
            local_res_blocks: 3,
            num_classes: crate::data::NUM_CLASSES,
            fg_bg: true,
            flow_warp: true,
            feature_dim: 3,
            multimodal: false,
            features_to_flow: true,
            max_flow: 4.0,
            height: 64,
            width: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.scales < 1 || self.feature_dim < 1 {
            return Err(Error::Config(
                "window, scales and feature_dim must all be at least 1".into(),
            ));
        }
        let div = 1usize << (self.scales - 1 + self.downsamples);
        if self.height % div != 0 || self.width % div != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "generator size {}x{} must be divisible by 2^(scales-1+downsamples) = {div}",
                self.width, self.height
            )));
        }
        let need = 1usize << (self.scales - 1);
        if self.base_channels % need != 0 || self.base_channels / need < 1 {
            return Err(Error::Config(format!(
                "base_channels {} must be divisible by 2^(scales-1) = {need}",
                self.base_channels
            )));
        }
        if self.num_classes < 1 || self.max_flow <= 0.0 {
            return Err(Error::Config("num_classes and max_flow must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of stage `j` (1-based, coarse to fine).
    pub fn stage_channels(&self, j: usize) -> usize {
        self.base_channels >> (j - 1)
    }

    /// Working resolution `(height, width)` of stage `j`.
    pub fn stage_size(&self, j: usize) -> (usize, usize) {
        let f = 1 << (self.scales - j);
        (self.height / f, self.width / f)
    }

    fn z_channels(&self) -> usize {
        if self.multimodal {
            self.feature_dim
        } else {
            0
        }
    }

    /// Channels of the concatenated source window (labels plus instance features).
    pub fn source_channels(&self) -> usize {
        (self.window + 1) * (self.num_classes + self.z_channels())
    }

    fn separate_flow_source(&self) -> bool {
        self.flow_warp && self.multimodal && !self.features_to_flow
    }
}

pub(crate) fn stage_prefix(j: usize) -> String {
    format!("stage{j}")
}

#[derive(Debug, Clone)]
struct Heads<T: Float> {
    image: Conv2d<T>,
    flow: Option<(Conv2d<T>, Conv2d<T>)>,
    fg: Option<Conv2d<T>>,
}

#[derive(Debug, Clone)]
struct Stage<T: Float> {
    seg: Encoder<T>,
    img: Encoder<T>,
    flow_seg: Option<Encoder<T>>,
    image: Branch<T>,
    flow: Option<Branch<T>>,
    fg: Option<Branch<T>>,
    heads: Heads<T>,
}

/// Last feature layer of each branch of a stage.
#[derive(Debug, Clone)]
struct StageFeatures<T: Float> {
    image: Tensor<T>,
    flow: Option<Tensor<T>>,
    fg: Option<Tensor<T>>,
}

fn add_prev<T: Float>(x: Tensor<T>, prev: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match prev {
        Some(p) => Ok(x.add(p)?),
        None => Ok(x),
    }
}

impl<T: Float> Stage<T> {
    fn new(cfg: &GeneratorConfig, store: &ParamStore<T>, j: usize) -> Result<Self> {
        let path = store.root().sub(stage_prefix(j));
        let ngf = cfg.stage_channels(j);
        let (down, blocks) = if j == 1 {
            (cfg.downsamples, cfg.res_blocks)
        } else {
            (1, cfg.local_res_blocks)
        };
        let inner = ngf << down;
        let seg = Encoder::new(&path.sub("seg"), cfg.source_channels(), ngf, down)?;
        let img = Encoder::new(&path.sub("img"), cfg.window * 3, ngf, down)?;
        let flow_seg = if cfg.separate_flow_source() {
            let cin = (cfg.window + 1) * cfg.num_classes;
            Some(Encoder::new(&path.sub("flow_seg"), cin, ngf, down)?)
        } else {
            None
        };
        let image = Branch::new(&path.sub("image"), inner, blocks, down)?;
        let flow = if cfg.flow_warp {
            Some(Branch::new(&path.sub("flow"), inner, blocks, down)?)
        } else {
            None
        };
        let fg = if cfg.fg_bg {
            Some(Branch::new(&path.sub("fg"), inner, blocks, down)?)
        } else {
            None
        };
        let heads = Heads {
            image: Conv2d::same(&path.sub("image_out"), ngf, 3, 7)?,
            flow: if cfg.flow_warp {
                Some((
                    Conv2d::same(&path.sub("flow_out"), ngf, 2, 3)?,
                    Conv2d::same(&path.sub("mask_out"), ngf, 1, 3)?,
                ))
            } else {
                None
            },
            fg: if cfg.fg_bg {
                Some(Conv2d::same(&path.sub("fg_out"), ngf, 3, 7)?)
            } else {
                None
            },
        };
        Ok(Stage {
            seg,
            img,
            flow_seg,
            image,
            flow,
            fg,
            heads,
        })
    }

    fn forward(
        &self,
        seg: &Tensor<T>,
        seg_labels_only: Option<&Tensor<T>>,
        img: &Tensor<T>,
        prev: Option<&StageFeatures<T>>,
    ) -> Result<StageFeatures<T>> {
        let s = self.seg.forward(seg)?;
        let i = self.img.forward(img)?;
        let joint = s.add(&i)?;
        let image = self
            .image
            .forward(&add_prev(joint.clone(), prev.map(|p| &p.image))?)?;
        let flow = match &self.flow {
            Some(branch) => {
                let base = match (&self.flow_seg, seg_labels_only) {
                    (Some(enc), Some(labels)) => enc.forward(labels)?.add(&i)?,
                    _ => joint,
                };
                let prev_flow = prev.and_then(|p| p.flow.as_ref());
                Some(branch.forward(&add_prev(base, prev_flow)?)?)
            }
            None => None,
        };
        let fg = match &self.fg {
            Some(branch) => {
                let prev_fg = prev.and_then(|p| p.fg.as_ref());
                Some(branch.forward(&add_prev(s, prev_fg)?)?)
            }
            None => None,
        };
        Ok(StageFeatures { image, flow, fg })
    }

    fn encoder_params(&self) -> Vec<Arc<Param<T>>> {
        let mut v = self.seg.params();
        v.extend(self.img.params());
        v
    }
}

/// Where stage `stage`'s encoder output is summed with the previous stage's last
/// feature layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SumSite {
    pub stage: usize,
    pub coarse: Vec<usize>,
    pub fine: Vec<usize>,
}

/// One time step of source conditioning at the generator's working resolution.
#[derive(Debug, Clone)]
pub struct SourceInput<T: Float> {
    /// One-hot labels, `[B, num_classes, H, W]`.
    pub labels: Tensor<T>,
    /// `[B, 1, H, W]`, exactly 0 or 1.
    pub bg_mask: Tensor<T>,
    /// Instance features, `[B, feature_dim, H, W]`, required when multimodal.
    pub features: Option<Tensor<T>>,
}

impl<T: Float> SourceInput<T> {
    pub fn from_frame(frame: &crate::data::SourceFrame<T>, features: Option<Tensor<T>>) -> Self {
        SourceInput {
            labels: frame.labels.clone(),
            bg_mask: frame.bg_mask.clone(),
            features,
        }
    }
}

/// Diagnostic hooks that replace network outputs with constants.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub mask: Option<f64>,
    pub zero_flow: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T: Float> {
    pub frame: Tensor<T>,
    /// Maps the new frame back onto the previous one.
    pub flow: Tensor<T>,
    pub mask: Tensor<T>,
    /// Hallucinated image; the background-mask blend of `h_fg` and `h_bg` when fg/bg is on.
    pub hallucinated: Tensor<T>,
    pub h_fg: Option<Tensor<T>>,
    pub h_bg: Tensor<T>,
}

/// The last `window` source steps and generated frames, oldest first.
#[derive(Debug, Clone)]
pub struct SlidingWindowState<T: Float> {
    window: usize,
    frames: VecDeque<Tensor<T>>,
    sources: VecDeque<SourceInput<T>>,
}

impl<T: Float> SlidingWindowState<T> {
    pub fn new(window: usize) -> Self {
        SlidingWindowState {
            window,
            frames: VecDeque::with_capacity(window + 1),
            sources: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.frames.len() == self.window
    }

    pub fn frames(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.frames.iter()
    }

    /// Appends a frame (real or generated) with its source step, dropping the oldest
    /// entries beyond the window.
    pub fn push(&mut self, frame: Tensor<T>, source: SourceInput<T>) {
        self.frames.push_back(frame);
        self.sources.push_back(source);
        while self.frames.len() > self.window {
            self.frames.pop_front();
            self.sources.pop_front();
        }
    }

    /// Window contents padded at the front with copies of the oldest entry.
    fn padded(&self) -> (Vec<Tensor<T>>, Vec<SourceInput<T>>) {
        let missing = self.window - self.frames.len();
        let mut frames = vec![self.frames[0].clone(); missing];
        frames.extend(self.frames.iter().cloned());
        let mut sources = vec![self.sources[0].clone(); missing];
        sources.extend(self.sources.iter().cloned());
        (frames, sources)
    }
}

/// Result of a rollout. `steps[i]` is the synthesis output for frame `first_generated + i`.
#[derive(Debug, Clone)]
pub struct Rollout<T: Float> {
    pub frames: Vec<Tensor<T>>,
    pub first_generated: usize,
    /// True when frame 0 came from the image-only cold-start pass.
    pub cold_start: bool,
    pub steps: Vec<StepOutput<T>>,
}

impl<T: Float> Rollout<T> {
    /// `(t, flow)` for every synthesized frame `t >= 1` that went through the warp path;
    /// the flow maps frame `t` onto frame `t - 1`.
    pub fn flows(&self) -> impl Iterator<Item = (usize, &StepOutput<T>)> {
        let skip = usize::from(self.cold_start);
        self.steps
            .iter()
            .enumerate()
            .skip(skip)
            .map(move |(i, s)| (self.first_generated + i, s))
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T: Float> {
    config: GeneratorConfig,
    store: ParamStore<T>,
    stages: Vec<Stage<T>>,
    encoder: Option<FeatureEncoder<T>>,
}

impl<T: Float> Generator<T> {
    /// Builds (or re-binds to) the generator's parameters in `store`. Parameters that
    /// already exist under the same names are reused, which is how a finer stage is
    /// stacked onto a trained coarser one.
    pub fn new(config: GeneratorConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let stages = (1..=config.scales)
            .map(|j| Stage::new(&config, &store, j))
            .collect::<Result<Vec<_>>>()?;
        let encoder = if config.multimodal {
            Some(FeatureEncoder::new(
                &store.root().sub("encoder"),
                config.base_channels.max(4),
                config.feature_dim,
            )?)
        } else {
            None
        };
        Ok(Generator {
            config,
            store,
            stages,
            encoder,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn encoder(&self) -> Option<&FeatureEncoder<T>> {
        self.encoder.as_ref()
    }

    /// Every parameter used by this configuration, in name order.
    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        let mut v: Vec<Arc<Param<T>>> = Vec::new();
        for s in &self.stages {
            v.extend(s.encoder_params());
            v.extend(s.flow_seg.iter().flat_map(|e| e.params()));
            v.extend(s.image.params());
            v.extend(s.flow.iter().flat_map(|b| b.params()));
            v.extend(s.fg.iter().flat_map(|b| b.params()));
            v.extend(s.heads.image.params());
            if let Some((f, m)) = &s.heads.flow {
                v.extend(f.params());
                v.extend(m.params());
            }
            v.extend(s.heads.fg.iter().flat_map(|c| c.params()));
        }
        v.extend(self.encoder.iter().flat_map(|e| e.params()));
        v.sort_by(|a, b| a.name().cmp(b.name()));
        v
    }

    fn flow_path_params(&self, head_mask: bool) -> Vec<Arc<Param<T>>> {
        let mut v = Vec::new();
        for (j, s) in self.stages.iter().enumerate() {
            match &s.flow_seg {
                Some(e) => v.extend(e.params()),
                None => v.extend(s.seg.params()),
            }
            v.extend(s.img.params());
            v.extend(s.flow.iter().flat_map(|b| b.params()));
            if j + 1 == self.stages.len() {
                if let Some((f, m)) = &s.heads.flow {
                    v.extend(if head_mask { m.params() } else { f.params() });
                }
            }
        }
        v
    }

    /// Parameters that compute the flow output `w`.
    pub fn flow_network_params(&self) -> Vec<Arc<Param<T>>> {
        self.flow_path_params(false)
    }

    /// Parameters that compute the mask output `m`.
    pub fn mask_network_params(&self) -> Vec<Arc<Param<T>>> {
        self.flow_path_params(true)
    }

    fn check_input(&self, what: &str, t: &Tensor<T>, channels: usize) -> Result<usize> {
        let (b, c, h, w) = t.dims4()?;
        if c != channels || h != self.config.height || w != self.config.width {
            return contract(format!(
                "{what} has shape {:?}, generator expects [B, {channels}, {}, {}]",
                t.shape(),
                self.config.height,
                self.config.width
            ));
        }
        Ok(b)
    }

    /// Synthesizes frame `t` from the `window` previous frames (oldest first) and the
    /// `window + 1` source steps `t - window ..= t`.
    pub fn forward_step(
        &self,
        prev: &[Tensor<T>],
        sources: &[SourceInput<T>],
        overrides: Overrides,
    ) -> Result<StepOutput<T>> {
        let cfg = &self.config;
        if prev.len() != cfg.window || sources.len() != cfg.window + 1 {
            return contract(format!(
                "forward_step needs {} previous frames and {} source steps, got {} and {}",
                cfg.window,
                cfg.window + 1,
                prev.len(),
                sources.len()
            ));
        }
        let batch = self.check_input("previous frame", &prev[0], 3)?;
        for p in prev {
            if self.check_input("previous frame", p, 3)? != batch {
                return contract("batch size differs across inputs");
            }
        }
        let mut seg_parts = Vec::with_capacity(2 * sources.len());
        let mut label_parts = Vec::with_capacity(sources.len());
        for s in sources {
            if self.check_input("label map", &s.labels, cfg.num_classes)? != batch {
                return contract("batch size differs across inputs");
            }
            self.check_input("background mask", &s.bg_mask, 1)?;
            seg_parts.push(s.labels.clone());
            label_parts.push(s.labels.clone());
            match (&s.features, cfg.multimodal) {
                (Some(z), true) => {
                    self.check_input("instance features", z, cfg.feature_dim)?;
                    seg_parts.push(z.clone());
                }
                (None, true) => return contract("multimodal generator needs instance features"),
                _ => {}
            }
        }
        let seg = Tensor::cat(&seg_parts, 1)?;
        let labels_only = if cfg.separate_flow_source() {
            Some(Tensor::cat(&label_parts, 1)?)
        } else {
            None
        };
        let img = Tensor::cat(prev, 1)?;

        let feats = self.run_stages(&seg, labels_only.as_ref(), &img, None)?;
        let heads = &self.stages.last().expect("at least one stage").heads;

        let h_bg = heads.image.forward(&feats.image)?.tanh();
        let h_fg = match (&heads.fg, &feats.fg) {
            (Some(conv), Some(f)) => Some(conv.forward(f)?.tanh()),
            _ => None,
        };
        let shape_map = [batch, 1, cfg.height, cfg.width];
        let shape_flow = [batch, 2, cfg.height, cfg.width];
        let (mut flow, mut mask) = match (&heads.flow, &feats.flow) {
            (Some((fc, mc)), Some(f)) => (
                fc.forward(f)?.scale(cfg.max_flow),
                mc.forward(f)?.sigmoid(),
            ),
            _ => (Tensor::zeros(&shape_flow), Tensor::ones(&shape_map)),
        };
        if let Some(m) = overrides.mask {
            mask = Tensor::full(T::lit(m), &shape_map);
        }
        if overrides.zero_flow {
            flow = Tensor::zeros(&shape_flow);
        }

        let last = &prev[cfg.window - 1];
        let warped = warp(last, &flow)?;
        let bg = &sources[cfg.window].bg_mask;
        let (frame, hallucinated) = match &h_fg {
            Some(hf) => (
                compose_fg_bg(&warped, hf, &h_bg, &mask, bg)?,
                compose(hf, &h_bg, bg)?,
            ),
            None => (compose(&warped, &h_bg, &mask)?, h_bg.clone()),
        };
        Ok(StepOutput {
            frame,
            flow,
            mask,
            hallucinated,
            h_fg,
            h_bg,
        })
    }

    fn run_stages(
        &self,
        seg: &Tensor<T>,
        labels_only: Option<&Tensor<T>>,
        img: &Tensor<T>,
        mut sites: Option<&mut Vec<SumSite>>,
    ) -> Result<StageFeatures<T>> {
        let cfg = &self.config;
        let mut feats: Option<StageFeatures<T>> = None;
        for (j, stage) in self.stages.iter().enumerate() {
            let factor = 1 << (cfg.scales - 1 - j);
            let seg_j = seg.avg_pool2d(factor)?;
            let img_j = img.avg_pool2d(factor)?;
            let labels_j = labels_only.map(|l| l.avg_pool2d(factor)).transpose()?;
            if let (Some(sites), Some(prev)) = (sites.as_deref_mut(), feats.as_ref()) {
                sites.push(SumSite {
                    stage: j + 1,
                    coarse: prev.image.shape().to_vec(),
                    fine: stage.seg.forward(&seg_j)?.shape().to_vec(),
                });
            }
            feats = Some(stage.forward(&seg_j, labels_j.as_ref(), &img_j, feats.as_ref())?);
        }
        Ok(feats.expect("at least one stage"))
    }

    /// Shapes meeting at each coarse-to-fine feature sum, for auditing the stacking.
    pub fn sum_sites(&self, prev: &[Tensor<T>], sources: &[SourceInput<T>]) -> Result<Vec<SumSite>> {
        let mut seg_parts = Vec::new();
        for s in sources {
            seg_parts.push(s.labels.clone());
            if let Some(z) = &s.features {
                seg_parts.push(z.clone());
            }
        }
        let seg = Tensor::cat(&seg_parts, 1)?;
        let img = Tensor::cat(prev, 1)?;
        let labels_only = if self.config.separate_flow_source() {
            let parts: Vec<_> = sources.iter().map(|s| s.labels.clone()).collect();
            Some(Tensor::cat(&parts, 1)?)
        } else {
            None
        };
        let mut sites = Vec::new();
        self.run_stages(&seg, labels_only.as_ref(), &img, Some(&mut sites))?;
        Ok(sites)
    }

    /// Image-only pass used to start a video without real frames: zero previous frames,
    /// the first source step repeated over the window, and the mask forced to 1.
    pub fn cold_start(&self, source: &SourceInput<T>) -> Result<StepOutput<T>> {
        let b = source.labels.shape()[0];
        let zeros = Tensor::zeros(&[b, 3, self.config.height, self.config.width]);
        let prev = vec![zeros; self.config.window];
        let sources = vec![source.clone(); self.config.window + 1];
        self.forward_step(
            &prev,
            &sources,
            Overrides {
                mask: Some(1.0),
                zero_flow: true,
            },
        )
    }

    /// Produces the next frame for `source` and pushes it into `state`. An empty state
    /// triggers the cold-start pass.
    pub fn advance(
        &self,
        state: &mut SlidingWindowState<T>,
        source: SourceInput<T>,
        overrides: Overrides,
    ) -> Result<StepOutput<T>> {
        if state.window != self.config.window {
            return contract("sliding window size differs from the generator's");
        }
        let out = if state.is_empty() {
            self.cold_start(&source)?
        } else {
            let (prev, mut sources) = state.padded();
            sources.push(source.clone());
            self.forward_step(&prev, &sources, overrides)?
        };
        state.push(out.frame.clone(), source);
        Ok(out)
    }

    /// Generates frames for every source step. The first `warmup.len()` (at most `window`)
    /// frames are taken as given; with no warmup the first frame comes from the cold-start
    /// pass. Each step sees only earlier frames and source steps up to its own index.
    pub fn rollout(
        &self,
        sources: &[SourceInput<T>],
        warmup: &[Tensor<T>],
        overrides: Overrides,
    ) -> Result<Rollout<T>> {
        if warmup.len() > self.config.window {
            return contract(format!(
                "{} warmup frames given but the window is {}",
                warmup.len(),
                self.config.window
            ));
        }
        if sources.is_empty() {
            return contract("rollout needs at least one source step");
        }
        if warmup.len() > sources.len() {
            return contract("more warmup frames than source steps");
        }
        let mut state = SlidingWindowState::new(self.config.window);
        let mut frames = Vec::with_capacity(sources.len());
        for (x, s) in warmup.iter().zip(sources) {
            self.check_input("warmup frame", x, 3)?;
            state.push(x.clone(), s.clone());
            frames.push(x.clone());
        }
        let mut steps = Vec::with_capacity(sources.len() - warmup.len());
        for s in &sources[warmup.len()..] {
            let out = self.advance(&mut state, s.clone(), overrides)?;
            frames.push(out.frame.clone());
            steps.push(out);
        }
        Ok(Rollout {
            frames,
            first_generated: warmup.len(),
            cold_start: warmup.is_empty(),
            steps,
        })
    }
}
