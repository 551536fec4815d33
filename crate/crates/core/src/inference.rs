//! Running a trained generator: streaming synthesis, instance-feature sampling, evaluation
//! against held-out data, and fitting the instance-feature model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vidsynth_tensor::{no_grad, Tensor};

use crate::data::{
    chw_to_frame, downsample_plane, flow_chw, frame_chw, validity_chw, ClassTable, InstanceMap, LabelMap, PairedSequence,
    RgbFrame, SourceFrame,
};
use crate::error::{contract, Error, Result};
use crate::eval::{temporal_flicker, video_fid, warp_error, ClipPolicy, ExtractorConfig, VideoFeatureExtractor};
use crate::generator::{fit_feature_model, sample_instance_vectors, Generator, InstanceFeatureModel, Overrides, SlidingWindowState, SourceInput};

fn instance_seed(seed: u64, id: u32) -> u64 {
    // splitmix64 finaliser over the pair, so neighbouring ids get unrelated streams
    let mut z = seed ^ (u64::from(id) + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Frame-by-frame synthesis holding only the generator's sliding window, so memory does
/// not grow with video length.
pub struct Synthesizer<'a> {
    generator: &'a Generator<f32>,
    feature_model: Option<&'a InstanceFeatureModel>,
    classes: ClassTable,
    factor: usize,
    feature_seed: u64,
    vectors: BTreeMap<(u32, u8), Vec<f64>>,
    state: SlidingWindowState<f32>,
    primed: usize,
    synthesized: usize,
}

impl<'a> Synthesizer<'a> {
    /// `data_size` is the `(height, width)` of the source maps that will be fed in; it must
    /// be an integer multiple of the generator's working size.
    pub fn new(
        generator: &'a Generator<f32>,
        feature_model: Option<&'a InstanceFeatureModel>,
        classes: ClassTable,
        data_size: (usize, usize),
        feature_seed: u64,
    ) -> Result<Self> {
        let cfg = generator.config();
        let (h, w) = data_size;
        if h % cfg.height != 0 || h / cfg.height == 0 || w * cfg.height != h * cfg.width {
            return Err(Error::Config(format!(
                "source size {w}x{h} is not a multiple of the generator size {}x{}",
                cfg.width, cfg.height
            )));
        }
        if classes.num_classes() != cfg.num_classes {
            return Err(Error::Config(format!(
                "source has {} classes, generator expects {}",
                classes.num_classes(),
                cfg.num_classes
            )));
        }
        if cfg.multimodal {
            match feature_model {
                None => return Err(Error::Config("multimodal generator needs an instance feature model".into())),
                Some(m) if m.dim != cfg.feature_dim => {
                    return Err(Error::Config(format!(
                        "feature model has dimension {}, generator expects {}",
                        m.dim, cfg.feature_dim
                    )))
                }
                _ => {}
            }
        }
        Ok(Synthesizer {
            generator,
            feature_model,
            classes,
            factor: h / cfg.height,
            feature_seed,
            vectors: BTreeMap::new(),
            state: SlidingWindowState::new(cfg.window),
            primed: 0,
            synthesized: 0,
        })
    }

    /// Frames produced or primed so far.
    pub fn position(&self) -> usize {
        self.primed + self.synthesized
    }

    fn source(&mut self, labels: &LabelMap, instances: &InstanceMap) -> Result<SourceInput<f32>> {
        let frame = SourceFrame::<f32>::from_maps(&[(labels, instances)], &self.classes, self.factor)?;
        let features = match (self.generator.config().multimodal, self.feature_model) {
            (true, Some(model)) => Some(self.paint(model, &frame, labels, instances)?),
            _ => None,
        };
        Ok(SourceInput::from_frame(&frame, features))
    }

    /// Per-instance appearance vectors, drawn once per `(instance, class)` and reused on
    /// every later frame so an object keeps its look.
    fn paint(
        &mut self,
        model: &InstanceFeatureModel,
        frame: &SourceFrame<f32>,
        labels: &LabelMap,
        instances: &InstanceMap,
    ) -> Result<Tensor<f32>> {
        let mut class_of = BTreeMap::new();
        for (&id, &c) in instances.data.iter().zip(&labels.data) {
            class_of.entry(u32::from(id)).or_insert(c);
        }
        for (&id, &class) in &class_of {
            if !self.vectors.contains_key(&(id, class)) {
                let drawn = sample_instance_vectors(model, &[(id, class)], instance_seed(self.feature_seed, id))?;
                self.vectors.insert((id, class), drawn[&id].clone());
            }
        }
        let (h, w) = (frame.height(), frame.width());
        let small_labels = downsample_plane(labels, self.factor)?;
        let small_ids = downsample_plane(instances, self.factor)?;
        let plane = h * w;
        let d = model.dim;
        let mut data = vec![0.0f32; d * plane];
        for (p, (&id, &class)) in small_ids.data.iter().zip(&small_labels.data).enumerate() {
            let v = &self.vectors[&(u32::from(id), class)];
            for c in 0..d {
                data[c * plane + p] = v[c] as f32;
            }
        }
        Ok(Tensor::from_vec(data, &[1, d, h, w])?)
    }

    /// Feeds a real frame into the window. Only allowed before any frame was synthesized.
    pub fn prime(&mut self, frame: &RgbFrame, labels: &LabelMap, instances: &InstanceMap) -> Result<Tensor<f32>> {
        if self.synthesized > 0 || self.primed >= self.generator.config().window {
            return contract("priming is only possible for the first window frames");
        }
        let cfg = self.generator.config();
        let x = Tensor::from_vec(frame_chw::<f32>(frame, self.factor)?, &[1, 3, cfg.height, cfg.width])?;
        let source = self.source(labels, instances)?;
        self.state.push(x.clone(), source);
        self.primed += 1;
        Ok(x)
    }

    /// Synthesizes the next frame, `[1, 3, H, W]` in `[-1, 1]`.
    pub fn step(&mut self, labels: &LabelMap, instances: &InstanceMap) -> Result<Tensor<f32>> {
        let source = self.source(labels, instances)?;
        let out = no_grad(|| self.generator.advance(&mut self.state, source, Overrides::default()))?;
        if !out.frame.all_finite() {
            return Err(Error::NonFinite {
                component: "generated frame".into(),
                iteration: self.position() as u64,
            });
        }
        self.synthesized += 1;
        Ok(out.frame)
    }
}

pub fn tensor_to_frame(x: &Tensor<f32>) -> Result<RgbFrame> {
    let (_, _, h, w) = x.dims4()?;
    chw_to_frame(&x.data()[..3 * h * w], w, h)
}

/// Generates a whole sequence at the generator's working resolution, priming with the
/// first `prime` real frames (at most the window).
pub fn generate_video(
    generator: &Generator<f32>,
    feature_model: Option<&InstanceFeatureModel>,
    seq: &PairedSequence,
    prime: usize,
    feature_seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    let window = generator.config().window;
    if prime > window || prime > seq.len() {
        return contract(format!("cannot prime {prime} frames (window {window}, {} frames)", seq.len()));
    }
    let mut syn = Synthesizer::new(
        generator,
        feature_model,
        seq.source.classes.clone(),
        (seq.height(), seq.width()),
        feature_seed,
    )?;
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let (labels, instances) = (&seq.source.labels[t], &seq.source.instances[t]);
        out.push(if t < prime {
            syn.prime(&seq.frames[t], labels, instances)?
        } else {
            syn.step(labels, instances)?
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Real frames used to prime each generated video; `None` means the generator window.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prime: Option<usize>,
    pub feature_seed: u64,
    pub extractor: ExtractorConfig,
    pub clips: ClipPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            prime: None,
            feature_seed: 0,
            extractor: ExtractorConfig::default(),
            clips: ClipPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub fid: f64,
    /// Ground-truth-flow warp error of the generated videos.
    pub flicker: f64,
    /// The same statistic on the real videos, as a floor.
    pub real_warp_error: f64,
    pub options: EvalOptions,
}

/// Video FID and flicker of generated versions of `sequences` against the real ones, at
/// the generator's working resolution.
pub fn evaluate(
    generator: &Generator<f32>,
    feature_model: Option<&InstanceFeatureModel>,
    sequences: &[PairedSequence],
    options: &EvalOptions,
) -> Result<EvalReport> {
    if sequences.is_empty() {
        return contract("nothing to evaluate");
    }
    let cfg = generator.config();
    let prime = options.prime.unwrap_or(cfg.window);
    let extractor = VideoFeatureExtractor::new(options.extractor)?;
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    let (mut flicker, mut floor) = (0.0, 0.0);
    for seq in sequences {
        if seq.height() % cfg.height != 0 {
            return Err(Error::Config(format!(
                "sequence height {} is not a multiple of the generator height {}",
                seq.height(),
                cfg.height
            )));
        }
        let factor = seq.height() / cfg.height;
        let (h, w) = (cfg.height, cfg.width);
        let frames = seq
            .frames
            .iter()
            .map(|f| Ok(Tensor::from_vec(frame_chw::<f32>(f, factor)?, &[1, 3, h, w])?))
            .collect::<Result<Vec<_>>>()?;
        let flows = seq
            .flows
            .iter()
            .map(|f| Ok(Tensor::from_vec(flow_chw::<f32>(f, factor)?, &[1, 2, h, w])?))
            .collect::<Result<Vec<_>>>()?;
        let valid = seq
            .validity
            .iter()
            .map(|v| Ok(Tensor::from_vec(validity_chw::<f32>(v, factor)?, &[1, 1, h, w])?))
            .collect::<Result<Vec<_>>>()?;
        let generated = generate_video(generator, feature_model, seq, prime, options.feature_seed)?;
        flicker += temporal_flicker(&generated, &flows, &valid)?;
        floor += warp_error(&frames, &flows, &valid)?;
        real.push(frames);
        fake.push(generated);
    }
    let n = sequences.len() as f64;
    Ok(EvalReport {
        sequences: sequences.len(),
        fid: video_fid(&real, &fake, &extractor, &options.clips)?,
        flicker: flicker / n,
        real_warp_error: floor / n,
        options: *options,
    })
}

/// Encodes every `frame_stride`-th real frame, pools per instance, and fits the per-class
/// mixture used to sample appearances at inference time.
pub fn fit_instance_features(
    generator: &Generator<f32>,
    sequences: &[PairedSequence],
    components: usize,
    frame_stride: usize,
    seed: u64,
) -> Result<InstanceFeatureModel> {
    let Some(encoder) = generator.encoder() else {
        return Err(Error::Config("generator has no feature encoder".into()));
    };
    if frame_stride == 0 {
        return Err(Error::Config("frame stride must be at least 1".into()));
    }
    let cfg = generator.config();
    let mut samples = Vec::new();
    for seq in sequences {
        let factor = seq.height() / cfg.height;
        for t in (0..seq.len()).step_by(frame_stride) {
            let src = SourceFrame::<f32>::from_maps(
                &[(&seq.source.labels[t], &seq.source.instances[t])],
                &seq.source.classes,
                factor,
            )?;
            let x = Tensor::from_vec(frame_chw::<f32>(&seq.frames[t], factor)?, &[1, 3, src.height(), src.width()])?;
            let pooled = no_grad(|| encoder.encode(&x, &src.instances))?;
            let data = pooled.data();
            let plane = src.height() * src.width();
            let small_labels = downsample_plane(&seq.source.labels[t], factor)?;
            let mut first_pixel: BTreeMap<u32, usize> = BTreeMap::new();
            for (p, &id) in src.instances.iter().enumerate() {
                first_pixel.entry(id).or_insert(p);
            }
            for (_, p) in first_pixel {
                let class = small_labels.data[p];
                let v = (0..cfg.feature_dim).map(|c| f64::from(data[c * plane + p])).collect();
                samples.push((class, v));
            }
        }
    }
    fit_feature_model(&samples, components, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_seeds_differ() {
        let a: Vec<u64> = (0..64).map(|id| instance_seed(7, id)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(a.len(), b.len());
        assert_ne!(instance_seed(7, 3), instance_seed(8, 3));
    }
}
