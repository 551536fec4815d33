//! Alternating adversarial optimisation over a progressive schedule.

mod checkpoint;

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidsynth_tensor::{Adam, AdamConfig, Float, Gradients, Param, ParamStore, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};

use crate::data::{PairedSequence, SequenceTensors};
use crate::discriminator::{
    assemble_clip, sample_image_pair, sample_video_clip, DiscriminatorConfig, ImageDiscriminator,
    PatchOutput, VideoClipSample, VideoDiscriminator,
};
use crate::error::{contract, Error, Result};
use crate::generator::{Generator, GeneratorConfig, Overrides, SourceInput};
use crate::losses::{
    feature_matching_loss, flow_loss, gan_loss_image, gan_loss_video, total_generator_objective,
    GeneratorTerms, LossWeights, PerceptualNet, Role,
};

/// One stage of the curriculum: working resolution (height), clip length, and step budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub resolution: usize,
    pub frames: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_fg_bg: bool,
    pub no_video_disc: bool,
    pub no_flow_warp: bool,
}

impl Ablation {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_fg_bg {
            parts.push("no_fg_bg");
        }
        if self.no_video_disc {
            parts.push("no_video_disc");
        }
        if self.no_flow_warp {
            parts.push("no_flow_warp");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Sequences per step.
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub phases: Vec<Phase>,
    /// Architecture; `height`, `width` and `scales` are resolved per phase.
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub ablation: Ablation,
    pub perceptual_seed: u64,
    /// Check after every update that no gradient crossed between G and D.
    pub audit_gradients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch: 1,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            phases: vec![
                Phase {
                    resolution: 32,
                    frames: 6,
                    steps: 375,
                },
                Phase {
                    resolution: 64,
                    frames: 12,
                    steps: 1125,
                },
            ],
            generator: GeneratorConfig {
                base_channels: 8,
                res_blocks: 2,
                local_res_blocks: 1,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig::default(),
            losses: LossWeights::default(),
            ablation: Ablation::default(),
            perceptual_seed: 7,
            audit_gradients: true,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.phases.iter().map(|p| p.steps as u64).sum()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Generator architecture with the ablations applied (size not yet resolved).
    pub fn generator_base(&self) -> GeneratorConfig {
        let mut g = self.generator.clone();
        g.fg_bg &= !self.ablation.no_fg_bg;
        g.flow_warp &= !self.ablation.no_flow_warp;
        g
    }

    fn levels(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.phases.iter().map(|p| p.resolution).collect();
        r.dedup();
        r
    }

    /// Generator configuration for phase `index` on data of `data_height x data_width`.
    pub fn phase_generator(&self, index: usize, data_height: usize, data_width: usize) -> Result<GeneratorConfig> {
        let phase = self
            .phases
            .get(index)
            .ok_or_else(|| Error::Config(format!("no phase {index}")))?;
        let levels = self.levels();
        let level = levels.iter().position(|&r| r == phase.resolution).expect("phase resolution") + 1;
        if data_height % phase.resolution != 0 {
            return Err(Error::Config(format!(
                "phase resolution {} does not divide the data height {data_height}",
                phase.resolution
            )));
        }
        let factor = data_height / phase.resolution;
        if data_width % factor != 0 {
            return Err(Error::Config(format!(
                "data width {data_width} is not divisible by the phase factor {factor}"
            )));
        }
        let mut g = self.generator_base();
        g.scales = self.generator.scales - (levels.len() - level);
        g.height = phase.resolution;
        g.width = data_width / factor;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.phases.is_empty() {
            return Err(Error::Config("schedule has no phases".into()));
        }
        for w in self.phases.windows(2) {
            if w[1].resolution < w[0].resolution || w[1].frames < w[0].frames {
                return Err(Error::Config(
                    "phases must be nondecreasing in resolution and clip length".into(),
                ));
            }
        }
        let levels = self.levels();
        for w in levels.windows(2) {
            if w[1] != 2 * w[0] {
                return Err(Error::Config(format!(
                    "resolution steps must double, got {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if levels.len() > self.generator.scales {
            return Err(Error::Config(format!(
                "{} resolutions in the schedule but the generator has {} scales",
                levels.len(),
                self.generator.scales
            )));
        }
        self.discriminator.validate()?;
        self.losses.validate()?;
        let need = (self.generator.window + 1).max(self.discriminator.k);
        for p in &self.phases {
            if p.frames < need {
                return Err(Error::Config(format!(
                    "clip length {} is below max(window + 1, k) = {need}",
                    p.frames
                )));
            }
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: usize,
    pub step_in_phase: usize,
    pub step: u64,
}

/// Every loss component of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub phase: usize,
    pub d_image: f64,
    pub d_video: Option<f64>,
    pub g_image_gan: f64,
    pub g_video_gan: Option<f64>,
    pub g_flow: Option<f64>,
    pub g_fm_disc: f64,
    pub g_fm_percep: f64,
    pub g_total: f64,
    pub wall_ms: f64,
}

impl StepReport {
    /// Loss values only (no timing), for trace comparisons.
    pub fn losses(&self) -> Vec<Option<f64>> {
        vec![
            Some(self.d_image),
            self.d_video,
            Some(self.g_image_gan),
            self.g_video_gan,
            self.g_flow,
            Some(self.g_fm_disc),
            Some(self.g_fm_percep),
            Some(self.g_total),
        ]
    }
}

fn scalar<T: Float>(t: &Tensor<T>) -> Result<f64> {
    Ok(t.item()?.as_f64())
}

fn scores<T: Float>(outs: &[PatchOutput<T>]) -> Vec<Tensor<T>> {
    outs.iter().map(|o| o.score.clone()).collect()
}

/// Discriminator feature matching averaged over spatial scales.
fn disc_feature_matching<T: Float>(real: &[PatchOutput<T>], fake: &[PatchOutput<T>]) -> Result<Tensor<T>> {
    let mut total = Tensor::scalar(T::zero());
    for (r, f) in real.iter().zip(fake) {
        total = total.add(&feature_matching_loss(&r.features, &f.features)?)?;
    }
    Ok(total.scale(1.0 / real.len().max(1) as f64))
}

fn set_trainable<T: Float>(params: &[Arc<Param<T>>], on: bool) {
    for p in params {
        p.set_trainable(on);
    }
}

fn audit(grads: &Gradients<f32>, foreign: &[Arc<Param<f32>>], what: &str) -> Result<()> {
    if let Some(p) = foreign.iter().find(|p| grads.get(p.id()).is_some()) {
        return contract(format!("{what} loss produced a gradient for {}", p.name()));
    }
    Ok(())
}

fn non_finite(component: &str, step: u64) -> Error {
    Error::NonFinite {
        component: component.to_string(),
        iteration: step,
    }
}

/// All training state. Generator and discriminators live in separate parameter stores.
pub struct Trainer {
    config: TrainConfig,
    data: Arc<Vec<PairedSequence>>,
    g_store: ParamStore<f32>,
    d_store: ParamStore<f32>,
    generator: Generator<f32>,
    d_image: ImageDiscriminator<f32>,
    d_video: Option<VideoDiscriminator<f32>>,
    opt_g: Adam<f32>,
    opt_d_image: Adam<f32>,
    opt_d_video: Option<Adam<f32>>,
    psi: PerceptualNet<f32>,
    rng: ChaCha8Rng,
    progress: Progress,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("progress", &self.progress)
            .field("generator", &self.generator.config())
            .finish()
    }
}

impl Trainer {
    /// Validates the schedule against the data and builds every network.
    pub fn new(config: TrainConfig, data: Arc<Vec<PairedSequence>>) -> Result<Self> {
        config.validate()?;
        let Some(first) = data.first() else {
            return Err(Error::data("<dataset>", "no training sequences"));
        };
        if data.len() < config.batch {
            return Err(Error::data(
                "<dataset>",
                format!("{} sequences cannot fill a batch of {}", data.len(), config.batch),
            ));
        }
        let (h, w) = (first.height(), first.width());
        let shortest = data.iter().map(|s| s.len()).min().unwrap_or(0);
        for s in data.iter() {
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::data("<dataset>", "sequences differ in resolution"));
            }
        }
        for (i, p) in config.phases.iter().enumerate() {
            if p.frames > shortest {
                return Err(Error::data(
                    "<dataset>",
                    format!("phase {i} needs {}-frame clips but a sequence has {shortest}", p.frames),
                ));
            }
            config.phase_generator(i, h, w)?;
        }
        if first.source.classes.num_classes() != config.generator.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, generator expects {}",
                first.source.classes.num_classes(),
                config.generator.num_classes
            )));
        }

        let g_store = ParamStore::new(config.seed);
        let d_store = ParamStore::new(config.seed ^ 0xd15c);
        let generator = Generator::new(config.phase_generator(0, h, w)?, g_store.clone())?;
        let classes = config.generator.num_classes;
        let d_image = ImageDiscriminator::new(&config.discriminator, classes, &d_store)?;
        let d_video = if config.ablation.no_video_disc {
            None
        } else {
            Some(VideoDiscriminator::new(&config.discriminator, classes, &d_store)?)
        };
        let adam = config.adam();
        let opt_g = Adam::new(adam, generator.params());
        let opt_d_image = Adam::new(adam, d_image.params());
        let opt_d_video = d_video.as_ref().map(|d| Adam::new(adam, d.params()));
        Ok(Trainer {
            psi: PerceptualNet::new(config.perceptual_seed)?,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            data,
            g_store,
            d_store,
            generator,
            d_image,
            d_video,
            opt_g,
            opt_d_image,
            opt_d_video,
            progress: Progress::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    pub fn generator(&self) -> &Generator<f32> {
        &self.generator
    }

    pub fn discriminator_params(&self) -> Vec<Arc<Param<f32>>> {
        let mut v = self.d_image.params();
        v.extend(self.d_video.iter().flat_map(|d| d.params()));
        v
    }

    pub fn has_video_discriminator(&self) -> bool {
        self.d_video.is_some()
    }

    pub fn is_finished(&self) -> bool {
        self.progress.phase >= self.config.phases.len()
    }

    fn data_size(&self) -> (usize, usize) {
        (self.data[0].height(), self.data[0].width())
    }

    /// Rebuilds the generator for the current phase on the same parameter store; a finer
    /// phase stacks new stages onto the trained coarser ones.
    fn enter_phase(&mut self) -> Result<()> {
        let (h, w) = self.data_size();
        let cfg = self.config.phase_generator(self.progress.phase, h, w)?;
        if &cfg != self.generator.config() {
            self.generator = Generator::new(cfg, self.g_store.clone())?;
            self.opt_g.add_params(self.generator.params());
        }
        Ok(())
    }

    /// Runs until the schedule ends or `max_steps` more steps were taken, writing one JSON
    /// record per step to `log`.
    pub fn run(&mut self, max_steps: Option<u64>, log: &mut dyn Write) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while !self.is_finished() {
            if max_steps.is_some_and(|m| reports.len() as u64 >= m) {
                break;
            }
            let phase = self.config.phases[self.progress.phase];
            if self.progress.step_in_phase >= phase.steps {
                self.progress.phase += 1;
                self.progress.step_in_phase = 0;
                if !self.is_finished() {
                    self.enter_phase()?;
                }
                continue;
            }
            let report = self.train_step()?;
            serde_json::to_writer(&mut *log, &report).map_err(|e| Error::io("<log>", e.into()))?;
            writeln!(log).map_err(|e| Error::io("<log>", e))?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Runs the whole remaining schedule.
    pub fn run_schedule(&mut self, log: &mut dyn Write) -> Result<Vec<StepReport>> {
        self.run(None, log)
    }

    /// One discriminator update on detached generator output, then one generator update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if self.is_finished() {
            return contract("schedule already finished");
        }
        let started = Instant::now();
        let step = self.progress.step;
        let phase = self.config.phases[self.progress.phase];
        let (h, _) = self.data_size();
        let factor = h / phase.resolution;
        let window = self.generator.config().window;
        let frames_n = phase.frames;
        let mode = self.config.losses.gan_mode;

        let picks: Vec<usize> = (0..self.config.batch)
            .map(|_| self.rng.random_range(0..self.data.len()))
            .collect();
        let shortest = picks.iter().map(|&i| self.data[i].len()).min().expect("batch");
        let start = self.rng.random_range(0..=shortest - frames_n);
        let seqs: Vec<&PairedSequence> = picks.iter().map(|&i| &self.data[i]).collect();
        let batch = SequenceTensors::<f32>::from_sequences(&seqs, start, frames_n, factor)?;
        let real = &batch.frames;
        let labels: Vec<Tensor<f32>> = batch.source.iter().map(|s| s.labels.clone()).collect();

        let mut sources = Vec::with_capacity(frames_n);
        for (s, x) in batch.source.iter().zip(real) {
            let z = match self.generator.encoder() {
                Some(e) => Some(e.encode(x, &s.instances)?),
                None => None,
            };
            sources.push(SourceInput::from_frame(s, z));
        }
        let rollout = self.generator.rollout(&sources, &real[..window], Overrides::default())?;
        let fake = &rollout.frames;

        let ti = window + sample_image_pair(frames_n - window, &mut self.rng)?.index;
        let dcfg = self.config.discriminator.clone();
        let clips: Vec<(usize, VideoClipSample)> = match &self.d_video {
            Some(_) => dcfg
                .active_temporal_scales(frames_n)
                .into_iter()
                .map(|sigma| Ok((sigma, sample_video_clip(frames_n, dcfg.k, dcfg.stride(sigma), &mut self.rng)?)))
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        let clip_sources = dcfg.video_uses_source.then_some(labels.as_slice());

        // Discriminator update.
        let d_params = self.discriminator_params();
        let detached: Vec<Tensor<f32>> = fake.iter().map(|t| t.detach()).collect();
        let real_i = self.d_image.forward(&real[ti], &labels[ti])?;
        let fake_i = self.d_image.forward(&detached[ti], &labels[ti])?;
        let d_image = gan_loss_image(Some(&scores(&real_i)), &scores(&fake_i), Role::Discriminator, mode)?;
        let mut d_total = d_image.clone();
        let mut d_video = None;
        if let Some(dv) = &self.d_video {
            if !clips.is_empty() {
                let (mut r, mut f) = (Vec::new(), Vec::new());
                for (sigma, clip) in &clips {
                    r.push(scores(&dv.forward(*sigma, &assemble_clip(real, &batch.flows, clip_sources, clip)?)?));
                    f.push(scores(&dv.forward(*sigma, &assemble_clip(&detached, &batch.flows, clip_sources, clip)?)?));
                }
                let l = gan_loss_video(Some(&r), &f, Role::Discriminator, mode)?;
                d_total = d_total.add(&l)?;
                d_video = Some(l);
            }
        }
        if !d_image.all_finite() {
            return Err(non_finite("d_image", step));
        }
        if d_video.as_ref().is_some_and(|l| !l.all_finite()) {
            return Err(non_finite("d_video", step));
        }
        let grads = d_total.backward()?;
        let g_params = self.generator.params();
        if self.config.audit_gradients {
            audit(&grads, &g_params, "discriminator")?;
        }
        self.opt_d_image.step(&grads)?;
        if let Some(opt) = &mut self.opt_d_video {
            opt.step(&grads)?;
        }

        // Generator update against the refreshed, frozen discriminators.
        set_trainable(&d_params, false);
        let g_result = self.generator_terms(&batch, &labels, fake, &rollout, ti, &clips, clip_sources, window);
        set_trainable(&d_params, true);
        let terms = g_result?;
        let total = total_generator_objective(&terms, &self.config.losses).map_err(|e| match e {
            Error::NonFinite { component, .. } => non_finite(&component, step),
            other => other,
        })?;
        let grads = total.backward()?;
        if self.config.audit_gradients {
            audit(&grads, &d_params, "generator")?;
        }
        self.opt_g.step(&grads)?;

        self.progress.step += 1;
        self.progress.step_in_phase += 1;
        Ok(StepReport {
            step,
            phase: self.progress.phase,
            d_image: scalar(&d_image)?,
            d_video: d_video.as_ref().map(scalar).transpose()?,
            g_image_gan: scalar(&terms.image_gan)?,
            g_video_gan: terms.video_gan.as_ref().map(scalar).transpose()?,
            g_flow: terms.flow.as_ref().map(scalar).transpose()?,
            g_fm_disc: scalar(&terms.fm_disc)?,
            g_fm_percep: scalar(&terms.fm_percep)?,
            g_total: scalar(&total)?,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn generator_terms(
        &self,
        batch: &SequenceTensors<f32>,
        labels: &[Tensor<f32>],
        fake: &[Tensor<f32>],
        rollout: &crate::generator::Rollout<f32>,
        ti: usize,
        clips: &[(usize, VideoClipSample)],
        clip_sources: Option<&[Tensor<f32>]>,
        window: usize,
    ) -> Result<GeneratorTerms<f32>> {
        let mode = self.config.losses.gan_mode;
        let real = &batch.frames;
        let real_i = self.d_image.forward(&real[ti], &labels[ti])?;
        let fake_i = self.d_image.forward(&fake[ti], &labels[ti])?;
        let image_gan = gan_loss_image(None, &scores(&fake_i), Role::Generator, mode)?;
        let mut fm_disc = disc_feature_matching(&real_i, &fake_i)?;
        let mut video_gan = None;
        if let (Some(dv), false) = (&self.d_video, clips.is_empty()) {
            let mut f = Vec::new();
            let mut fm = Tensor::scalar(0.0f32);
            for (sigma, clip) in clips {
                let r = dv.forward(*sigma, &assemble_clip(real, &batch.flows, clip_sources, clip)?)?;
                let g = dv.forward(*sigma, &assemble_clip(fake, &batch.flows, clip_sources, clip)?)?;
                fm = fm.add(&disc_feature_matching(&r, &g)?)?;
                f.push(scores(&g));
            }
            fm_disc = fm_disc.add(&fm.scale(1.0 / clips.len() as f64))?;
            video_gan = Some(gan_loss_video(None, &f, Role::Generator, mode)?);
        }
        let frames_n = real.len();
        let flow = if self.generator.config().flow_warp {
            let predicted: Vec<Tensor<f32>> = rollout.steps.iter().map(|s| s.flow.clone()).collect();
            Some(flow_loss(&predicted, &batch.flows[window - 1..], &real[window - 1..])?.total)
        } else {
            None
        };
        let mut fm_percep = Tensor::scalar(0.0f32);
        for t in window..frames_n {
            let r = self.psi.features(&real[t])?;
            let f = self.psi.features(&fake[t])?;
            fm_percep = fm_percep.add(&feature_matching_loss(&r, &f)?)?;
        }
        let fm_percep = fm_percep.scale(1.0 / (frames_n - window) as f64);
        Ok(GeneratorTerms {
            image_gan,
            video_gan,
            flow,
            fm_disc,
            fm_percep,
        })
    }
}
