//! Adversarial, flow, and feature-matching objectives.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vidsynth_tensor::{Conv2d, Float, Init, Param, ParamStore, Tensor};

use crate::error::{contract, Error, Result};
use crate::warp::warp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    LeastSquares,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Discriminator,
    Generator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_w: f64,
    pub lambda_fm_disc: f64,
    pub lambda_fm_percep: f64,
    pub gan_mode: GanMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_w: 10.0,
            lambda_fm_disc: 10.0,
            lambda_fm_percep: 10.0,
            gan_mode: GanMode::LeastSquares,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_w", self.lambda_w),
            ("lambda_fm_disc", self.lambda_fm_disc),
            ("lambda_fm_percep", self.lambda_fm_percep),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Loss for one spatial scale.
fn gan_term<T: Float>(
    real: Option<&Tensor<T>>,
    fake: &Tensor<T>,
    role: Role,
    mode: GanMode,
) -> Result<Tensor<T>> {
    Ok(match (role, mode) {
        (Role::Generator, GanMode::LeastSquares) => fake.add_scalar(-1.0).sqr().mean_all(),
        (Role::Generator, GanMode::Log) => {
            // Minimises E[log(1 - sigmoid(fake))].
            fake.softplus().mean_all().neg()
        }
        (Role::Discriminator, _) => {
            let Some(real) = real else {
                return contract("discriminator loss needs real scores");
            };
            match mode {
                GanMode::LeastSquares => real
                    .add_scalar(-1.0)
                    .sqr()
                    .mean_all()
                    .add(&fake.sqr().mean_all())?,
                GanMode::Log => real
                    .neg()
                    .softplus()
                    .mean_all()
                    .add(&fake.softplus().mean_all())?,
            }
        }
    })
}

/// Adversarial loss over multi-scale patch scores, averaged over scales (and over patches
/// and batch within each scale). `real` is only read for the discriminator role.
pub fn gan_loss_image<T: Float>(
    real: Option<&[Tensor<T>]>,
    fake: &[Tensor<T>],
    role: Role,
    mode: GanMode,
) -> Result<Tensor<T>> {
    if fake.is_empty() {
        return contract("no score maps");
    }
    if let Some(r) = real {
        if r.len() != fake.len() {
            return contract(format!("{} real vs {} fake score scales", r.len(), fake.len()));
        }
        for (a, b) in r.iter().zip(fake) {
            if a.shape() != b.shape() {
                return contract(format!("score shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
            }
        }
    }
    let mut total: Option<Tensor<T>> = None;
    for (s, f) in fake.iter().enumerate() {
        let term = gan_term(real.map(|r| &r[s]), f, role, mode)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty").scale(1.0 / fake.len() as f64))
}

/// [`gan_loss_image`] per temporal scale, averaged over temporal scales.
pub fn gan_loss_video<T: Float>(
    real: Option<&[Vec<Tensor<T>>]>,
    fake: &[Vec<Tensor<T>>],
    role: Role,
    mode: GanMode,
) -> Result<Tensor<T>> {
    if fake.is_empty() {
        return contract("no temporal scales");
    }
    if real.is_some_and(|r| r.len() != fake.len()) {
        return contract("real and fake temporal scale counts differ");
    }
    let mut total: Option<Tensor<T>> = None;
    for (s, f) in fake.iter().enumerate() {
        let term = gan_loss_image(real.map(|r| r[s].as_slice()), f, role, mode)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty").scale(1.0 / fake.len() as f64))
}

/// The endpoint and warping parts of the flow loss, each averaged over transitions.
#[derive(Debug, Clone)]
pub struct FlowLoss<T: Float> {
    pub endpoint: Tensor<T>,
    pub warp: Tensor<T>,
    pub total: Tensor<T>,
}

/// `1/(T-1) * sum_t (epe(w~_t, w_t) + mean|warp(x_t, w~_t) - x_{t+1}|)`, where flows
/// `t` map frame `t + 1` onto frame `t` and `epe` is the per-pixel L1 norm of the
/// displacement error averaged over pixels.
pub fn flow_loss<T: Float>(
    predicted: &[Tensor<T>],
    truth: &[Tensor<T>],
    frames: &[Tensor<T>],
) -> Result<FlowLoss<T>> {
    if predicted.is_empty() || predicted.len() != truth.len() || frames.len() != predicted.len() + 1 {
        return contract(format!(
            "flow loss needs n predicted flows, n true flows and n + 1 frames; got {}, {}, {}",
            predicted.len(),
            truth.len(),
            frames.len()
        ));
    }
    let n = predicted.len() as f64;
    let mut endpoint: Option<Tensor<T>> = None;
    let mut warp_term: Option<Tensor<T>> = None;
    for t in 0..predicted.len() {
        if predicted[t].shape() != truth[t].shape() {
            return contract("predicted and true flow shapes differ");
        }
        let channels = predicted[t].shape()[1] as f64;
        let e = predicted[t].sub(&truth[t])?.abs().mean_all().scale(channels);
        let w = warp(&frames[t], &predicted[t])?.sub(&frames[t + 1])?.abs().mean_all();
        endpoint = Some(match endpoint {
            Some(a) => a.add(&e)?,
            None => e,
        });
        warp_term = Some(match warp_term {
            Some(a) => a.add(&w)?,
            None => w,
        });
    }
    let endpoint = endpoint.expect("nonempty").scale(1.0 / n);
    let warp_term = warp_term.expect("nonempty").scale(1.0 / n);
    let total = endpoint.add(&warp_term)?;
    Ok(FlowLoss {
        endpoint,
        warp: warp_term,
        total,
    })
}

/// `sum_i (1/P_i) * ||real_i - fake_i||_1` over matched layers. Real features are treated
/// as constants.
pub fn feature_matching_loss<T: Float>(real: &[Tensor<T>], fake: &[Tensor<T>]) -> Result<Tensor<T>> {
    if real.len() != fake.len() {
        return contract(format!("{} real layers vs {} fake layers", real.len(), fake.len()));
    }
    let mut total = Tensor::scalar(T::zero());
    for (r, f) in real.iter().zip(fake) {
        if r.shape() != f.shape() {
            return contract(format!("feature shapes differ: {:?} vs {:?}", r.shape(), f.shape()));
        }
        total = total.add(&f.sub(&r.detach())?.abs().mean_all())?;
    }
    Ok(total)
}

/// Fixed random-weight convolutional feature extractor used for the perceptual term.
#[derive(Debug, Clone)]
pub struct PerceptualNet<T: Float> {
    convs: Vec<Conv2d<T>>,
}

impl<T: Float> PerceptualNet<T> {
    /// Three taps: 3->8 (stride 1), 8->16 (stride 2), 16->32 (stride 2), ReLU after each.
    pub fn new(seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed);
        let root = store.root().sub("perceptual");
        let spec = [(3usize, 8usize, 1usize), (8, 16, 2), (16, 32, 2)];
        let mut convs = Vec::new();
        for (i, &(cin, cout, stride)) in spec.iter().enumerate() {
            let path = root.sub(format!("c{i}"));
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let weight = path.var("weight", &[cout, cin, 3, 3], Init::Normal { mean: 0.0, std })?;
            let bias = path.var("bias", &[cout], Init::Uniform { lo: -0.1, hi: 0.1 })?;
            weight.set_trainable(false);
            bias.set_trainable(false);
            convs.push(Conv2d {
                weight,
                bias: Some(bias),
                stride,
                pad: 1,
            });
        }
        Ok(PerceptualNet { convs })
    }

    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut h = x.clone();
        let mut taps = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = c.forward(&h)?.relu();
            taps.push(h.clone());
        }
        Ok(taps)
    }

    pub fn params(&self) -> Vec<Arc<Param<T>>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
}

/// Generator-side objective terms. Absent terms belong to disabled parts of the model.
#[derive(Debug, Clone)]
pub struct GeneratorTerms<T: Float> {
    pub image_gan: Tensor<T>,
    pub video_gan: Option<Tensor<T>>,
    pub flow: Option<Tensor<T>>,
    pub fm_disc: Tensor<T>,
    pub fm_percep: Tensor<T>,
}

impl<T: Float> GeneratorTerms<T> {
    /// `(name, value)` of every present term.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v = vec![("image_gan", &self.image_gan)];
        if let Some(t) = &self.video_gan {
            v.push(("video_gan", t));
        }
        if let Some(t) = &self.flow {
            v.push(("flow", t));
        }
        v.push(("fm_disc", &self.fm_disc));
        v.push(("fm_percep", &self.fm_percep));
        v
    }
}

/// `L_I + L_V + lambda_W L_W + lambda_FMd L_FMd + lambda_FMp L_FMp`. A non-finite term
/// is reported by name (with iteration 0; callers that know the step re-label it).
pub fn total_generator_objective<T: Float>(
    terms: &GeneratorTerms<T>,
    weights: &LossWeights,
) -> Result<Tensor<T>> {
    for (name, t) in terms.named() {
        if !t.all_finite() {
            return Err(Error::NonFinite {
                component: name.to_string(),
                iteration: 0,
            });
        }
    }
    let mut total = terms.image_gan.clone();
    if let Some(v) = &terms.video_gan {
        total = total.add(v)?;
    }
    if let Some(f) = &terms.flow {
        total = total.add(&f.scale(weights.lambda_w))?;
    }
    total = total.add(&terms.fm_disc.scale(weights.lambda_fm_disc))?;
    total = total.add(&terms.fm_percep.scale(weights.lambda_fm_percep))?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(v: f64, shape: &[usize]) -> Tensor<f64> {
        Tensor::full(v, shape)
    }

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn least_squares_cases() {
        let sh = [2, 1, 3, 3];
        let d = gan_loss_image(Some(&[c(1.0, &sh)]), &[c(0.0, &sh)], Role::Discriminator, GanMode::LeastSquares).unwrap();
        assert_eq!(d.item().unwrap(), 0.0);
        let g = gan_loss_image(None, &[c(1.0, &sh)], Role::Generator, GanMode::LeastSquares).unwrap();
        assert_eq!(g.item().unwrap(), 0.0);
        let d = gan_loss_image(Some(&[c(0.5, &sh)]), &[c(0.5, &sh)], Role::Discriminator, GanMode::LeastSquares).unwrap();
        assert_eq!(d.item().unwrap(), 0.5);
    }

    #[test]
    fn video_loss_averages_temporal_scales() {
        let sh = [1, 1, 2, 2];
        let one = vec![vec![c(0.3, &sh), c(-0.2, &sh)]];
        let img = gan_loss_image(None, &one[0], Role::Generator, GanMode::LeastSquares).unwrap();
        let vid = gan_loss_video(None, &one, Role::Generator, GanMode::LeastSquares).unwrap();
        assert_eq!(img.item().unwrap(), vid.item().unwrap());
        let zero = gan_loss_video(None, &[vec![c(0.0, &sh)]], Role::Generator, GanMode::LeastSquares).unwrap();
        assert_eq!(zero.item().unwrap(), 1.0);
        let three = vec![vec![c(0.0, &sh)], vec![c(0.5, &sh)], vec![c(1.0, &sh)]];
        let (a, b, cc) = (1.0, 0.25, 0.0);
        let got = gan_loss_video(None, &three, Role::Generator, GanMode::LeastSquares).unwrap();
        assert!((got.item().unwrap() - (a + b + cc) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn log_mode_matches_formula() {
        let sh = [1, 1, 1, 2];
        let real = Tensor::from_vec(vec![0.3, -1.2], &sh).unwrap();
        let fake = Tensor::from_vec(vec![2.0, -0.4], &sh).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let d = gan_loss_image(Some(&[real.clone()]), &[fake.clone()], Role::Discriminator, GanMode::Log).unwrap();
        let expect = -((sig(0.3).ln() + sig(-1.2).ln()) / 2.0) - (((1.0 - sig(2.0)).ln() + (1.0 - sig(-0.4)).ln()) / 2.0);
        assert!((d.item().unwrap() - expect).abs() < 1e-12);
        let g = gan_loss_image(None, &[fake], Role::Generator, GanMode::Log).unwrap();
        let expect = ((1.0 - sig(2.0)).ln() + (1.0 - sig(-0.4)).ln()) / 2.0;
        assert!((g.item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn feature_matching_cases() {
        let a = vec![c(0.3, &[1, 2, 2, 2])];
        assert_eq!(feature_matching_loss(&a, &a).unwrap().item().unwrap(), 0.0);
        let b = vec![c(0.4, &[1, 2, 2, 2])];
        assert!((feature_matching_loss(&a, &b).unwrap().item().unwrap() - 0.1).abs() < 1e-12);
        // Unit total absolute difference in each layer.
        let r = vec![c(0.0, &[1, 1, 2, 2]), c(0.0, &[1, 1, 4, 4])];
        let mut f1 = vec![0.0; 4];
        f1[0] = 1.0;
        let mut f2 = vec![0.0; 16];
        f2[5] = -1.0;
        let f = vec![
            Tensor::from_vec(f1, &[1, 1, 2, 2]).unwrap(),
            Tensor::from_vec(f2, &[1, 1, 4, 4]).unwrap(),
        ];
        assert_eq!(feature_matching_loss(&r, &f).unwrap().item().unwrap(), 0.25 + 0.0625);
        assert!(feature_matching_loss(&r, &f[..1]).is_err());
    }

    #[test]
    fn flow_loss_static_and_offset() {
        let frames = vec![c(0.2, &[1, 3, 4, 4]); 3];
        let zero = vec![c(0.0, &[1, 2, 4, 4]); 2];
        let l = flow_loss(&zero, &zero, &frames).unwrap();
        assert_eq!(l.total.item().unwrap(), 0.0);
        let mut off = vec![0.0; 32];
        off[..16].fill(1.0);
        let shifted = vec![Tensor::from_vec(off, &[1, 2, 4, 4]).unwrap(); 2];
        let l = flow_loss(&shifted, &zero, &frames).unwrap();
        // Endpoint: |1| + |0| at every pixel.
        assert_eq!(l.endpoint.item().unwrap(), 1.0);
        assert_eq!(l.warp.item().unwrap(), 0.0);
        assert!(flow_loss(&zero, &zero[..1], &frames).is_err());
    }

    #[test]
    fn objective_composition() {
        let w = LossWeights::default();
        let terms = |v: [f64; 5]| GeneratorTerms {
            image_gan: s(v[0]),
            video_gan: Some(s(v[1])),
            flow: Some(s(v[2])),
            fm_disc: s(v[3]),
            fm_percep: s(v[4]),
        };
        assert_eq!(total_generator_objective(&terms([0.0; 5]), &w).unwrap().item().unwrap(), 0.0);
        assert_eq!(
            total_generator_objective(&terms([0.0, 0.0, 1.0, 0.0, 0.0]), &w).unwrap().item().unwrap(),
            10.0
        );
        let got = total_generator_objective(&terms([0.5, 0.5, 0.1, 0.02, 0.03]), &w).unwrap();
        assert!((got.item().unwrap() - 2.5).abs() < 1e-12);
        let err = total_generator_objective(&terms([0.1, f64::NAN, 0.0, 0.0, 0.0]), &w).unwrap_err();
        assert!(err.to_string().contains("video_gan"), "{err}");
        // Scaling lambda_W scales its contribution exactly.
        let t = terms([0.0, 0.0, 0.37, 0.0, 0.0]);
        let base = total_generator_objective(&t, &w).unwrap().item().unwrap();
        let w3 = LossWeights { lambda_w: 30.0, ..w };
        let scaled = total_generator_objective(&t, &w3).unwrap().item().unwrap();
        assert!((scaled - 3.0 * base).abs() <= 1e-12 * base);
    }
}
