//! Per-class Gaussian mixtures over pooled instance features.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, Plane};
use crate::error::{contract, Result};

const EM_ITERS: usize = 200;
const EM_TOL: f64 = 1e-10;
const EM_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFeatureModel {
    pub dim: usize,
    pub classes: BTreeMap<u8, Vec<GaussianComponent>>,
}

fn sample_stats(xs: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; dim * dim];
    for x in xs {
        for i in 0..dim {
            for j in 0..dim {
                cov[i * dim + j] += (x[i] - mean[i]) * (x[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n);
    (mean, cov)
}

struct Gauss {
    mean: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
}

fn log_density(g: &Gauss, x: &DVector<f64>) -> f64 {
    let d = x - &g.mean;
    let sol = g.chol.solve(&d);
    let dim = x.len() as f64;
    -0.5 * (d.dot(&sol) + g.log_det + dim * (2.0 * std::f64::consts::PI).ln())
}

fn prepare(c: &GaussianComponent, dim: usize) -> Result<Gauss> {
    let mut m = DMatrix::from_row_slice(dim, dim, &c.cov);
    for i in 0..dim {
        m[(i, i)] += EM_RIDGE;
    }
    let Some(chol) = m.clone().cholesky() else {
        return Err(crate::error::Error::Numerical("covariance is not positive definite".into()));
    };
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(Gauss {
        mean: DVector::from_column_slice(&c.mean),
        chol,
        log_det,
    })
}

fn fit_mixture(xs: &[&[f64]], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<GaussianComponent>> {
    let (global_mean, global_cov) = sample_stats(xs, dim);
    if k == 1 {
        return Ok(vec![GaussianComponent {
            weight: 1.0,
            mean: global_mean,
            cov: global_cov,
        }]);
    }
    // k-means++ style seeding.
    let mut means: Vec<Vec<f64>> = vec![xs[rng.random_range(0..xs.len())].to_vec()];
    while means.len() < k {
        let d2: Vec<f64> = xs
            .iter()
            .map(|x| {
                means
                    .iter()
                    .map(|m| m.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..xs.len())
        } else {
            let mut r = rng.random_range(0.0..total);
            let mut idx = xs.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        means.push(xs[pick].to_vec());
    }
    // Lloyd iterations, then per-cluster statistics as the EM starting point.
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut assign = vec![0usize; xs.len()];
    for _ in 0..50 {
        for (i, x) in xs.iter().enumerate() {
            assign[i] = (0..k)
                .min_by(|&a, &b| dist2(&means[a], x).total_cmp(&dist2(&means[b], x)))
                .unwrap_or(0);
        }
        for (j, m) in means.iter_mut().enumerate() {
            let members: Vec<&[f64]> =
                xs.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(x, _)| *x).collect();
            if !members.is_empty() {
                *m = sample_stats(&members, dim).0;
            }
        }
    }
    let mut comps: Vec<GaussianComponent> = (0..k)
        .map(|j| {
            let members: Vec<&[f64]> =
                xs.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(x, _)| *x).collect();
            let cov = if members.len() >= 2 {
                sample_stats(&members, dim).1
            } else {
                global_cov.clone()
            };
            GaussianComponent {
                weight: members.len().max(1) as f64 / xs.len() as f64,
                mean: means[j].clone(),
                cov,
            }
        })
        .collect();
    let points: Vec<DVector<f64>> = xs.iter().map(|x| DVector::from_column_slice(x)).collect();
    let n = xs.len();
    let mut prev_ll = f64::NEG_INFINITY;
    for _ in 0..EM_ITERS {
        let gs = comps.iter().map(|c| prepare(c, dim)).collect::<Result<Vec<_>>>()?;
        let mut resp = vec![0.0; n * k];
        let mut ll = 0.0;
        for (i, x) in points.iter().enumerate() {
            let logs: Vec<f64> = gs
                .iter()
                .zip(&comps)
                .map(|(g, c)| c.weight.max(1e-300).ln() + log_density(g, x))
                .collect();
            let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
            ll += mx + s.ln();
            for j in 0..k {
                resp[i * k + j] = (logs[j] - mx).exp() / s;
            }
        }
        for (j, c) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum::<f64>().max(1e-12);
            let mut mean = vec![0.0; dim];
            for (i, x) in xs.iter().enumerate() {
                for d in 0..dim {
                    mean[d] += resp[i * k + j] * x[d];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut cov = vec![0.0; dim * dim];
            for (i, x) in xs.iter().enumerate() {
                let r = resp[i * k + j];
                for a in 0..dim {
                    for b in 0..dim {
                        cov[a * dim + b] += r * (x[a] - mean[a]) * (x[b] - mean[b]);
                    }
                }
            }
            cov.iter_mut().for_each(|v| *v /= nk);
            *c = GaussianComponent {
                weight: nk / n as f64,
                mean,
                cov,
            };
        }
        let wsum: f64 = comps.iter().map(|c| c.weight).sum();
        comps.iter_mut().for_each(|c| c.weight /= wsum);
        if (ll - prev_ll).abs() < EM_TOL * ll.abs().max(1.0) {
            break;
        }
        prev_ll = ll;
    }
    Ok(comps)
}

/// Maximum-likelihood mixture per class from `(class, feature vector)` pairs. Classes with
/// no samples are left out. With one component this is the sample mean and the `1/N`
/// sample covariance.
pub fn fit_feature_model(
    samples: &[(u8, Vec<f64>)],
    components: usize,
    seed: u64,
) -> Result<InstanceFeatureModel> {
    if components == 0 {
        return contract("at least one mixture component is required");
    }
    let Some(first) = samples.first() else {
        return contract("no instance features to fit");
    };
    let dim = first.1.len();
    if dim == 0 || samples.iter().any(|(_, v)| v.len() != dim) {
        return contract("instance feature vectors must share one nonzero dimension");
    }
    let mut by_class: BTreeMap<u8, Vec<&[f64]>> = BTreeMap::new();
    for (c, v) in samples {
        by_class.entry(*c).or_default().push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes = BTreeMap::new();
    for (c, xs) in by_class {
        let k = components.min(xs.len());
        classes.insert(c, fit_mixture(&xs, dim, k, &mut rng)?);
    }
    Ok(InstanceFeatureModel { dim, classes })
}

/// Draws one feature vector per `(instance id, class)`, in increasing id order.
pub fn sample_instance_vectors(
    model: &InstanceFeatureModel,
    instances: &[(u32, u8)],
    seed: u64,
) -> Result<BTreeMap<u32, Vec<f64>>> {
    let mut sorted = instances.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for (id, class) in sorted {
        let Some(comps) = model.classes.get(&class) else {
            return contract(format!("no feature model for class {class}"));
        };
        let mut r = rng.random_range(0.0..1.0);
        let mut comp = &comps[comps.len() - 1];
        for c in comps {
            if r < c.weight {
                comp = c;
                break;
            }
            r -= c.weight;
        }
        let d = model.dim;
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &comp.cov));
        let eps = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let scaled = DVector::from_fn(d, |i, _| eig.eigenvalues[i].max(0.0).sqrt() * eps[i]);
        let offset = &eig.eigenvectors * scaled;
        let v = (0..d).map(|i| comp.mean[i] + offset[i]).collect();
        out.insert(id, v);
    }
    Ok(out)
}

/// Paints per-instance vectors over an instance map, `dim x H x W` planar.
pub fn paint_features(
    vectors: &BTreeMap<u32, Vec<f64>>,
    instances: &Plane<u8>,
    dim: usize,
) -> Result<Vec<f64>> {
    let plane = instances.width * instances.height;
    let mut out = vec![0.0; dim * plane];
    for (p, &id) in instances.data.iter().enumerate() {
        let Some(v) = vectors.get(&(id as u32)) else {
            return contract(format!("no feature vector for instance {id}"));
        };
        for c in 0..dim {
            out[c * plane + p] = v[c];
        }
    }
    Ok(out)
}

/// Instances present in a frame with their classes (taken from the label map).
pub(crate) fn instance_classes(instances: &Plane<u8>, labels: &LabelMap) -> Vec<(u32, u8)> {
    let mut seen = BTreeMap::new();
    for (&id, &c) in instances.data.iter().zip(&labels.data) {
        seen.entry(id as u32).or_insert(c);
    }
    seen.into_iter().collect()
}

/// Samples one vector per instance of the frame and paints it.
pub fn sample_features(
    model: &InstanceFeatureModel,
    instances: &Plane<u8>,
    labels: &LabelMap,
    seed: u64,
) -> Result<Vec<f64>> {
    let vectors = sample_instance_vectors(model, &instance_classes(instances, labels), seed)?;
    paint_features(&vectors, instances, model.dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_fit_reproduces_constant() {
        let v = vec![0.25, -0.5, 0.125];
        let samples: Vec<_> = (0..5).map(|_| (1u8, v.clone())).collect();
        let m = fit_feature_model(&samples, 1, 0).unwrap();
        let c = &m.classes[&1][0];
        assert_eq!(c.mean, v);
        assert!(c.cov.iter().all(|&x| x == 0.0));
        let drawn = sample_instance_vectors(&m, &[(4, 1)], 9).unwrap();
        assert_eq!(drawn[&4], v);
    }

    #[test]
    fn single_component_matches_sample_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let samples: Vec<_> = xs.iter().map(|x| (2u8, x.clone())).collect();
        let m = fit_feature_model(&samples, 1, 0).unwrap();
        let c = &m.classes[&2][0];
        // Oracle: two-pass statistics written out directly.
        let n = xs.len() as f64;
        for i in 0..3 {
            let mu_i = xs.iter().map(|x| x[i]).sum::<f64>() / n;
            assert!((c.mean[i] - mu_i).abs() < 1e-6);
            for j in 0..3 {
                let mu_j = xs.iter().map(|x| x[j]).sum::<f64>() / n;
                let s = xs.iter().map(|x| (x[i] - mu_i) * (x[j] - mu_j)).sum::<f64>() / n;
                assert!((c.cov[i * 3 + j] - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mixture_separates_clusters() {
        let mut samples = vec![];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..60 {
            let centre = if k % 2 == 0 { -0.8 } else { 0.8 };
            samples.push((1u8, vec![centre + rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)]));
        }
        let m = fit_feature_model(&samples, 2, 3).unwrap();
        let comps = &m.classes[&1];
        assert!((comps.iter().map(|c| c.weight).sum::<f64>() - 1.0).abs() < 1e-12);
        let mut means: Vec<f64> = comps.iter().map(|c| c.mean[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 0.8).abs() < 0.05 && (means[1] - 0.8).abs() < 0.05);
    }

    #[test]
    fn sampling_is_seeded_and_rejects_unknown_class() {
        let samples: Vec<_> = (0..10).map(|i| (0u8, vec![i as f64, (i * i) as f64 * 0.1])).collect();
        let m = fit_feature_model(&samples, 1, 0).unwrap();
        let inst = Plane { width: 2, height: 1, data: vec![0u8, 0] };
        let labels = Plane { width: 2, height: 1, data: vec![0u8, 0] };
        let a = sample_features(&m, &inst, &labels, 5).unwrap();
        assert_eq!(a, sample_features(&m, &inst, &labels, 5).unwrap());
        assert_ne!(a, sample_features(&m, &inst, &labels, 6).unwrap());
        let bad = Plane { width: 2, height: 1, data: vec![3u8, 3] };
        assert!(sample_features(&m, &inst, &bad, 5).is_err());
    }
}
