use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidsynth::data::{render_sequence, SceneConfig, SequenceTensors};
use vidsynth::eval::{
    frechet_distance, frechet_from_moments, temporal_flicker, video_fid, warp_error, ClipPolicy,
    ExtractorConfig, GaussianStats, VideoFeatureExtractor,
};
use vidsynth_tensor::Tensor;

fn random_features(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|j| rng.random_range(-1.0..1.0) * (j + 1) as f64 + j as f64).collect())
        .collect()
}

/// Two-pass textbook sample moments.
fn naive_moments(f: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = (f.len(), f[0].len());
    let mut mu = DVector::zeros(d);
    for x in f {
        mu += DVector::from_column_slice(x);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for x in f {
        let dx = DVector::from_column_slice(x) - &mu;
        cov += &dx * dx.transpose();
    }
    (mu, cov / (n - 1) as f64)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Trace of sqrt(A B) through the symmetric form sqrt(A) B sqrt(A).
fn oracle_frechet(ma: &DVector<f64>, ca: &DMatrix<f64>, mb: &DVector<f64>, cb: &DMatrix<f64>) -> f64 {
    let ra = sym_sqrt(ca);
    let inner = &ra * cb * &ra;
    let tr = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum::<f64>();
    (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr
}

#[test]
fn streaming_stats_match_direct_moments() {
    let f = random_features(1, 40, 6);
    let s = GaussianStats::from_features(&f).unwrap();
    let (mu, cov) = naive_moments(&f);
    assert!((s.mean() - &mu).amax() < 1e-8);
    assert!((s.covariance().unwrap() - &cov).amax() < 1e-8);
    assert_eq!(s.count(), 40);
}

#[test]
fn stats_are_order_independent_and_mergeable() {
    let f = random_features(2, 30, 5);
    let mut g = f.clone();
    g.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let a = GaussianStats::from_features(&f).unwrap();
    let b = GaussianStats::from_features(&g).unwrap();
    assert!((a.mean() - b.mean()).amax() < 1e-10);
    assert!((a.covariance().unwrap() - b.covariance().unwrap()).amax() < 1e-10);
    let mut left = GaussianStats::from_features(&f[..11]).unwrap();
    left.merge(&GaussianStats::from_features(&f[11..]).unwrap()).unwrap();
    assert!((left.mean() - a.mean()).amax() < 1e-10);
    assert!((left.covariance().unwrap() - a.covariance().unwrap()).amax() < 1e-10);
}

#[test]
fn frechet_matches_symmetric_oracle_on_general_covariances() {
    for seed in 0..5 {
        let a = GaussianStats::from_features(&random_features(seed, 50, 8)).unwrap();
        let b = GaussianStats::from_features(&random_features(seed + 100, 50, 8)).unwrap();
        let got = frechet_distance(&a, &b).unwrap();
        let want = oracle_frechet(a.mean(), &a.covariance().unwrap(), b.mean(), &b.covariance().unwrap());
        assert!((got - want).abs() < 1e-6 * (1.0 + want), "{got} vs {want}");
        let rev = frechet_distance(&b, &a).unwrap();
        assert!((got - rev).abs() < 1e-8 * (1.0 + got));
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }
    let a = GaussianStats::from_features(&random_features(0, 10, 3)).unwrap();
    let b = GaussianStats::from_features(&random_features(0, 10, 4)).unwrap();
    assert!(frechet_distance(&a, &b).is_err());
}

#[test]
fn frechet_handles_rank_deficient_covariances() {
    // Fewer samples than dimensions, as with small evaluation sets.
    let a = GaussianStats::from_features(&random_features(4, 6, 16)).unwrap();
    let b = GaussianStats::from_features(&random_features(5, 6, 16)).unwrap();
    let got = frechet_distance(&a, &b).unwrap();
    let want = oracle_frechet(a.mean(), &a.covariance().unwrap(), b.mean(), &b.covariance().unwrap());
    assert!((got - want).abs() < 1e-6 * (1.0 + want), "{got} vs {want}");
}

proptest! {
    #[test]
    fn diagonal_covariances_match_elementwise_form(
        sa in prop::collection::vec(0.0f64..5.0, 4),
        sb in prop::collection::vec(0.0f64..5.0, 4),
        ma in prop::collection::vec(-3.0f64..3.0, 4),
        mb in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let d = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        let (mua, mub) = (DVector::from_column_slice(&ma), DVector::from_column_slice(&mb));
        let got = frechet_from_moments(&mua, &d(&sa), &mub, &d(&sb)).unwrap();
        let want: f64 = (0..4).map(|j| sa[j] + sb[j] - 2.0 * (sa[j] * sb[j]).sqrt()).sum::<f64>()
            + (&mua - &mub).norm_squared();
        prop_assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
        prop_assert!(got >= 0.0);
    }
}

fn videos(count: usize, seed: u64) -> (Vec<Vec<Tensor<f64>>>, Vec<SequenceTensors<f64>>) {
    let mut out = Vec::new();
    let mut tensors = Vec::new();
    for i in 0..count {
        let seq = render_sequence(&SceneConfig {
            seed: seed + i as u64,
            height: 32,
            width: 32,
            min_size: 6,
            max_size: 10,
            ..SceneConfig::default()
        })
        .unwrap();
        let t = SequenceTensors::<f64>::from_sequences(&[&seq], 0, seq.len(), 1).unwrap();
        out.push(t.frames.clone());
        tensors.push(t);
    }
    (out, tensors)
}

#[test]
fn video_fid_identity_symmetry_and_temporal_sensitivity() {
    let ex = VideoFeatureExtractor::new(ExtractorConfig::default()).unwrap();
    let policy = ClipPolicy::default();
    let (real, _) = videos(6, 10);
    let (other, _) = videos(6, 50);
    assert!(video_fid(&real, &real, &ex, &policy).unwrap() < 1e-6);
    let ab = video_fid(&real, &other, &ex, &policy).unwrap();
    let ba = video_fid(&other, &real, &ex, &policy).unwrap();
    assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shuffled: Vec<_> = real
        .iter()
        .map(|v| {
            let mut v = v.clone();
            v.shuffle(&mut rng);
            v
        })
        .collect();
    assert!(video_fid(&real, &shuffled, &ex, &policy).unwrap() > 0.0);
    assert!(video_fid::<f64>(&real, &[], &ex, &policy).is_err());
}

#[test]
fn extractor_is_deterministic() {
    let a = VideoFeatureExtractor::new(ExtractorConfig::default()).unwrap();
    let b = VideoFeatureExtractor::new(ExtractorConfig::default()).unwrap();
    let (v, _) = videos(1, 3);
    let fa = a.features(&v[0][..8]).unwrap();
    assert_eq!(fa, a.features(&v[0][..8]).unwrap());
    assert_eq!(fa, b.features(&v[0][..8]).unwrap());
    assert_eq!(fa[0].len(), 64);
    let other = VideoFeatureExtractor::new(ExtractorConfig { seed: 9, ..ExtractorConfig::default() }).unwrap();
    assert_ne!(fa, other.features(&v[0][..8]).unwrap());
    assert!(a.features(&v[0][..6]).is_err());
}

#[test]
fn ground_truth_frames_are_warp_consistent() {
    let (_, seqs) = videos(3, 20);
    for s in &seqs {
        assert!(warp_error(&s.frames, &s.flows, &s.valid).unwrap() < 1e-3);
        let mut shuffled = s.frames.clone();
        shuffled.reverse();
        let base = temporal_flicker(&s.frames, &s.flows, &s.valid).unwrap();
        assert!(temporal_flicker(&shuffled, &s.flows, &s.valid).unwrap() > base);
    }
}
