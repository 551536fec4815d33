use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vidsynth::data::{render_sequence, SceneConfig, SequenceTensors, ShapeKind, ShapeSpec};
use vidsynth::discriminator::{
    assemble_clip, sample_image_pair, sample_video_clip, DiscriminatorConfig, ImageDiscriminator,
    VideoClipSample, VideoDiscriminator,
};
use vidsynth::warp::chain_flows;
use vidsynth_tensor::{ParamStore, Tensor};

fn chi_square_uniform(counts: &[usize]) -> (f64, f64) {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let crit = ChiSquared::new((counts.len() - 1) as f64)
        .unwrap()
        .inverse_cdf(0.99);
    (stat, crit)
}

#[test]
fn image_pair_index_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = [0usize; 10];
    for _ in 0..100_000 {
        counts[sample_image_pair(10, &mut rng).unwrap().index] += 1;
    }
    let (stat, crit) = chi_square_uniform(&counts);
    assert!(stat < crit, "chi2 {stat} >= {crit}");
}

#[test]
fn clip_start_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut counts = [0usize; 6];
    for _ in 0..100_000 {
        counts[sample_video_clip(8, 3, 1, &mut rng).unwrap().start] += 1;
    }
    let (stat, crit) = chi_square_uniform(&counts);
    assert!(stat < crit, "chi2 {stat} >= {crit}");
}

proptest! {
    #[test]
    fn clip_indices_stay_in_range_and_align(frames in 2usize..40, k in 2usize..5, sigma in 1usize..4, seed in 0u64..1000) {
        let stride = k.pow(sigma as u32 - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match sample_video_clip(frames, k, stride, &mut rng) {
            Ok(s) => {
                prop_assert_eq!(s.frames.len(), k);
                prop_assert!(*s.frames.last().unwrap() < frames);
                prop_assert_eq!(s.flow_spans.len(), k - 1);
                for (j, &(start, len)) in s.flow_spans.iter().enumerate() {
                    prop_assert_eq!(start, s.frames[j]);
                    prop_assert_eq!(start + len, s.frames[j + 1]);
                    prop_assert!(start + len - 1 < frames - 1);
                }
            }
            Err(_) => prop_assert!(frames < (k - 1) * stride + 1),
        }
    }

    #[test]
    fn image_pair_in_range(frames in 1usize..50, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(sample_image_pair(frames, &mut rng).unwrap().index < frames);
    }
}

#[test]
fn stride_two_clip_uses_every_third_frame() {
    let cfg = DiscriminatorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let s = sample_video_clip(12, cfg.k, cfg.stride(2), &mut rng).unwrap();
        let i = s.start;
        assert_eq!(s.frames, vec![i, i + 3, i + 6]);
    }
}

#[test]
fn chained_ground_truth_flow_matches_direct_displacement() {
    let v = [2, 1];
    let cfg = SceneConfig {
        width: 32,
        height: 32,
        num_frames: 6,
        camera_pan: [1, 0],
        shapes: Some(vec![ShapeSpec {
            kind: ShapeKind::Rectangle,
            size: [6, 6],
            position: [4, 4],
            velocity: v,
            color: [200, 200, 30],
        }]),
        ..SceneConfig::default()
    };
    let seq = render_sequence(&cfg).unwrap();
    assert!(seq.motions.iter().all(|m| m[0] == v), "no bounce expected");
    let st = SequenceTensors::<f64>::from_sequences(&[&seq], 0, 6, 1).unwrap();
    let chained = chain_flows(&st.flows, 1, 3).unwrap();
    let inst = &seq.source.instances[4];
    let mut checked = 0;
    for y in 0..32 {
        for x in 0..32 {
            let (u, w) = (chained.data()[y * 32 + x], chained.data()[1024 + y * 32 + x]);
            if inst.get(x, y) == 1 {
                assert!((u + 3.0 * v[0] as f64).abs() < 1e-5 && (w + 3.0 * v[1] as f64).abs() < 1e-5);
                checked += 1;
            } else if x + 3 < 32 && (0..=3).all(|k| seq.source.instances[4 - k].get(x + k, y) == 0) {
                // Background seen along the whole chain: three pan steps.
                assert!((u - 3.0).abs() < 1e-5 && w.abs() < 1e-5, "({x},{y}) {u} {w}");
                checked += 1;
            }
        }
    }
    assert!(checked > 500);
}

#[test]
fn image_scores_are_per_sample() {
    let store = ParamStore::<f64>::new(3);
    let cfg = DiscriminatorConfig {
        ndf: 4,
        ..DiscriminatorConfig::default()
    };
    let d = ImageDiscriminator::new(&cfg, 4, &store).unwrap();
    let seqs: Vec<_> = (0..3)
        .map(|s| {
            render_sequence(&SceneConfig {
                seed: s,
                width: 32,
                height: 32,
                num_frames: 3,
                min_size: 4,
                max_size: 12,
                ..SceneConfig::default()
            })
            .unwrap()
        })
        .collect();
    let batch = |order: &[usize]| {
        let refs: Vec<_> = order.iter().map(|&i| &seqs[i]).collect();
        let st = SequenceTensors::<f64>::from_sequences(&refs, 0, 1, 1).unwrap();
        d.forward(&st.frames[0], &st.source[0].labels).unwrap()
    };
    let a = batch(&[0, 1, 2]);
    let b = batch(&[2, 0, 1]);
    let dup = batch(&[1, 1, 0]);
    for (sa, (sb, sd)) in a.iter().zip(b.iter().zip(&dup)) {
        assert!(sa.score.all_finite());
        let n = sa.score.numel() / 3;
        let row = |t: &Tensor<f64>, i: usize| t.data()[i * n..(i + 1) * n].to_vec();
        assert_eq!(row(&sa.score, 0), row(&sb.score, 1));
        assert_eq!(row(&sa.score, 1), row(&sb.score, 2));
        assert_eq!(row(&sa.score, 2), row(&sb.score, 0));
        assert_eq!(row(&sd.score, 0), row(&sd.score, 1));
    }
}

#[test]
fn video_discriminator_scales() {
    let store = ParamStore::<f32>::new(4);
    let single = DiscriminatorConfig {
        temporal_scales: 1,
        ..DiscriminatorConfig::default()
    };
    assert_eq!(single.active_temporal_scales(12), vec![1]);
    let cfg = DiscriminatorConfig::default();
    let d = VideoDiscriminator::new(&cfg, 4, &store).unwrap();
    let seq = render_sequence(&SceneConfig::default()).unwrap();
    let st = SequenceTensors::<f32>::from_sequences(&[&seq], 0, 12, 1).unwrap();
    let active = cfg.active_temporal_scales(12);
    assert_eq!(active, vec![1, 2]);
    for sigma in active {
        let s = VideoClipSample::new(0, cfg.k, cfg.stride(sigma));
        let clip = assemble_clip(&st.frames, &st.flows, None, &s).unwrap();
        assert_eq!(clip.shape(), &[1, 13, 64, 64]);
        let out = d.forward(sigma, &clip).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|o| o.score.all_finite() && o.features.iter().all(|f| f.all_finite())));
    }
    assert!(d.forward(4, &Tensor::zeros(&[1, 13, 64, 64])).is_err());
}
