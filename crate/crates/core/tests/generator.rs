use std::collections::BTreeSet;
use std::sync::Arc;

use vidsynth::data::{render_sequence, SceneConfig, SequenceTensors};
use vidsynth::generator::{Generator, GeneratorConfig, Overrides, SourceInput};
use vidsynth_tensor::{ParamStore, Tensor};

fn tiny(scales: usize, size: usize) -> GeneratorConfig {
    GeneratorConfig {
        scales,
        base_channels: 8,
        downsamples: 2,
        res_blocks: 1,
        local_res_blocks: 1,
        height: size,
        width: size,
        ..GeneratorConfig::default()
    }
}

fn scene(frames: usize, size: usize, seed: u64) -> SequenceTensors<f64> {
    let cfg = SceneConfig {
        seed,
        num_frames: frames,
        width: size,
        height: size,
        min_size: 4,
        max_size: size / 2,
        ..SceneConfig::default()
    };
    let seq = render_sequence(&cfg).unwrap();
    SequenceTensors::from_sequences(&[&seq], 0, frames, 1).unwrap()
}

fn inputs(st: &SequenceTensors<f64>) -> Vec<SourceInput<f64>> {
    st.source.iter().map(|s| SourceInput::from_frame(s, None)).collect()
}

#[test]
fn fresh_network_output_shapes() {
    let g = Generator::<f32>::new(
        GeneratorConfig {
            scales: 1,
            base_channels: 8,
            ..GeneratorConfig::default()
        },
        ParamStore::new(1),
    )
    .unwrap();
    let cfg = SceneConfig::default();
    let seq = render_sequence(&cfg).unwrap();
    let st = SequenceTensors::<f32>::from_sequences(&[&seq], 0, 3, 1).unwrap();
    let src: Vec<_> = st.source.iter().map(|s| SourceInput::from_frame(s, None)).collect();
    let out = g.forward_step(&st.frames[..2], &src, Overrides::default()).unwrap();
    assert_eq!(out.frame.shape(), &[1, 3, 64, 64]);
    assert_eq!(out.flow.shape(), &[1, 2, 64, 64]);
    assert_eq!(out.mask.shape(), &[1, 1, 64, 64]);
    assert!(out.frame.all_finite() && out.flow.all_finite() && out.mask.all_finite());
    assert!(out.mask.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
}

#[test]
fn mask_one_returns_hallucination() {
    for fg_bg in [false, true] {
        let g = Generator::<f64>::new(GeneratorConfig { fg_bg, ..tiny(2, 16) }, ParamStore::new(2)).unwrap();
        let st = scene(3, 16, 0);
        let ov = Overrides {
            mask: Some(1.0),
            zero_flow: false,
        };
        let out = g.forward_step(&st.frames[..2], &inputs(&st), ov).unwrap();
        assert_eq!(out.frame.data(), out.hallucinated.data());
    }
}

#[test]
fn zero_mask_zero_flow_repeats_previous_frame() {
    let g = Generator::<f64>::new(tiny(2, 16), ParamStore::new(3)).unwrap();
    let st = scene(3, 16, 1);
    let ov = Overrides {
        mask: Some(0.0),
        zero_flow: true,
    };
    let out = g.forward_step(&st.frames[..2], &inputs(&st), ov).unwrap();
    assert_eq!(out.frame.data(), st.frames[1].data());
}

#[test]
fn full_warmup_of_window_length_synthesizes_nothing() {
    let g = Generator::<f64>::new(tiny(1, 16), ParamStore::new(4)).unwrap();
    let st = scene(3, 16, 2);
    let r = g.rollout(&inputs(&st)[..2], &st.frames[..2], Overrides::default()).unwrap();
    assert!(r.steps.is_empty());
    assert_eq!(r.frames.len(), 2);
    for (a, b) in r.frames.iter().zip(&st.frames) {
        assert_eq!(a.data(), b.data());
    }
    assert!(g.rollout(&inputs(&st), &st.frames[..3], Overrides::default()).is_err());
}

#[test]
fn rollout_is_deterministic_and_causal() {
    let g = Generator::<f64>::new(tiny(2, 16), ParamStore::new(5)).unwrap();
    let st = scene(12, 16, 3);
    let src = inputs(&st);
    let a = g.rollout(&src, &st.frames[..2], Overrides::default()).unwrap();
    let b = g.rollout(&src, &st.frames[..2], Overrides::default()).unwrap();
    let short = g.rollout(&src[..8], &st.frames[..2], Overrides::default()).unwrap();
    for t in 0..12 {
        assert_eq!(a.frames[t].data(), b.frames[t].data());
    }
    for t in 0..8 {
        assert_eq!(a.frames[t].data(), short.frames[t].data());
    }
    // Perturb source steps after t = 6: frames up to 6 must not change.
    let mut perturbed = src.clone();
    let other = inputs(&scene(12, 16, 99));
    perturbed[7..].clone_from_slice(&other[7..]);
    let c = g.rollout(&perturbed, &st.frames[..2], Overrides::default()).unwrap();
    for t in 0..=6 {
        assert_eq!(a.frames[t].data(), c.frames[t].data());
    }
    assert_ne!(a.frames[11].data(), c.frames[11].data());
}

#[test]
fn cold_start_rollout_covers_all_frames() {
    let g = Generator::<f64>::new(tiny(1, 16), ParamStore::new(6)).unwrap();
    let st = scene(5, 16, 4);
    let r = g.rollout(&inputs(&st), &[], Overrides::default()).unwrap();
    assert!(r.cold_start);
    assert_eq!(r.frames.len(), 5);
    assert_eq!(r.steps.len(), 5);
    assert_eq!(r.steps[0].mask.data().iter().filter(|&&m| m != 1.0).count(), 0);
    assert_eq!(r.flows().count(), 4);
}

#[test]
fn mask_and_flow_share_everything_but_output_layers() {
    let g = Generator::<f64>::new(tiny(2, 16), ParamStore::new(7)).unwrap();
    let m = g.mask_network_params();
    let w = g.flow_network_params();
    let only_m: Vec<_> = m.iter().filter(|p| !w.iter().any(|q| Arc::ptr_eq(p, q))).collect();
    let only_w: Vec<_> = w.iter().filter(|p| !m.iter().any(|q| Arc::ptr_eq(p, q))).collect();
    let names = |v: &[&Arc<vidsynth_tensor::Param<f64>>]| {
        v.iter().map(|p| p.name().to_string()).collect::<BTreeSet<_>>()
    };
    assert_eq!(
        names(&only_m),
        ["stage2.mask_out.bias", "stage2.mask_out.weight"].map(String::from).into()
    );
    assert_eq!(
        names(&only_w),
        ["stage2.flow_out.bias", "stage2.flow_out.weight"].map(String::from).into()
    );
    assert!(m.len() > 10);
}

#[test]
fn single_scale_outputs_at_input_resolution() {
    let g = Generator::<f64>::new(tiny(1, 16), ParamStore::new(8)).unwrap();
    let st = scene(3, 16, 5);
    let out = g.forward_step(&st.frames[..2], &inputs(&st), Overrides::default()).unwrap();
    assert_eq!(out.frame.shape(), &[1, 3, 16, 16]);
    assert!(g.sum_sites(&st.frames[..2], &inputs(&st)).unwrap().is_empty());
}

#[test]
fn sum_site_shapes_follow_channel_arithmetic() {
    let cfg = GeneratorConfig {
        scales: 3,
        base_channels: 16,
        ..tiny(3, 32)
    };
    let g = Generator::<f64>::new(cfg.clone(), ParamStore::new(9)).unwrap();
    let st = scene(3, 32, 6);
    let sites = g.sum_sites(&st.frames[..2], &inputs(&st)).unwrap();
    assert_eq!(sites.len(), 2);
    for site in sites {
        let j = site.stage;
        // Stage j-1 ends with base >> (j-2) channels at the resolution of stage j-1, which
        // is half of stage j's; stage j's encoder doubles base >> (j-1) after one stride.
        let (h, w) = cfg.stage_size(j - 1);
        let expect = vec![1, cfg.base_channels >> (j - 2), h, w];
        assert_eq!(site.coarse, expect);
        assert_eq!(site.fine, vec![1, 2 * (cfg.base_channels >> (j - 1)), h, w]);
    }
}

#[test]
fn frozen_coarse_stage_gets_no_gradient() {
    let store = ParamStore::<f64>::new(10);
    let g = Generator::new(tiny(2, 16), store.clone()).unwrap();
    store.set_trainable("stage1.", false);
    let st = scene(4, 16, 7);
    let r = g.rollout(&inputs(&st), &st.frames[..2], Overrides::default()).unwrap();
    let loss = r.frames[3].sqr().mean_all().add(&r.steps[0].flow.sqr().mean_all()).unwrap();
    let grads = loss.backward().unwrap();
    let mut g2_nonzero = 0;
    let frozen = g.params().iter().filter(|p| p.name().starts_with("stage1.")).count();
    assert!(frozen > 10);
    for p in g.params() {
        let grad = grads.get(p.id());
        if p.name().starts_with("stage1.") {
            assert!(grad.is_none(), "{} received a gradient", p.name());
        } else if let Some(gr) = grad {
            if gr.iter().any(|&v| v != 0.0) {
                g2_nonzero += 1;
            }
        }
    }
    assert!(g2_nonzero > 10, "only {g2_nonzero} stage-2 tensors got gradient");
}

#[test]
fn rejects_resolution_mismatch() {
    let g = Generator::<f64>::new(tiny(1, 16), ParamStore::new(11)).unwrap();
    let st = scene(3, 32, 8);
    assert!(g.forward_step(&st.frames[..2], &inputs(&st), Overrides::default()).is_err());
}

#[test]
fn every_mask_value_is_in_unit_interval() {
    for seed in 0..4 {
        let g = Generator::<f64>::new(tiny(2, 16), ParamStore::new(seed)).unwrap();
        // Large weights push the sigmoid towards saturation.
        for p in g.params() {
            if p.name().contains("mask_out/weight") {
                p.set_data(p.data().iter().map(|v| v * 500.0).collect()).unwrap();
            }
        }
        let st = scene(6, 16, seed);
        let r = g.rollout(&inputs(&st), &[], Overrides::default()).unwrap();
        for s in &r.steps {
            assert!(s.mask.data().iter().all(|&m| (0.0..=1.0).contains(&m)));
        }
    }
}

#[test]
fn multimodal_requires_features() {
    let cfg = GeneratorConfig {
        multimodal: true,
        ..tiny(1, 16)
    };
    let g = Generator::<f64>::new(cfg, ParamStore::new(12)).unwrap();
    let st = scene(3, 16, 9);
    assert!(g.forward_step(&st.frames[..2], &inputs(&st), Overrides::default()).is_err());
    let enc = g.encoder().unwrap();
    let src: Vec<_> = st
        .source
        .iter()
        .zip(&st.frames)
        .map(|(s, x)| SourceInput::from_frame(s, Some(enc.encode(x, &s.instances).unwrap())))
        .collect();
    let out = g.forward_step(&st.frames[..2], &src, Overrides::default()).unwrap();
    assert!(out.frame.all_finite());
    let _ = Tensor::<f64>::zeros(&[1]);
}
