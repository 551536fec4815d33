use vidsynth::data::{render_sequence, PairedSequence, SceneConfig, SequenceTensors};
use vidsynth::generator::{Generator, GeneratorConfig, Overrides, SourceInput};
use vidsynth::inference::{evaluate, fit_instance_features, generate_video, EvalOptions, Synthesizer};
use vidsynth::eval::ClipPolicy;
use vidsynth_tensor::ParamStore;

fn seq(frames: usize, size: usize, seed: u64) -> PairedSequence {
    render_sequence(&SceneConfig {
        seed,
        num_frames: frames,
        width: size,
        height: size,
        min_size: 4,
        max_size: size / 2,
        ..SceneConfig::default()
    })
    .unwrap()
}

fn generator(multimodal: bool, size: usize) -> Generator<f32> {
    Generator::new(
        GeneratorConfig {
            scales: 1,
            base_channels: 8,
            downsamples: 2,
            res_blocks: 1,
            local_res_blocks: 1,
            multimodal,
            height: size,
            width: size,
            ..GeneratorConfig::default()
        },
        ParamStore::new(11),
    )
    .unwrap()
}

fn mean_abs_diff(a: &[vidsynth_tensor::Tensor<f32>], b: &[vidsynth_tensor::Tensor<f32>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data().iter()) {
            total += f64::from((p - q).abs());
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn streaming_matches_batch_rollout() {
    let g = generator(false, 16);
    let s = seq(7, 16, 2);
    let st = SequenceTensors::<f32>::from_sequences(&[&s], 0, 7, 1).unwrap();
    let sources: Vec<_> = st.source.iter().map(|f| SourceInput::from_frame(f, None)).collect();
    let reference = g.rollout(&sources, &st.frames[..2], Overrides::default()).unwrap();
    let streamed = generate_video(&g, None, &s, 2, 0).unwrap();
    assert_eq!(streamed.len(), 7);
    for (a, b) in streamed.iter().zip(&reference.frames) {
        assert_eq!(a.data(), b.data());
    }
    let cold = generate_video(&g, None, &s, 0, 0).unwrap();
    let cold_ref = g.rollout(&sources, &[], Overrides::default()).unwrap();
    assert_eq!(cold[3].data(), cold_ref.frames[3].data());
}

#[test]
fn shorter_source_gives_a_prefix() {
    let g = generator(false, 16);
    let long = seq(10, 16, 4);
    let mut short = long.clone();
    short.source.labels.truncate(6);
    short.source.instances.truncate(6);
    short.frames.truncate(6);
    short.flows.truncate(5);
    short.validity.truncate(5);
    let a = generate_video(&g, None, &long, 2, 0).unwrap();
    let b = generate_video(&g, None, &short, 2, 0).unwrap();
    for t in 0..6 {
        assert_eq!(a[t].data(), b[t].data());
    }
}

#[test]
fn priming_after_synthesis_is_refused() {
    let g = generator(false, 16);
    let s = seq(4, 16, 1);
    let mut syn = Synthesizer::new(&g, None, s.source.classes.clone(), (16, 16), 0).unwrap();
    syn.prime(&s.frames[0], &s.source.labels[0], &s.source.instances[0]).unwrap();
    syn.step(&s.source.labels[1], &s.source.instances[1]).unwrap();
    assert!(syn.prime(&s.frames[2], &s.source.labels[2], &s.source.instances[2]).is_err());
    assert_eq!(syn.position(), 2);
    assert!(Synthesizer::new(&g, None, s.source.classes.clone(), (24, 24), 0).is_err());
}

#[test]
fn feature_seeds_control_appearance() {
    let g = generator(true, 16);
    let train: Vec<_> = (0..4).map(|i| seq(4, 16, 20 + i)).collect();
    let model = fit_instance_features(&g, &train, 2, 1, 5).unwrap();
    assert_eq!(model.dim, 3);
    let present: std::collections::BTreeSet<u8> = train
        .iter()
        .flat_map(|s| s.source.labels.iter().flat_map(|l| l.data.iter().copied()))
        .collect();
    assert_eq!(model.classes.keys().copied().collect::<std::collections::BTreeSet<_>>(), present);
    for comps in model.classes.values() {
        let w: f64 = comps.iter().map(|c| c.weight).sum();
        assert!((w - 1.0).abs() < 1e-9);
    }

    let s = seq(6, 16, 40);
    let a = generate_video(&g, Some(&model), &s, 0, 1).unwrap();
    let b = generate_video(&g, Some(&model), &s, 0, 1).unwrap();
    let c = generate_video(&g, Some(&model), &s, 0, 2).unwrap();
    assert_eq!(mean_abs_diff(&a, &b), 0.0);
    assert!(mean_abs_diff(&a, &c) > 0.0);
    assert!(generate_video(&g, None, &s, 0, 1).is_err());
}

#[test]
fn evaluation_reports_finite_values() {
    let g = generator(false, 16);
    let val: Vec<_> = (0..3).map(|i| seq(12, 16, 60 + i)).collect();
    let opts = EvalOptions {
        clips: ClipPolicy { length: 8, stride: 4 },
        ..EvalOptions::default()
    };
    let r = evaluate(&g, None, &val, &opts).unwrap();
    assert_eq!(r.sequences, 3);
    assert!(r.fid.is_finite() && r.fid > 0.0);
    assert!(r.flicker.is_finite());
    assert!(r.real_warp_error < 1e-3, "{}", r.real_warp_error);
    let again = evaluate(&g, None, &val, &opts).unwrap();
    assert_eq!(r, again);
}
