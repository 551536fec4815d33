use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidsynth::warp::{compose, compose_fg_bg, warp};
use vidsynth_tensor::gradcheck::check_gradients;
use vidsynth_tensor::{Init, ParamStore, Tensor};

fn weights(n: usize) -> Tensor<f64> {
    let w = (0..n).map(|i| ((i * 7919 % 13) as f64 - 6.5) / 6.0).collect();
    Tensor::from_vec(w, &[n]).unwrap()
}

fn project(t: &Tensor<f64>) -> Tensor<f64> {
    let flat = t.reshape(&[t.numel()]).unwrap();
    flat.mul(&weights(t.numel())).unwrap().sum_all()
}

// Flow values away from integers so the bilinear kink is never straddled.
fn fractional_flow(seed: u64, shape: &[usize]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| rng.random_range(-2i32..2) as f64 + rng.random_range(0.2..0.8))
        .collect()
}

#[test]
fn warp_gradients_wrt_input_and_flow() {
    let store = ParamStore::<f64>::new(11);
    let root = store.root();
    let x = root
        .var("x", &[1, 2, 4, 4], Init::Uniform { lo: -1.0, hi: 1.0 })
        .unwrap();
    let f = root.var("f", &[1, 2, 4, 4], Init::Zeros).unwrap();
    f.set_data(fractional_flow(3, &[1, 2, 4, 4]).iter().map(|v| v * 0.5).collect())
        .unwrap();
    let params: Vec<Arc<_>> = vec![x.clone(), f.clone()];
    let report = check_gradients(
        &params,
        || Ok(project(&warp(&x.tensor(), &f.tensor()).unwrap())),
        1e-6,
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.checked == 64);
}

#[test]
fn warp_gradients_several_seeds() {
    for seed in 0..5 {
        let store = ParamStore::<f64>::new(seed);
        let root = store.root();
        let x = root
            .var("x", &[2, 1, 4, 4], Init::Uniform { lo: -1.0, hi: 1.0 })
            .unwrap();
        let f = root.var("f", &[2, 2, 4, 4], Init::Zeros).unwrap();
        f.set_data(fractional_flow(seed + 100, &[2, 2, 4, 4])).unwrap();
        let report = check_gradients(
            &[x.clone(), f.clone()],
            || Ok(project(&warp(&x.tensor(), &f.tensor()).unwrap())),
            1e-6,
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn compose_gradients() {
    let store = ParamStore::<f64>::new(5);
    let root = store.root();
    let w = root.var("w", &[1, 3, 3, 3], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
    let hf = root.var("hf", &[1, 3, 3, 3], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
    let hb = root.var("hb", &[1, 3, 3, 3], Init::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
    let m = root.var("m", &[1, 1, 3, 3], Init::Uniform { lo: 0.2, hi: 0.8 }).unwrap();
    let mb = Tensor::from_vec((0..9).map(|i| (i % 2) as f64).collect(), &[1, 1, 3, 3]).unwrap();
    let report = check_gradients(
        &[w.clone(), hf.clone(), hb.clone(), m.clone()],
        || {
            let a = compose(&w.tensor(), &hf.tensor(), &m.tensor()).unwrap();
            let b = compose_fg_bg(&w.tensor(), &hf.tensor(), &hb.tensor(), &m.tensor(), &mb).unwrap();
            Ok(project(&a.add(&b)?))
        },
        1e-6,
        1e-3,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
