mod common;

use std::collections::HashSet;

use common::{gradcheck_case, layer_case, random_params, LAYER_CASES};
use ticket_core::model::{
    backward, forward, init_params, preset, Architecture, InitDist, LayerSpec, Mode, ParameterSet, PassOptions,
};
use ticket_core::rng::Rng;
use ticket_core::tensor::Tensor;

#[test]
fn every_layer_kind_matches_finite_differences() {
    let mut cases = 0;
    for kind in LAYER_CASES {
        let arch = layer_case(kind);
        let worst = (0..10).map(|seed| gradcheck_case(&arch, seed)).fold(0.0, f64::max);
        assert!(worst < 1e-5, "{kind}: max relative error {worst:e}");
        cases += 10;
    }
    assert!(cases >= 100);
}

#[test]
fn zero_weights_give_uniform_softmax() {
    let arch = preset("fc-small", [1, 4, 4], 10).unwrap();
    let mut params: ParameterSet<f64> = init_params(&arch, InitDist::FanInUniform, 0).unwrap();
    for (_, p) in params.iter_mut() {
        p.tensor.data_mut().fill(0.0);
    }
    let x = Tensor::from_fn(&[3, 1, 4, 4], |i| i as f64 * 0.1);
    let fwd = forward(&arch, &params, &x, Some(&[0, 4, 9]), PassOptions::new(Mode::Eval)).unwrap();
    assert!((fwd.loss.unwrap() - 10f64.ln()).abs() < 1e-12);
}

fn single_dense(d: usize, k: usize) -> Architecture {
    Architecture {
        name: "dense".into(),
        input_shape: [1, 1, d],
        num_classes: k,
        body: vec![LayerSpec::flatten()],
        head: vec![LayerSpec::dense(d, k)],
        init: InitDist::FanInUniform,
    }
}

#[test]
fn identity_dense_recovers_one_hot_index() {
    let arch = single_dense(5, 5);
    let mut params: ParameterSet<f64> = init_params(&arch, InitDist::FanInUniform, 0).unwrap();
    let w = params.get_mut("head.0.weight").unwrap().tensor.data_mut();
    w.fill(0.0);
    for i in 0..5 {
        w[i * 5 + i] = 1.0;
    }
    let x = Tensor::from_fn(&[5, 1, 1, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 });
    let fwd = forward(&arch, &params, &x, None, PassOptions::new(Mode::Eval)).unwrap();
    assert_eq!(fwd.predictions(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn one_small_gradient_step_descends() {
    let arch = layer_case("relu");
    for seed in 0..5 {
        let mut params = random_params(&arch, seed);
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[8, 2, 6, 6], |_| rng.normal());
        let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let fwd = forward(&arch, &params, &x, Some(&y), PassOptions::new(Mode::Train)).unwrap();
        let before = fwd.loss.unwrap();
        let grads = backward(&arch, &params, &fwd).unwrap();
        for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
            for (w, d) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
                *w -= 1e-3 * d;
            }
        }
        let after = forward(&arch, &params, &x, Some(&y), PassOptions::new(Mode::Train))
            .unwrap()
            .loss
            .unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn frozen_tensors_get_exact_zero_gradient() {
    let arch = layer_case("batchnorm");
    let params = random_params(&arch, 3);
    let frozen: HashSet<String> = ["body.0.weight", "body.1.gamma"].iter().map(|s| s.to_string()).collect();
    let mut rng = Rng::new(3);
    let x = Tensor::from_fn(&[4, 2, 6, 6], |_| rng.normal());
    let opts = PassOptions::new(Mode::Train).frozen(&frozen);
    let fwd = forward(&arch, &params, &x, Some(&[0, 1, 2, 0]), opts).unwrap();
    let grads = backward(&arch, &params, &fwd).unwrap();
    for (name, g) in grads.iter() {
        let zero = g.tensor.data().iter().all(|v| v.to_bits() == 0);
        if frozen.contains(name) || !g.is_trainable() {
            assert!(zero, "{name} should have an exact zero gradient");
        } else {
            assert!(!zero, "{name} should have a gradient");
        }
    }
}

#[test]
fn gradient_vanishes_on_memorized_separable_batch() {
    let arch = single_dense(2, 2);
    let mut params: ParameterSet<f64> = init_params(&arch, InitDist::FanInUniform, 1).unwrap();
    let x = Tensor::from_slice(&[4, 1, 1, 2], &[1.0, 0.5, 0.8, 1.0, -1.0, -0.4, -0.6, -1.0]).unwrap();
    let y = [0, 0, 1, 1];
    let mut norm = f64::INFINITY;
    for _ in 0..20_000 {
        let fwd = forward(&arch, &params, &x, Some(&y), PassOptions::new(Mode::Train)).unwrap();
        let grads = backward(&arch, &params, &fwd).unwrap();
        norm = grads
            .iter()
            .flat_map(|(_, g)| g.tensor.data().to_vec())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm < 1e-6 {
            break;
        }
        for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
            for (w, d) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
                *w -= 50.0 * d;
            }
        }
    }
    assert!(norm < 1e-6, "gradient norm {norm:e}");
}

#[test]
fn repeated_commits_converge_to_batch_mean() {
    let arch = layer_case("batchnorm");
    let mut params = random_params(&arch, 0);
    let x = Tensor::from_fn(&[4, 2, 6, 6], |i| ((i % 72) as f64 * 0.37).sin());
    for _ in 0..400 {
        let fwd = forward(&arch, &params, &x, None, PassOptions::new(Mode::Train)).unwrap();
        fwd.commit_running_stats(&mut params).unwrap();
    }
    let mean = params.get("body.1.running_mean").unwrap().tensor.data().to_vec();
    let fwd = forward(&arch, &params, &x, None, PassOptions::new(Mode::Train).keep_activations()).unwrap();
    let conv = &fwd.activations[0].1;
    let per = 36;
    for (ch, m) in mean.iter().enumerate() {
        let batch_mean: f64 = (0..4)
            .flat_map(|n| conv.data()[(n * 3 + ch) * per..(n * 3 + ch + 1) * per].to_vec())
            .sum::<f64>()
            / (4 * per) as f64;
        assert!((batch_mean - m).abs() < 1e-9, "channel {ch}: {batch_mean} vs {m}");
    }
}

#[test]
fn recalibration_sets_population_statistics() {
    let arch = layer_case("batchnorm");
    let mut params = random_params(&arch, 1);
    let x = Tensor::from_fn(&[6, 2, 6, 6], |i| ((i as f64) * 0.13).cos() * 2.0 + 0.5);
    ticket_core::model::recalibrate_batchnorm(&arch, &mut params, [x.clone()]).unwrap();
    let committed = {
        let mut fresh = random_params(&arch, 1);
        for p in ["body.1.running_mean", "body.1.running_var"] {
            fresh.get_mut(p).unwrap().tensor.data_mut().fill(0.0);
        }
        let fwd = forward(&arch, &fresh, &x, None, PassOptions::new(Mode::Train)).unwrap();
        // One commit from zero stores momentum times the batch statistics.
        fwd.commit_running_stats(&mut fresh).unwrap();
        fresh
    };
    for p in ["body.1.running_mean", "body.1.running_var"] {
        let got = params.get(p).unwrap().tensor.data();
        let scaled = committed.get(p).unwrap().tensor.data();
        let ratio = scaled[0] / got[0];
        for (a, b) in got.iter().zip(scaled) {
            assert!((b / a - ratio).abs() < 1e-12, "{p}");
        }
    }
}
