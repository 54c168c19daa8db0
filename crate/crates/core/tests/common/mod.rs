//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use ticket_core::data::{SyntheticSpec, TaskSpec};
use ticket_core::gradcheck::{finite_diff_gradient, max_relative_error};
use ticket_core::harness::Hyperparams;
use ticket_core::model::{
    backward, forward, init_params, Architecture, InitDist, LayerKind, LayerSpec, Mode, ParameterSet, PassOptions,
};
use ticket_core::rng::Rng;
use ticket_core::tensor::Tensor;

pub const GRAD_EPS: f64 = 1e-6;
/// Coordinates with |gradient| below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Layer kinds covered by the gradient check, each wrapped in a tiny network.
pub const LAYER_CASES: [&str; 12] = [
    "dense",
    "relu",
    "conv3x3",
    "conv3x3-stride2",
    "conv1x1",
    "conv-bias",
    "maxpool",
    "avgpool",
    "batchnorm",
    "residual-identity",
    "residual-projection",
    "flatten-xent",
];

fn conv_bias(cin: usize, cout: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            pad: 1,
            bias: true,
        },
        prunable: true,
    }
}

/// A small network exercising `kind`, on `[2, 6, 6]` inputs with 3 classes.
pub fn layer_case(kind: &str) -> Architecture {
    let (c, h, k) = (2, 6, 3);
    let conv_head = |ch: usize, side: usize| vec![LayerSpec::flatten(), LayerSpec::dense(ch * side * side, k)];
    let body: Vec<LayerSpec> = match kind {
        "dense" => vec![LayerSpec::flatten(), LayerSpec::dense(c * h * h, 5)],
        "relu" => vec![LayerSpec::flatten(), LayerSpec::dense(c * h * h, 5), LayerSpec::relu()],
        "conv3x3" => vec![LayerSpec::conv(c, 3, 3, 1)],
        "conv3x3-stride2" => vec![LayerSpec::conv(c, 3, 3, 2)],
        "conv1x1" => vec![LayerSpec::conv(c, 3, 1, 1)],
        "conv-bias" => vec![conv_bias(c, 3)],
        "maxpool" => vec![LayerSpec::conv(c, 3, 3, 1), LayerSpec::maxpool(2)],
        "avgpool" => vec![LayerSpec::conv(c, 4, 3, 1), LayerSpec::avgpool()],
        "batchnorm" => vec![LayerSpec::conv(c, 3, 3, 1), LayerSpec::batchnorm(3), LayerSpec::relu()],
        "residual-identity" => vec![LayerSpec::residual(
            vec![LayerSpec::conv(c, c, 3, 1), LayerSpec::batchnorm(c), LayerSpec::relu(), LayerSpec::conv(c, c, 3, 1)],
            vec![],
        )],
        "residual-projection" => vec![LayerSpec::residual(
            vec![LayerSpec::conv(c, 3, 3, 2), LayerSpec::batchnorm(3)],
            vec![LayerSpec::conv(c, 3, 1, 2), LayerSpec::batchnorm(3)],
        )],
        "flatten-xent" => vec![LayerSpec::flatten()],
        other => panic!("unknown layer case {other}"),
    };
    let head = match kind {
        "dense" | "relu" => vec![LayerSpec::dense(5, k)],
        "conv3x3" | "conv1x1" | "conv-bias" | "batchnorm" => conv_head(3, h),
        "conv3x3-stride2" | "residual-projection" | "maxpool" => conv_head(3, h / 2),
        "avgpool" => vec![LayerSpec::dense(4, k)],
        "residual-identity" => conv_head(c, h),
        _ => vec![LayerSpec::dense(c * h * h, k)],
    };
    let arch = Architecture {
        name: kind.to_string(),
        input_shape: [c, h, h],
        num_classes: k,
        body,
        head,
        init: InitDist::FanInUniform,
    };
    arch.validate().expect("valid case");
    arch
}

/// Initial parameters with every trainable entry (biases, batchnorm affine
/// included) jittered so no gradient is structurally zero.
pub fn random_params(arch: &Architecture, seed: u64) -> ParameterSet<f64> {
    let mut p: ParameterSet<f64> = init_params(arch, InitDist::FanInUniform, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0xa5a5);
    for (_, param) in p.iter_mut() {
        if param.is_trainable() {
            for v in param.tensor.data_mut() {
                *v += rng.uniform_range(-0.3, 0.3);
            }
        }
    }
    p
}

/// Max relative error between analytic and finite-difference gradients of
/// the training-mode loss for one random case.
pub fn gradcheck_case(arch: &Architecture, seed: u64) -> f64 {
    let params = random_params(arch, seed);
    let mut rng = Rng::new(seed.wrapping_mul(31) + 7);
    let [c, h, w] = arch.input_shape;
    let n = 4;
    let x = Tensor::from_fn(&[n, c, h, w], |_| rng.normal());
    let labels: Vec<usize> = (0..n).map(|_| rng.below(arch.num_classes as u64) as usize).collect();
    let fwd = forward(arch, &params, &x, Some(&labels), PassOptions::new(Mode::Train)).unwrap();
    let analytic = backward(arch, &params, &fwd).unwrap();
    let numeric = finite_diff_gradient(
        |p| {
            let f = forward(arch, p, &x, Some(&labels), PassOptions::new(Mode::Train))?;
            Ok(f.loss.expect("labels"))
        },
        &params,
        GRAD_EPS,
    )
    .unwrap();
    max_relative_error(&analytic, &numeric, GRAD_FLOOR)
}

/// Separable two-class task: two fixed motifs, no noise or jitter.
pub fn separable_task(shape: [usize; 3], per_class: usize, augment: bool) -> TaskSpec {
    let spec = SyntheticSpec {
        num_classes: 2,
        shape,
        train_per_class: per_class,
        val_per_class: 20,
        test_per_class: 50,
        noise: 0.0,
        jitter: 0,
        contrast: 0.0,
        motif_offset: 0,
    };
    TaskSpec::synthetic("separable", &spec, 1, augment).unwrap()
}

pub fn quick_hyper(lr: f64, steps: u64, batch: usize, eval: u64) -> Hyperparams {
    let mut h = Hyperparams::step_decay(lr, steps);
    h.batch_size = batch;
    h.eval_interval = eval;
    h
}

/// A transfer small enough to run many times: 3-class RGB source, 2-class
/// grayscale target, a few dozen steps per phase.
pub fn tiny_transfer(seeds: Vec<u64>, rounds: u32) -> ticket_core::harness::ExperimentConfig {
    use ticket_core::harness::{ExperimentConfig, FreezePolicy, PhaseHyper, TaskConfig};
    use ticket_core::prune::PruneSchedule;
    use ticket_core::trajectory::ResetMode;
    let task = |classes, shape, offset| SyntheticSpec {
        num_classes: classes,
        shape,
        train_per_class: 12,
        val_per_class: 6,
        test_per_class: 10,
        noise: 0.1,
        jitter: 1,
        contrast: 0.2,
        motif_offset: offset,
    };
    ExperimentConfig {
        arch: "micro-resnet".into(),
        source: TaskConfig::synthetic("src", task(3, [3, 8, 8], 0)),
        target: TaskConfig::synthetic("tgt", task(2, [1, 8, 8], 5)),
        schedule: PruneSchedule::iterative(rounds),
        reset: vec![ResetMode::Late, ResetMode::Ticket, ResetMode::Random { seed: 0 }],
        freeze: FreezePolicy::None,
        head_spec: None,
        hyper: PhaseHyper {
            source: quick_hyper(0.05, 24, 8, 8),
            target: quick_hyper(0.05, 16, 8, 4),
        },
        seeds,
        levels: None,
        data_seed: 0,
    }
}
