//! Times forward+backward steps of a preset on random input.
//!
//! cargo run --release -p ticket-core --example throughput -- micro-resnet 16 3 16

use std::time::Instant;

use ticket_core::model::{backward, forward, init_params, preset, InitDist, Mode, PassOptions, ParameterSet};
use ticket_core::rng::Rng;
use ticket_core::tensor::Tensor;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let name = args.get(1).map(String::as_str).unwrap_or("micro-resnet");
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let channels: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let side: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let arch = preset(name, [channels, side, side], 10).expect("preset");
    let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 0).expect("init");
    let mut rng = Rng::new(1);
    let x = Tensor::from_fn(&[batch, channels, side, side], |_| rng.normal() as f32);
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let steps = 20;
    let start = Instant::now();
    for _ in 0..steps {
        let fwd = forward(&arch, &params, &x, Some(&labels), PassOptions::new(Mode::Train)).expect("forward");
        let _ = backward(&arch, &params, &fwd).expect("backward");
    }
    let per_step = start.elapsed().as_secs_f64() / steps as f64;
    println!(
        "{name}: {} params, batch {batch}: {:.1} ms/step",
        arch.param_count(),
        per_step * 1e3
    );
}
