use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::hyper::{FreezePolicy, Hyperparams};
use crate::data::{augment_with, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, backward, forward, recalibrate_batchnorm, Architecture, Mode, ParameterSet, PassOptions};
use crate::prune::{apply_mask_in_place, DensityScope, MaskSet};
use crate::rng::Rng;
use crate::tensor::Scalar;
use crate::trajectory::Trajectory;

const EVAL_BATCH: usize = 128;

/// Outcome of one training run, read at the step of minimum validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_step: u64,
    pub best_val_loss: f64,
    pub test_accuracy: f64,
    pub density_prunable: f64,
    pub density_whole: f64,
    pub steps_to_best: u64,
    /// Steps actually run; short of the budget only for divergent runs.
    pub steps_run: u64,
    pub divergent: bool,
    pub wall_ms: u64,
}

impl TrainReport {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        TrainReport { wall_ms: 0, ..self.clone() } == TrainReport { wall_ms: 0, ..other.clone() }
    }
}

pub struct TrainOutcome<T: Scalar> {
    pub report: TrainReport,
    pub trajectory: Trajectory<T>,
    pub final_params: ParameterSet<T>,
}

/// Mean loss and accuracy over a whole split, in eval mode.
pub fn evaluate<T: Scalar>(arch: &Architecture, params: &ParameterSet<T>, data: &Dataset) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let (x, y) = data.batch::<T>(chunk);
        let fwd = forward(arch, params, &x, Some(&y), PassOptions::new(Mode::Eval))?;
        loss += fwd.loss.expect("labels given").to_f64() * chunk.len() as f64;
        correct += argmax_rows(&fwd.logits).iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Re-estimates batchnorm running statistics on `data` without augmentation.
pub fn recalibrate_on<T: Scalar>(arch: &Architecture, params: &mut ParameterSet<T>, data: &Dataset) -> Result<()> {
    let all: Vec<usize> = (0..data.len()).collect();
    let batches = all.chunks(EVAL_BATCH).map(|c| data.batch::<T>(c).0);
    recalibrate_batchnorm(arch, params, batches)
}

/// Epoch-wise shuffled index stream.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Sampler {
    fn new(n: usize, rng: Rng) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            cursor: n,
            rng,
        };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.cursor == self.order.len() {
                self.refill();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Trains `params` on `task` with SGD, momentum and L2 weight decay.
///
/// Masked coordinates get no gradient and no momentum and are re-zeroed after
/// every update; tensors frozen by `freeze` are never written. Validation
/// loss is measured on `task.val` at every evaluation step and each
/// evaluation is recorded in the returned trajectory. Test accuracy is
/// measured on the recorded parameters with the lowest validation loss.
///
/// A non-finite loss ends the run early with `divergent` set; the report then
/// describes the best checkpoint seen before divergence.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    arch: &Architecture,
    params: ParameterSet<T>,
    masks: &MaskSet,
    freeze: FreezePolicy,
    task: &TaskSpec,
    hyper: &Hyperparams,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    train_into(arch, params, masks, freeze, task, hyper, seed, Trajectory::in_memory(arch))
}

/// [`train`] recording into a caller-supplied (e.g. on-disk) trajectory.
#[allow(clippy::too_many_arguments)]
pub fn train_into<T: Scalar>(
    arch: &Architecture,
    mut params: ParameterSet<T>,
    masks: &MaskSet,
    freeze: FreezePolicy,
    task: &TaskSpec,
    hyper: &Hyperparams,
    seed: u64,
    mut trajectory: Trajectory<T>,
) -> Result<TrainOutcome<T>> {
    let start = Instant::now();
    hyper.validate()?;
    params.check_against(arch)?;
    masks.check_against(&params)?;
    if task.image_shape() != arch.input_shape || task.num_classes() != arch.num_classes {
        return Err(Error::Config(format!(
            "task `{}` ({:?}, {} classes) does not fit architecture `{}` ({:?}, {} classes)",
            task.name,
            task.image_shape(),
            task.num_classes(),
            arch.name,
            arch.input_shape,
            arch.num_classes
        )));
    }
    if !trajectory.is_empty() {
        return Err(Error::contract("training needs an empty trajectory"));
    }
    apply_mask_in_place(&mut params, masks)?;
    let frozen = freeze.frozen_set(&params);
    let mut velocity = params.zeros_like();
    let mut sampler = Sampler::new(task.train.len(), Rng::with_stream(seed, 1));
    let mut aug_rng = Rng::with_stream(seed, 2);
    let momentum = T::from_f64(hyper.momentum);
    let decay = T::from_f64(hyper.weight_decay);

    let val0 = evaluate(arch, &params, &task.val)?.0;
    if !val0.is_finite() {
        return Err(Error::NonFinite {
            layer: "initial validation loss".into(),
        });
    }
    trajectory.record(0, &params, val0)?;

    let mut divergent = false;
    let mut steps_run = 0;
    for step in 0..hyper.total_steps {
        let idx = sampler.next(hyper.batch_size);
        let (mut x, y) = task.train.batch::<T>(&idx);
        if task.augment {
            x = augment_with(&x, &mut aug_rng);
        }
        let opts = PassOptions::new(Mode::Train).frozen(&frozen);
        let fwd = match forward(arch, &params, &x, Some(&y), opts) {
            Ok(f) => f,
            Err(e) if is_divergence(&e) => {
                divergent = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let mut grads = backward(arch, &params, &fwd)?;
        fwd.commit_running_stats(&mut params)?;
        apply_mask_in_place(&mut grads, masks)?;
        let lr = T::from_f64(hyper.lr_at(step));
        for ((name, p), ((_, g), (_, v))) in params
            .iter_mut()
            .zip(grads.iter_mut().zip(velocity.iter_mut()))
        {
            if !p.is_trainable() || frozen.contains(name) {
                continue;
            }
            let w = p.tensor.data_mut();
            let g = g.tensor.data();
            let v = v.tensor.data_mut();
            for i in 0..w.len() {
                v[i] = momentum * v[i] + (g[i] + decay * w[i]);
                w[i] = w[i] - lr * v[i];
            }
        }
        apply_mask_in_place(&mut velocity, masks)?;
        apply_mask_in_place(&mut params, masks)?;
        steps_run = step + 1;

        if hyper.is_eval_step(steps_run) {
            match evaluate(arch, &params, &task.val) {
                Ok((val_loss, _)) if val_loss.is_finite() => trajectory.record(steps_run, &params, val_loss)?,
                Ok(_) => divergent = true,
                Err(e) if is_divergence(&e) => divergent = true,
                Err(e) => return Err(e),
            }
            if divergent {
                break;
            }
        }
    }

    let (best_step, best) = trajectory.best_checkpoint()?;
    let best_val_loss = trajectory.checkpoints()[trajectory.best_index().expect("non-empty")].val_loss;
    let (_, test_accuracy) = evaluate(arch, &best, &task.test)?;
    let report = TrainReport {
        best_step,
        best_val_loss,
        test_accuracy,
        density_prunable: if masks.is_empty() { 1.0 } else { masks.density(DensityScope::Prunable) },
        density_whole: masks.density(DensityScope::whole_model(&params)),
        steps_to_best: best_step,
        steps_run,
        divergent,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok(TrainOutcome {
        report,
        trajectory,
        final_params: params,
    })
}
