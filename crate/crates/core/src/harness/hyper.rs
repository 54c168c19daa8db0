use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParameterSet, Section};
use crate::tensor::Scalar;

/// Optimizer and loop settings for one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    /// Piecewise-constant learning rate as `(first step, lr)` pairs; the
    /// first pair must start at step 0.
    pub lr: Vec<(u64, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Validation (and checkpoint) cadence in steps. Step 0 and the final
    /// step are always evaluated.
    pub eval_interval: u64,
}

impl Hyperparams {
    /// Learning rate `base`, divided by 10 at half and again at three
    /// quarters of `total_steps`.
    pub fn step_decay(base: f64, total_steps: u64) -> Self {
        let mut lr = vec![(0, base)];
        for (at, div) in [(total_steps / 2, 10.0), (total_steps * 3 / 4, 100.0)] {
            if at > lr[lr.len() - 1].0 {
                lr.push((at, base / div));
            }
        }
        Hyperparams {
            lr,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            total_steps,
            eval_interval: 200,
        }
    }

    /// Source-phase defaults.
    pub fn source_default() -> Self {
        Hyperparams::step_decay(0.05, 4000)
    }

    /// Target-phase defaults.
    pub fn target_default() -> Self {
        Hyperparams::step_decay(0.05, 2000)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.lr.first() {
            Some(&(0, _)) => {}
            _ => return bad("learning-rate schedule must start at step 0".into()),
        }
        if self.lr.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("learning-rate steps must increase".into());
        }
        if self.lr.iter().any(|&(_, r)| !(r > 0.0 && r.is_finite())) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be positive".into());
        }
        Ok(())
    }

    /// Learning rate used for the update that starts at `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr
            .iter()
            .take_while(|&&(s, _)| s <= step)
            .last()
            .map_or(self.lr[0].1, |&(_, r)| r)
    }

    pub fn is_eval_step(&self, step: u64) -> bool {
        step == 0 || step == self.total_steps || step % self.eval_interval == 0
    }
}

/// Which tensors stay fixed during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    #[default]
    None,
    /// Conv kernels, conv biases and every batchnorm tensor of the body.
    FreezeConv,
}

impl FreezePolicy {
    pub fn frozen_set<T: Scalar>(self, params: &ParameterSet<T>) -> HashSet<String> {
        match self {
            FreezePolicy::None => HashSet::new(),
            FreezePolicy::FreezeConv => params
                .iter()
                .filter(|(_, p)| p.section == Section::Body && p.role.is_conv_side())
                .map(|(k, _)| k.to_string())
                .collect(),
        }
    }

    /// Whether batchnorm running statistics stay fixed during fine-tuning.
    pub fn freezes_batchnorm(self) -> bool {
        self == FreezePolicy::FreezeConv
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezePolicy::None => "none",
            FreezePolicy::FreezeConv => "freeze-conv",
        })
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezePolicy::None),
            "freeze-conv" => Ok(FreezePolicy::FreezeConv),
            _ => Err(Error::Config(format!("unknown freeze policy `{s}`"))),
        }
    }
}
