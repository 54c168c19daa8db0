use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::hyper::{FreezePolicy, Hyperparams};
use super::train::{train, TrainReport};
use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::model::{init_params, Architecture, HeadSpec, InitDist, LayerSpec, DEFAULT_FC2_HIDDEN};
use crate::prune::MaskSet;
use crate::rng::derive_seed;
use crate::tensor::Scalar;

/// Flat-input classifiers trained directly on pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaselineKind {
    /// Single dense layer.
    Logistic,
    /// Dense, ReLU, dense.
    Fc2 { hidden: usize },
}

impl BaselineKind {
    pub fn fc2() -> Self {
        BaselineKind::Fc2 {
            hidden: DEFAULT_FC2_HIDDEN,
        }
    }

    fn head(self) -> HeadSpec {
        match self {
            BaselineKind::Logistic => HeadSpec::Linear,
            BaselineKind::Fc2 { hidden } => HeadSpec::Fc2 { hidden },
        }
    }

    /// The classifier as an architecture: a flatten body and a trainable head.
    pub fn architecture(self, input_shape: [usize; 3], num_classes: usize) -> Result<Architecture> {
        let features: usize = input_shape.iter().product();
        let arch = Architecture {
            name: self.to_string(),
            input_shape,
            num_classes,
            body: vec![LayerSpec::flatten()],
            head: self.head().layers(features, num_classes)?,
            init: InitDist::FanInUniform,
        };
        arch.validate()?;
        Ok(arch)
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineKind::Logistic => f.write_str("logistic"),
            BaselineKind::Fc2 { hidden } if *hidden == DEFAULT_FC2_HIDDEN => f.write_str("fc2"),
            BaselineKind::Fc2 { hidden } => write!(f, "fc2:{hidden}"),
        }
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "logistic" {
            return Ok(BaselineKind::Logistic);
        }
        match s.parse::<HeadSpec>() {
            Ok(HeadSpec::Fc2 { hidden }) => Ok(BaselineKind::Fc2 { hidden }),
            _ => Err(Error::Config(format!("unknown baseline `{s}` (expected logistic, fc2 or fc2:N)"))),
        }
    }
}

impl TryFrom<String> for BaselineKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaselineKind> for String {
    fn from(k: BaselineKind) -> String {
        k.to_string()
    }
}

/// Trains a flat classifier from scratch on `task`.
pub fn baseline_run<T: Scalar>(kind: BaselineKind, task: &TaskSpec, hyper: &Hyperparams, seed: u64) -> Result<TrainReport> {
    let arch = kind.architecture(task.image_shape(), task.num_classes())?;
    let params = init_params::<T>(&arch, arch.init, derive_seed(seed, "baseline-init"))?;
    let masks = MaskSet::ones(&arch);
    let out = train(&arch, params, &masks, FreezePolicy::None, task, hyper, derive_seed(seed, "baseline-train"))?;
    Ok(out.report)
}
