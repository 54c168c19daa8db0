use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::arch::{Architecture, LayerSpec, Section};
use crate::model::init::init_specs;
use crate::model::params::ParameterSet;
use crate::tensor::Scalar;

/// Default hidden width of the two-layer head.
pub const DEFAULT_FC2_HIDDEN: usize = 96;

/// Replacement classifier placed on top of a trained body.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum HeadSpec {
    /// A single dense layer.
    Linear,
    /// dense(hidden) -> relu -> dense(classes).
    Fc2 { hidden: usize },
}

impl HeadSpec {
    pub fn layers(self, features: usize, num_classes: usize) -> Result<Vec<LayerSpec>> {
        Ok(match self {
            HeadSpec::Linear => vec![LayerSpec::dense(features, num_classes).non_prunable()],
            HeadSpec::Fc2 { hidden } => {
                if hidden == 0 {
                    return Err(Error::Config("fc2 hidden width must be positive".into()));
                }
                vec![
                    LayerSpec::dense(features, hidden).non_prunable(),
                    LayerSpec::relu(),
                    LayerSpec::dense(hidden, num_classes).non_prunable(),
                ]
            }
        })
    }
}

impl fmt::Display for HeadSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadSpec::Linear => f.write_str("linear"),
            HeadSpec::Fc2 { hidden } => write!(f, "fc2:{hidden}"),
        }
    }
}

impl FromStr for HeadSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadSpec::Linear),
            "fc2" => Ok(HeadSpec::Fc2 {
                hidden: DEFAULT_FC2_HIDDEN,
            }),
            other => {
                let hidden = other
                    .strip_prefix("fc2:")
                    .and_then(|h| h.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("bad head spec `{other}` (linear, fc2, fc2:<hidden>)")))?;
                HeadSpec::Fc2 { hidden }.layers(1, 2)?;
                Ok(HeadSpec::Fc2 { hidden })
            }
        }
    }
}

impl TryFrom<String> for HeadSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<HeadSpec> for String {
    fn from(h: HeadSpec) -> String {
        h.to_string()
    }
}

/// Swaps the classifier head for a freshly initialized one.
///
/// Body tensors are carried over untouched; new head tensors are sampled
/// from the architecture's init distribution under `seed` and are never
/// prunable.
pub fn replace_head<T: Scalar>(
    arch: &Architecture,
    params: &ParameterSet<T>,
    head: HeadSpec,
    num_classes: usize,
    seed: u64,
) -> Result<(Architecture, ParameterSet<T>)> {
    params.check_against(arch)?;
    let features = arch.feature_dim()?;
    let new_arch = Architecture {
        name: arch.name.clone(),
        input_shape: arch.input_shape,
        num_classes,
        body: arch.body.clone(),
        head: head.layers(features, num_classes)?,
        init: arch.init,
    };
    new_arch.validate()?;
    let head_specs: Vec<_> = new_arch
        .param_specs()
        .into_iter()
        .filter(|p| p.section == Section::Head)
        .collect();
    let fresh = init_specs::<T>(&head_specs, arch.init, seed)?;
    let mut out = ParameterSet::new();
    for (name, p) in params.iter() {
        if p.section == Section::Body {
            out.insert(name, p.clone())?;
        }
    }
    for (name, p) in fresh.iter() {
        out.insert(name, p.clone())?;
    }
    out.check_against(&new_arch)?;
    Ok((new_arch, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::preset;
    use crate::model::init::{init_params, InitDist};
    use crate::model::network::{forward, Mode, PassOptions};
    use crate::tensor::Tensor;

    #[test]
    fn fc2_on_resnet_adds_closed_form_params() {
        let arch = preset("micro-resnet", [3, 16, 16], 10).unwrap();
        let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 0).unwrap();
        let (new_arch, new_params) = replace_head(&arch, &params, HeadSpec::Fc2 { hidden: 96 }, 10, 1).unwrap();
        let added = new_arch.param_count() - arch.param_count();
        assert_eq!(added, 64 * 96 + 96 + 96 * 10 + 10 - (64 * 10 + 10));
        let head_params: usize = new_params
            .iter()
            .filter(|(_, p)| p.section == Section::Head)
            .map(|(_, p)| p.tensor.len())
            .sum();
        assert_eq!(head_params, 7_210);
        assert!(new_params.iter().filter(|(_, p)| p.section == Section::Head).all(|(_, p)| !p.prunable));
    }

    #[test]
    fn body_is_preserved_bit_exactly() {
        let arch = preset("micro-vgg", [3, 8, 8], 10).unwrap();
        let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 4).unwrap();
        let (_, new_params) = replace_head(&arch, &params, HeadSpec::Linear, 10, 4).unwrap();
        for (name, p) in params.iter() {
            if p.section == Section::Body {
                assert!(p.tensor.bit_eq(&new_params.get(name).unwrap().tensor));
            }
        }
        // Same seed as the original head but drawn in isolation: re-randomized.
        let old = &params.get("head.0.weight").unwrap().tensor;
        let new = &new_params.get("head.0.weight").unwrap().tensor;
        assert!(!old.bit_eq(new));
    }

    #[test]
    fn replaced_head_outputs_class_count() {
        let arch = preset("micro-resnet", [3, 8, 8], 10).unwrap();
        let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 2).unwrap();
        let (new_arch, new_params) = replace_head(&arch, &params, HeadSpec::Fc2 { hidden: 12 }, 5, 3).unwrap();
        let batch = Tensor::zeros(&[4, 3, 8, 8]);
        let out = forward(&new_arch, &new_params, &batch, None, PassOptions::new(Mode::Eval)).unwrap();
        assert_eq!(out.logits.shape(), &[4, 5]);
    }

    #[test]
    fn zero_hidden_is_rejected() {
        let arch = preset("fc-small", [1, 4, 4], 3).unwrap();
        let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 2).unwrap();
        assert!(replace_head(&arch, &params, HeadSpec::Fc2 { hidden: 0 }, 3, 0).is_err());
        assert!("fc2:0".parse::<HeadSpec>().is_err());
        assert_eq!("fc2:7".parse::<HeadSpec>().unwrap(), HeadSpec::Fc2 { hidden: 7 });
    }
}
