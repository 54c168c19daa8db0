use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::arch::{Architecture, ParamRole, ParamSpec};
use crate::model::params::{Param, ParameterSet};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Initialization distribution for weight tensors. Biases always start at
/// zero; batchnorm starts at scale 1, shift 0, running stats (0, 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitDist {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    #[default]
    FanInUniform,
    /// `N(0, 2 / fan_in)`.
    FanInNormal,
    /// All weights zero.
    Zeros,
}

impl InitDist {
    fn sample(self, fan_in: usize, rng: &mut Rng) -> f64 {
        let fan_in = fan_in.max(1) as f64;
        match self {
            InitDist::FanInUniform => {
                let bound = (6.0 / fan_in).sqrt();
                rng.uniform_range(-bound, bound)
            }
            InitDist::FanInNormal => rng.normal() * (2.0 / fan_in).sqrt(),
            InitDist::Zeros => 0.0,
        }
    }
}

/// Samples a fresh parameter set.
pub fn init_params<T: Scalar>(arch: &Architecture, dist: InitDist, seed: u64) -> Result<ParameterSet<T>> {
    arch.validate()?;
    init_specs(&arch.param_specs(), dist, seed)
}

pub(crate) fn init_specs<T: Scalar>(specs: &[ParamSpec], dist: InitDist, seed: u64) -> Result<ParameterSet<T>> {
    let mut rng = Rng::new(seed);
    let mut out = ParameterSet::new();
    for spec in specs {
        let tensor = match spec.role {
            ParamRole::ConvWeight | ParamRole::DenseWeight => {
                Tensor::from_fn(&spec.shape, |_| T::from_f64(dist.sample(spec.fan_in, &mut rng)))
            }
            ParamRole::BnScale | ParamRole::BnRunningVar => Tensor::filled(&spec.shape, T::ONE),
            ParamRole::ConvBias | ParamRole::DenseBias | ParamRole::BnShift | ParamRole::BnRunningMean => {
                Tensor::zeros(&spec.shape)
            }
        };
        out.insert(
            spec.name.clone(),
            Param {
                tensor,
                role: spec.role,
                section: spec.section,
                prunable: spec.prunable,
            },
        )?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::{preset, LayerSpec, Section};

    fn tiny() -> Architecture {
        Architecture {
            name: "tiny".into(),
            input_shape: [1, 2, 2],
            num_classes: 2,
            body: vec![LayerSpec::flatten()],
            head: vec![LayerSpec::dense(4, 2)],
            init: InitDist::FanInUniform,
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let arch = tiny();
        let a: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 7).unwrap();
        let b: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 7).unwrap();
        assert!(a.bit_eq(&b));
        let c: ParameterSet<f32> = init_params(&arch, InitDist::FanInUniform, 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn uniform_respects_fan_in_bound() {
        let arch = preset("micro-resnet", [3, 16, 16], 10).unwrap();
        let params: ParameterSet<f64> = init_params(&arch, InitDist::FanInUniform, 1).unwrap();
        for spec in arch.param_specs() {
            let t = &params.get(&spec.name).unwrap().tensor;
            match spec.role {
                ParamRole::ConvWeight | ParamRole::DenseWeight => {
                    let bound = (6.0 / spec.fan_in as f64).sqrt();
                    assert!(t.data().iter().all(|v| v.abs() < bound));
                }
                ParamRole::BnScale | ParamRole::BnRunningVar => assert!(t.data().iter().all(|&v| v == 1.0)),
                _ => assert!(t.data().iter().all(|&v| v == 0.0)),
            }
        }
    }

    #[test]
    fn running_stats_are_not_trainable() {
        let arch = preset("micro-vgg", [3, 8, 8], 4).unwrap();
        let params: ParameterSet<f32> = init_params(&arch, InitDist::FanInNormal, 3).unwrap();
        for (name, p) in params.iter() {
            if name.ends_with("running_mean") || name.ends_with("running_var") {
                assert!(!p.is_trainable() && !p.prunable);
            }
            if p.section == Section::Head {
                assert!(!p.prunable);
            }
        }
    }
}
