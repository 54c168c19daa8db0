//! Central finite differences, used as an independent gradient oracle.

use crate::error::{Error, Result};
use crate::model::{backward, forward, init_params, Architecture, Mode, ParameterSet, PassOptions};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Estimates `dL/dθ` coordinate by coordinate with
/// `(L(θ + eps e_i) - L(θ - eps e_i)) / (2 eps)`.
///
/// Only trainable tensors are perturbed; the rest get zero.
pub fn finite_diff_gradient<F>(mut loss_fn: F, params: &ParameterSet<f64>, eps: f64) -> Result<ParameterSet<f64>>
where
    F: FnMut(&ParameterSet<f64>) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Oracle(format!("step must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.is_trainable())
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let len = params.tensor(&name)?.len();
        for i in 0..len {
            let orig = params.tensor(&name)?.data()[i];
            probe.tensor_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = loss_fn(&probe)?;
            probe.tensor_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = loss_fn(&probe)?;
            probe.tensor_mut(&name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Oracle(format!("non-finite loss probing `{name}`[{i}]")));
            }
            grads.tensor_mut(&name)?.data_mut()[i] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all coordinates.
pub fn max_relative_error(a: &ParameterSet<f64>, b: &ParameterSet<f64>, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for ((_, ta), (_, tb)) in a.tensors().zip(b.tensors()) {
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let scale = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / scale);
        }
    }
    worst
}

/// Checks `samples` randomly chosen trainable coordinates of `arch`'s
/// training-mode loss gradient against central differences, on a random
/// batch of 4 at a seeded initialization. Returns the largest relative
/// error. Cheap enough for presets too big for [`finite_diff_gradient`].
pub fn spot_check(arch: &Architecture, seed: u64, samples: usize, eps: f64, floor: f64) -> Result<f64> {
    let params: ParameterSet<f64> = init_params(arch, arch.init, seed)?;
    let mut rng = Rng::new(seed ^ 0x5eed);
    let [c, h, w] = arch.input_shape;
    let x = Tensor::from_fn(&[4, c, h, w], |_| rng.normal());
    let labels: Vec<usize> = (0..4).map(|_| rng.below(arch.num_classes as u64) as usize).collect();
    let loss = |p: &ParameterSet<f64>| -> Result<f64> {
        let f = forward(arch, p, &x, Some(&labels), PassOptions::new(Mode::Train))?;
        Ok(f.loss.expect("labels given"))
    };
    let fwd = forward(arch, &params, &x, Some(&labels), PassOptions::new(Mode::Train))?;
    let analytic = backward(arch, &params, &fwd)?;
    let coords: Vec<(String, usize)> = params
        .iter()
        .filter(|(_, p)| p.is_trainable())
        .flat_map(|(n, p)| (0..p.tensor.len()).map(move |i| (n.to_string(), i)))
        .collect();
    if coords.is_empty() {
        return Ok(0.0);
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let (name, i) = &coords[rng.below(coords.len() as u64) as usize];
        let orig = params.tensor(name)?.data()[*i];
        probe.tensor_mut(name)?.data_mut()[*i] = orig + eps;
        let plus = loss(&probe)?;
        probe.tensor_mut(name)?.data_mut()[*i] = orig - eps;
        let minus = loss(&probe)?;
        probe.tensor_mut(name)?.data_mut()[*i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic.tensor(name)?.data()[*i];
        let scale = exact.abs().max(numeric.abs()).max(floor);
        worst = worst.max((exact - numeric).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Param, ParamRole, Section};
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert(
            "w",
            Param {
                tensor: Tensor::from_slice(&[1], &[value]).unwrap(),
                role: ParamRole::DenseWeight,
                section: Section::Body,
                prunable: false,
            },
        )
        .unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let params = single(3.0);
        let g = finite_diff_gradient(|p| Ok(p.tensor("w")?.data()[0].powi(2)), &params, 1e-5).unwrap();
        assert!((g.tensor("w").unwrap().data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = single(-1.5);
        let g = finite_diff_gradient(|_| Ok(4.2), &params, 1e-4).unwrap();
        assert_eq!(g.tensor("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn spot_check_passes_on_a_preset() {
        let arch = crate::model::preset("micro-resnet", [1, 8, 8], 3).unwrap();
        let err = spot_check(&arch, 0, 40, 1e-6, 1e-4).unwrap();
        assert!(err < 1e-5, "{err:e}");
    }

    #[test]
    fn non_finite_loss_is_an_oracle_failure() {
        let params = single(0.0);
        let err = finite_diff_gradient(|p| Ok(1.0 / p.tensor("w")?.data()[0].abs().min(0.0)), &params, 1e-3)
            .unwrap_err();
        assert!(matches!(err, Error::Oracle(_)));
        assert!(finite_diff_gradient(|_| Ok(0.0), &params, 0.0).is_err());
    }
}
