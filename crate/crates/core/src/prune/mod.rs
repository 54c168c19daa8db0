//! Binary masks and unstructured magnitude pruning.
//!
//! Masks cover the prunable weight tensors of an architecture. Pruning ranks
//! the currently kept weights of a layer by absolute value and drops the
//! smallest; equal magnitudes are broken by flat index, lowest first, so the
//! result is a pure function of the inputs.

mod mask;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use mask::{DensityScope, Mask, MaskSet};

use crate::error::{Error, Result};
use crate::model::{ParamRole, ParameterSet};
use crate::tensor::{Scalar, Tensor};

/// Per-round pruning rate by layer kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerRates {
    pub conv: f64,
    pub dense: f64,
}

impl Default for LayerRates {
    fn default() -> Self {
        LayerRates { conv: 0.2, dense: 0.0 }
    }
}

impl LayerRates {
    pub fn for_role(&self, role: ParamRole) -> Result<f64> {
        match role {
            ParamRole::ConvWeight => Ok(self.conv),
            ParamRole::DenseWeight => Ok(self.dense),
            other => Err(Error::contract(format!("{other:?} tensors are not prunable"))),
        }
    }

    fn validate(&self) -> Result<()> {
        for (kind, r) in [("conv", self.conv), ("dense", self.dense)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("{kind} pruning rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// How weights are ranked within a round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranking {
    /// Each tensor loses its own fraction.
    #[default]
    PerLayer,
    /// All tensors of one kind are ranked together.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PruneMode {
    Iterative { rounds: u32 },
    OneShot { target_density: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    #[serde(flatten)]
    pub mode: PruneMode,
    #[serde(default)]
    pub rates: LayerRates,
    #[serde(default)]
    pub ranking: Ranking,
}

impl PruneSchedule {
    pub fn iterative(rounds: u32) -> Self {
        PruneSchedule {
            mode: PruneMode::Iterative { rounds },
            rates: LayerRates::default(),
            ranking: Ranking::PerLayer,
        }
    }

    pub fn one_shot(target_density: f64) -> Self {
        PruneSchedule {
            mode: PruneMode::OneShot { target_density },
            rates: LayerRates::default(),
            ranking: Ranking::PerLayer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rates.validate()?;
        match self.mode {
            PruneMode::OneShot { target_density: d } if !(d > 0.0 && d <= 1.0) => {
                Err(Error::Config(format!("target density {d} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Runs the whole schedule from `masks` and returns the mask after each
    /// round (a single entry for one-shot, none for zero rounds).
    pub fn run<T: Scalar>(&self, params: &ParameterSet<T>, masks: &MaskSet) -> Result<Vec<MaskSet>> {
        self.validate()?;
        match self.mode {
            PruneMode::Iterative { rounds } => {
                let mut out = Vec::with_capacity(rounds as usize);
                let mut cur = masks.clone();
                for _ in 0..rounds {
                    cur = prune_round(params, &cur, self)?;
                    out.push(cur.clone());
                }
                Ok(out)
            }
            PruneMode::OneShot { target_density } => Ok(vec![one_shot_prune(params, masks, target_density)?]),
        }
    }
}

/// Survivors of a layer of `n` weights after `rounds` rounds at `rate`.
pub fn survivors_after(n: usize, rate: f64, rounds: u32) -> usize {
    (0..rounds).fold(n, |k, _| k - drop_count(rate, k))
}

fn drop_count(rate: f64, unmasked: usize) -> usize {
    (rate * unmasked as f64).floor() as usize
}

/// Total order on (|w|, flat index).
fn by_magnitude<T: Scalar>(w: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        w[a].abs()
            .to_f64()
            .partial_cmp(&w[b].abs().to_f64())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

fn check_finite<T: Scalar>(name: &str, w: &Tensor<T>) -> Result<()> {
    if w.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: name.to_string() })
    }
}

/// Drops the `⌊rate · n_unmasked⌋` smallest-magnitude kept weights.
pub fn magnitude_prune_layer<T: Scalar>(weights: &Tensor<T>, mask: &Mask, rate: f64) -> Result<Mask> {
    prune_layer_named("layer", weights, mask, rate)
}

fn prune_layer_named<T: Scalar>(name: &str, weights: &Tensor<T>, mask: &Mask, rate: f64) -> Result<Mask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("pruning rate {rate} outside [0, 1)")));
    }
    if weights.shape() != mask.shape() {
        return Err(Error::Shape {
            expected: weights.shape().to_vec(),
            actual: mask.shape().to_vec(),
        });
    }
    check_finite(name, weights)?;
    let mut kept: Vec<usize> = (0..mask.len()).filter(|&i| mask.bits()[i]).collect();
    if kept.is_empty() {
        return Err(Error::DegenerateLayer(name.to_string()));
    }
    let k = drop_count(rate, kept.len());
    let mut out = mask.clone();
    if k == 0 {
        return Ok(out);
    }
    kept.select_nth_unstable_by(k - 1, by_magnitude(weights.data()));
    for &i in &kept[..k] {
        out.bits_mut()[i] = false;
    }
    Ok(out)
}

/// One pruning round over every masked tensor at its layer-kind rate.
pub fn prune_round<T: Scalar>(params: &ParameterSet<T>, masks: &MaskSet, schedule: &PruneSchedule) -> Result<MaskSet> {
    schedule.rates.validate()?;
    masks.check_against(params)?;
    match schedule.ranking {
        Ranking::PerLayer => {
            let mut out = masks.clone();
            for (name, m) in out.iter_mut() {
                let p = params.get(name).expect("checked above");
                let rate = schedule.rates.for_role(p.role)?;
                *m = prune_layer_named(name, &p.tensor, m, rate)?;
            }
            Ok(out)
        }
        Ranking::Global => prune_round_global(params, masks, &schedule.rates),
    }
}

fn prune_round_global<T: Scalar>(params: &ParameterSet<T>, masks: &MaskSet, rates: &LayerRates) -> Result<MaskSet> {
    let mut out = masks.clone();
    for role in [ParamRole::ConvWeight, ParamRole::DenseWeight] {
        let rate = rates.for_role(role)?;
        // (magnitude, tensor position, flat index)
        let mut pool: Vec<(f64, usize, usize)> = Vec::new();
        let names: Vec<String> = masks
            .iter()
            .filter(|(n, _)| params.get(n).is_some_and(|p| p.role == role))
            .map(|(n, _)| n.to_string())
            .collect();
        for (t, name) in names.iter().enumerate() {
            let w = &params.get(name).expect("checked").tensor;
            check_finite(name, w)?;
            let m = masks.get(name).expect("listed");
            pool.extend(
                m.bits()
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| (w.data()[i].abs().to_f64(), t, i)),
            );
        }
        let k = drop_count(rate, pool.len());
        if k == 0 {
            continue;
        }
        pool.select_nth_unstable_by(k - 1, |a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(Ordering::Equal)
                .then((a.1, a.2).cmp(&(b.1, b.2)))
        });
        let mut new_masks: Vec<Mask> = names.iter().map(|n| out.get(n).expect("listed").clone()).collect();
        for &(_, t, i) in &pool[..k] {
            new_masks[t].bits_mut()[i] = false;
        }
        for (name, m) in names.iter().zip(new_masks) {
            if m.count_ones() == 0 {
                return Err(Error::DegenerateLayer(name.clone()));
            }
            out.insert(name.clone(), m);
        }
    }
    Ok(out)
}

/// Prunes every masked tensor in one pass to `⌈target · n⌉` survivors, keeping
/// the largest magnitudes among the currently kept weights.
pub fn one_shot_prune<T: Scalar>(params: &ParameterSet<T>, masks: &MaskSet, target_density: f64) -> Result<MaskSet> {
    if !(target_density > 0.0 && target_density <= 1.0) {
        return Err(Error::contract(format!("target density {target_density} outside (0, 1]")));
    }
    masks.check_against(params)?;
    let current = masks.density(DensityScope::Prunable);
    if target_density > current {
        return Err(Error::contract(format!(
            "target density {target_density} above current density {current}"
        )));
    }
    let mut out = masks.clone();
    for (name, m) in out.iter_mut() {
        let w = &params.get(name).expect("checked above").tensor;
        check_finite(name, w)?;
        let target = (target_density * m.len() as f64).ceil() as usize;
        let mut kept: Vec<usize> = (0..m.len()).filter(|&i| m.bits()[i]).collect();
        if kept.len() <= target {
            continue;
        }
        let k = kept.len() - target;
        kept.select_nth_unstable_by(k - 1, by_magnitude(w.data()));
        for &i in &kept[..k] {
            m.bits_mut()[i] = false;
        }
    }
    Ok(out)
}

/// Zeroes masked weights in place. Writes `+0.0` rather than multiplying, so
/// no negative zeros appear; kept weights are untouched.
pub fn apply_mask_in_place<T: Scalar>(params: &mut ParameterSet<T>, masks: &MaskSet) -> Result<()> {
    for (name, m) in masks.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("mask for unknown tensor `{name}`")))?;
        if p.tensor.shape() != m.shape() {
            return Err(Error::Shape {
                expected: p.tensor.shape().to_vec(),
                actual: m.shape().to_vec(),
            });
        }
        for (w, &keep) in p.tensor.data_mut().iter_mut().zip(m.bits()) {
            if !keep {
                *w = T::ZERO;
            }
        }
    }
    Ok(())
}

pub fn apply_mask<T: Scalar>(params: &ParameterSet<T>, masks: &MaskSet) -> Result<ParameterSet<T>> {
    let mut out = params.clone();
    apply_mask_in_place(&mut out, masks)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, preset, InitDist};

    fn w5() -> Tensor<f64> {
        Tensor::from_slice(&[5], &[0.5, -0.1, 0.3, -0.9, 0.2]).unwrap()
    }

    #[test]
    fn five_weight_example() {
        let m = magnitude_prune_layer(&w5(), &Mask::ones(&[5]), 0.4).unwrap();
        assert_eq!(m.bits(), &[true, false, true, true, false]);
        let m2 = magnitude_prune_layer(&w5(), &m, 0.4).unwrap();
        assert_eq!(m2.bits(), &[true, false, false, true, false]);
        let m0 = magnitude_prune_layer(&w5(), &m, 0.0).unwrap();
        assert_eq!(m0, m);
    }

    #[test]
    fn ties_prune_lowest_index_first() {
        let w = Tensor::<f64>::from_slice(&[4], &[0.5, -0.5, 0.5, 1.0]).unwrap();
        let m = magnitude_prune_layer(&w, &Mask::ones(&[4]), 0.5).unwrap();
        assert_eq!(m.bits(), &[false, false, true, true]);
    }

    #[test]
    fn rejects_bad_rate_and_nan() {
        assert!(magnitude_prune_layer(&w5(), &Mask::ones(&[5]), 1.0).is_err());
        assert!(magnitude_prune_layer(&w5(), &Mask::ones(&[5]), -0.1).is_err());
        let w = Tensor::<f64>::from_slice(&[2], &[f64::NAN, 1.0]).unwrap();
        assert!(matches!(
            magnitude_prune_layer(&w, &Mask::ones(&[2]), 0.5),
            Err(Error::NonFinite { .. })
        ));
        let empty = Mask::from_bits(&[5], vec![false; 5]).unwrap();
        assert!(matches!(
            magnitude_prune_layer(&w5(), &empty, 0.2),
            Err(Error::DegenerateLayer(_))
        ));
    }

    #[test]
    fn one_shot_keeps_largest() {
        let mut params = ParameterSet::new();
        params
            .insert(
                "w",
                crate::model::Param {
                    tensor: w5(),
                    role: ParamRole::DenseWeight,
                    section: crate::model::Section::Body,
                    prunable: true,
                },
            )
            .unwrap();
        let masks = MaskSet::ones_for(&params);
        let out = one_shot_prune(&params, &masks, 0.5).unwrap();
        assert_eq!(out.get("w").unwrap().bits(), &[true, false, true, true, false]);
        assert_eq!(one_shot_prune(&params, &masks, 1.0).unwrap(), masks);
        assert!(one_shot_prune(&params, &out, 0.9).is_err());
    }

    #[test]
    fn dense_untouched_at_zero_rate() {
        let arch = preset("fc-large", [1, 8, 8], 10).unwrap();
        let params: ParameterSet<f64> = init_params(&arch, InitDist::FanInUniform, 3).unwrap();
        let masks = MaskSet::ones(&arch);
        let out = prune_round(&params, &masks, &PruneSchedule::iterative(1)).unwrap();
        assert_eq!(out, masks);
    }

    #[test]
    fn apply_mask_writes_positive_zero() {
        let mut params = ParameterSet::new();
        params
            .insert(
                "w",
                crate::model::Param {
                    tensor: Tensor::<f64>::from_slice(&[2], &[0.5, -0.9]).unwrap(),
                    role: ParamRole::ConvWeight,
                    section: crate::model::Section::Body,
                    prunable: true,
                },
            )
            .unwrap();
        let mut masks = MaskSet::default();
        masks.insert("w", Mask::from_bits(&[2], vec![true, false]).unwrap());
        let out = apply_mask(&params, &masks).unwrap();
        let d = out.get("w").unwrap().tensor.data();
        assert_eq!(d[0].to_bits(), 0.5f64.to_bits());
        assert_eq!(d[1].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn survivor_recurrence() {
        assert_eq!(survivors_after(100, 0.2, 2), 64);
        assert_eq!(survivors_after(100, 0.2, 0), 100);
    }

    #[test]
    fn schedule_validation() {
        assert!(PruneSchedule::iterative(0).validate().is_ok());
        assert!(PruneSchedule::one_shot(0.0).validate().is_err());
        let mut s = PruneSchedule::iterative(2);
        s.rates.conv = 1.0;
        assert!(s.validate().is_err());
    }
}
