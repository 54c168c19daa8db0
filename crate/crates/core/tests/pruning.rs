use proptest::prelude::*;
use ticket_core::model::{init_params, preset, InitDist, ParameterSet};
use ticket_core::prune::{
    apply_mask, magnitude_prune_layer, one_shot_prune, prune_round, survivors_after, DensityScope, Mask, MaskSet,
    PruneSchedule, Ranking,
};
use ticket_core::tensor::Tensor;

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-1.0..1.0f64, Just(0.25), Just(-0.25)], 1..80)
}

fn tensor(w: &[f64]) -> Tensor<f64> {
    Tensor::from_slice(&[w.len()], w).unwrap()
}

fn random_mask(len: usize, keep: &[bool]) -> Mask {
    let mut bits: Vec<bool> = (0..len).map(|i| keep[i % keep.len()]).collect();
    bits[0] = true;
    Mask::from_bits(&[len], bits).unwrap()
}

proptest! {
    #[test]
    fn layer_prune_counts_and_dominance(
        w in weights(),
        rate in 0.0..0.95f64,
        keep in prop::collection::vec(any::<bool>(), 1..9),
    ) {
        let t = tensor(&w);
        let before = random_mask(w.len(), &keep);
        let after = magnitude_prune_layer(&t, &before, rate).unwrap();
        let n = before.count_ones();
        prop_assert_eq!(after.count_ones(), n - (rate * n as f64).floor() as usize);
        prop_assert!(after.is_subset_of(&before));
        let survivors = (0..w.len()).filter(|&i| after.bits()[i]);
        let pruned: Vec<usize> = (0..w.len()).filter(|&i| before.bits()[i] && !after.bits()[i]).collect();
        let min_kept = survivors.map(|i| w[i].abs()).fold(f64::INFINITY, f64::min);
        for &i in &pruned {
            prop_assert!(w[i].abs() <= min_kept);
            // equal magnitudes: a surviving tie never precedes a pruned one
            for j in 0..i {
                prop_assert!(!(after.bits()[j] && w[j].abs() == w[i].abs()));
            }
        }
        prop_assert_eq!(magnitude_prune_layer(&t, &before, rate).unwrap(), after);
    }

    #[test]
    fn one_shot_keeps_ceiling_survivors(w in weights(), d in 0.01..1.0f64) {
        let mut params = ParameterSet::new();
        params.insert("w", ticket_core::model::Param {
            tensor: tensor(&w),
            role: ticket_core::model::ParamRole::ConvWeight,
            section: ticket_core::model::Section::Body,
            prunable: true,
        }).unwrap();
        let masks = MaskSet::ones_for(&params);
        let out = one_shot_prune(&params, &masks, d).unwrap();
        let m = out.get("w").unwrap();
        prop_assert_eq!(m.count_ones(), ((d * w.len() as f64).ceil() as usize).max(1));
        let kept_min = (0..w.len()).filter(|&i| m.bits()[i]).map(|i| w[i].abs()).fold(f64::INFINITY, f64::min);
        let cut_max = (0..w.len()).filter(|&i| !m.bits()[i]).map(|i| w[i].abs()).fold(0.0, f64::max);
        prop_assert!(cut_max <= kept_min);
    }

    #[test]
    fn apply_mask_is_exact_and_idempotent(w in weights(), keep in prop::collection::vec(any::<bool>(), 1..9)) {
        let mut params = ParameterSet::new();
        params.insert("w", ticket_core::model::Param {
            tensor: tensor(&w),
            role: ticket_core::model::ParamRole::DenseWeight,
            section: ticket_core::model::Section::Body,
            prunable: true,
        }).unwrap();
        let mut masks = MaskSet::ones_for(&params);
        let m = random_mask(w.len(), &keep);
        masks.insert("w", m.clone());
        let once = apply_mask(&params, &masks).unwrap();
        let twice = apply_mask(&once, &masks).unwrap();
        prop_assert!(once.bit_eq(&twice));
        let out = once.get("w").unwrap().tensor.data();
        for i in 0..w.len() {
            if m.bits()[i] {
                prop_assert_eq!(out[i].to_bits(), w[i].to_bits());
            } else {
                prop_assert_eq!(out[i].to_bits(), 0u64);
            }
        }
    }

    #[test]
    fn survivor_recurrence_is_exact(n in 1usize..5000, rounds in 0u32..15) {
        let mut m = n;
        for _ in 0..rounds {
            m -= (0.2 * m as f64).floor() as usize;
        }
        prop_assert_eq!(survivors_after(n, 0.2, rounds), m);
    }
}

fn resnet_params(seed: u64) -> ParameterSet<f32> {
    let arch = preset("micro-resnet", [3, 8, 8], 10).unwrap();
    init_params(&arch, InitDist::FanInUniform, seed).unwrap()
}

#[test]
fn iterative_rounds_are_monotone_and_follow_recurrence() {
    let params = resnet_params(4);
    let ones = MaskSet::ones_for(&params);
    let rounds = PruneSchedule::iterative(6).run(&params, &ones).unwrap();
    let mut prev = ones.clone();
    for (k, masks) in rounds.iter().enumerate() {
        assert!(masks.is_subset_of(&prev), "round {} grew a mask", k + 1);
        for (name, m) in masks.iter() {
            let role = params.get(name).unwrap().role;
            let expected = match role {
                ticket_core::model::ParamRole::ConvWeight => survivors_after(m.len(), 0.2, k as u32 + 1),
                _ => m.len(),
            };
            assert_eq!(m.count_ones(), expected, "{name} after round {}", k + 1);
        }
        prev = masks.clone();
    }
    let again = PruneSchedule::iterative(6).run(&params, &ones).unwrap();
    assert_eq!(again, rounds);
}

#[test]
fn zero_rate_round_is_identity() {
    let params = resnet_params(1);
    let mut schedule = PruneSchedule::iterative(1);
    schedule.rates.conv = 0.0;
    let masks = PruneSchedule::iterative(2).run(&params, &MaskSet::ones_for(&params)).unwrap().pop().unwrap();
    assert_eq!(prune_round(&params, &masks, &schedule).unwrap(), masks);
}

#[test]
fn global_ranking_hits_the_pooled_count() {
    let params = resnet_params(2);
    let ones = MaskSet::ones_for(&params);
    let mut schedule = PruneSchedule::iterative(1);
    schedule.ranking = Ranking::Global;
    let out = prune_round(&params, &ones, &schedule).unwrap();
    let n = ones.total_len();
    assert_eq!(out.count_ones(), n - (0.2 * n as f64).floor() as usize);
    let per_layer = prune_round(&params, &ones, &PruneSchedule::iterative(1)).unwrap();
    assert_ne!(out, per_layer);
}

#[test]
fn whole_model_density_counts_unprunable_tensors() {
    let params = resnet_params(0);
    let masks = PruneSchedule::iterative(3).run(&params, &MaskSet::ones_for(&params)).unwrap().pop().unwrap();
    let scope = DensityScope::whole_model(&params);
    let total: usize = params.iter().filter(|(_, p)| p.is_trainable()).map(|(_, p)| p.tensor.len()).sum();
    let pruned = masks.total_len() - masks.count_ones();
    assert!((masks.density(scope) - (total - pruned) as f64 / total as f64).abs() < 1e-12);
    assert!(masks.density(scope) > masks.density(DensityScope::Prunable));
}
