mod common;

use bonuslab::bonus::{BonusSpec, Strength, UKind};
use bonuslab::divergence::AlphaDivergence;
use bonuslab::objective::{
    closed_form_optimal_policy, fdpo_pair_loss, grad_logits, reward_from_policy, total_loss,
    Objective,
};
use bonuslab::tabular::{
    random_instance, random_policy, Instance, PolicyLogits, PolicyTable, PreferencePair,
};
use bonuslab::verify::{random_logits, sample_dataset, stream_rng};
use ndarray::array;
use proptest::prelude::*;

#[test]
fn closed_form_beats_random_points_and_matches_ascent() {
    for seed in 0..5 {
        let t = common::optimality_trial(seed, 1000);
        assert!(t.min_gap > 0.0, "{t:?}");
        assert!(t.tv < 1e-4, "{t:?}");
    }
}

#[test]
fn closed_form_round_trips_through_the_reward_map() {
    let mut rng = stream_rng(40, 0);
    for alpha in [0.0, 0.3, 0.5, 1.0] {
        let div = AlphaDivergence::new(alpha).unwrap();
        let inst = random_instance(3, 4, &mut rng).unwrap();
        let pol = random_policy(3, 4, &mut rng);
        let r = reward_from_policy(&pol, &inst, &div, 0.4).unwrap();
        let back = closed_form_optimal_policy(r.view(), &inst, &div, 0.4).unwrap();
        for (a, b) in back.probs().iter().zip(pol.probs()) {
            assert!((a - b).abs() < 1e-10, "alpha {alpha}: {a} vs {b}");
        }
    }
    // constant rewards give back the reference
    let inst = random_instance(2, 5, &mut rng).unwrap();
    let flat = ndarray::Array2::from_elem((2, 5), 0.7);
    let hel = AlphaDivergence::new(0.5).unwrap();
    let star = closed_form_optimal_policy(flat.view(), &inst, &hel, 1.0).unwrap();
    for (a, b) in star.probs().iter().zip(inst.ref_policy()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pair_loss_swap_symmetry() {
    let inst = Instance::new(array![1.0], array![[0.5, 0.5]], array![[0.0, 1.0]]).unwrap();
    let pol = PolicyTable::new(array![[0.3, 0.7]]).unwrap();
    let div = AlphaDivergence::new(0.5).unwrap();
    let fwd = PreferencePair {
        prompt: 0,
        winner: 1,
        loser: 0,
    };
    let rev = PreferencePair {
        prompt: 0,
        winner: 0,
        loser: 1,
    };
    let l = fdpo_pair_loss(&pol, &inst, &fwd, &div, 0.8).unwrap();
    let l_rev = fdpo_pair_loss(&pol, &inst, &rev, &div, 0.8).unwrap();
    assert!((l_rev - (-(1.0 - (-l).exp()).ln())).abs() < 1e-12);
    let at_ref = fdpo_pair_loss(&inst.reference(), &inst, &fwd, &div, 0.8).unwrap();
    assert!((at_ref - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn breakdown_recomputes_term_by_term() {
    let mut rng = stream_rng(41, 0);
    let inst = random_instance(2, 4, &mut rng).unwrap();
    let data = sample_dataset(&inst, 6, &mut rng).unwrap();
    let theta = random_logits(2, 4, &mut rng);
    let div = AlphaDivergence::new(0.5).unwrap();
    let none = total_loss(&theta, &inst, &data, &BonusSpec::none(), &div, 0.5).unwrap();
    assert_eq!(none.total, none.dpo_term);
    assert_eq!(none.ratio, 0.0);
    let zero = total_loss(
        &theta,
        &inst,
        &data,
        &BonusSpec::geb(UKind::Linear, Strength::Kappa(0.0)),
        &div,
        0.5,
    )
    .unwrap();
    assert_eq!(zero.total, none.total);
    let spec = BonusSpec::geb(UKind::Inverse, Strength::Kappa(0.2));
    let b = total_loss(&theta, &inst, &data, &spec, &div, 0.5).unwrap();
    let policy = bonuslab::tabular::softmax_policy(&theta).unwrap();
    let dpo: f64 = data
        .pairs
        .iter()
        .map(|p| fdpo_pair_loss(&policy, &inst, p, &div, 0.5).unwrap())
        .sum::<f64>()
        / data.len() as f64;
    assert!((b.dpo_term - dpo).abs() < 1e-14);
    assert!((b.total - (dpo - 0.2 * b.bonus_term)).abs() < 1e-14);
    assert!((b.ratio - (0.2 * b.bonus_term / dpo).abs()).abs() < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reverse_kl_is_textbook_dpo(pw in 0.01f64..0.99, qw in 0.05f64..0.95, beta in 0.05f64..3.0) {
        let inst = Instance::new(array![1.0], array![[qw, 1.0 - qw]], array![[0.0, 0.0]]).unwrap();
        let pol = PolicyTable::new(array![[pw, 1.0 - pw]]).unwrap();
        let pair = PreferencePair { prompt: 0, winner: 0, loser: 1 };
        let loss = fdpo_pair_loss(&pol, &inst, &pair, &AlphaDivergence::reverse_kl(), beta).unwrap();
        let z = beta * (pw / qw).ln() - beta * ((1.0 - pw) / (1.0 - qw)).ln();
        // −ln σ(z) as a softplus, accurate for large negative margins
        let expected = (-z).max(0.0) + (-z.abs()).exp().ln_1p();
        prop_assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn small_steps_never_increase_the_loss(
        seed in 0u64..100_000,
        alpha in prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]),
        which in 0usize..4,
    ) {
        let mut rng = stream_rng(seed, 0);
        let inst = random_instance(2, 4, &mut rng).unwrap();
        let data = sample_dataset(&inst, 5, &mut rng).unwrap();
        let theta = random_logits(2, 4, &mut rng);
        let spec = [
            BonusSpec::none(),
            BonusSpec::feb(Strength::Kappa(0.5)),
            BonusSpec::geb(UKind::Linear, Strength::Kappa(0.5)),
            BonusSpec::geb(UKind::Inverse, Strength::Kappa(0.05)),
        ][which];
        let obj = Objective::new(AlphaDivergence::new(alpha).unwrap(), 0.5, spec, spec.kappa().unwrap()).unwrap();
        let before = obj.total_loss(&theta, &inst, &data).unwrap().total;
        let g = obj.grad_logits(&theta, &inst, &data).unwrap();
        for row in g.outer_iter() {
            prop_assert!(row.sum().abs() < 1e-10);
        }
        let stepped = PolicyLogits::new(theta.theta() - &(&g * 1e-4)).unwrap();
        let after = obj.total_loss(&stepped, &inst, &data).unwrap().total;
        prop_assert!(after <= before + 1e-15, "{before} -> {after}");
    }
}

#[test]
fn free_functions_agree_with_the_objective() {
    let mut rng = stream_rng(42, 0);
    let inst = random_instance(2, 3, &mut rng).unwrap();
    let data = sample_dataset(&inst, 4, &mut rng).unwrap();
    let theta = random_logits(2, 3, &mut rng);
    let div = AlphaDivergence::new(0.75).unwrap();
    let spec = BonusSpec::geb(UKind::Arctanh, Strength::Kappa(0.1));
    let obj = Objective::new(div, 0.3, spec, 0.1).unwrap();
    assert_eq!(
        grad_logits(&theta, &inst, &data, &spec, &div, 0.3).unwrap(),
        obj.grad_logits(&theta, &inst, &data).unwrap()
    );
    let target = BonusSpec::geb(UKind::Arctanh, Strength::TargetRatio(1e-3));
    assert!(total_loss(&theta, &inst, &data, &target, &div, 0.3).is_err());
}
