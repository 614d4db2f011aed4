use bonuslab::bonus::{
    bonus_on_rejected, feb_bonus, geb_bonus, geb_bonus_normalized, geb_raw, lambda_closed_form,
    lambda_table, normalizers, UDesign, UKind,
};
use bonuslab::divergence::AlphaDivergence;
use bonuslab::tabular::{
    random_instance, random_policy, sample_response, softmax_policy, Instance, PolicyLogits,
    PolicyTable, PreferenceDataset, PreferencePair,
};
use bonuslab::verify::{random_logits, stream_rng};
use ndarray::{array, Array2};
use proptest::prelude::*;

const DESIGNS: [UKind; 3] = [UKind::Linear, UKind::Inverse, UKind::Arctanh];

/// The per-entry form each GEB cell reduces to, up to the factor returned
/// alongside it and an additive constant.
fn reduced_form(kind: UKind, alpha: f64, p: f64) -> (f64, f64) {
    let base = match kind {
        UKind::Linear => 1.0 + alpha - p,
        UKind::Inverse => 1.0 / p,
        UKind::Arctanh => (1.0 - p).atanh() + alpha,
        _ => unreachable!(),
    };
    if alpha == 1.0 {
        (base, 1.0)
    } else if alpha == 0.0 {
        (base.ln(), 1.0)
    } else {
        (base.sqrt(), 2.0)
    }
}

fn expect_ref(inst: &Instance, pol: &PolicyTable, g: impl Fn(f64) -> f64) -> f64 {
    let (q, rho) = (inst.ref_policy(), inst.prompt_weights());
    let mut s = 0.0;
    for ((x, y), p) in pol.probs().indexed_iter() {
        s += rho[x] * q[[x, y]] * g(*p);
    }
    s
}

#[test]
fn geb_reduces_to_the_tabulated_forms() {
    let beta = 0.7;
    let inst = random_instance(3, 5, &mut stream_rng(21, 0)).unwrap();
    for alpha in [0.0, 0.5, 1.0] {
        let div = AlphaDivergence::new(alpha).unwrap();
        for kind in DESIGNS {
            let design = UDesign::new(kind);
            let mut rng = stream_rng(22, 0);
            let offsets: Vec<f64> = (0..20)
                .map(|_| {
                    let pol = random_policy(3, 5, &mut rng);
                    let scale = beta * reduced_form(kind, alpha, 0.5).1;
                    let table = expect_ref(&inst, &pol, |p| reduced_form(kind, alpha, p).0);
                    geb_bonus(&pol, &inst, &design, &div, beta).unwrap() - scale * table
                })
                .collect();
            let spread = offsets
                .iter()
                .fold(0.0f64, |m, o| m.max((o - offsets[0]).abs()));
            assert!(spread < 1e-9, "alpha {alpha} {kind:?}: spread {spread:e}");
        }
    }
}

#[test]
fn spec_values() {
    let inst = Instance::new(array![1.0], array![[0.5, 0.5]], array![[0.0, 0.0]]).unwrap();
    let pol = PolicyTable::new(array![[0.8, 0.2]]).unwrap();
    let fkl = AlphaDivergence::new(0.0).unwrap();
    let kl = AlphaDivergence::reverse_kl();
    let feb = feb_bonus(&pol, &inst, &fkl, 1.0).unwrap();
    assert!((feb - (0.5 * 1.6f64.ln() + 0.5 * 0.4f64.ln())).abs() < 1e-14);
    let inv = UDesign::new(UKind::Inverse);
    assert!((geb_bonus(&pol, &inst, &inv, &kl, 1.0).unwrap() - 2.125).abs() < 1e-14);
    // forward KL with 1/π is the expected negative log-likelihood
    let nll = -(0.5 * 0.8f64.ln() + 0.5 * 0.2f64.ln());
    assert!((geb_bonus(&pol, &inst, &inv, &fkl, 1.0).unwrap() - nll).abs() < 1e-14);

    let uniform =
        Instance::new(array![1.0], array![[0.3, 0.2, 0.1, 0.4]], array![[0.0; 4]]).unwrap();
    let u4 = PolicyTable::uniform(1, 4);
    assert!((geb_bonus(&u4, &uniform, &inv, &kl, 1.0).unwrap() - 3.0).abs() < 1e-12);
    assert!(feb_bonus(&u4, &uniform, &kl, 1.0).unwrap().abs() < 1e-15);
    assert!(
        feb_bonus(&uniform.reference(), &uniform, &fkl, 1.0)
            .unwrap()
            .abs()
            < 1e-15
    );
}

#[test]
fn normalized_two_arm_by_hand() {
    let inst = Instance::new(array![1.0], array![[0.5, 0.5]], array![[0.0, 0.0]]).unwrap();
    let kl = AlphaDivergence::reverse_kl();
    let v = geb_bonus_normalized(
        &inst.reference(),
        &inst,
        &UDesign::new(UKind::Inverse),
        &kl,
        1.0,
    )
    .unwrap();
    // u ≡ 2 and Z = 2: (u/Z) ln u − (u/Z) ln(u/Z) + u/Z − 1 = ln 2
    assert!((v - 2f64.ln()).abs() < 1e-14);
}

#[test]
fn policy_ratio_design_turns_geb_into_feb() {
    let inst = random_instance(2, 4, &mut stream_rng(5, 0)).unwrap();
    let mut rng = stream_rng(6, 0);
    for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let div = AlphaDivergence::new(alpha).unwrap();
        for _ in 0..10 {
            let pol = random_policy(2, 4, &mut rng);
            let geb = geb_bonus(&pol, &inst, &UDesign::new(UKind::PolicyRatio), &div, 0.3).unwrap();
            let feb = feb_bonus(&pol, &inst, &div, 0.3).unwrap();
            assert!(
                (geb - feb).abs() <= 1e-15 * feb.abs().max(1.0),
                "alpha {alpha}: {geb} vs {feb}"
            );
        }
    }
}

#[test]
fn lambda_is_constant_across_responses() {
    let inst = random_instance(3, 4, &mut stream_rng(8, 0)).unwrap();
    let mut rng = stream_rng(9, 0);
    for alpha in [0.25, 0.5, 1.0] {
        let div = AlphaDivergence::new(alpha).unwrap();
        for kind in DESIGNS {
            let d = UDesign::new(kind);
            let pol = random_policy(3, 4, &mut rng);
            let lam =
                lambda_table(&div, 1.0, &d, pol.probs().view(), inst.ref_policy().view()).unwrap();
            let z =
                normalizers(&div, 1.0, &d, pol.probs().view(), inst.ref_policy().view()).unwrap();
            for (x, row) in lam.outer_iter().enumerate() {
                let expected = lambda_closed_form(&div, z[x]);
                assert!(expected > 0.0);
                for v in row {
                    assert!(
                        (v - expected).abs() < 1e-8 * expected.max(1.0),
                        "alpha {alpha} {kind:?}: {v} vs {expected}"
                    );
                }
            }
        }
    }
}

fn logit_grad(f: impl Fn(&PolicyTable) -> f64, theta: &Array2<f64>) -> Array2<f64> {
    let h = 1e-6;
    let mut g = Array2::zeros(theta.dim());
    for ((x, y), v) in g.indexed_iter_mut() {
        let mut t = theta.clone();
        t[[x, y]] += h;
        let plus = f(&softmax_policy(&PolicyLogits::new(t.clone()).unwrap()).unwrap());
        t[[x, y]] -= 2.0 * h;
        let minus = f(&softmax_policy(&PolicyLogits::new(t).unwrap()).unwrap());
        *v = (plus - minus) / (2.0 * h);
    }
    g
}

#[test]
fn normalized_and_plain_gradients_are_parallel_at_reverse_kl() {
    let kl = AlphaDivergence::reverse_kl();
    for seed in 0..5 {
        let mut rng = stream_rng(seed, 0);
        let inst = random_instance(1, 5, &mut rng).unwrap();
        let theta = random_logits(1, 5, &mut rng).into_inner();
        for kind in DESIGNS {
            let d = UDesign::new(kind);
            let a = logit_grad(|p| geb_bonus(p, &inst, &d, &kl, 1.0).unwrap(), &theta);
            let b = logit_grad(
                |p| geb_bonus_normalized(p, &inst, &d, &kl, 1.0).unwrap(),
                &theta,
            );
            let dot = (&a * &b).sum();
            let cos = dot / ((&a * &a).sum().sqrt() * (&b * &b).sum().sqrt());
            assert!(
                dot > 0.0 && cos > 1.0 - 1e-8,
                "seed {seed} {kind:?}: cos {cos}"
            );
        }
    }
}

#[test]
fn rejected_mean_approaches_the_full_expectation() {
    let inst = random_instance(1, 4, &mut stream_rng(31, 0)).unwrap();
    let pol = random_policy(1, 4, &mut stream_rng(32, 0));
    let reference = inst.reference();
    let kl = AlphaDivergence::reverse_kl();
    let design = UDesign::new(UKind::Inverse);
    let mut rng = stream_rng(33, 0);
    let n = 200_000;
    let pairs: Vec<PreferencePair> = (0..n)
        .map(|_| {
            let loser = sample_response(&reference, 0, &mut rng);
            PreferencePair {
                prompt: 0,
                winner: (loser + 1) % 4,
                loser,
            }
        })
        .collect();
    let h: Vec<f64> = pairs
        .iter()
        .map(|p| 1.0 / pol.get(0, p.loser) - 1.0)
        .collect();
    let mean = h.iter().sum::<f64>() / n as f64;
    let sd = (h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let data = PreferenceDataset::new(pairs);
    let est = bonus_on_rejected(&data, &pol, &inst, Some(&design), &kl, 1.0).unwrap();
    let full = geb_bonus(&pol, &inst, &design, &kl, 1.0).unwrap();
    assert!((est - mean).abs() < 1e-9);
    assert!(
        (est - full).abs() < 4.0 * sd / (n as f64).sqrt(),
        "{est} vs {full}"
    );

    let losers_at_quarter = PreferenceDataset::new(vec![
        PreferencePair {
            prompt: 0,
            winner: 0,
            loser: 1
        };
        3
    ]);
    let u4 = PolicyTable::uniform(1, 4);
    let v = bonus_on_rejected(&losers_at_quarter, &u4, &inst, Some(&design), &kl, 1.0).unwrap();
    assert!((v - 3.0).abs() < 1e-12);
    assert_eq!(
        bonus_on_rejected(&losers_at_quarter, &reference, &inst, None, &kl, 1.0).unwrap(),
        0.0
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn geb_decreases_in_each_entry(
        seed in 0u64..10_000,
        alpha in prop::sample::select(vec![0.0, 0.5, 1.0]),
        kind in prop::sample::select(vec![UKind::Linear, UKind::Inverse, UKind::Arctanh, UKind::SelmLog]),
    ) {
        let design = UDesign::new(kind);
        prop_assume!(design.validate_for(alpha, 1.0).is_ok());
        let div = AlphaDivergence::new(alpha).unwrap();
        let mut rng = stream_rng(seed, 0);
        let inst = random_instance(2, 3, &mut rng).unwrap();
        let pol = random_policy(2, 3, &mut rng);
        let (q, rho) = (inst.ref_policy(), inst.prompt_weights());
        let (x, y) = ((seed % 2) as usize, (seed % 3) as usize);
        let eval = |d: f64| {
            let mut p = pol.probs().clone();
            p[[x, y]] += d;
            geb_raw(&div, 1.0, &design, p.view(), q.view(), rho.view()).unwrap()
        };
        let step = 1e-6;
        let fd = (eval(step) - eval(-step)) / (2.0 * step);
        let p = pol.get(x, y);
        let u = design.u(p, q[[x, y]], alpha, 1.0);
        let analytic = rho[x] * q[[x, y]] * div.h_prime(u).unwrap() * design.du_dp(p, q[[x, y]], alpha, 1.0);
        prop_assert!(fd < 0.0);
        prop_assert!((fd - analytic).abs() < 1e-6 * analytic.abs().max(1.0), "fd {fd} analytic {analytic}");
    }

    #[test]
    fn shrinking_the_clamp_leaves_interior_values_alone(seed in 0u64..10_000, eps in 1e-9f64..1e-7) {
        let mut rng = stream_rng(seed, 0);
        let inst = random_instance(2, 4, &mut rng).unwrap();
        let pol = random_policy(2, 4, &mut rng);
        let kl = AlphaDivergence::reverse_kl();
        for kind in [UKind::Inverse, UKind::SelmLog, UKind::Arctanh] {
            let a = geb_bonus(&pol, &inst, &UDesign::with_clamp(kind, eps), &kl, 1.0).unwrap();
            let b = geb_bonus(&pol, &inst, &UDesign::with_clamp(kind, eps / 10.0), &kl, 1.0).unwrap();
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}
