use bonuslab::divergence::{AlphaDivergence, Branch};
use bonuslab::verify::{divergence_audit, DIVERGENCE_ALPHAS};
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn log_u() -> impl Strategy<Value = f64> {
    (-3.0f64..3.0).prop_map(|e| 10f64.powf(e))
}

#[test]
fn spec_values() {
    let kl = AlphaDivergence::new(1.0).unwrap();
    let fkl = AlphaDivergence::new(0.0).unwrap();
    let hel = AlphaDivergence::new(0.5).unwrap();
    let e = std::f64::consts::E;
    assert!((kl.f(e).unwrap() - 1.0).abs() < 1e-14);
    assert!((hel.f(4.0).unwrap() - 2.0).abs() < 1e-14);
    assert!((kl.f_prime(2.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!((fkl.f_prime(2.0).unwrap() - 0.5).abs() < 1e-15);
    assert!((fkl.f_second(2.0).unwrap() - 0.25).abs() < 1e-15);
    assert!((hel.f_second(4.0).unwrap() - 0.125).abs() < 1e-15);
    assert!((kl.f_prime_inverse(1.0).unwrap() - e).abs() < 1e-14);
    assert!((fkl.f_prime_inverse(0.5).unwrap() - 2.0).abs() < 1e-14);
    assert!((kl.h(3.0).unwrap() - 2.0).abs() < 1e-14);
    assert!((fkl.h(e).unwrap() - 1.0).abs() < 1e-14);
    for a in DIVERGENCE_ALPHAS {
        let d = AlphaDivergence::new(a).unwrap();
        assert_eq!(d.f(1.0).unwrap(), 0.0);
        assert_eq!(d.f_prime(1.0).unwrap(), 0.0);
        assert_eq!(d.h(1.0).unwrap(), 0.0);
        assert!((d.f_prime_inverse(0.0).unwrap() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn kl_is_the_limit_of_the_general_formula() {
    // evaluate the interior formula just inside the boundary
    let near = AlphaDivergence::with_boundary_tol(1.0 - 1e-6, 1e-12).unwrap();
    assert_eq!(near.branch(), Branch::Interior);
    let e = std::f64::consts::E;
    assert!((near.f(e).unwrap() - 1.0).abs() < 1e-5);
}

#[test]
fn full_audit_passes() {
    for r in divergence_audit(&DIVERGENCE_ALPHAS).unwrap() {
        assert!(
            r.pass,
            "{}: worst {:e}, {:?}",
            r.claim,
            r.worst,
            r.counterexamples.first()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn generator_is_convex(a in 0.0f64..=1.0, u in log_u()) {
        let d = AlphaDivergence::new(a).unwrap();
        prop_assert!(d.f_second(u).unwrap() > 0.0);
        prop_assert!(d.f(u).unwrap() >= -1e-15);
    }

    #[test]
    fn derivative_matches_central_difference(a in 0.0f64..=1.0, u in log_u()) {
        let d = AlphaDivergence::new(a).unwrap();
        let h = 1e-6 * u;
        let fd = (d.f(u + h).unwrap() - d.f(u - h).unwrap()) / (2.0 * h);
        let exact = d.f_prime(u).unwrap();
        // near u = 1 the derivative itself vanishes; compare on an absolute scale there
        let scale = exact.abs().max(1e-3);
        prop_assert!((fd - exact).abs() / scale < 1e-6, "alpha {a} u {u}: fd {fd} exact {exact}");
    }

    #[test]
    fn inverse_round_trip(a in 0.0f64..=1.0, u in log_u()) {
        let d = AlphaDivergence::new(a).unwrap();
        let v = d.f_prime(u).unwrap();
        let back = d.f_prime(d.f_prime_inverse(v).unwrap()).unwrap();
        prop_assert!((back - v).abs() < 1e-10, "alpha {a} v {v} back {back}");
    }

    #[test]
    fn h_is_strictly_increasing(a in 0.0f64..=1.0, u in log_u(), k in 1.001f64..10.0) {
        let d = AlphaDivergence::new(a).unwrap();
        prop_assert!(d.h(u * k).unwrap() > d.h(u).unwrap());
        prop_assert!(d.h_prime(u).unwrap() > 0.0);
    }

    #[test]
    fn branches_agree_near_the_endpoints(u in log_u(), upper in any::<bool>()) {
        let (a, end) = if upper { (1.0 - 1e-7, 1.0) } else { (1e-7, 0.0) };
        let general = AlphaDivergence::new(a).unwrap();
        let limit = AlphaDivergence::new(end).unwrap();
        prop_assert_eq!(general.branch(), Branch::Interior);
        prop_assert_ne!(limit.branch(), Branch::Interior);
        prop_assert!(rel(general.f_prime(u).unwrap(), limit.f_prime(u).unwrap()) < 1e-4 || (u - 1.0).abs() < 1e-9);
        prop_assert!(rel(general.f_second(u).unwrap(), limit.f_second(u).unwrap()) < 1e-4);
    }
}
