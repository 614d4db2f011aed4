//! # The α-divergence generator family
//!
//! Every regularizer in this crate is an α-divergence
//!
//! ```text
//! D_f(p || q) = Σ q(y) f(p(y) / q(y))
//! f(u)        = (u^α − α u − (1 − α)) / (α (α − 1)),   0 ≤ α ≤ 1
//! ```
//!
//! The denominator is oriented as `α(α − 1)` so that `f''(u) = u^(α−2) > 0`
//! and `f` is convex with `f(1) = f'(1) = 0`. The endpoints are the limits of
//! the general expression:
//!
//! | α   | f(u)              | f'(u)     | name       |
//! |-----|-------------------|-----------|------------|
//! | 1   | u ln u − u + 1    | ln u      | reverse KL |
//! | 0   | u − 1 − ln u      | 1 − 1/u   | forward KL |
//! | 1/2 | 2 (√u − 1)²       | 2 − 2/√u  | Hellinger  |
//!
//! Near either endpoint the general formula divides by a vanishing
//! denominator, so [`AlphaDivergence`] switches to the closed-form limit when
//! `|α|` or `|1 − α|` drops below `boundary_tol`. Interior evaluations go
//! through `expm1`/`ln_1p`, with the small one of `α`, `1 − α` divided out
//! before the cancelling linear term is added.
//!
//! The quantity `h(u) = u f'(u) − f(u)` drives both exploratory bonuses. For
//! this family it simplifies to `(u^α − 1)/α` with `h'(u) = u f''(u) = u^(α−1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default threshold below which `α` or `1 − α` selects a closed-form branch.
pub const DEFAULT_BOUNDARY_TOL: f64 = 1e-9;

/// Which formula an [`AlphaDivergence`] evaluates with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `α ≈ 0`: forward KL closed forms.
    ForwardKl,
    /// `0 < α < 1`: the general expression.
    Interior,
    /// `α ≈ 1`: reverse KL closed forms.
    ReverseKl,
}

/// An α-divergence generator with branch-safe evaluation of `f`, `f'`, `f''`,
/// `(f')⁻¹` and `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaDivergence {
    alpha: f64,
    boundary_tol: f64,
}

impl AlphaDivergence {
    pub fn new(alpha: f64) -> Result<Self> {
        Self::with_boundary_tol(alpha, DEFAULT_BOUNDARY_TOL)
    }

    pub fn with_boundary_tol(alpha: f64, boundary_tol: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "alpha = {alpha} is outside the α-divergence range [0, 1]"
            )));
        }
        if !(boundary_tol > 0.0 && boundary_tol.is_finite()) {
            return Err(Error::Config(format!(
                "boundary_tol = {boundary_tol} must be a positive finite number"
            )));
        }
        Ok(Self {
            alpha,
            boundary_tol,
        })
    }

    /// Reverse KL, `α = 1`.
    pub fn reverse_kl() -> Self {
        Self {
            alpha: 1.0,
            boundary_tol: DEFAULT_BOUNDARY_TOL,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn boundary_tol(&self) -> f64 {
        self.boundary_tol
    }

    pub fn branch(&self) -> Branch {
        if self.alpha.abs() < self.boundary_tol {
            Branch::ForwardKl
        } else if (1.0 - self.alpha).abs() < self.boundary_tol {
            Branch::ReverseKl
        } else {
            Branch::Interior
        }
    }

    fn check_positive(&self, u: f64) -> Result<()> {
        if u > 0.0 && u.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "generator argument u = {u} must be positive and finite"
            )))
        }
    }

    /// The generator `f(u)`.
    pub fn f(&self, u: f64) -> Result<f64> {
        self.check_positive(u)?;
        let a = self.alpha;
        Ok(match self.branch() {
            Branch::ReverseKl => u * u.ln() - u + 1.0,
            Branch::ForwardKl => u - 1.0 - u.ln(),
            // Divide the numerator by whichever of α, 1 − α is small before
            // it meets the cancelling linear term.
            Branch::Interior if a <= 0.5 => ((a * u.ln()).exp_m1() / a - (u - 1.0)) / (a - 1.0),
            Branch::Interior => {
                let b = 1.0 - a;
                -(u * (-b * u.ln()).exp_m1() / b + (u - 1.0)) / a
            }
        })
    }

    /// First derivative `f'(u)`.
    pub fn f_prime(&self, u: f64) -> Result<f64> {
        self.check_positive(u)?;
        let a = self.alpha;
        Ok(match self.branch() {
            Branch::ReverseKl => u.ln(),
            Branch::ForwardKl => 1.0 - 1.0 / u,
            Branch::Interior => ((a - 1.0) * u.ln()).exp_m1() / (a - 1.0),
        })
    }

    /// Second derivative `f''(u) = u^(α−2)`, the same expression on every branch.
    pub fn f_second(&self, u: f64) -> Result<f64> {
        self.check_positive(u)?;
        Ok(match self.branch() {
            Branch::ReverseKl => 1.0 / u,
            Branch::ForwardKl => 1.0 / (u * u),
            Branch::Interior => ((self.alpha - 2.0) * u.ln()).exp(),
        })
    }

    /// Supremum of the range of `f'`; `(f')⁻¹(v)` exists iff `v` is below it.
    /// Infinite for reverse KL.
    pub fn f_prime_sup(&self) -> f64 {
        match self.branch() {
            Branch::ReverseKl => f64::INFINITY,
            Branch::ForwardKl => 1.0,
            Branch::Interior => 1.0 / (1.0 - self.alpha),
        }
    }

    /// Inverse of `f'`.
    pub fn f_prime_inverse(&self, v: f64) -> Result<f64> {
        if !v.is_finite() {
            return Err(Error::Domain(format!(
                "(f')⁻¹ argument v = {v} is not finite"
            )));
        }
        let sup = self.f_prime_sup();
        if v >= sup {
            return Err(Error::Domain(format!(
                "(f')⁻¹ argument v = {v} is outside the range of f' (−∞, {sup}) for α = {}",
                self.alpha
            )));
        }
        let a = self.alpha;
        Ok(match self.branch() {
            Branch::ReverseKl => v.exp(),
            Branch::ForwardKl => 1.0 / (1.0 - v),
            Branch::Interior => (((a - 1.0) * v).ln_1p() / (a - 1.0)).exp(),
        })
    }

    /// `h(u) = u f'(u) − f(u)`, evaluated in its simplified form `(u^α − 1)/α`.
    pub fn h(&self, u: f64) -> Result<f64> {
        self.check_positive(u)?;
        let a = self.alpha;
        Ok(match self.branch() {
            Branch::ReverseKl => u - 1.0,
            Branch::ForwardKl => u.ln(),
            Branch::Interior => (a * u.ln()).exp_m1() / a,
        })
    }

    /// `h'(u) = u f''(u) = u^(α−1)`.
    pub fn h_prime(&self, u: f64) -> Result<f64> {
        self.check_positive(u)?;
        Ok(match self.branch() {
            Branch::ReverseKl => 1.0,
            Branch::ForwardKl => 1.0 / u,
            Branch::Interior => ((self.alpha - 1.0) * u.ln()).exp(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{E, LN_2};

    fn div(a: f64) -> AlphaDivergence {
        AlphaDivergence::new(a).unwrap()
    }

    #[test]
    fn vanishes_at_one_on_every_branch() {
        for a in [0.0, 1e-12, 0.3, 0.5, 1.0 - 1e-12, 1.0] {
            let d = div(a);
            assert_eq!(d.f(1.0).unwrap(), 0.0, "alpha {a}");
            assert_eq!(d.f_prime(1.0).unwrap(), 0.0, "alpha {a}");
            assert_eq!(d.h(1.0).unwrap(), 0.0, "alpha {a}");
            assert_eq!(d.f_prime_inverse(0.0).unwrap(), 1.0, "alpha {a}");
        }
    }

    #[test]
    fn reverse_kl_at_e_matches_the_near_boundary_general_formula() {
        assert_relative_eq!(div(1.0).f(E).unwrap(), 1.0, epsilon = 1e-15);
        // 1 − 1e-6 stays on the general branch.
        let near = div(1.0 - 1e-6);
        assert_eq!(near.branch(), Branch::Interior);
        assert!((near.f(E).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn hellinger_generator() {
        let d = div(0.5);
        let direct = (4f64.sqrt() - 0.5 * 4.0 - 0.5) / (-0.25);
        assert_relative_eq!(d.f(4.0).unwrap(), 2.0, epsilon = 1e-14);
        assert_relative_eq!(direct, 2.0 * (4f64.sqrt() - 1.0).powi(2), epsilon = 1e-14);
        assert_relative_eq!(d.f_second(4.0).unwrap(), 0.125, epsilon = 1e-15);
        assert_relative_eq!(d.h(9.0).unwrap(), 2.0 * (3.0 - 1.0), epsilon = 1e-14);
    }

    #[test]
    fn derivative_values() {
        assert_relative_eq!(div(1.0).f_prime(2.0).unwrap(), LN_2, epsilon = 1e-16);
        assert_eq!(div(0.0).f_prime(2.0).unwrap(), 0.5);
        assert_eq!(div(1.0).f_second(1.0).unwrap(), 1.0);
        assert_eq!(div(0.0).f_second(2.0).unwrap(), 0.25);
    }

    #[test]
    fn inverse_values() {
        assert_relative_eq!(div(1.0).f_prime_inverse(1.0).unwrap(), E, epsilon = 1e-15);
        assert_eq!(div(0.0).f_prime_inverse(0.5).unwrap(), 2.0);
    }

    #[test]
    fn h_closed_forms() {
        assert_relative_eq!(div(1.0).h(3.0).unwrap(), 2.0, epsilon = 1e-15);
        let d = div(1.0);
        assert_relative_eq!(
            3.0 * d.f_prime(3.0).unwrap() - d.f(3.0).unwrap(),
            2.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(div(0.0).h(E).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(AlphaDivergence::new(1.5), Err(Error::Config(_))));
        assert!(matches!(AlphaDivergence::new(-0.1), Err(Error::Config(_))));
        assert!(matches!(
            AlphaDivergence::new(f64::NAN),
            Err(Error::Config(_))
        ));
        let d = div(0.5);
        assert!(matches!(d.f(0.0), Err(Error::Domain(_))));
        assert!(matches!(d.f_prime(-1.0), Err(Error::Domain(_))));
        assert!(matches!(d.h(f64::INFINITY), Err(Error::Domain(_))));
        // range of f' at α = 0.5 is (−∞, 2)
        let err = d.f_prime_inverse(2.0).unwrap_err();
        assert!(err.to_string().contains("(−∞, 2)"), "{err}");
        assert!(div(0.0).f_prime_inverse(1.0).is_err());
        assert!(div(1.0).f_prime_inverse(50.0).is_ok());
    }

    #[test]
    fn branch_selection() {
        assert_eq!(div(0.0).branch(), Branch::ForwardKl);
        assert_eq!(div(1e-7).branch(), Branch::Interior);
        assert_eq!(div(1.0).branch(), Branch::ReverseKl);
        let wide = AlphaDivergence::with_boundary_tol(1e-7, 1e-6).unwrap();
        assert_eq!(wide.branch(), Branch::ForwardKl);
    }
}
