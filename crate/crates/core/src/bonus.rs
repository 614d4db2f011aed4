//! Exploratory bonuses.
//!
//! Both bonuses are expectations under the reference policy of
//! `h(u) = u f'(u) − f(u)` for an α-divergence generator `f`:
//!
//! ```text
//! FEB  = β Σ_x ρ(x) Σ_y π_ref(y|x) h(π(y|x) / π_ref(y|x))
//! GEB  = β Σ_x ρ(x) Σ_y π_ref(y|x) h(u(π(y|x), π_ref(y|x)))
//! ```
//!
//! FEB is the bonus obtained by reparameterizing `max_π J_{β,f}(π, r)`; it
//! pulls the policy toward `π_ref`. GEB replaces the density ratio by a
//! designed `u` that decreases in `π`, which makes the bonus reward mass on
//! responses the reference rarely samples. The `Z_R`-normalized form of GEB
//! is also provided so that its equivalence with the plain form can be
//! checked numerically.
//!
//! Bonus values keep the exact `h(u)` form, constants included. Closed forms
//! quoted in the literature drop constant offsets and factors; those differ
//! from the values here by a policy-independent amount.
//!
//! Every evaluator has a `*_with_grad` sibling returning `∂bonus/∂π` as a
//! table, entries treated as free coordinates.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::divergence::AlphaDivergence;
use crate::error::{Error, Result};
use crate::math::{logistic, sigmoid_neg};
use crate::tabular::{Instance, PolicyTable, PreferenceDataset};

/// Default clamp applied to `π` before evaluating a design.
pub const DEFAULT_CLAMP_EPS: f64 = 1e-9;

/// The functional form of `u(π, π_ref)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UKind {
    /// `u = 1 + α − π`
    Linear,
    /// `u = 1/π`
    Inverse,
    /// `u = arctanh(1 − π) + α`
    Arctanh,
    /// `u = 1 − ln π`
    SelmLog,
    /// `u = 1 − σ(−β ln(π/π_ref))`
    SigmoidRatio,
    /// `u = π/π_ref`. Diagnostic: turns GEB into FEB.
    PolicyRatio,
    /// `u = c`. Diagnostic: constant in every argument.
    Constant(f64),
}

impl UKind {
    /// Designs that exist for consistency checks and are exempt from `u > α`.
    pub fn is_diagnostic(&self) -> bool {
        matches!(self, UKind::PolicyRatio | UKind::Constant(_))
    }

    pub fn name(&self) -> String {
        match self {
            UKind::Linear => "linear".into(),
            UKind::Inverse => "inverse".into(),
            UKind::Arctanh => "arctanh".into(),
            UKind::SelmLog => "selm_log".into(),
            UKind::SigmoidRatio => "sigmoid_ratio".into(),
            UKind::PolicyRatio => "policy_ratio".into(),
            UKind::Constant(c) => format!("constant({c})"),
        }
    }
}

/// A `u`-design together with the clamp applied to `π`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UDesign {
    pub kind: UKind,
    pub clamp_eps: f64,
}

impl UDesign {
    pub fn new(kind: UKind) -> Self {
        Self {
            kind,
            clamp_eps: DEFAULT_CLAMP_EPS,
        }
    }

    pub fn with_clamp(kind: UKind, clamp_eps: f64) -> Self {
        Self { kind, clamp_eps }
    }

    fn clamps_policy(&self) -> bool {
        !matches!(self.kind, UKind::PolicyRatio | UKind::Constant(_))
    }

    /// Whether `p` lies outside `[clamp_eps, 1 − clamp_eps]` for this design.
    pub fn is_clamped(&self, p: f64) -> bool {
        self.clamps_policy() && (p < self.clamp_eps || p > 1.0 - self.clamp_eps)
    }

    fn clamp(&self, p: f64) -> f64 {
        if self.clamps_policy() {
            p.clamp(self.clamp_eps, 1.0 - self.clamp_eps)
        } else {
            p
        }
    }

    /// Infimum of `u` over the clamped domain, used to check `u > α` up front.
    pub fn infimum(&self, alpha: f64, beta: f64) -> f64 {
        let eps = self.clamp_eps;
        match self.kind {
            UKind::Linear => alpha + eps,
            UKind::Inverse => 1.0 / (1.0 - eps),
            UKind::Arctanh => 0.5 * ((1.0 + eps) / (1.0 - eps)).ln() + alpha,
            UKind::SelmLog => 1.0 - (1.0 - eps).ln(),
            // π = eps against π_ref = 1
            UKind::SigmoidRatio => logistic(beta * eps.ln()),
            UKind::PolicyRatio => 0.0,
            UKind::Constant(c) => c,
        }
    }

    /// Reject pairings that cannot satisfy `u > α` everywhere.
    pub fn validate_for(&self, alpha: f64, beta: f64) -> Result<()> {
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(Error::Config(format!(
                "clamp_eps = {} must lie in (0, 0.5)",
                self.clamp_eps
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta = {beta} must be positive")));
        }
        match self.kind {
            UKind::Constant(c) if !(c > 0.0 && c.is_finite()) => Err(Error::Config(format!(
                "constant design needs a positive value, got {c}"
            ))),
            UKind::SigmoidRatio => {
                let inf = self.infimum(alpha, beta);
                if alpha < inf {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "sigmoid_ratio design has inf u = {inf:.3e} over the clamped domain; \
                         it needs alpha < {inf:.3e}, got alpha = {alpha}"
                    )))
                }
            }
            _ => Ok(()),
        }
    }

    /// `u(p, q)` after clamping `p`.
    pub fn u(&self, p: f64, q: f64, alpha: f64, beta: f64) -> f64 {
        let p = self.clamp(p);
        match self.kind {
            UKind::Linear => 1.0 + alpha - p,
            UKind::Inverse => 1.0 / p,
            // arctanh(1 − p) = ½ ln((2 − p)/p)
            UKind::Arctanh => 0.5 * ((2.0 - p) / p).ln() + alpha,
            UKind::SelmLog => 1.0 - p.ln(),
            UKind::SigmoidRatio => logistic(beta * (p / q).ln()),
            UKind::PolicyRatio => p / q,
            UKind::Constant(c) => c,
        }
    }

    /// `∂u/∂p`; zero where the clamp is active.
    pub fn du_dp(&self, p: f64, q: f64, _alpha: f64, beta: f64) -> f64 {
        if self.is_clamped(p) {
            return 0.0;
        }
        match self.kind {
            UKind::Linear => -1.0,
            UKind::Inverse => -1.0 / (p * p),
            UKind::Arctanh => -1.0 / (p * (2.0 - p)),
            UKind::SelmLog => -1.0 / p,
            UKind::SigmoidRatio => {
                let z = beta * (p / q).ln();
                beta * logistic(z) * sigmoid_neg(z) / p
            }
            UKind::PolicyRatio => 1.0 / q,
            UKind::Constant(_) => 0.0,
        }
    }
}

/// Checked evaluation of a design at one point.
pub fn u_value(design: &UDesign, p: f64, q: f64, alpha: f64, beta: f64) -> Result<f64> {
    design.validate_for(alpha, beta)?;
    if !(p > 0.0 && p < 1.0 && q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!(
            "u needs p, q in (0, 1), got p = {p}, q = {q}"
        )));
    }
    let u = design.u(p, q, alpha, beta);
    if !design.kind.is_diagnostic() && u <= alpha {
        return Err(Error::Config(format!(
            "design {} gives u = {u} ≤ alpha = {alpha} at p = {p}",
            design.kind.name()
        )));
    }
    Ok(u)
}

/// Which bonus enters the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonusKind {
    #[default]
    None,
    Feb,
    Geb,
    /// GEB with the `Z_R` normalization kept. Used to validate that dropping
    /// it leaves the induced policies unchanged.
    GebNormalized,
}

/// Where the bonus expectation is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Exact expectation over `ρ × π_ref`.
    FullExpectation,
    /// Mean over the rejected responses of the current dataset.
    RejectedOnly,
}

/// How the bonus weight `κ` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    /// Fixed `κ ≥ 0`.
    Kappa(f64),
    /// `κ` chosen so that `|κ·bonus| / |dpo| = ratio` at the initial policy.
    TargetRatio(f64),
}

/// A complete bonus configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BonusSpec {
    pub kind: BonusKind,
    pub design: Option<UDesign>,
    pub strength: Strength,
    pub scope: Scope,
}

impl Default for BonusSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl BonusSpec {
    pub fn none() -> Self {
        Self {
            kind: BonusKind::None,
            design: None,
            strength: Strength::Kappa(0.0),
            scope: Scope::FullExpectation,
        }
    }

    pub fn feb(strength: Strength) -> Self {
        Self {
            kind: BonusKind::Feb,
            design: None,
            strength,
            scope: Scope::FullExpectation,
        }
    }

    pub fn geb(kind: UKind, strength: Strength) -> Self {
        Self {
            kind: BonusKind::Geb,
            design: Some(UDesign::new(kind)),
            strength,
            scope: Scope::RejectedOnly,
        }
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_kind(mut self, kind: BonusKind) -> Self {
        self.kind = kind;
        self
    }

    /// The fixed `κ`, if one is set.
    pub fn kappa(&self) -> Option<f64> {
        match self.strength {
            Strength::Kappa(k) => Some(k),
            Strength::TargetRatio(_) => None,
        }
    }

    pub fn validate(&self, alpha: f64, beta: f64) -> Result<()> {
        match self.strength {
            Strength::Kappa(k) if !(k >= 0.0 && k.is_finite()) => {
                return Err(Error::Config(format!("kappa = {k} must be finite and ≥ 0")));
            }
            Strength::TargetRatio(r) if !(r > 0.0 && r.is_finite()) => {
                return Err(Error::Config(format!(
                    "target_ratio = {r} must be positive"
                )));
            }
            _ => {}
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta = {beta} must be positive")));
        }
        match self.kind {
            BonusKind::None | BonusKind::Feb => Ok(()),
            BonusKind::Geb | BonusKind::GebNormalized => {
                let design = self
                    .design
                    .ok_or_else(|| Error::Config("a GEB bonus needs a u-design".into()))?;
                if self.kind == BonusKind::GebNormalized && self.scope == Scope::RejectedOnly {
                    return Err(Error::Config(
                        "the normalized GEB bonus is only defined as a full expectation".into(),
                    ));
                }
                design.validate_for(alpha, beta)
            }
        }
    }
}

fn check_shapes(
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    rho: ArrayView1<'_, f64>,
) -> Result<()> {
    if pi.dim() != q.dim() || rho.len() != q.nrows() {
        return Err(Error::Config(format!(
            "shape mismatch: policy {:?}, reference {:?}, prompt weights {}",
            pi.dim(),
            q.dim(),
            rho.len()
        )));
    }
    Ok(())
}

fn ratio(p: f64, q: f64, x: usize, y: usize) -> Result<f64> {
    let r = p / q;
    if r > 0.0 && r.is_finite() {
        Ok(r)
    } else {
        Err(Error::Numeric(format!(
            "ratio π/π_ref = {r} at ({x}, {y}) is not positive and finite"
        )))
    }
}

fn checked_u(
    design: &UDesign,
    div: &AlphaDivergence,
    beta: f64,
    p: f64,
    q: f64,
    x: usize,
    y: usize,
) -> Result<f64> {
    let alpha = div.alpha();
    let u = design.u(p, q, alpha, beta);
    let bound = if design.kind.is_diagnostic() {
        0.0
    } else {
        alpha
    };
    if !(u > bound) || !u.is_finite() {
        return Err(Error::DesignViolation { x, y, u, bound });
    }
    Ok(u)
}

/// FEB on raw tables: `β Σ_x ρ Σ_y q h(p/q)`.
pub fn feb_raw(
    div: &AlphaDivergence,
    beta: f64,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    rho: ArrayView1<'_, f64>,
) -> Result<f64> {
    Ok(feb_raw_with_grad(div, beta, pi, q, rho, false)?.0)
}

pub(crate) fn feb_raw_with_grad(
    div: &AlphaDivergence,
    beta: f64,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    rho: ArrayView1<'_, f64>,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_shapes(pi, q, rho)?;
    let mut grad = want_grad.then(|| Array2::zeros(pi.dim()));
    let mut total = 0.0;
    for x in 0..pi.nrows() {
        let mut row = 0.0;
        for y in 0..pi.ncols() {
            let (p, qy) = (pi[[x, y]], q[[x, y]]);
            let r = ratio(p, qy, x, y)?;
            row += qy * div.h(r)?;
            if let Some(g) = grad.as_mut() {
                // ∂/∂p [q h(p/q)] = h'(p/q)
                g[[x, y]] = beta * rho[x] * div.h_prime(r)?;
            }
        }
        total += rho[x] * row;
    }
    Ok((beta * total, grad))
}

/// GEB on raw tables: `β Σ_x ρ Σ_y q h(u(p, q))`.
pub fn geb_raw(
    div: &AlphaDivergence,
    beta: f64,
    design: &UDesign,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    rho: ArrayView1<'_, f64>,
) -> Result<f64> {
    Ok(geb_raw_with_grad(div, beta, design, pi, q, rho, false)?.0)
}

pub(crate) fn geb_raw_with_grad(
    div: &AlphaDivergence,
    beta: f64,
    design: &UDesign,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    rho: ArrayView1<'_, f64>,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_shapes(pi, q, rho)?;
    let alpha = div.alpha();
    let mut grad = want_grad.then(|| Array2::zeros(pi.dim()));
    let mut total = 0.0;
    for x in 0..pi.nrows() {
        let mut row = 0.0;
        for y in 0..pi.ncols() {
            let (p, qy) = (pi[[x, y]], q[[x, y]]);
            let u = checked_u(design, div, beta, p, qy, x, y)?;
            row += qy * div.h(u)?;
            if let Some(g) = grad.as_mut() {
                g[[x, y]] = beta * rho[x] * qy * div.h_prime(u)? * design.du_dp(p, qy, alpha, beta);
            }
        }
        total += rho[x] * row;
    }
    Ok((beta * total, grad))
}

/// Per-prompt `Z_R(x) = Σ_y π_ref(y|x) u(x, y)`.
pub fn normalizers(
    div: &AlphaDivergence,
    beta: f64,
    design: &UDesign,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
) -> Result<Vec<f64>> {
    (0..pi.nrows())
        .map(|x| {
            let mut z = 0.0;
            for y in 0..pi.ncols() {
                z += q[[x, y]] * checked_u(design, div, beta, pi[[x, y]], q[[x, y]], x, y)?;
            }
            if z > 0.0 && z.is_finite() {
                Ok(z)
            } else {
                Err(Error::Numeric(format!("Z_R({x}) = {z} is not positive")))
            }
        })
        .collect()
}

/// How `Z_R` is treated when differentiating the normalized bonus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalizerGradient {
    /// Differentiate through `Z_R(π)`: the true gradient of the objective.
    Full,
    /// Hold `Z_R` at its current value, the per-prompt stationarity
    /// convention under which the two GEB forms share stationary points.
    Frozen,
}

/// Normalized GEB on raw tables:
/// `β Σ_x ρ Σ_y q [(u/Z_R) f'(u) − f(u/Z_R)]`.
pub fn geb_normalized_raw(
    div: &AlphaDivergence,
    beta: f64,
    design: &UDesign,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    rho: ArrayView1<'_, f64>,
) -> Result<f64> {
    Ok(geb_normalized_raw_with_grad(div, beta, design, pi, q, rho, None)?.0)
}

pub(crate) fn geb_normalized_raw_with_grad(
    div: &AlphaDivergence,
    beta: f64,
    design: &UDesign,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    rho: ArrayView1<'_, f64>,
    grad_mode: Option<NormalizerGradient>,
) -> Result<(f64, Option<Array2<f64>>)> {
    check_shapes(pi, q, rho)?;
    let alpha = div.alpha();
    let z = normalizers(div, beta, design, pi, q)?;
    let mut grad = grad_mode.map(|_| Array2::zeros(pi.dim()));
    let mut total = 0.0;
    for x in 0..pi.nrows() {
        let zx = z[x];
        let mut row = 0.0;
        // ∂(row)/∂Z, only needed for the full gradient
        let mut d_dz = 0.0;
        let m = pi.ncols();
        let mut us = Vec::with_capacity(m);
        for y in 0..m {
            let (p, qy) = (pi[[x, y]], q[[x, y]]);
            let u = checked_u(design, div, beta, p, qy, x, y)?;
            let fp_u = div.f_prime(u)?;
            let fp_uz = div.f_prime(u / zx)?;
            row += qy * ((u / zx) * fp_u - div.f(u / zx)?);
            d_dz += qy * u * (fp_uz - fp_u) / (zx * zx);
            us.push((u, fp_u, fp_uz));
        }
        total += rho[x] * row;
        if let (Some(g), Some(mode)) = (grad.as_mut(), grad_mode) {
            for (y, &(u, fp_u, fp_uz)) in us.iter().enumerate() {
                let (p, qy) = (pi[[x, y]], q[[x, y]]);
                let direct = qy * (fp_u + u * div.f_second(u)? - fp_uz) / zx;
                let via_z = match mode {
                    NormalizerGradient::Full => qy * d_dz,
                    NormalizerGradient::Frozen => 0.0,
                };
                g[[x, y]] = beta * rho[x] * (direct + via_z) * design.du_dp(p, qy, alpha, beta);
            }
        }
    }
    Ok((beta * total, grad))
}

/// Per-cell `Λ(x, y) = [f'(u) + u f''(u) − f'(u/Z)] / [Z u f''(u)]`.
/// Constant in `y` for α-divergences.
pub fn lambda_table(
    div: &AlphaDivergence,
    beta: f64,
    design: &UDesign,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let z = normalizers(div, beta, design, pi, q)?;
    let mut out = Array2::zeros(pi.dim());
    for ((x, y), v) in out.indexed_iter_mut() {
        let u = checked_u(design, div, beta, pi[[x, y]], q[[x, y]], x, y)?;
        let uf2 = u * div.f_second(u)?;
        *v = (div.f_prime(u)? + uf2 - div.f_prime(u / z[x])?) / (z[x] * uf2);
    }
    Ok(out)
}

/// Closed form of `Λ(x)` for an α-divergence given `Z`:
/// `(Z^(1−α) − α) / (Z (1 − α))`, with limit `(1 + ln Z)/Z` at `α = 1`.
pub fn lambda_closed_form(div: &AlphaDivergence, z: f64) -> f64 {
    let a = div.alpha();
    match div.branch() {
        crate::divergence::Branch::ReverseKl => (1.0 + z.ln()) / z,
        _ => (z.powf(1.0 - a) - a) / (z * (1.0 - a)),
    }
}

/// Mean over rejected responses of `β h(u(π_l, π_ref,l))` (GEB) or
/// `β h(π_l / π_ref,l)` (FEB).
pub fn rejected_raw(
    div: &AlphaDivergence,
    beta: f64,
    design: Option<&UDesign>,
    dataset: &PreferenceDataset,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
) -> Result<f64> {
    Ok(rejected_raw_with_grad(div, beta, design, dataset, pi, q, false)?.0)
}

pub(crate) fn rejected_raw_with_grad(
    div: &AlphaDivergence,
    beta: f64,
    design: Option<&UDesign>,
    dataset: &PreferenceDataset,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    if dataset.is_empty() {
        return Err(Error::Estimator(
            "rejected-response bonus needs a non-empty dataset".into(),
        ));
    }
    let alpha = div.alpha();
    let n = dataset.len() as f64;
    let mut grad = want_grad.then(|| Array2::zeros(pi.dim()));
    let mut total = 0.0;
    for pair in &dataset.pairs {
        let (x, y) = (pair.prompt, pair.loser);
        if x >= pi.nrows() || y >= pi.ncols() {
            return Err(Error::Index(format!(
                "pair cell ({x}, {y}) outside {:?}",
                pi.dim()
            )));
        }
        let (p, qy) = (pi[[x, y]], q[[x, y]]);
        let (value, slope) = match design {
            Some(d) => {
                let u = checked_u(d, div, beta, p, qy, x, y)?;
                (div.h(u)?, div.h_prime(u)? * d.du_dp(p, qy, alpha, beta))
            }
            None => {
                let r = ratio(p, qy, x, y)?;
                (div.h(r)?, div.h_prime(r)? / qy)
            }
        };
        total += value;
        if let Some(g) = grad.as_mut() {
            g[[x, y]] += beta * slope / n;
        }
    }
    Ok((beta * total / n, grad))
}

/// FEB over the full reference expectation.
pub fn feb_bonus(
    policy: &PolicyTable,
    instance: &Instance,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<f64> {
    feb_raw(
        div,
        beta,
        policy.probs().view(),
        instance.ref_policy().view(),
        instance.prompt_weights().view(),
    )
}

/// GEB over the full reference expectation.
pub fn geb_bonus(
    policy: &PolicyTable,
    instance: &Instance,
    design: &UDesign,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<f64> {
    design.validate_for(div.alpha(), beta)?;
    geb_raw(
        div,
        beta,
        design,
        policy.probs().view(),
        instance.ref_policy().view(),
        instance.prompt_weights().view(),
    )
}

/// GEB with the `Z_R` normalization kept.
pub fn geb_bonus_normalized(
    policy: &PolicyTable,
    instance: &Instance,
    design: &UDesign,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<f64> {
    design.validate_for(div.alpha(), beta)?;
    geb_normalized_raw(
        div,
        beta,
        design,
        policy.probs().view(),
        instance.ref_policy().view(),
        instance.prompt_weights().view(),
    )
}

/// Loser-only estimator of FEB (`design = None`) or GEB.
pub fn bonus_on_rejected(
    dataset: &PreferenceDataset,
    policy: &PolicyTable,
    instance: &Instance,
    design: Option<&UDesign>,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<f64> {
    if let Some(d) = design {
        d.validate_for(div.alpha(), beta)?;
    }
    dataset.validate(instance)?;
    rejected_raw(
        div,
        beta,
        design,
        dataset,
        policy.probs().view(),
        instance.ref_policy().view(),
    )
}

/// Value and `∂/∂π` of the configured bonus at `pi`.
pub fn bonus_with_grad(
    spec: &BonusSpec,
    div: &AlphaDivergence,
    beta: f64,
    pi: ArrayView2<'_, f64>,
    instance: &Instance,
    dataset: &PreferenceDataset,
) -> Result<(f64, Array2<f64>)> {
    let q = instance.ref_policy().view();
    let rho = instance.prompt_weights().view();
    let (v, g) = match (spec.kind, spec.scope) {
        (BonusKind::None, _) => return Ok((0.0, Array2::zeros(pi.dim()))),
        (BonusKind::Feb, Scope::FullExpectation) => feb_raw_with_grad(div, beta, pi, q, rho, true)?,
        (BonusKind::Feb, Scope::RejectedOnly) => {
            rejected_raw_with_grad(div, beta, None, dataset, pi, q, true)?
        }
        (BonusKind::Geb, scope) => {
            let design = spec
                .design
                .as_ref()
                .ok_or_else(|| Error::Config("a GEB bonus needs a u-design".into()))?;
            match scope {
                Scope::FullExpectation => geb_raw_with_grad(div, beta, design, pi, q, rho, true)?,
                Scope::RejectedOnly => {
                    rejected_raw_with_grad(div, beta, Some(design), dataset, pi, q, true)?
                }
            }
        }
        (BonusKind::GebNormalized, Scope::FullExpectation) => {
            let design = spec
                .design
                .as_ref()
                .ok_or_else(|| Error::Config("a GEB bonus needs a u-design".into()))?;
            geb_normalized_raw_with_grad(
                div,
                beta,
                design,
                pi,
                q,
                rho,
                Some(NormalizerGradient::Full),
            )?
        }
        (BonusKind::GebNormalized, Scope::RejectedOnly) => {
            return Err(Error::Config(
                "the normalized GEB bonus is only defined as a full expectation".into(),
            ))
        }
    };
    Ok((v, g.expect("gradient requested")))
}

/// Number of policy entries the bonus design clamps.
pub fn clamp_events(
    spec: &BonusSpec,
    pi: ArrayView2<'_, f64>,
    dataset: &PreferenceDataset,
) -> usize {
    let Some(design) = spec
        .design
        .filter(|_| matches!(spec.kind, BonusKind::Geb | BonusKind::GebNormalized))
    else {
        return 0;
    };
    match spec.scope {
        Scope::FullExpectation => pi.iter().filter(|p| design.is_clamped(**p)).count(),
        Scope::RejectedOnly => dataset
            .pairs
            .iter()
            .filter(|pr| design.is_clamped(pi[[pr.prompt, pr.loser]]))
            .count(),
    }
}
