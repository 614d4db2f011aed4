//! Numerical audits of the claims the bonuses rest on.
//!
//! Each audit returns an [`AuditReport`]: a worst-case statistic, a pass flag
//! and the offending points. Audits are deterministic in their seed. Work
//! items run in parallel, each with its own ChaCha stream.
//!
//! Mixed partials `∂²B/∂π(y|x)∂π_ref(y|x)` are taken on raw table entries:
//! the two coordinates are perturbed without renormalizing their rows.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bonus::{
    feb_raw, feb_raw_with_grad, geb_normalized_raw_with_grad, geb_raw, geb_raw_with_grad,
    lambda_table, BonusKind, BonusSpec, NormalizerGradient, Scope, Strength, UDesign, UKind,
};
use crate::divergence::{AlphaDivergence, Branch};
use crate::error::{Error, Result};
use crate::objective::{pullback_softmax, Objective};
use crate::optim::GradientDescent;
use crate::tabular::{
    annotate_pair, random_instance, random_policy, sample_response, softmax_rows, tv_distance,
    Annotation, Instance, PolicyLogits, PolicyTable, PreferenceDataset,
};

/// Sign threshold separating "zero" from strictly signed mixed derivatives.
pub const STRICTNESS: f64 = 1e-8;
/// Default finite-difference step for mixed partials.
pub const DEFAULT_DELTA: f64 = 1e-4;

/// A point at which an audited claim failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub alpha: f64,
    pub design: String,
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Outcome of one audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub claim: String,
    pub grid: String,
    pub worst: f64,
    pub pass: bool,
    pub counterexamples: Vec<Counterexample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AuditReport {
    fn new(
        claim: impl Into<String>,
        grid: impl Into<String>,
        worst: f64,
        counterexamples: Vec<Counterexample>,
    ) -> Self {
        Self {
            claim: claim.into(),
            grid: grid.into(),
            worst,
            pass: counterexamples.is_empty(),
            counterexamples,
            notes: Vec::new(),
        }
    }

    fn with_notes(mut self, notes: Vec<String>) -> Self {
        self.notes = notes;
        self
    }
}

/// RNG for work item `stream` of an audit seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard-normal logits.
pub fn random_logits<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> PolicyLogits {
    let t = Array2::from_shape_simple_fn((n, m), || rng.sample::<f64, _>(StandardNormal));
    PolicyLogits::new(t).expect("normal draws are finite")
}

/// Central four-point estimate of `∂²B/∂π(y|x)∂π_s(y|x)` where `B` is
/// evaluated as `bonus(π, π_s)` on raw tables.
pub fn mixed_second_derivative<F>(
    bonus: F,
    pi: ArrayView2<'_, f64>,
    pi_s: ArrayView2<'_, f64>,
    x: usize,
    y: usize,
    delta: f64,
) -> Result<f64>
where
    F: Fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> Result<f64>,
{
    if x >= pi.nrows() || y >= pi.ncols() || pi.dim() != pi_s.dim() {
        return Err(Error::Index(format!(
            "cell ({x}, {y}) outside {:?}",
            pi.dim()
        )));
    }
    let (p, q) = (pi[[x, y]], pi_s[[x, y]]);
    for v in [p - delta, p + delta, q - delta, q + delta] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::StepSize(format!(
                "delta = {delta} moves π = {p} or π_s = {q} at ({x}, {y}) outside (0, 1)"
            )));
        }
    }
    let mut a = pi.to_owned();
    let mut b = pi_s.to_owned();
    let mut eval = |dp: f64, dq: f64| -> Result<f64> {
        a[[x, y]] = p + dp;
        b[[x, y]] = q + dq;
        bonus(a.view(), b.view())
    };
    let pp = eval(delta, delta)?;
    let pm = eval(delta, -delta)?;
    let mp = eval(-delta, delta)?;
    let mm = eval(-delta, -delta)?;
    Ok((pp - pm - mp + mm) / (4.0 * delta * delta))
}

/// The same mixed partial along simplex-preserving directions: `π` moves
/// toward the vertex `e_y` and so does `π_s`, keeping both rows normalized.
pub fn mixed_second_derivative_simplex<F>(
    bonus: F,
    pi: ArrayView2<'_, f64>,
    pi_s: ArrayView2<'_, f64>,
    x: usize,
    y: usize,
    delta: f64,
) -> Result<f64>
where
    F: Fn(ArrayView2<'_, f64>, ArrayView2<'_, f64>) -> Result<f64>,
{
    if x >= pi.nrows() || y >= pi.ncols() || pi.dim() != pi_s.dim() {
        return Err(Error::Index(format!(
            "cell ({x}, {y}) outside {:?}",
            pi.dim()
        )));
    }
    let toward = |t: &ArrayView2<'_, f64>, s: f64| -> Array2<f64> {
        let mut out = t.to_owned();
        let mut row = out.row_mut(x);
        row.mapv_inplace(|v| (1.0 - s) * v);
        row[y] += s;
        out
    };
    if delta >= 1.0 || delta <= 0.0 {
        return Err(Error::StepSize(format!(
            "delta = {delta} must lie in (0, 1)"
        )));
    }
    let eval = |sp: f64, sq: f64| bonus(toward(&pi, sp).view(), toward(&pi_s, sq).view());
    // moving toward the vertex with a negative step leaves the simplex when
    // the other entries would exceed 1; a small delta keeps it interior
    let pp = eval(delta, delta)?;
    let pm = eval(delta, -delta)?;
    let mp = eval(-delta, delta)?;
    let mm = eval(-delta, -delta)?;
    Ok((pp - pm - mp + mm) / (4.0 * delta * delta))
}

/// Shape and scale of the random points an audit draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSettings {
    pub seed: u64,
    pub n_prompts: usize,
    pub m_responses: usize,
    pub beta: f64,
    pub delta: f64,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            n_prompts: 3,
            m_responses: 4,
            beta: 1.0,
            delta: DEFAULT_DELTA,
        }
    }
}

/// A bonus under audit: FEB or GEB with a design, both as full expectations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AuditedBonus {
    Feb,
    Geb(UDesign),
}

impl AuditedBonus {
    pub fn from_spec(spec: &BonusSpec) -> Result<Self> {
        match spec.kind {
            BonusKind::Feb => Ok(Self::Feb),
            BonusKind::Geb | BonusKind::GebNormalized => spec
                .design
                .map(Self::Geb)
                .ok_or_else(|| Error::Config("a GEB bonus needs a u-design".into())),
            BonusKind::None => Err(Error::Config("nothing to audit for bonus kind none".into())),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Feb => "feb".into(),
            Self::Geb(d) => format!("geb/{}", d.kind.name()),
        }
    }

    fn value(
        &self,
        div: &AlphaDivergence,
        beta: f64,
        pi: ArrayView2<'_, f64>,
        q: ArrayView2<'_, f64>,
        instance: &Instance,
    ) -> Result<f64> {
        let rho = instance.prompt_weights().view();
        match self {
            Self::Feb => feb_raw(div, beta, pi, q, rho),
            Self::Geb(d) => geb_raw(div, beta, d, pi, q, rho),
        }
    }
}

/// One sampled mixed-derivative evaluation.
#[derive(Clone, Copy, Debug)]
pub struct MixedSample {
    pub alpha: f64,
    pub x: usize,
    pub y: usize,
    pub value: f64,
}

/// Mixed partials of the bonus at `points` random interior points per α.
pub fn sample_mixed_derivatives(
    bonus: AuditedBonus,
    alphas: &[f64],
    points: usize,
    settings: &AuditSettings,
) -> Result<Vec<MixedSample>> {
    let jobs: Vec<(usize, f64)> = alphas
        .iter()
        .enumerate()
        .flat_map(|(ai, &a)| (0..points).map(move |k| (ai * points + k, a)))
        .collect();
    jobs.par_iter()
        .map(|&(k, alpha)| {
            let div = AlphaDivergence::new(alpha)?;
            if let AuditedBonus::Geb(d) = bonus {
                d.validate_for(alpha, settings.beta)?;
            }
            let mut rng = stream_rng(settings.seed, k as u64);
            let inst = random_instance(settings.n_prompts, settings.m_responses, &mut rng)?;
            let pol = random_policy(settings.n_prompts, settings.m_responses, &mut rng);
            let x = rng.random_range(0..settings.n_prompts);
            let y = rng.random_range(0..settings.m_responses);
            let value = mixed_second_derivative(
                |p, q| bonus.value(&div, settings.beta, p, q, &inst),
                pol.probs().view(),
                inst.ref_policy().view(),
                x,
                y,
                settings.delta,
            )?;
            Ok(MixedSample { alpha, x, y, value })
        })
        .collect()
}

/// Sign audit of the optimism condition.
///
/// GEB must give strictly negative mixed partials (`≤ −STRICTNESS`). FEB is
/// audited for the opposite: every value `≥ −STRICTNESS`, and at `α = 1`
/// every value within `1e-6` of zero.
pub fn optimism_audit(
    bonus: AuditedBonus,
    alphas: &[f64],
    points: usize,
    settings: &AuditSettings,
) -> Result<AuditReport> {
    let samples = sample_mixed_derivatives(bonus, alphas, points, settings)?;
    let name = bonus.name();
    let grid = format!(
        "{points} random interior points per alpha, alphas {alphas:?}, {}x{} instances, delta {}",
        settings.n_prompts, settings.m_responses, settings.delta
    );
    let ce = |s: &MixedSample| Counterexample {
        alpha: s.alpha,
        design: name.clone(),
        x: s.x,
        y: s.y,
        value: s.value,
    };
    let report = match bonus {
        AuditedBonus::Geb(_) => {
            let worst = samples
                .iter()
                .map(|s| s.value)
                .fold(f64::NEG_INFINITY, f64::max);
            let bad = samples
                .iter()
                .filter(|s| s.value > -STRICTNESS)
                .map(ce)
                .collect();
            AuditReport::new(
                format!("optimism: {name} mixed partial ≤ −1e-8"),
                grid,
                worst,
                bad,
            )
        }
        AuditedBonus::Feb => {
            let worst = samples
                .iter()
                .map(|s| s.value)
                .fold(f64::INFINITY, f64::min);
            let bad = samples
                .iter()
                .filter(|s| {
                    let at_kl = AlphaDivergence::new(s.alpha)
                        .map(|d| d.branch() == Branch::ReverseKl)
                        .unwrap_or(false);
                    s.value < -STRICTNESS || (at_kl && s.value.abs() >= 1e-6)
                })
                .map(ce)
                .collect();
            AuditReport::new(
                "optimism failure: feb mixed partial ≥ −1e-8, and |·| < 1e-6 at alpha = 1",
                grid,
                worst,
                bad,
            )
        }
    };
    Ok(report)
}

/// Partials of `u` by central differences at `(p, q)`.
#[derive(Clone, Copy, Debug)]
pub struct DesignPartials {
    pub u: f64,
    pub du_dp: f64,
    pub du_dq: f64,
    pub d2u_dpdq: f64,
}

pub fn design_partials(design: &UDesign, p: f64, q: f64, alpha: f64, beta: f64) -> DesignPartials {
    let hp = 1e-5 * p.min(1.0 - p);
    let hq = 1e-5 * q.min(1.0 - q);
    let u = |p: f64, q: f64| design.u(p, q, alpha, beta);
    DesignPartials {
        u: u(p, q),
        du_dp: (u(p + hp, q) - u(p - hp, q)) / (2.0 * hp),
        du_dq: (u(p, q + hq) - u(p, q - hq)) / (2.0 * hq),
        d2u_dpdq: (u(p + hp, q + hq) - u(p + hp, q - hq) - u(p - hp, q + hq) + u(p - hp, q - hq))
            / (4.0 * hp * hq),
    }
}

/// Checks both sufficient conditions for GEB optimism on a design:
/// `u > α`, and
/// `∂u/∂π + π_ref ∂²u/∂π∂π_ref + ((α−1) π_ref / u)(∂u/∂π)(∂u/∂π_ref) < 0`
/// on a `grid × grid` lattice of `(π, π_ref)` in `(0, 1)²`.
pub fn optimism_condition_check(
    design: &UDesign,
    alpha: f64,
    beta: f64,
    grid: usize,
) -> Result<AuditReport> {
    AlphaDivergence::new(alpha)?;
    design.validate_for(alpha, beta)?;
    if grid == 0 {
        return Err(Error::Config("grid must have at least one point".into()));
    }
    let name = design.kind.name();
    let mut worst_condition = f64::NEG_INFINITY;
    let mut worst_gap = f64::INFINITY;
    let mut bad = Vec::new();
    let lattice: Vec<f64> = (1..=grid).map(|k| k as f64 / (grid + 1) as f64).collect();
    for (i, &p) in lattice.iter().enumerate() {
        for (j, &q) in lattice.iter().enumerate() {
            let d = design_partials(design, p, q, alpha, beta);
            let cond = d.du_dp + q * d.d2u_dpdq + (alpha - 1.0) * q / d.u * d.du_dp * d.du_dq;
            let gap = d.u - alpha;
            worst_condition = worst_condition.max(cond);
            worst_gap = worst_gap.min(gap);
            if !(cond < 0.0) || !(gap > 0.0) {
                bad.push(Counterexample {
                    alpha,
                    design: name.clone(),
                    x: i,
                    y: j,
                    value: if gap > 0.0 { cond } else { gap },
                });
            }
        }
    }
    Ok(AuditReport::new(
        format!("optimism conditions for {name}: derivative condition < 0 and u > alpha"),
        format!("{grid}x{grid} lattice of (pi, pi_ref) in (0,1)^2, alpha {alpha}"),
        worst_condition,
        bad,
    )
    .with_notes(vec![format!("worst u − alpha margin {worst_gap:.6e}")]))
}

/// Result of maximizing FEB alone.
#[derive(Clone, Debug)]
pub struct CollapseOutcome {
    pub policy: PolicyTable,
    pub tv_distance: f64,
    pub converged: bool,
    pub grad_norm: f64,
    pub steps: usize,
}

/// Default optimizer for the collapse test.
pub fn collapse_optimizer() -> GradientDescent {
    GradientDescent::new(1.0, 50_000, 1e-12)
}

/// Maximize `E_ref h(π/π_ref)` over logits from `start`; no DPO term.
pub fn feb_collapse_from(
    alpha: f64,
    instance: &Instance,
    start: PolicyLogits,
    optimizer: &GradientDescent,
) -> Result<CollapseOutcome> {
    let div = AlphaDivergence::new(alpha)?;
    let q = instance.ref_policy().view();
    let rho = instance.prompt_weights().view();
    let out = optimizer.maximize(start.into_inner(), |theta| {
        let pol = softmax_rows(theta.view())?;
        let (v, g) = feb_raw_with_grad(&div, 1.0, pol.probs().view(), q, rho, true)?;
        Ok((
            v,
            pullback_softmax(pol.probs().view(), g.expect("gradient requested").view()),
        ))
    })?;
    let policy = softmax_rows(out.theta.view())?;
    Ok(CollapseOutcome {
        tv_distance: tv_distance(policy.probs().view(), q),
        policy,
        converged: out.converged,
        grad_norm: out.grad_norm,
        steps: out.steps,
    })
}

/// [`feb_collapse_from`] with standard-normal starting logits.
pub fn feb_collapse_test<R: Rng + ?Sized>(
    alpha: f64,
    instance: &Instance,
    optimizer: &GradientDescent,
    rng: &mut R,
) -> Result<CollapseOutcome> {
    let start = random_logits(instance.n_prompts(), instance.n_responses(), rng);
    feb_collapse_from(alpha, instance, start, optimizer)
}

/// Collapse test over `instances` random instances per α; fails where the
/// final total variation to `π_ref` is `≥ tol`.
pub fn collapse_audit(
    alphas: &[f64],
    instances: usize,
    tol: f64,
    settings: &AuditSettings,
) -> Result<AuditReport> {
    let jobs: Vec<(usize, f64)> = alphas
        .iter()
        .enumerate()
        .flat_map(|(ai, &a)| (0..instances).map(move |k| (ai * instances + k, a)))
        .collect();
    let optimizer = collapse_optimizer();
    let results: Vec<(f64, usize, CollapseOutcome)> = jobs
        .par_iter()
        .map(|&(k, alpha)| {
            let mut rng = stream_rng(settings.seed, k as u64);
            let inst = random_instance(settings.n_prompts, settings.m_responses + 1, &mut rng)?;
            Ok((
                alpha,
                k,
                feb_collapse_test(alpha, &inst, &optimizer, &mut rng)?,
            ))
        })
        .collect::<Result<_>>()?;
    let worst = results.iter().map(|r| r.2.tv_distance).fold(0.0, f64::max);
    let mut notes = Vec::new();
    let bad: Vec<Counterexample> = results
        .iter()
        .filter(|r| !(r.2.tv_distance < tol))
        .map(|(alpha, k, o)| {
            notes.push(format!(
                "alpha {alpha}, instance {k}: tv {:.3e} after {} steps, gradient norm {:.3e}",
                o.tv_distance, o.steps, o.grad_norm
            ));
            Counterexample {
                alpha: *alpha,
                design: "feb".into(),
                x: *k,
                y: 0,
                value: o.tv_distance,
            }
        })
        .collect();
    if alphas.iter().any(|a| *a == 1.0) {
        notes.push(
            "at alpha = 1, h(u) = u − 1 so the bonus is constant on the simplex and any start is a maximizer".into(),
        );
    }
    Ok(AuditReport::new(
        format!("collapse: maximizing feb alone reaches pi_ref within tv {tol:e}"),
        format!(
            "{instances} random {}x{} instances per alpha, alphas {alphas:?}",
            settings.n_prompts,
            settings.m_responses + 1
        ),
        worst,
        bad,
    )
    .with_notes(notes))
}

/// Draw `pairs_per_prompt` reference-sampled, BT-labelled pairs per prompt.
pub fn sample_dataset<R: Rng + ?Sized>(
    instance: &Instance,
    pairs_per_prompt: usize,
    rng: &mut R,
) -> Result<PreferenceDataset> {
    let reference = instance.reference();
    let mut pairs = Vec::new();
    for x in 0..instance.n_prompts() {
        for _ in 0..pairs_per_prompt {
            let y1 = sample_response(&reference, x, rng);
            let mut y2 = sample_response(&reference, x, rng);
            while y2 == y1 {
                y2 = sample_response(&reference, x, rng);
            }
            pairs.push(annotate_pair(
                instance,
                x,
                y1,
                y2,
                Annotation::Stochastic,
                rng,
            )?);
        }
    }
    Ok(PreferenceDataset::new(pairs))
}

/// Settings for the normalized/unnormalized GEB equivalence check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivalenceSettings {
    pub beta: f64,
    /// Bonus weight in the training comparison.
    pub kappa: f64,
    pub pairs_per_prompt: usize,
    /// Projected-gradient norm below which a point counts as stationary.
    pub stationary_tol: f64,
    /// Smallest entry a located stationary point may have to count as interior.
    pub interior_floor: f64,
}

impl Default for EquivalenceSettings {
    fn default() -> Self {
        Self {
            beta: 1.0,
            kappa: 1e-3,
            pairs_per_prompt: 8,
            stationary_tol: 1e-10,
            interior_floor: 1e-6,
        }
    }
}

fn project_tangent(g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for mut row in out.outer_iter_mut() {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|v| v - mean);
    }
    out
}

fn sup_norm(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Gradients in `π` of the plain and the normalized GEB bonus.
fn geb_pair_grads(
    div: &AlphaDivergence,
    beta: f64,
    design: &UDesign,
    pi: ArrayView2<'_, f64>,
    instance: &Instance,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let q = instance.ref_policy().view();
    let rho = instance.prompt_weights().view();
    let plain = geb_raw_with_grad(div, beta, design, pi, q, rho, true)?
        .1
        .expect("gradient requested");
    let norm = geb_normalized_raw_with_grad(
        div,
        beta,
        design,
        pi,
        q,
        rho,
        Some(NormalizerGradient::Frozen),
    )?
    .1
    .expect("gradient requested");
    Ok((plain, norm))
}

/// Follow `±field` in logit space from `start`; return the end point if it
/// is an interior stationary point of the field.
fn locate_stationary<F>(
    start: &PolicyLogits,
    settings: &EquivalenceSettings,
    field: F,
) -> Result<Option<PolicyTable>>
where
    F: Fn(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
{
    let optimizer = GradientDescent::new(0.5, 20_000, settings.stationary_tol);
    for sign in [1.0, -1.0] {
        let run = optimizer.minimize(start.theta().clone(), |theta| {
            let pol = softmax_rows(theta.view())?;
            let g = field(pol.probs().view())?;
            Ok((0.0, pullback_softmax(pol.probs().view(), g.view()) * sign))
        });
        let Ok(run) = run else { continue };
        let pol = softmax_rows(run.theta.view())?;
        let interior = pol.probs().iter().all(|p| *p > settings.interior_floor);
        if run.converged && interior {
            return Ok(Some(pol));
        }
    }
    Ok(None)
}

/// Equivalence of the normalized and plain GEB objectives.
///
/// Per seed: (a) at located interior stationary points of either bonus the
/// other's tangent-projected gradient (normalizer held fixed) is below
/// `1e-6`; (b) training `dpo − κ·bonus` with each form from the reference
/// policy ends within total variation `1e-3`; (c) `Λ(x, y)` is constant in
/// `y` within `1e-8` and positive. A non-constant `Λ` is reported as a
/// premise failure in the notes rather than as a counterexample.
pub fn normalization_equivalence_test(
    design: &UDesign,
    alpha: f64,
    instance: &Instance,
    seeds: &[u64],
    settings: &EquivalenceSettings,
) -> Result<AuditReport> {
    let div = AlphaDivergence::new(alpha)?;
    design.validate_for(alpha, settings.beta)?;
    let name = design.kind.name();
    let beta = settings.beta;
    let (n, m) = (instance.n_prompts(), instance.n_responses());

    struct SeedResult {
        cross: Vec<f64>,
        tv: f64,
        lambda_spread: f64,
        lambda_min: f64,
        notes: Vec<String>,
    }

    let per_seed: Vec<SeedResult> = seeds
        .par_iter()
        .map(|&seed| -> Result<SeedResult> {
            let mut rng = stream_rng(seed, 41);
            let mut notes = Vec::new();
            let mut cross = Vec::new();
            let start = random_logits(n, m, &mut rng);

            // (a) stationary points of each form, checked against the other
            let plain_field = |pi: ArrayView2<'_, f64>| Ok(geb_pair_grads(&div, beta, design, pi, instance)?.0);
            let norm_field = |pi: ArrayView2<'_, f64>| Ok(geb_pair_grads(&div, beta, design, pi, instance)?.1);
            for (label, field_is_plain) in [("plain", true), ("normalized", false)] {
                let found = if field_is_plain {
                    locate_stationary(&start, settings, plain_field)?
                } else {
                    locate_stationary(&start, settings, norm_field)?
                };
                match found {
                    Some(pol) => {
                        let (gp, gn) = geb_pair_grads(&div, beta, design, pol.probs().view(), instance)?;
                        let other = if field_is_plain { gn } else { gp };
                        cross.push(sup_norm(&project_tangent(&other)));
                    }
                    None => notes.push(format!(
                        "seed {seed}: no interior stationary point of the {label} bonus from this start"
                    )),
                }
            }

            // (b) full training loss with each form
            let data = sample_dataset(instance, settings.pairs_per_prompt, &mut rng)?;
            let plain_spec = BonusSpec {
                kind: BonusKind::Geb,
                design: Some(*design),
                strength: Strength::Kappa(settings.kappa),
                scope: Scope::FullExpectation,
            };
            let norm_spec = BonusSpec {
                kind: BonusKind::GebNormalized,
                ..plain_spec
            };
            let optimizer = GradientDescent::default();
            let init = PolicyLogits::from_policy(&instance.reference());
            let train = |spec: BonusSpec| -> Result<PolicyTable> {
                let obj = Objective::new(div, beta, spec, settings.kappa)?;
                let run = optimizer.minimize(init.theta().clone(), |t| {
                    let (l, g) = obj.loss_and_grad(t.view(), instance, &data)?;
                    Ok((l.total, g))
                })?;
                softmax_rows(run.theta.view())
            };
            let a = train(plain_spec)?;
            let b = train(norm_spec)?;
            let tv = tv_distance(a.probs().view(), b.probs().view());

            // (c) Λ at the start, the reference and both trained policies
            let mut lambda_spread = 0.0f64;
            let mut lambda_min = f64::INFINITY;
            let start_pol = softmax_rows(start.theta().view())?;
            for pol in [&start_pol, &instance.reference(), &a, &b] {
                let lam = lambda_table(&div, beta, design, pol.probs().view(), instance.ref_policy().view())?;
                for row in lam.outer_iter() {
                    let lo = row.fold(f64::INFINITY, |x, &v| x.min(v));
                    let hi = row.fold(f64::NEG_INFINITY, |x, &v| x.max(v));
                    lambda_spread = lambda_spread.max(hi - lo);
                    lambda_min = lambda_min.min(lo);
                }
            }
            Ok(SeedResult {
                cross,
                tv,
                lambda_spread,
                lambda_min,
                notes,
            })
        })
        .collect::<Result<_>>()?;

    let mut bad = Vec::new();
    let mut notes = Vec::new();
    let mut worst = 0.0f64;
    for (i, r) in per_seed.iter().enumerate() {
        notes.extend(r.notes.iter().cloned());
        let mut flag = |kind: usize, value: f64| {
            bad.push(Counterexample {
                alpha,
                design: name.clone(),
                x: i,
                y: kind,
                value,
            })
        };
        for &c in &r.cross {
            worst = worst.max(c);
            if !(c < 1e-6) {
                flag(0, c);
            }
        }
        if !(r.tv < 1e-3) {
            flag(1, r.tv);
        }
        if r.lambda_spread >= 1e-8 {
            notes.push(format!(
                "premise failure: seed {}: Lambda varies in y by {:.3e}",
                seeds[i], r.lambda_spread
            ));
        }
        if !(r.lambda_min > 0.0) {
            flag(2, r.lambda_min);
        }
        notes.push(format!(
            "seed {}: stationary cross-gradients {:?}, training tv {:.3e}, Lambda spread {:.3e}, min Lambda {:.4}",
            seeds[i], r.cross, r.tv, r.lambda_spread, r.lambda_min
        ));
    }
    Ok(AuditReport::new(
        format!("equivalence of normalized and plain geb/{name}"),
        format!(
            "alpha {alpha}, {} seeds, {n}x{m} instance, kappa {}",
            seeds.len(),
            settings.kappa
        ),
        worst,
        bad,
    )
    .with_notes(notes))
}

/// Step-by-step comparison of training with and without FEB.
#[derive(Clone, Debug)]
pub struct TrajectoryComparison {
    /// Largest entrywise policy difference over all steps.
    pub max_step_diff: f64,
    pub final_tv: f64,
}

/// Run `steps` gradient steps on `dpo` and on `dpo − κ·FEB` from the same
/// logits and compare the policies after every step.
pub fn compare_feb_trajectories(
    alpha: f64,
    beta: f64,
    kappa: f64,
    instance: &Instance,
    dataset: &PreferenceDataset,
    start: &PolicyLogits,
    optimizer: &GradientDescent,
) -> Result<TrajectoryComparison> {
    let div = AlphaDivergence::new(alpha)?;
    let plain = Objective::dpo(div, beta)?;
    let feb = Objective::new(div, beta, BonusSpec::feb(Strength::Kappa(kappa)), kappa)?;
    let mut a = start.theta().clone();
    let mut b = start.theta().clone();
    let mut max_step_diff = 0.0f64;
    for _ in 0..optimizer.max_steps {
        let ga = plain.loss_and_grad(a.view(), instance, dataset)?.1;
        let gb = feb.loss_and_grad(b.view(), instance, dataset)?.1;
        a.scaled_add(-optimizer.step_size, &ga);
        b.scaled_add(-optimizer.step_size, &gb);
        let pa = softmax_rows(a.view())?;
        let pb = softmax_rows(b.view())?;
        max_step_diff = max_step_diff.max(sup_norm(&(pa.probs() - pb.probs())));
    }
    let pa = softmax_rows(a.view())?;
    let pb = softmax_rows(b.view())?;
    Ok(TrajectoryComparison {
        max_step_diff,
        final_tv: tv_distance(pa.probs().view(), pb.probs().view()),
    })
}

/// At `α = 1` FEB vanishes identically, so training with it for any `κ`
/// reproduces training without it. Fails where final policies differ by
/// total variation `≥ 1e-6` or any step differs by more than `1e-12`.
pub fn feb_identity_test(
    instance: &Instance,
    dataset: &PreferenceDataset,
    beta: f64,
    kappas: &[f64],
    seeds: &[u64],
) -> Result<AuditReport> {
    let optimizer = GradientDescent::new(0.5, 300, 0.0);
    let jobs: Vec<(f64, u64)> = kappas
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<(f64, u64, TrajectoryComparison)> = jobs
        .par_iter()
        .map(|&(kappa, seed)| {
            let mut rng = stream_rng(seed, 31);
            let start = random_logits(instance.n_prompts(), instance.n_responses(), &mut rng);
            let cmp =
                compare_feb_trajectories(1.0, beta, kappa, instance, dataset, &start, &optimizer)?;
            Ok((kappa, seed, cmp))
        })
        .collect::<Result<_>>()?;
    let worst = results.iter().map(|r| r.2.final_tv).fold(0.0, f64::max);
    let mut notes = Vec::new();
    let bad = results
        .iter()
        .inspect(|(k, s, c)| {
            notes.push(format!(
                "kappa {k}, seed {s}: max step diff {:.3e}, final tv {:.3e}",
                c.max_step_diff, c.final_tv
            ))
        })
        .filter(|(_, _, c)| !(c.final_tv < 1e-6) || !(c.max_step_diff <= 1e-12))
        .map(|(k, s, c)| Counterexample {
            alpha: 1.0,
            design: format!("feb kappa {k}"),
            x: *s as usize,
            y: 0,
            value: c.final_tv.max(c.max_step_diff),
        })
        .collect();
    Ok(AuditReport::new(
        "identity: feb leaves training unchanged at alpha = 1",
        format!(
            "kappas {kappas:?}, seeds {seeds:?}, {} steps",
            optimizer.max_steps
        ),
        worst,
        bad,
    )
    .with_notes(notes))
}

/// Relative sup-norm error of the analytic logit gradient against central
/// differences at one random state.
pub fn gradient_error(
    objective: &Objective,
    instance: &Instance,
    dataset: &PreferenceDataset,
    theta: &PolicyLogits,
    step: f64,
) -> Result<f64> {
    let analytic = objective.grad_logits(theta, instance, dataset)?;
    let mut numeric = Array2::zeros(analytic.dim());
    let mut t = theta.theta().clone();
    for x in 0..t.nrows() {
        for y in 0..t.ncols() {
            let orig = t[[x, y]];
            t[[x, y]] = orig + step;
            let plus = objective
                .total_loss(&PolicyLogits::new(t.clone())?, instance, dataset)?
                .total;
            t[[x, y]] = orig - step;
            let minus = objective
                .total_loss(&PolicyLogits::new(t.clone())?, instance, dataset)?
                .total;
            t[[x, y]] = orig;
            numeric[[x, y]] = (plus - minus) / (2.0 * step);
        }
    }
    let scale = sup_norm(&numeric).max(1e-8);
    Ok(sup_norm(&(&analytic - &numeric)) / scale)
}

/// Every bonus configuration valid at `alpha` with the given weight.
pub fn bonus_grid(alpha: f64, beta: f64, kappa: f64) -> Vec<BonusSpec> {
    let k = Strength::Kappa(kappa);
    let mut out = vec![
        BonusSpec::none(),
        BonusSpec::feb(k),
        BonusSpec::feb(k).with_scope(Scope::RejectedOnly),
    ];
    for kind in [
        UKind::Linear,
        UKind::Inverse,
        UKind::Arctanh,
        UKind::SelmLog,
        UKind::SigmoidRatio,
    ] {
        if UDesign::new(kind).validate_for(alpha, beta).is_err() {
            continue;
        }
        out.push(BonusSpec::geb(kind, k));
        out.push(BonusSpec::geb(kind, k).with_scope(Scope::FullExpectation));
        out.push(
            BonusSpec::geb(kind, k)
                .with_kind(BonusKind::GebNormalized)
                .with_scope(Scope::FullExpectation),
        );
    }
    out
}

/// Analytic vs finite-difference gradients of the total loss for every bonus
/// configuration and α; fails where the relative error is `≥ 1e-5`.
pub fn gradient_audit(
    alphas: &[f64],
    states: usize,
    settings: &AuditSettings,
) -> Result<AuditReport> {
    let kappa = 0.3;
    let beta = 0.5;
    let jobs: Vec<(f64, BonusSpec, usize)> = alphas
        .iter()
        .flat_map(|&a| bonus_grid(a, beta, kappa).into_iter().map(move |b| (a, b)))
        .flat_map(|(a, b)| (0..states).map(move |s| (a, b, s)))
        .collect();
    let errors: Vec<(f64, BonusSpec, f64)> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(alpha, spec, _))| {
            let mut rng = stream_rng(settings.seed, k as u64);
            let inst = random_instance(settings.n_prompts, settings.m_responses, &mut rng)?;
            let data = sample_dataset(&inst, 4, &mut rng)?;
            let theta = PolicyLogits::from_policy(&random_policy(
                settings.n_prompts,
                settings.m_responses,
                &mut rng,
            ));
            let obj = Objective::new(AlphaDivergence::new(alpha)?, beta, spec, kappa)?;
            Ok((
                alpha,
                spec,
                gradient_error(&obj, &inst, &data, &theta, 1e-5)?,
            ))
        })
        .collect::<Result<_>>()?;
    let worst = errors.iter().map(|e| e.2).fold(0.0, f64::max);
    let bad = errors
        .iter()
        .filter(|e| !(e.2 < 1e-5))
        .map(|(a, s, e)| Counterexample {
            alpha: *a,
            design: spec_label(s),
            x: 0,
            y: 0,
            value: *e,
        })
        .collect();
    Ok(AuditReport::new(
        "gradients: analytic logit gradient matches central differences (rel. error < 1e-5)",
        format!(
            "{} configurations x {states} random states, alphas {alphas:?}, step 1e-5",
            errors.len() / states.max(1)
        ),
        worst,
        bad,
    ))
}

pub fn spec_label(s: &BonusSpec) -> String {
    let kind = match s.kind {
        BonusKind::None => "none",
        BonusKind::Feb => "feb",
        BonusKind::Geb => "geb",
        BonusKind::GebNormalized => "geb_normalized",
    };
    let scope = match s.scope {
        Scope::FullExpectation => "full",
        Scope::RejectedOnly => "rejected",
    };
    match s.design {
        Some(d) if s.kind != BonusKind::None && s.kind != BonusKind::Feb => {
            format!("{kind}/{}/{scope}", d.kind.name())
        }
        _ => format!("{kind}/{scope}"),
    }
}

/// The α grid the divergence audit sweeps by default.
pub const DIVERGENCE_ALPHAS: [f64; 7] = [0.0, 1e-7, 0.25, 0.5, 0.75, 1.0 - 1e-7, 1.0];

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(1e-300)
    }
}

/// Branch consistency, convexity, derivative consistency, inverse round trip
/// and monotone `h` for the α-divergence numerics.
pub fn divergence_audit(alphas: &[f64]) -> Result<Vec<AuditReport>> {
    let grid = log_grid(1e-3, 1e3, 121);
    let grid_desc = "121-point log grid on [1e-3, 1e3]";
    let mut reports = Vec::new();

    // branch consistency near the endpoints
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    for (near, limit) in [(1e-7, 0.0), (1.0 - 1e-7, 1.0)] {
        let general = AlphaDivergence::new(near)?;
        let closed = AlphaDivergence::new(limit)?;
        for (i, &u) in grid.iter().enumerate() {
            let pairs = [
                (general.f(u)?, closed.f(u)?),
                (general.f_prime(u)?, closed.f_prime(u)?),
                (general.h(u)?, closed.h(u)?),
            ];
            for (k, (g, c)) in pairs.into_iter().enumerate() {
                // |f| below 1e-6 is dominated by the O(α) offset between branches
                let e = if c.abs() < 1e-6 {
                    (g - c).abs()
                } else {
                    rel_err(g, c)
                };
                worst = worst.max(e);
                if !(e < 1e-4) {
                    bad.push(Counterexample {
                        alpha: near,
                        design: ["f", "f'", "h"][k].into(),
                        x: i,
                        y: 0,
                        value: e,
                    });
                }
            }
        }
    }
    reports.push(AuditReport::new(
        "branch consistency: general formula within 1e-4 (relative) of the closed-form limit",
        format!("alpha in {{1e-7, 1 - 1e-7}}, {grid_desc}"),
        worst,
        bad,
    ));

    // convexity and monotone h
    let mut bad = Vec::new();
    let mut worst = f64::INFINITY;
    for &a in alphas {
        let d = AlphaDivergence::new(a)?;
        for (i, &u) in grid.iter().enumerate() {
            let f2 = d.f_second(u)?;
            worst = worst.min(f2);
            if !(f2 > 0.0) {
                bad.push(Counterexample {
                    alpha: a,
                    design: "f''".into(),
                    x: i,
                    y: 0,
                    value: f2,
                });
            }
        }
        for i in 1..grid.len() {
            let (lo, hi) = (d.h(grid[i - 1])?, d.h(grid[i])?);
            if !(hi > lo) {
                bad.push(Counterexample {
                    alpha: a,
                    design: "h increasing".into(),
                    x: i,
                    y: 0,
                    value: hi - lo,
                });
            }
        }
    }
    reports.push(AuditReport::new(
        "convexity: f'' > 0, and h strictly increasing",
        format!("alphas {alphas:?}, {grid_desc}"),
        worst,
        bad,
    ));

    // derivative consistency by central differences
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    for &a in alphas {
        let d = AlphaDivergence::new(a)?;
        for (i, &u) in grid.iter().enumerate() {
            let s = 1e-6 * u;
            let fd = (d.f(u + s)? - d.f(u - s)?) / (2.0 * s);
            let exact = d.f_prime(u)?;
            // at u = 1 both vanish; compare on the scale of f''
            let e = if exact.abs() < 1e-3 {
                (fd - exact).abs() / d.f_second(u)?.max(1.0)
            } else {
                rel_err(fd, exact)
            };
            worst = worst.max(e);
            if !(e < 1e-6) {
                bad.push(Counterexample {
                    alpha: a,
                    design: "f' vs fd".into(),
                    x: i,
                    y: 0,
                    value: e,
                });
            }
        }
    }
    reports.push(AuditReport::new(
        "derivative consistency: central difference of f matches f' (relative error < 1e-6, step 1e-6 u)",
        format!("alphas {alphas:?}, {grid_desc}"),
        worst,
        bad,
    ));

    // inverse round trip
    let mut bad = Vec::new();
    let mut worst = 0.0f64;
    for &a in alphas {
        let d = AlphaDivergence::new(a)?;
        // the image of the u-grid under f'
        let (lo, hi) = (d.f_prime(grid[0])?, d.f_prime(grid[grid.len() - 1])?);
        for k in 0..=200 {
            let v = lo + (hi - lo) * k as f64 / 200.0;
            let back = d.f_prime(d.f_prime_inverse(v)?)?;
            let e = (back - v).abs();
            worst = worst.max(e);
            if !(e < 1e-10) {
                bad.push(Counterexample {
                    alpha: a,
                    design: "f'((f')^-1(v))".into(),
                    x: k,
                    y: 0,
                    value: e,
                });
            }
        }
    }
    reports.push(AuditReport::new(
        "round trip: |f'((f')^-1(v)) - v| < 1e-10",
        format!("alphas {alphas:?}, 201 points spanning f'([1e-3, 1e3])"),
        worst,
        bad,
    ));
    Ok(reports)
}

/// Named groups of audits run by `bonuslab verify`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Optimism,
    Collapse,
    Equivalence,
    Gradients,
    Divergence,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "optimism" => Ok(Suite::Optimism),
            "collapse" => Ok(Suite::Collapse),
            "equivalence" => Ok(Suite::Equivalence),
            "gradients" => Ok(Suite::Gradients),
            "divergence" => Ok(Suite::Divergence),
            other => Err(Error::Config(format!(
                "unknown suite {other:?}; expected all, optimism, collapse, equivalence, gradients or divergence"
            ))),
        }
    }
}

/// α values of the FEB sign and collapse audits.
pub const FEB_ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// α values of the GEB optimism audit.
pub const GEB_ALPHAS: [f64; 3] = [0.0, 0.5, 1.0];
/// Designs the optimism audit covers, where valid for the α at hand.
pub const GEB_DESIGNS: [UKind; 4] = [
    UKind::Linear,
    UKind::Inverse,
    UKind::Arctanh,
    UKind::SelmLog,
];
/// Designs and α values of the equivalence audit.
pub const EQUIVALENCE_DESIGNS: [UKind; 3] = [UKind::Linear, UKind::Inverse, UKind::Arctanh];
pub const EQUIVALENCE_ALPHAS: [f64; 2] = [0.5, 1.0];

/// FEB sign audit at 200 points per α.
pub fn feb_optimism_suite(seed: u64) -> Result<AuditReport> {
    let settings = AuditSettings {
        seed,
        ..AuditSettings::default()
    };
    optimism_audit(AuditedBonus::Feb, &FEB_ALPHAS, 200, &settings)
}

/// GEB sign audit and hypothesis check for every valid design and α.
pub fn geb_optimism_suite(seed: u64) -> Result<Vec<AuditReport>> {
    let settings = AuditSettings {
        seed,
        ..AuditSettings::default()
    };
    let mut out = Vec::new();
    for alpha in GEB_ALPHAS {
        for kind in GEB_DESIGNS {
            let design = UDesign::new(kind);
            if design.validate_for(alpha, settings.beta).is_err() {
                continue;
            }
            out.push(optimism_audit(
                AuditedBonus::Geb(design),
                &[alpha],
                200,
                &settings,
            )?);
            out.push(optimism_condition_check(&design, alpha, settings.beta, 50)?);
        }
    }
    Ok(out)
}

/// FEB collapse on 10 instances per α.
pub fn collapse_suite(seed: u64) -> Result<AuditReport> {
    let settings = AuditSettings {
        seed,
        ..AuditSettings::default()
    };
    collapse_audit(&FEB_ALPHAS, 10, 1e-4, &settings)
}

/// Normalized/plain GEB equivalence on 5 seeds per design and α.
pub fn equivalence_suite(seed: u64) -> Result<Vec<AuditReport>> {
    let instance = random_instance(3, 4, &mut stream_rng(seed, 4100))?;
    let seeds: Vec<u64> = (0..5).map(|k| seed + k).collect();
    let settings = EquivalenceSettings::default();
    let mut out = Vec::new();
    for alpha in EQUIVALENCE_ALPHAS {
        for kind in EQUIVALENCE_DESIGNS {
            out.push(normalization_equivalence_test(
                &UDesign::new(kind),
                alpha,
                &instance,
                &seeds,
                &settings,
            )?);
        }
    }
    Ok(out)
}

/// FEB identity at `α = 1` for κ ∈ {0.1, 1, 10} on 3 seeds.
pub fn identity_suite(seed: u64) -> Result<AuditReport> {
    let mut rng = stream_rng(seed, 3100);
    let instance = random_instance(3, 4, &mut rng)?;
    let data = sample_dataset(&instance, 8, &mut rng)?;
    let seeds: Vec<u64> = (0..3).map(|k| seed + k).collect();
    feb_identity_test(&instance, &data, 1.0, &[0.1, 1.0, 10.0], &seeds)
}

/// Gradient fidelity over every bonus configuration on the divergence α grid.
pub fn gradient_suite(seed: u64) -> Result<AuditReport> {
    let settings = AuditSettings {
        seed,
        ..AuditSettings::default()
    };
    gradient_audit(&DIVERGENCE_ALPHAS, 3, &settings)
}

/// Run a suite.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<AuditReport>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Divergence) {
        out.extend(divergence_audit(&DIVERGENCE_ALPHAS)?);
    }
    if matches!(suite, Suite::All | Suite::Optimism) {
        out.push(feb_optimism_suite(seed)?);
        out.extend(geb_optimism_suite(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Collapse) {
        out.push(collapse_suite(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Equivalence) {
        out.push(identity_suite(seed)?);
        out.extend(equivalence_suite(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Gradients) {
        out.push(gradient_suite(seed)?);
    }
    Ok(out)
}
