//! Training loss, regularized RL objective and the reward ↔ policy maps.
//!
//! The f-DPO pair loss reparameterizes the Bradley–Terry reward through the
//! policy, `r = β f'(π/π_ref)`:
//!
//! ```text
//! ℓ(x, y_w, y_l) = −ln σ(β f'(π_w/π_ref,w) − β f'(π_l/π_ref,l))
//! total          = mean ℓ − κ · bonus
//! ```
//!
//! At `α = 1` this is the standard DPO loss. Gradients are analytic: each
//! term yields `∂/∂π` as a table, which is pulled back through the row-wise
//! softmax.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bonus::{bonus_with_grad, BonusKind, BonusSpec};
use crate::divergence::{AlphaDivergence, Branch};
use crate::error::{Error, Result};
use crate::math::{neg_log_sigmoid, sigmoid_neg};
use crate::tabular::{
    softmax_rows, Instance, PolicyLogits, PolicyTable, PreferenceDataset, PreferencePair,
};

/// Components of the training loss at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dpo_term: f64,
    pub bonus_term: f64,
    pub kappa: f64,
    /// `dpo_term − κ · bonus_term`
    pub total: f64,
    /// `|κ · bonus_term| / |dpo_term|`, zero when the DPO term vanishes.
    pub ratio: f64,
}

impl LossBreakdown {
    fn new(dpo_term: f64, bonus_term: f64, kappa: f64) -> Self {
        let scaled = kappa * bonus_term;
        let ratio = if dpo_term == 0.0 {
            0.0
        } else {
            (scaled / dpo_term).abs()
        };
        Self {
            dpo_term,
            bonus_term,
            kappa,
            total: dpo_term - scaled,
            ratio,
        }
    }
}

fn ratio_at(pi: ArrayView2<'_, f64>, q: ArrayView2<'_, f64>, x: usize, y: usize) -> Result<f64> {
    let r = pi[[x, y]] / q[[x, y]];
    if r > 0.0 && r.is_finite() {
        Ok(r)
    } else {
        Err(Error::Numeric(format!("ratio π/π_ref = {r} at ({x}, {y})")))
    }
}

fn pair_margin(
    div: &AlphaDivergence,
    beta: f64,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    pair: &PreferencePair,
) -> Result<(f64, f64, f64)> {
    let uw = ratio_at(pi, q, pair.prompt, pair.winner)?;
    let ul = ratio_at(pi, q, pair.prompt, pair.loser)?;
    Ok((beta * (div.f_prime(uw)? - div.f_prime(ul)?), uw, ul))
}

/// f-DPO loss of a single comparison.
pub fn fdpo_pair_loss(
    policy: &PolicyTable,
    instance: &Instance,
    pair: &PreferencePair,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<f64> {
    instance.check_cell(pair.prompt, pair.winner)?;
    instance.check_cell(pair.prompt, pair.loser)?;
    let (z, _, _) = pair_margin(
        div,
        beta,
        policy.probs().view(),
        instance.ref_policy().view(),
        pair,
    )?;
    Ok(neg_log_sigmoid(z))
}

/// Mean f-DPO loss and its gradient in `π`.
fn dpo_with_grad(
    div: &AlphaDivergence,
    beta: f64,
    pi: ArrayView2<'_, f64>,
    q: ArrayView2<'_, f64>,
    dataset: &PreferenceDataset,
) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(pi.dim());
    if dataset.is_empty() {
        return Ok((0.0, grad));
    }
    let n = dataset.len() as f64;
    let mut total = 0.0;
    for pair in &dataset.pairs {
        let (z, uw, ul) = pair_margin(div, beta, pi, q, pair)?;
        total += neg_log_sigmoid(z);
        // dℓ/dz = −σ(−z), dz/dπ_w = β f''(u_w)/q_w, dz/dπ_l = −β f''(u_l)/q_l
        let s = -sigmoid_neg(z) / n;
        let x = pair.prompt;
        grad[[x, pair.winner]] += s * beta * div.f_second(uw)? / q[[x, pair.winner]];
        grad[[x, pair.loser]] -= s * beta * div.f_second(ul)? / q[[x, pair.loser]];
    }
    Ok((total / n, grad))
}

/// Pull a gradient in `π` back through the row-wise softmax.
pub fn pullback_softmax(pi: ArrayView2<'_, f64>, grad_pi: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(pi.dim());
    for x in 0..pi.nrows() {
        let mean: f64 = pi
            .row(x)
            .iter()
            .zip(grad_pi.row(x))
            .map(|(p, g)| p * g)
            .sum();
        for y in 0..pi.ncols() {
            out[[x, y]] = pi[[x, y]] * (grad_pi[[x, y]] - mean);
        }
    }
    out
}

/// The training objective `mean f-DPO − κ · bonus` with resolved `κ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub divergence: AlphaDivergence,
    pub beta: f64,
    pub bonus: BonusSpec,
    pub kappa: f64,
}

impl Objective {
    pub fn new(
        divergence: AlphaDivergence,
        beta: f64,
        bonus: BonusSpec,
        kappa: f64,
    ) -> Result<Self> {
        bonus.validate(divergence.alpha(), beta)?;
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Config(format!(
                "kappa = {kappa} must be finite and ≥ 0"
            )));
        }
        Ok(Self {
            divergence,
            beta,
            bonus,
            kappa,
        })
    }

    /// f-DPO only.
    pub fn dpo(divergence: AlphaDivergence, beta: f64) -> Result<Self> {
        Self::new(divergence, beta, BonusSpec::none(), 0.0)
    }

    /// Loss breakdown and `∂total/∂π` at a policy table.
    pub fn evaluate_policy(
        &self,
        pi: ArrayView2<'_, f64>,
        instance: &Instance,
        dataset: &PreferenceDataset,
    ) -> Result<(LossBreakdown, Array2<f64>)> {
        let q = instance.ref_policy().view();
        let (dpo, mut grad) = dpo_with_grad(&self.divergence, self.beta, pi, q, dataset)?;
        let bonus = if self.bonus.kind == BonusKind::None {
            0.0
        } else {
            let (b, gb) = bonus_with_grad(
                &self.bonus,
                &self.divergence,
                self.beta,
                pi,
                instance,
                dataset,
            )?;
            grad.scaled_add(-self.kappa, &gb);
            b
        };
        Ok((LossBreakdown::new(dpo, bonus, self.kappa), grad))
    }

    /// Loss breakdown and `∂total/∂θ`.
    pub fn loss_and_grad(
        &self,
        theta: ArrayView2<'_, f64>,
        instance: &Instance,
        dataset: &PreferenceDataset,
    ) -> Result<(LossBreakdown, Array2<f64>)> {
        let policy = softmax_rows(theta)?;
        let (loss, grad_pi) = self.evaluate_policy(policy.probs().view(), instance, dataset)?;
        Ok((
            loss,
            pullback_softmax(policy.probs().view(), grad_pi.view()),
        ))
    }

    pub fn total_loss(
        &self,
        logits: &PolicyLogits,
        instance: &Instance,
        dataset: &PreferenceDataset,
    ) -> Result<LossBreakdown> {
        let policy = softmax_rows(logits.theta().view())?;
        let q = instance.ref_policy().view();
        let pi = policy.probs().view();
        let dpo = if dataset.is_empty() {
            0.0
        } else {
            let mut s = 0.0;
            for pair in &dataset.pairs {
                s += neg_log_sigmoid(pair_margin(&self.divergence, self.beta, pi, q, pair)?.0);
            }
            s / dataset.len() as f64
        };
        let bonus = match self.bonus.kind {
            BonusKind::None => 0.0,
            _ => {
                bonus_with_grad(
                    &self.bonus,
                    &self.divergence,
                    self.beta,
                    pi,
                    instance,
                    dataset,
                )?
                .0
            }
        };
        Ok(LossBreakdown::new(dpo, bonus, self.kappa))
    }

    pub fn grad_logits(
        &self,
        logits: &PolicyLogits,
        instance: &Instance,
        dataset: &PreferenceDataset,
    ) -> Result<Array2<f64>> {
        Ok(self
            .loss_and_grad(logits.theta().view(), instance, dataset)?
            .1)
    }
}

/// `total_loss` for a bonus with a fixed `κ`.
pub fn total_loss(
    logits: &PolicyLogits,
    instance: &Instance,
    dataset: &PreferenceDataset,
    bonus: &BonusSpec,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<LossBreakdown> {
    let kappa = resolved_kappa(bonus)?;
    Objective::new(*div, beta, *bonus, kappa)?.total_loss(logits, instance, dataset)
}

/// Exact gradient of [`total_loss`] with respect to every logit.
pub fn grad_logits(
    logits: &PolicyLogits,
    instance: &Instance,
    dataset: &PreferenceDataset,
    bonus: &BonusSpec,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<Array2<f64>> {
    let kappa = resolved_kappa(bonus)?;
    Objective::new(*div, beta, *bonus, kappa)?.grad_logits(logits, instance, dataset)
}

fn resolved_kappa(bonus: &BonusSpec) -> Result<f64> {
    if bonus.kind == BonusKind::None {
        return Ok(0.0);
    }
    bonus.kappa().ok_or_else(|| {
        Error::Config(
            "kappa is given as a target ratio; resolve it with kappa_from_ratio first".into(),
        )
    })
}

/// `J(π) = E_{ρ,π} r − β E_{ρ,π_ref} f(π/π_ref)`.
pub fn rl_objective(
    policy: &PolicyTable,
    reward: ArrayView2<'_, f64>,
    instance: &Instance,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<f64> {
    let pi = policy.probs();
    let q = instance.ref_policy();
    if reward.dim() != pi.dim() || q.dim() != pi.dim() {
        return Err(Error::Config(
            "reward, policy and reference shapes differ".into(),
        ));
    }
    let mut total = 0.0;
    for (x, w) in instance.prompt_weights().iter().enumerate() {
        let mut row = 0.0;
        for y in 0..pi.ncols() {
            let p = pi[[x, y]];
            row += p * reward[[x, y]]
                - beta * q[[x, y]] * div.f(ratio_at(pi.view(), q.view(), x, y)?)?;
        }
        total += w * row;
    }
    Ok(total)
}

/// `∂J/∂π = r − β f'(π/π_ref)` as a table.
pub fn rl_objective_grad(
    policy: &PolicyTable,
    reward: ArrayView2<'_, f64>,
    instance: &Instance,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<Array2<f64>> {
    let pi = policy.probs();
    let q = instance.ref_policy();
    let mut g = Array2::zeros(pi.dim());
    for ((x, y), v) in g.indexed_iter_mut() {
        let w = instance.prompt_weights()[x];
        *v = w * (reward[[x, y]] - beta * div.f_prime(ratio_at(pi.view(), q.view(), x, y)?)?);
    }
    Ok(g)
}

/// The maximizer of [`rl_objective`] over the simplex.
///
/// Stationarity gives `π = π_ref (f')⁻¹((r − μ(x))/β)` with a per-prompt
/// shift `μ(x)` fixed by normalization. For reverse KL the shift factors out
/// as the usual partition function; for α < 1 it is found by bisection.
pub fn closed_form_optimal_policy(
    reward: ArrayView2<'_, f64>,
    instance: &Instance,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<PolicyTable> {
    let q = instance.ref_policy();
    if reward.dim() != q.dim() {
        return Err(Error::Config("reward and reference shapes differ".into()));
    }
    if let Some(((x, y), r)) = reward.indexed_iter().find(|(_, r)| !r.is_finite()) {
        return Err(Error::Numeric(format!(
            "reward[{x}][{y}] = {r} is not finite"
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta = {beta} must be positive")));
    }
    let mut out = Array2::zeros(q.dim());
    for x in 0..q.nrows() {
        let r = reward.row(x);
        let qx = q.row(x);
        let r_max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut row: Vec<f64> = if div.branch() == Branch::ReverseKl {
            r.iter()
                .zip(qx)
                .map(|(r, q)| q * ((r - r_max) / beta).exp())
                .collect()
        } else {
            let mass = |mu: f64| -> Result<f64> {
                let mut s = 0.0;
                for (r, q) in r.iter().zip(qx) {
                    s += q * div.f_prime_inverse((r - mu) / beta)?;
                }
                Ok(s)
            };
            // Σ q (f')⁻¹((r − μ)/β) decreases in μ; it is ≤ 1 at μ = max r
            // and blows up as μ falls to max r − β sup f'.
            let mut lo = r_max - beta * div.f_prime_sup();
            let mut hi = r_max;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if mass(mid)? > 1.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mu = hi;
            r.iter()
                .zip(qx)
                .map(|(r, q)| Ok(q * div.f_prime_inverse((r - mu) / beta)?))
                .collect::<Result<_>>()?
        };
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
        out.row_mut(x).assign(&ndarray::Array1::from(row));
    }
    PolicyTable::new(out)
}

/// Z-free reward representative `β f'(π/π_ref)`.
pub fn reward_from_policy(
    policy: &PolicyTable,
    instance: &Instance,
    div: &AlphaDivergence,
    beta: f64,
) -> Result<Array2<f64>> {
    let pi = policy.probs();
    let q = instance.ref_policy();
    let mut out = Array2::zeros(pi.dim());
    for ((x, y), v) in out.indexed_iter_mut() {
        *v = beta * div.f_prime(ratio_at(pi.view(), q.view(), x, y)?)?;
    }
    Ok(out)
}
