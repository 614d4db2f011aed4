//! Finite prompt/response world: instances, policies, sampling and the
//! Bradley–Terry preference oracle.
//!
//! Responses are atomic arms. A policy is an `n × m` row-stochastic table,
//! one row per prompt, parameterized by unconstrained logits through a
//! row-wise softmax.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::logistic;

/// Smallest probability a [`PolicyTable`] entry may take.
pub const PROB_FLOOR: f64 = 1e-12;
/// Default bound on `|r*|`.
pub const DEFAULT_R_MAX: f64 = 5.0;
/// Tolerance on row sums and prompt-weight sums.
pub const SUM_TOL: f64 = 1e-12;

fn check_finite(table: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    if let Some(((x, y), v)) = table.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what}[{x}][{y}] = {v} is not finite"
        )));
    }
    Ok(())
}

fn check_row_stochastic(table: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    check_finite(table, what)?;
    for (x, row) in table.outer_iter().enumerate() {
        if let Some(v) = row.iter().find(|v| **v < 0.0) {
            return Err(Error::Config(format!(
                "{what} row {x} has negative entry {v}"
            )));
        }
        let s = row.sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::Config(format!("{what} row {x} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// Raise entries below [`PROB_FLOOR`] and renormalize the affected rows.
fn apply_floor(probs: &mut Array2<f64>) {
    for mut row in probs.outer_iter_mut() {
        if row.iter().any(|p| *p < PROB_FLOOR) {
            row.mapv_inplace(|p| p.max(PROB_FLOOR));
            let s = row.sum();
            row.mapv_inplace(|p| p / s);
        }
    }
}

/// A tabular problem: prompt distribution `ρ`, reference policy `π_ref` and
/// ground-truth reward `r*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    prompt_weights: Array1<f64>,
    ref_policy: Array2<f64>,
    true_reward: Array2<f64>,
    needle: Option<Vec<usize>>,
}

/// JSON layout of an [`Instance`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub prompt_weights: Vec<f64>,
    pub ref_policy: Vec<Vec<f64>>,
    pub true_reward: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle: Option<Vec<usize>>,
}

fn rows_to_array(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("{what} rows have unequal lengths")));
    }
    Array2::from_shape_vec((n, m), rows.concat()).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl Instance {
    pub fn new(
        prompt_weights: Array1<f64>,
        ref_policy: Array2<f64>,
        true_reward: Array2<f64>,
    ) -> Result<Self> {
        Self::with_r_max(prompt_weights, ref_policy, true_reward, DEFAULT_R_MAX)
    }

    pub fn with_r_max(
        prompt_weights: Array1<f64>,
        ref_policy: Array2<f64>,
        true_reward: Array2<f64>,
        r_max: f64,
    ) -> Result<Self> {
        let (n, m) = ref_policy.dim();
        if n == 0 || m < 2 {
            return Err(Error::Config(format!(
                "instance needs at least one prompt and two responses, got {n}×{m}"
            )));
        }
        if prompt_weights.len() != n || true_reward.dim() != (n, m) {
            return Err(Error::Config(format!(
                "shape mismatch: {} prompt weights, ref_policy {n}×{m}, true_reward {:?}",
                prompt_weights.len(),
                true_reward.dim()
            )));
        }
        if prompt_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "prompt weights must be finite and non-negative".into(),
            ));
        }
        let s = prompt_weights.sum();
        if (s - 1.0).abs() > SUM_TOL {
            return Err(Error::Config(format!("prompt weights sum to {s}, not 1")));
        }
        check_row_stochastic(ref_policy.view(), "ref_policy")?;
        if let Some(((x, y), p)) = ref_policy.indexed_iter().find(|(_, p)| **p < PROB_FLOOR) {
            return Err(Error::Config(format!(
                "ref_policy[{x}][{y}] = {p} is below the probability floor {PROB_FLOOR}"
            )));
        }
        check_finite(true_reward.view(), "true_reward")?;
        if let Some(((x, y), r)) = true_reward.indexed_iter().find(|(_, r)| r.abs() > r_max) {
            return Err(Error::Config(format!(
                "true_reward[{x}][{y}] = {r} exceeds r_max = {r_max}"
            )));
        }
        Ok(Self {
            prompt_weights,
            ref_policy,
            true_reward,
            needle: None,
        })
    }

    /// Attach the per-prompt index of the designated optimal response.
    pub fn with_needle(mut self, needle: Vec<usize>) -> Result<Self> {
        if needle.len() != self.n_prompts() {
            return Err(Error::Config(format!(
                "needle has {} entries for {} prompts",
                needle.len(),
                self.n_prompts()
            )));
        }
        if let Some(y) = needle.iter().find(|y| **y >= self.n_responses()) {
            return Err(Error::Index(format!(
                "needle index {y} ≥ {}",
                self.n_responses()
            )));
        }
        self.needle = Some(needle);
        Ok(self)
    }

    /// Same prompts and rewards with a different reference policy.
    pub fn with_ref_policy(&self, policy: &PolicyTable) -> Result<Self> {
        let mut next = Self::new(
            self.prompt_weights.clone(),
            policy.probs().to_owned(),
            self.true_reward.clone(),
        )?;
        next.needle = self.needle.clone();
        Ok(next)
    }

    pub fn n_prompts(&self) -> usize {
        self.ref_policy.nrows()
    }

    pub fn n_responses(&self) -> usize {
        self.ref_policy.ncols()
    }

    pub fn prompt_weights(&self) -> &Array1<f64> {
        &self.prompt_weights
    }

    pub fn ref_policy(&self) -> &Array2<f64> {
        &self.ref_policy
    }

    pub fn true_reward(&self) -> &Array2<f64> {
        &self.true_reward
    }

    pub fn needle(&self) -> Option<&[usize]> {
        self.needle.as_deref()
    }

    /// The reference policy as a [`PolicyTable`].
    pub fn reference(&self) -> PolicyTable {
        PolicyTable {
            probs: self.ref_policy.clone(),
        }
    }

    pub(crate) fn check_cell(&self, x: usize, y: usize) -> Result<()> {
        if x >= self.n_prompts() || y >= self.n_responses() {
            return Err(Error::Index(format!(
                "cell ({x}, {y}) outside {}×{}",
                self.n_prompts(),
                self.n_responses()
            )));
        }
        Ok(())
    }

    pub fn to_doc(&self) -> InstanceDoc {
        let rows = |t: &Array2<f64>| t.outer_iter().map(|r| r.to_vec()).collect();
        InstanceDoc {
            prompt_weights: self.prompt_weights.to_vec(),
            ref_policy: rows(&self.ref_policy),
            true_reward: rows(&self.true_reward),
            needle: self.needle.clone(),
        }
    }

    pub fn from_doc(doc: InstanceDoc) -> Result<Self> {
        let inst = Self::new(
            Array1::from(doc.prompt_weights),
            rows_to_array(&doc.ref_policy, "ref_policy")?,
            rows_to_array(&doc.true_reward, "true_reward")?,
        )?;
        match doc.needle {
            Some(n) => inst.with_needle(n),
            None => Ok(inst),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Unconstrained policy parameters `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyLogits(Array2<f64>);

impl PolicyLogits {
    pub fn new(theta: Array2<f64>) -> Result<Self> {
        check_finite(theta.view(), "logits")?;
        Ok(Self(theta))
    }

    /// Logits whose softmax reproduces `policy`: `θ = ln π`.
    pub fn from_policy(policy: &PolicyTable) -> Self {
        Self(policy.probs.mapv(f64::ln))
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// A row-stochastic policy table `π(y|x)` with every entry at least
/// [`PROB_FLOOR`].
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyTable {
    probs: Array2<f64>,
}

impl PolicyTable {
    /// Validate a row-stochastic table and apply the probability floor.
    pub fn new(mut probs: Array2<f64>) -> Result<Self> {
        check_row_stochastic(probs.view(), "policy")?;
        apply_floor(&mut probs);
        Ok(Self { probs })
    }

    pub fn uniform(n: usize, m: usize) -> Self {
        Self {
            probs: Array2::from_elem((n, m), 1.0 / m as f64),
        }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probs.dim()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs[[x, y]]
    }
}

/// Row-wise softmax of the logits, floored at [`PROB_FLOOR`].
pub fn softmax_policy(theta: &PolicyLogits) -> Result<PolicyTable> {
    softmax_rows(theta.theta().view())
}

pub(crate) fn softmax_rows(theta: ArrayView2<'_, f64>) -> Result<PolicyTable> {
    check_finite(theta, "logits")?;
    let mut probs = theta.to_owned();
    for mut row in probs.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|t| (t - max).exp());
        let s = row.sum();
        row.mapv_inplace(|e| e / s);
    }
    apply_floor(&mut probs);
    Ok(PolicyTable { probs })
}

/// Bradley–Terry probability that `y1` is preferred to `y2` under `r*`.
pub fn bt_preference_prob(instance: &Instance, x: usize, y1: usize, y2: usize) -> Result<f64> {
    instance.check_cell(x, y1)?;
    instance.check_cell(x, y2)?;
    let r = instance.true_reward();
    Ok(logistic(r[[x, y1]] - r[[x, y2]]))
}

/// Categorical draw from row `x` by inverse CDF on one uniform variate.
pub fn sample_response<R: Rng + ?Sized>(policy: &PolicyTable, x: usize, rng: &mut R) -> usize {
    let row = policy.probs.row(x);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (y, p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return y;
        }
    }
    // Rounding left u ≥ Σp; fall back to the last response with mass.
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

/// How preference labels are produced from `r*`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    /// Winner drawn from the Bradley–Terry probability.
    #[default]
    Stochastic,
    /// Higher true reward wins; ties go to the lower index.
    Deterministic,
}

/// One labelled comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: usize,
    pub winner: usize,
    pub loser: usize,
}

/// Comparisons collected in one iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub iteration: usize,
    pub seed: u64,
}

impl PreferenceDataset {
    pub fn new(pairs: Vec<PreferencePair>) -> Self {
        Self {
            pairs,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Check every pair against the instance shape.
    pub fn validate(&self, instance: &Instance) -> Result<()> {
        for p in &self.pairs {
            instance.check_cell(p.prompt, p.winner)?;
            instance.check_cell(p.prompt, p.loser)?;
            if p.winner == p.loser {
                return Err(Error::InvalidPair(p.winner));
            }
        }
        Ok(())
    }
}

/// Label the comparison of `y1` and `y2` on prompt `x`.
pub fn annotate_pair<R: Rng + ?Sized>(
    instance: &Instance,
    x: usize,
    y1: usize,
    y2: usize,
    mode: Annotation,
    rng: &mut R,
) -> Result<PreferencePair> {
    if y1 == y2 {
        return Err(Error::InvalidPair(y1));
    }
    let first_wins = match mode {
        Annotation::Stochastic => {
            let p = bt_preference_prob(instance, x, y1, y2)?;
            rng.random::<f64>() < p
        }
        Annotation::Deterministic => {
            instance.check_cell(x, y1)?;
            instance.check_cell(x, y2)?;
            let r = instance.true_reward();
            let (a, b) = (r[[x, y1]], r[[x, y2]]);
            a > b || (a == b && y1 < y2)
        }
    };
    let (winner, loser) = if first_wins { (y1, y2) } else { (y2, y1) };
    Ok(PreferencePair {
        prompt: x,
        winner,
        loser,
    })
}

/// An instance whose best response per prompt carries tiny reference mass.
///
/// The needle is the last response of every row. Its reference mass is
/// `needle_ref_mass` and the rest is spread uniformly. Non-needle rewards are
/// uniform on `[-1, 1]` and the needle reward is their maximum plus
/// `reward_gap`.
pub fn generate_needle_instance<R: Rng + ?Sized>(
    n_prompts: usize,
    m_responses: usize,
    needle_ref_mass: f64,
    reward_gap: f64,
    rng: &mut R,
) -> Result<Instance> {
    if n_prompts == 0 || m_responses < 2 {
        return Err(Error::Config(format!(
            "needle instance needs n_prompts ≥ 1 and m_responses ≥ 2, got {n_prompts}×{m_responses}"
        )));
    }
    let m = m_responses as f64;
    if !(needle_ref_mass > 0.0 && needle_ref_mass < 1.0 / m) {
        return Err(Error::Config(format!(
            "needle_ref_mass = {needle_ref_mass} must lie in (0, 1/{m_responses})"
        )));
    }
    if !(reward_gap > 0.0) || 1.0 + reward_gap > DEFAULT_R_MAX {
        return Err(Error::Config(format!(
            "reward_gap = {reward_gap} must lie in (0, {}]",
            DEFAULT_R_MAX - 1.0
        )));
    }
    let rest = (1.0 - needle_ref_mass) / (m - 1.0);
    let needle_idx = m_responses - 1;
    let mut ref_policy = Array2::from_elem((n_prompts, m_responses), rest);
    ref_policy.column_mut(needle_idx).fill(needle_ref_mass);
    let mut reward = Array2::zeros((n_prompts, m_responses));
    for mut row in reward.outer_iter_mut() {
        let mut best = f64::NEG_INFINITY;
        for y in 0..needle_idx {
            let r = rng.random_range(-1.0..=1.0);
            row[y] = r;
            best = best.max(r);
        }
        row[needle_idx] = best + reward_gap;
    }
    let weights = Array1::from_elem(n_prompts, 1.0 / n_prompts as f64);
    Instance::new(weights, ref_policy, reward)?.with_needle(vec![needle_idx; n_prompts])
}

/// A random probability vector bounded away from zero: a flat-Dirichlet
/// draw mixed with `mix` of the uniform distribution.
fn random_simplex_point<R: Rng + ?Sized>(m: usize, mix: f64, rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..m).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = g.iter().sum();
    g.iter()
        .map(|v| (1.0 - mix) * v / s + mix / m as f64)
        .collect()
}

fn random_stochastic_table<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    mix: f64,
    rng: &mut R,
) -> Array2<f64> {
    let mut t = Array2::zeros((n, m));
    for mut row in t.outer_iter_mut() {
        let p = random_simplex_point(m, mix, rng);
        row.assign(&Array1::from(p));
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    t
}

/// A random well-conditioned instance: Dirichlet prompt weights and reference
/// rows mixed with 20% uniform mass, rewards uniform on `[-1, 1]`.
pub fn random_instance<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Instance> {
    let mut w = Array1::from(random_simplex_point(n, 0.2, rng));
    let s = w.sum();
    w.mapv_inplace(|v| v / s);
    let ref_policy = random_stochastic_table(n, m, 0.2, rng);
    let reward = Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..=1.0));
    Instance::new(w, ref_policy, reward)
}

/// A random interior policy with entries bounded away from 0 and 1.
pub fn random_policy<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> PolicyTable {
    PolicyTable {
        probs: random_stochastic_table(n, m, 0.2, rng),
    }
}

/// Total-variation distance per prompt, averaged over prompts.
pub fn tv_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let per_row = (&a - &b).mapv(f64::abs).sum_axis(Axis(1)) * 0.5;
    per_row.mean().unwrap_or(0.0)
}
