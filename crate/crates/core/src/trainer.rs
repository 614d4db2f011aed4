//! The iterative online loop: sample pairs, annotate, minimize the loss over
//! the logits, optionally replace the reference, record metrics.
//!
//! Randomness comes from three ChaCha streams of the run seed: instance
//! generation, pair collection and histogram sampling. Runs that differ only
//! in their bonus therefore see the same instance, the same reference-sampled
//! pairs and the same histogram uniforms.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bonus::{clamp_events, BonusKind, BonusSpec, Strength};
use crate::config::{RolloutSource, RunConfig};
use crate::divergence::AlphaDivergence;
use crate::error::{Error, Result};
use crate::math::logistic;
use crate::objective::{LossBreakdown, Objective};
use crate::tabular::{
    annotate_pair, sample_response, softmax_policy, Annotation, Instance, PolicyLogits,
    PolicyTable, PreferenceDataset,
};
use crate::verify::{divergence_audit, optimism_condition_check, stream_rng};

/// Version string written into every summary.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const INSTANCE_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const HISTOGRAM_STREAM: u64 = 2;

/// Redraws allowed when the second response of a pair repeats the first.
const MAX_REDRAWS: usize = 64;

/// Target ratios inside this range are accepted silently.
pub const STABLE_RATIO_RANGE: (f64, f64) = (1e-6, 1e-2);

/// Mutable state carried across iterations.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// The instance metrics are measured against. Never modified.
    pub base: Instance,
    /// The instance the loss sees. Its reference changes under `update_ref`.
    pub working: Instance,
    pub logits: PolicyLogits,
    /// Completed iterations.
    pub iteration: usize,
    /// Resolved bonus weight. `None` until the first probe.
    pub kappa: Option<f64>,
    /// Loss at `π_0` on the first dataset with `κ = 1`.
    pub probe: Option<LossBreakdown>,
    pub warnings: Vec<String>,
}

impl TrainState {
    /// `π_0 = π_ref`: logits `ln π_ref`.
    pub fn new(instance: Instance) -> Self {
        let logits = PolicyLogits::from_policy(&instance.reference());
        Self {
            working: instance.clone(),
            base: instance,
            logits,
            iteration: 0,
            kappa: None,
            probe: None,
            warnings: Vec::new(),
        }
    }

    pub fn policy(&self) -> Result<PolicyTable> {
        softmax_policy(&self.logits)
    }

    fn warn(&mut self, msg: String) {
        warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Metrics recorded after an iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Loss at the trained policy on this iteration's dataset.
    pub loss: LossBreakdown,
    pub win_rate: f64,
    pub avg_reward: f64,
    pub low_ref_mass: f64,
    pub entropy: f64,
    pub clamp_events: usize,
    pub pairs: usize,
    pub optimizer_steps: usize,
    pub converged: bool,
}

/// Histogram of `ln π_ref` over sampled responses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Empty bins of width `bin_width` covering `[lo, hi]`.
    pub fn covering(lo: f64, hi: f64, bin_width: f64) -> Self {
        let left = (lo / bin_width).floor() * bin_width;
        let bins = ((hi - left) / bin_width).floor() as usize + 1;
        Self {
            bin_width,
            edges: (0..=bins).map(|k| left + k as f64 * bin_width).collect(),
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, v: f64) {
        let k = ((v - self.edges[0]) / self.bin_width).floor().max(0.0) as usize;
        let last = self.counts.len() - 1;
        self.counts[k.min(last)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fraction of samples below `t`, with the bin containing `t` split
    /// linearly. Zero for an empty histogram.
    pub fn mass_below(&self, t: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let below: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let (l, r) = (self.edges[k], self.edges[k + 1]);
                let share = ((t - l) / (r - l)).clamp(0.0, 1.0);
                share * c as f64
            })
            .sum();
        below / total as f64
    }
}

/// A finished (or partially finished) run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: RunConfig,
    pub bonus: BonusSpec,
    pub kappa: f64,
    pub probe: Option<LossBreakdown>,
    pub iterations: Vec<IterationMetrics>,
    pub histogram: Histogram,
    pub final_policy: Array2<f64>,
    pub warnings: Vec<String>,
    pub audit: AuditLinkage,
    #[serde(skip)]
    pub instance: Option<Instance>,
}

impl RunRecord {
    pub fn final_metrics(&self) -> Option<&IterationMetrics> {
        self.iterations.last()
    }

    /// Sampled histogram mass below `ln 0.05`.
    pub fn low_ref_histogram_mass(&self) -> f64 {
        self.histogram.mass_below(0.05f64.ln())
    }
}

/// What the configured divergence and bonus pass in the verification suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditLinkage {
    /// Divergence numerics at the configured `α`.
    pub divergence_checks_pass: bool,
    /// Optimism hypotheses of the configured GEB design, if any.
    pub design_hypotheses_pass: Option<bool>,
    /// Command that runs the full suite.
    pub suite: String,
}

/// Result of resolving `κ` from a target ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct KappaResolution {
    pub kappa: f64,
    pub warnings: Vec<String>,
}

/// `κ = target · |dpo| / |bonus|` from a probe taken with `κ = 1`.
pub fn kappa_from_ratio(target_ratio: f64, probe: &LossBreakdown) -> Result<KappaResolution> {
    if !(target_ratio >= 0.0 && target_ratio.is_finite()) {
        return Err(Error::Config(format!(
            "target_ratio = {target_ratio} must be finite and ≥ 0"
        )));
    }
    let mut warnings = Vec::new();
    let (lo, hi) = STABLE_RATIO_RANGE;
    if !(lo..=hi).contains(&target_ratio) {
        warnings.push(format!(
            "target ratio {target_ratio:e} lies outside [{lo:e}, {hi:e}], where performance is reported stable"
        ));
    }
    let kappa = if probe.bonus_term == 0.0 {
        warnings.push("bonus vanishes at the initial policy; kappa set to 0".into());
        0.0
    } else {
        target_ratio * probe.dpo_term.abs() / probe.bonus_term.abs()
    };
    Ok(KappaResolution { kappa, warnings })
}

fn categorical<I: IntoIterator<Item = f64>>(weights: I, u: f64) -> usize {
    let mut cum = 0.0;
    let mut last = 0;
    for (k, w) in weights.into_iter().enumerate() {
        cum += w;
        if w > 0.0 {
            last = k;
        }
        if u < cum {
            return k;
        }
    }
    last
}

/// Exact expected Bradley–Terry win probability of `π` against `π_ref`.
pub fn win_rate_exact(policy: &PolicyTable, instance: &Instance) -> f64 {
    let (pi, q, r, rho) = (
        policy.probs(),
        instance.ref_policy(),
        instance.true_reward(),
        instance.prompt_weights(),
    );
    let m = q.ncols();
    let mut total = 0.0;
    for x in 0..q.nrows() {
        let mut row = 0.0;
        for y in 0..m {
            let inner: f64 = (0..m)
                .map(|y2| q[[x, y2]] * logistic(r[[x, y]] - r[[x, y2]]))
                .sum();
            row += pi[[x, y]] * inner;
        }
        total += rho[x] * row;
    }
    total
}

/// `Σ_x ρ(x) Σ_y π(y|x) r*(x, y)`.
pub fn avg_reward_exact(policy: &PolicyTable, instance: &Instance) -> f64 {
    weighted_rows(policy.probs().view(), instance, |x, y| {
        instance.true_reward()[[x, y]]
    })
}

fn weighted_rows(
    pi: ArrayView2<'_, f64>,
    instance: &Instance,
    value: impl Fn(usize, usize) -> f64,
) -> f64 {
    let rho = instance.prompt_weights();
    pi.outer_iter()
        .enumerate()
        .map(|(x, row)| {
            rho[x]
                * row
                    .iter()
                    .enumerate()
                    .map(|(y, p)| p * value(x, y))
                    .sum::<f64>()
        })
        .sum()
}

/// `Σ_x ρ(x) H(π(·|x))` in nats.
pub fn policy_entropy(policy: &PolicyTable, instance: &Instance) -> f64 {
    let rho = instance.prompt_weights();
    policy
        .probs()
        .outer_iter()
        .enumerate()
        .map(|(x, row)| {
            rho[x]
                * row
                    .iter()
                    .filter(|p| **p > 0.0)
                    .map(|p| -p * p.ln())
                    .sum::<f64>()
        })
        .sum()
}

/// Exact `E[−ln π_ref(y|x)]` under `x ∼ ρ, y ∼ π`, and a histogram of
/// `ln π_ref(y|x)` over `n_samples` draws.
pub fn low_ref_statistics<R: Rng + ?Sized>(
    policy: &PolicyTable,
    instance: &Instance,
    n_samples: usize,
    bin_width: f64,
    rng: &mut R,
) -> Result<(f64, Histogram)> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be ≥ 1".into()));
    }
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!(
            "bin width {bin_width} must be positive"
        )));
    }
    let q = instance.ref_policy();
    let mass = weighted_rows(policy.probs().view(), instance, |x, y| -q[[x, y]].ln());
    let lo = q.iter().fold(f64::INFINITY, |a, v| a.min(v.ln()));
    let hi = q.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.ln()));
    let mut hist = Histogram::covering(lo, hi, bin_width);
    let rho = instance.prompt_weights();
    for _ in 0..n_samples {
        let x = categorical(rho.iter().copied(), rng.random());
        let y = sample_response(policy, x, rng);
        hist.add(q[[x, y]].ln());
    }
    Ok((mass, hist))
}

/// Draw `pairs_per_prompt` distinct-response pairs per prompt from `rollout`
/// and label them. A pair is dropped when no distinct second response turns
/// up within a bounded number of redraws.
pub fn collect_pairs<R: Rng + ?Sized>(
    rollout: &PolicyTable,
    instance: &Instance,
    pairs_per_prompt: usize,
    annotation: Annotation,
    rng: &mut R,
) -> Result<(PreferenceDataset, usize)> {
    let mut pairs = Vec::with_capacity(instance.n_prompts() * pairs_per_prompt);
    let mut dropped = 0;
    for x in 0..instance.n_prompts() {
        for _ in 0..pairs_per_prompt {
            let y1 = sample_response(rollout, x, rng);
            let y2 = (0..MAX_REDRAWS)
                .map(|_| sample_response(rollout, x, rng))
                .find(|y| *y != y1);
            match y2 {
                Some(y2) => pairs.push(annotate_pair(instance, x, y1, y2, annotation, rng)?),
                None => dropped += 1,
            }
        }
    }
    Ok((PreferenceDataset::new(pairs), dropped))
}

/// One pass of the loop. Resolves `κ` on the first call when the bonus is
/// given as a target ratio.
pub fn run_iteration<R: Rng + ?Sized>(
    state: &mut TrainState,
    config: &RunConfig,
    rng: &mut R,
) -> Result<IterationMetrics> {
    let spec = config.validate()?;
    let div = AlphaDivergence::new(config.alpha)?;
    let t = state.iteration + 1;

    let rollout = match config.rollout_source {
        RolloutSource::Reference => state.working.reference(),
        RolloutSource::CurrentPolicy => state.policy()?,
    };
    let (mut dataset, dropped) = collect_pairs(
        &rollout,
        &state.working,
        config.pairs_per_prompt,
        config.annotation,
        rng,
    )?;
    dataset.iteration = t;
    dataset.seed = config.seed;
    if dropped > 0 {
        state.warn(format!(
            "iteration {t}: dropped {dropped} pairs with no distinct second response"
        ));
    }
    if dataset.is_empty() {
        // Nothing to learn from: carry the policy forward.
        state.warn(format!(
            "iteration {t}: no preference pairs could be drawn; policy left unchanged"
        ));
        let policy = state.policy()?;
        let metrics = iteration_metrics(state, t, &policy, LossBreakdown::default(), 0, 0, false);
        state.iteration = t;
        return Ok(metrics);
    }

    let kappa = match state.kappa {
        Some(k) => k,
        None => {
            let k = resolve_kappa(state, &spec, &div, config.beta, &dataset)?;
            state.kappa = Some(k);
            k
        }
    };
    let objective = Objective::new(div, config.beta, spec, kappa)?;
    let working = &state.working;
    let descent = config
        .optimizer
        .minimize(state.logits.theta().clone(), |theta| {
            let (loss, grad) = objective.loss_and_grad(theta.view(), working, &dataset)?;
            Ok((loss.total, grad))
        })?;
    if !descent.converged {
        state.warn(format!(
            "iteration {t}: optimizer stopped after {} steps with gradient norm {:e}",
            descent.steps, descent.grad_norm
        ));
    }
    state.logits = PolicyLogits::new(descent.theta)?;
    let policy = state.policy()?;
    let loss = objective.total_loss(&state.logits, &state.working, &dataset)?;
    let events = clamp_events(&spec, policy.probs().view(), &dataset);
    let metrics = iteration_metrics(
        state,
        t,
        &policy,
        loss,
        events,
        descent.steps,
        descent.converged,
    );
    let metrics = IterationMetrics {
        pairs: dataset.len(),
        ..metrics
    };
    if config.update_ref {
        state.working = state.working.with_ref_policy(&policy)?;
    }
    state.iteration = t;
    info!(
        "iteration {t}: loss {:.6} win rate {:.4} low-ref mass {:.4}",
        loss.total, metrics.win_rate, metrics.low_ref_mass
    );
    Ok(metrics)
}

fn iteration_metrics(
    state: &TrainState,
    t: usize,
    policy: &PolicyTable,
    loss: LossBreakdown,
    clamp_events: usize,
    optimizer_steps: usize,
    converged: bool,
) -> IterationMetrics {
    let base = &state.base;
    IterationMetrics {
        iteration: t,
        loss,
        win_rate: win_rate_exact(policy, base),
        avg_reward: avg_reward_exact(policy, base),
        low_ref_mass: weighted_rows(policy.probs().view(), base, |x, y| {
            -base.ref_policy()[[x, y]].ln()
        }),
        entropy: policy_entropy(policy, base),
        clamp_events,
        pairs: 0,
        optimizer_steps,
        converged,
    }
}

fn resolve_kappa(
    state: &mut TrainState,
    spec: &BonusSpec,
    div: &AlphaDivergence,
    beta: f64,
    dataset: &PreferenceDataset,
) -> Result<f64> {
    match spec.strength {
        _ if spec.kind == BonusKind::None => Ok(0.0),
        Strength::Kappa(k) => Ok(k),
        Strength::TargetRatio(target) => {
            let probe = Objective::new(*div, beta, *spec, 1.0)?.total_loss(
                &state.logits,
                &state.working,
                dataset,
            )?;
            let res = kappa_from_ratio(target, &probe)?;
            for w in res.warnings {
                state.warn(w);
            }
            state.probe = Some(probe);
            info!("kappa {:e} from target ratio {target:e}", res.kappa);
            Ok(res.kappa)
        }
    }
}

fn audit_linkage(config: &RunConfig, spec: &BonusSpec) -> Result<AuditLinkage> {
    let divergence_checks_pass = divergence_audit(&[config.alpha])?.iter().all(|r| r.pass);
    let design_hypotheses_pass = match (spec.kind, spec.design) {
        (BonusKind::Geb | BonusKind::GebNormalized, Some(d)) if !d.kind.is_diagnostic() => {
            Some(optimism_condition_check(&d, config.alpha, config.beta, 20)?.pass)
        }
        _ => None,
    };
    Ok(AuditLinkage {
        divergence_checks_pass,
        design_hypotheses_pass,
        suite: "bonuslab verify --suite all".into(),
    })
}

/// Run every iteration and, when `output_dir` is set, write the outputs.
/// Completed iterations are flushed to disk even if a later one fails.
pub fn run_experiment(config: &RunConfig) -> Result<RunRecord> {
    let spec = config.validate()?;
    let instance = config.load_instance(&mut stream_rng(config.seed, INSTANCE_STREAM))?;
    let mut writer = match &config.output_dir {
        Some(dir) => Some(OutputWriter::create(dir, &instance)?),
        None => None,
    };
    let mut state = TrainState::new(instance.clone());
    let mut rng = stream_rng(config.seed, DATA_STREAM);
    let mut iterations = Vec::with_capacity(config.iterations);
    let mut failure = None;
    for _ in 0..config.iterations {
        match run_iteration(&mut state, config, &mut rng) {
            Ok(m) => {
                if let Some(w) = writer.as_mut() {
                    w.metrics_row(&m)?;
                }
                iterations.push(m);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let policy = state.policy()?;
    let (_, histogram) = low_ref_statistics(
        &policy,
        &instance,
        config.histogram_samples,
        config.histogram_bin_width,
        &mut stream_rng(config.seed, HISTOGRAM_STREAM),
    )?;
    let record = RunRecord {
        version: VERSION.into(),
        config: config.clone(),
        bonus: spec,
        kappa: state.kappa.unwrap_or(0.0),
        probe: state.probe,
        iterations,
        histogram,
        final_policy: policy.probs().clone(),
        warnings: state.warnings,
        audit: audit_linkage(config, &spec)?,
        instance: Some(instance),
    };
    if let Some(w) = writer {
        w.finish(&record, failure.as_ref())?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(record),
    }
}

/// Subdirectory name for one ratio of a sweep.
pub fn ratio_dir_name(ratio: f64) -> String {
    format!("ratio_{ratio:e}")
}

/// Independent runs, one per target ratio, on the same instance and seed.
/// A ratio of zero runs with `κ = 0`. Results come back in input order.
pub fn kappa_sweep(config: &RunConfig, ratios: &[f64]) -> Result<Vec<(f64, Result<RunRecord>)>> {
    if ratios.is_empty() {
        return Err(Error::Config("the ratio list is empty".into()));
    }
    if config.bonus.kind == BonusKind::None {
        return Err(Error::Config(
            "a sweep needs bonus.kind other than none".into(),
        ));
    }
    let configs = ratios
        .iter()
        .map(|&r| {
            let mut c = config.clone();
            if r == 0.0 {
                c.bonus.kappa = Some(0.0);
                c.bonus.target_ratio = None;
            } else {
                c.bonus.kappa = None;
                c.bonus.target_ratio = Some(r);
            }
            c.output_dir = config
                .output_dir
                .as_ref()
                .map(|d| d.join(ratio_dir_name(r)));
            c.validate()?;
            Ok((r, c))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(configs
        .into_par_iter()
        .map(|(r, c)| (r, run_experiment(&c)))
        .collect())
}

/// One row of `metrics.csv`.
#[derive(Serialize)]
struct MetricsRow {
    iteration: usize,
    dpo_loss: f64,
    bonus_value: f64,
    kappa: f64,
    ratio: f64,
    win_rate: f64,
    avg_reward: f64,
    low_ref_mass: f64,
    entropy: f64,
    clamp_events: usize,
}

impl From<&IterationMetrics> for MetricsRow {
    fn from(m: &IterationMetrics) -> Self {
        Self {
            iteration: m.iteration,
            dpo_loss: m.loss.dpo_term,
            bonus_value: m.loss.bonus_term,
            kappa: m.loss.kappa,
            ratio: m.loss.ratio,
            win_rate: m.win_rate,
            avg_reward: m.avg_reward,
            low_ref_mass: m.low_ref_mass,
            entropy: m.entropy,
            clamp_events: m.clamp_events,
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    status: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    bonus: &'a BonusSpec,
    kappa: f64,
    probe: Option<LossBreakdown>,
    iterations_completed: usize,
    #[serde(rename = "final")]
    final_metrics: Option<&'a IterationMetrics>,
    low_ref_histogram_mass: f64,
    histogram_samples: u64,
    warnings: &'a [String],
    audit: &'a AuditLinkage,
}

/// File names inside a run directory.
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const INSTANCE_FILE: &str = "instance.json";

struct OutputWriter {
    dir: PathBuf,
    metrics: csv::Writer<File>,
}

impl OutputWriter {
    fn create(dir: &Path, instance: &Instance) -> Result<Self> {
        fs::create_dir_all(dir)?;
        instance.save(&dir.join(INSTANCE_FILE))?;
        // The header goes out before any row so a run that fails early still has one.
        let mut metrics = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(dir.join(METRICS_FILE))?;
        metrics.write_record([
            "iteration",
            "dpo_loss",
            "bonus_value",
            "kappa",
            "ratio",
            "win_rate",
            "avg_reward",
            "low_ref_mass",
            "entropy",
            "clamp_events",
        ])?;
        metrics.flush()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn metrics_row(&mut self, m: &IterationMetrics) -> Result<()> {
        self.metrics.serialize(MetricsRow::from(m))?;
        self.metrics.flush()?;
        Ok(())
    }

    fn finish(mut self, record: &RunRecord, failure: Option<&Error>) -> Result<()> {
        self.metrics.flush()?;
        let mut hist = csv::Writer::from_path(self.dir.join(HISTOGRAM_FILE))?;
        hist.write_record(["bin_left", "bin_right", "count"])?;
        for (k, c) in record.histogram.counts.iter().enumerate() {
            hist.serialize((record.histogram.edges[k], record.histogram.edges[k + 1], c))?;
        }
        hist.flush()?;
        let summary = Summary {
            status: if failure.is_some() {
                "failed"
            } else {
                "completed"
            },
            error: failure.map(|e| e.to_string()),
            version: &record.version,
            seed: record.config.seed,
            config: &record.config,
            bonus: &record.bonus,
            kappa: record.kappa,
            probe: record.probe,
            iterations_completed: record.iterations.len(),
            final_metrics: record.final_metrics(),
            low_ref_histogram_mass: record.low_ref_histogram_mass(),
            histogram_samples: record.histogram.total(),
            warnings: &record.warnings,
            audit: &record.audit,
        };
        let mut f = File::create(self.dir.join(SUMMARY_FILE))?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        writeln!(f)?;
        Ok(())
    }
}
