//! Run configuration and its TOML form.
//!
//! Key names are the [`RunConfig`] field names. `bonus`, `optimizer` and
//! `instance` are nested tables; everything else is a top-level key. Unknown
//! keys are rejected.
//!
//! ```toml
//! alpha = 0.5
//! beta = 0.1
//! seed = 7
//!
//! [instance]
//! kind = "needle"
//! n_prompts = 4
//! m_responses = 8
//!
//! [bonus]
//! kind = "geb"
//! design = "linear"
//! target_ratio = 1e-4
//! ```

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bonus::{BonusKind, BonusSpec, Scope, Strength, UDesign, UKind, DEFAULT_CLAMP_EPS};
use crate::error::{Error, Result};
use crate::optim::GradientDescent;
use crate::tabular::{generate_needle_instance, Annotation, Instance};

/// Parameters of a generated needle instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeedleParams {
    pub n_prompts: usize,
    pub m_responses: usize,
    pub needle_ref_mass: f64,
    pub reward_gap: f64,
}

impl Default for NeedleParams {
    fn default() -> Self {
        Self {
            n_prompts: 4,
            m_responses: 8,
            needle_ref_mass: 0.01,
            reward_gap: 2.0,
        }
    }
}

impl NeedleParams {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Instance> {
        generate_needle_instance(
            self.n_prompts,
            self.m_responses,
            self.needle_ref_mass,
            self.reward_gap,
            rng,
        )
    }
}

/// Where the instance comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstanceSource {
    Needle(NeedleParams),
    File { path: PathBuf },
}

impl Default for InstanceSource {
    fn default() -> Self {
        InstanceSource::Needle(NeedleParams::default())
    }
}

/// Which policy generates the response pairs of an iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutSource {
    #[default]
    Reference,
    CurrentPolicy,
}

/// The `[bonus]` table.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BonusConfig {
    #[serde(default)]
    pub kind: BonusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<UKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ratio: Option<f64>,
    /// Defaults to `rejected_only` for `geb` and `full_expectation` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clamp_eps: Option<f64>,
}

impl BonusConfig {
    pub fn to_spec(&self) -> Result<BonusSpec> {
        let strength = match (self.kappa, self.target_ratio) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("bonus.kappa and bonus.target_ratio are mutually exclusive".into()))
            }
            (Some(k), None) => Strength::Kappa(k),
            (None, Some(r)) => Strength::TargetRatio(r),
            (None, None) if self.kind == BonusKind::None => Strength::Kappa(0.0),
            (None, None) => {
                return Err(Error::Config(
                    "bonus.kappa (float) or bonus.target_ratio (float) is required when bonus.kind is set".into(),
                ))
            }
        };
        let geb = matches!(self.kind, BonusKind::Geb | BonusKind::GebNormalized);
        let design = match (geb, self.design) {
            (true, Some(kind)) => Some(UDesign::with_clamp(
                kind,
                self.clamp_eps.unwrap_or(DEFAULT_CLAMP_EPS),
            )),
            (true, None) => {
                return Err(Error::Config(
                    "bonus.design (string) is required for a GEB bonus".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Config(
                    "bonus.design is only meaningful for a GEB bonus".into(),
                ))
            }
            (false, None) => None,
        };
        let scope = self.scope.unwrap_or(match self.kind {
            BonusKind::Geb => Scope::RejectedOnly,
            _ => Scope::FullExpectation,
        });
        Ok(BonusSpec {
            kind: self.kind,
            design,
            strength,
            scope,
        })
    }

    pub fn from_spec(spec: &BonusSpec) -> Self {
        let (kappa, target_ratio) = match spec.strength {
            Strength::Kappa(k) => (Some(k), None),
            Strength::TargetRatio(r) => (None, Some(r)),
        };
        Self {
            kind: spec.kind,
            design: spec.design.map(|d| d.kind),
            kappa,
            target_ratio,
            scope: Some(spec.scope),
            clamp_eps: spec.design.map(|d| d.clamp_eps),
        }
    }
}

fn default_beta() -> f64 {
    0.1
}

fn default_iterations() -> usize {
    3
}

fn default_pairs() -> usize {
    8
}

fn default_histogram_samples() -> usize {
    10_000
}

fn default_bin_width() -> f64 {
    0.25
}

/// Everything a run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub instance: InstanceSource,
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_pairs")]
    pub pairs_per_prompt: usize,
    #[serde(default)]
    pub rollout_source: RolloutSource,
    #[serde(default)]
    pub update_ref: bool,
    #[serde(default)]
    pub annotation: Annotation,
    #[serde(default)]
    pub bonus: BonusConfig,
    #[serde(default)]
    pub optimizer: GradientDescent,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_histogram_samples")]
    pub histogram_samples: usize,
    #[serde(default = "default_bin_width")]
    pub histogram_bin_width: f64,
}

impl RunConfig {
    /// Defaults around a given `α`.
    pub fn new(alpha: f64) -> Self {
        Self {
            instance: InstanceSource::default(),
            alpha,
            beta: default_beta(),
            iterations: default_iterations(),
            pairs_per_prompt: default_pairs(),
            rollout_source: RolloutSource::default(),
            update_ref: false,
            annotation: Annotation::default(),
            bonus: BonusConfig::default(),
            optimizer: GradientDescent::default(),
            seed: 0,
            output_dir: None,
            histogram_samples: default_histogram_samples(),
            histogram_bin_width: default_bin_width(),
        }
    }

    pub fn with_bonus(mut self, spec: &BonusSpec) -> Self {
        self.bonus = BonusConfig::from_spec(spec);
        self
    }

    /// Check every field and return the resolved bonus.
    pub fn validate(&self) -> Result<BonusSpec> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha = {} (float) must lie in [0, 1], the range of the alpha-divergence family",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta = {} (float) must be positive",
                self.beta
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations (integer) must be ≥ 1".into()));
        }
        if self.pairs_per_prompt == 0 {
            return Err(Error::Config(
                "pairs_per_prompt (integer) must be ≥ 1".into(),
            ));
        }
        if self.histogram_samples == 0 {
            return Err(Error::Config(
                "histogram_samples (integer) must be ≥ 1".into(),
            ));
        }
        if !(self.histogram_bin_width > 0.0 && self.histogram_bin_width.is_finite()) {
            return Err(Error::Config(
                "histogram_bin_width (float) must be positive".into(),
            ));
        }
        self.optimizer.validate()?;
        let spec = self.bonus.to_spec()?;
        spec.validate(self.alpha, self.beta)?;
        Ok(spec)
    }

    /// Load or generate the instance. Generation draws from `rng`.
    pub fn load_instance<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Instance> {
        match &self.instance {
            InstanceSource::Needle(p) => p.generate(rng),
            InstanceSource::File { path } => Instance::load(path),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parse and validate a configuration document.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text)?;
    config.validate()?;
    Ok(config)
}

/// Read, parse and validate a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = parse_config_str(&text)?;
    // Instance paths are relative to the config file.
    if let InstanceSource::File { path: p } = &mut config.instance {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(config)
}
