//! JSON experiment configuration: schema, validation, and resolution
//! into a runnable plan.
//!
//! Unknown keys are hard errors, and every default beyond plain JSON
//! omission is documented on the field it applies to. Validation turns a
//! parsed [`ExperimentConfig`] into a [`ResolvedExperiment`] whose step
//! rule, prior, and loss specification are ready to run.

use std::path::PathBuf;

use serde::Deserialize;
use thiserror::Error;

use boa_core::diagnostics::{ConfidenceParam, DiagnosticsError, StepRule};
use boa_core::engine::{ExcessLossMode, Variant};
use boa_core::environments::{EnvironmentError, EnvironmentSpec};
use boa_core::losses::{Interval, LossError, LossKind, LossSpec};
use boa_core::rates::{RateError, RateSchedule};
use boa_core::simplex::{ProbabilityVector, SimplexError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config field `{field}`: {message}")]
    Semantic { field: &'static str, message: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
}

fn semantic(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Semantic {
        field,
        message: message.into(),
    }
}

fn unit_interval() -> Interval {
    Interval { lo: 0.0, hi: 1.0 }
}

/// Loss block: the kind plus its domains. Both domains default to the
/// unit interval [0, 1].
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "unit_interval")]
    pub prediction_domain: Interval,
    #[serde(default = "unit_interval")]
    pub outcome_domain: Interval,
}

/// Horizon field: a single round count or a list for sweeps.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Horizons {
    One(usize),
    Many(Vec<usize>),
}

impl Horizons {
    pub fn as_vec(&self) -> Vec<usize> {
        match self {
            Horizons::One(n) => vec![*n],
            Horizons::Many(ns) => ns.clone(),
        }
    }
}

/// Prior field: the string "uniform" or an explicit weight list.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PriorConfig {
    Named(String),
    Weights(Vec<f64>),
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig::Named("uniform".to_owned())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub variant: Variant,
    pub mode: ExcessLossMode,
    pub loss: LossConfig,
    /// Number of experts; must match the environment's expert list.
    pub m: usize,
    pub n: Horizons,
    pub replications: usize,
    pub seed: u64,
    /// Learning rate. Required for ewa and for boa-fixed outside mixture
    /// mode; in mixture mode boa-fixed defaults to the curvature-tuned
    /// rate eta* = C_l / (48 C_b^2 (1 + 3 C_b D / 100)).
    #[serde(default)]
    pub eta: Option<f64>,
    /// Required for boa-adaptive (any kind) and boa-multi (known-range,
    /// from which the per-expert rates 1/(2 E_j) are derived). Optional
    /// for boa-fixed, where declared known ranges trigger the
    /// feasibility pre-check eta <= 1/(2 max_j E_j).
    #[serde(default)]
    pub rate_schedule: Option<RateSchedule>,
    /// Defaults to uniform.
    #[serde(default)]
    pub prior: PriorConfig,
    pub environment: EnvironmentSpec,
    /// When set (and the environment has analytic risks), boa-fixed runs
    /// report the high-probability risk bound at this confidence instead
    /// of the deterministic regret bound.
    #[serde(default)]
    pub confidence_x: Option<f64>,
    #[serde(default)]
    pub compute_convex_oracle: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// A validated, runnable experiment plan.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub name: String,
    pub variant: Variant,
    pub mode: ExcessLossMode,
    pub loss: LossSpec,
    pub horizons: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub prior: ProbabilityVector,
    pub environment: EnvironmentSpec,
    pub rule: StepRule,
    /// The scalar rate in force for boa-fixed and ewa (after resolving
    /// the mixture default), reused by the bound evaluators.
    pub eta: Option<f64>,
    pub schedule: Option<RateSchedule>,
    pub confidence: Option<ConfidenceParam>,
    pub compute_convex_oracle: bool,
    pub output: Option<PathBuf>,
}

/// Curvature-tuned default rate for mixture-mode fixed aggregation.
pub fn mixture_default_rate(loss: &LossSpec) -> f64 {
    let k = loss.constants();
    k.c_l / (48.0 * k.c_b * k.c_b * (1.0 + 3.0 * k.c_b * k.d / 100.0))
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    Ok(serde_json::from_str(text)?)
}

impl ExperimentConfig {
    pub fn resolve(&self) -> Result<ResolvedExperiment, ConfigError> {
        if self.name.is_empty() {
            return Err(semantic("name", "must be nonempty"));
        }
        if self.m == 0 {
            return Err(semantic("m", "need at least one expert"));
        }
        if self.m != self.environment.experts.len() {
            return Err(semantic(
                "m",
                format!(
                    "declares {} experts but the environment lists {}",
                    self.m,
                    self.environment.experts.len()
                ),
            ));
        }
        let horizons = self.n.as_vec();
        if horizons.is_empty() {
            return Err(semantic("n", "horizon list must be nonempty"));
        }
        if horizons.iter().any(|&n| n == 0) {
            return Err(semantic("n", "every horizon must be at least 1"));
        }
        if self.replications == 0 {
            return Err(semantic("replications", "need at least one replication"));
        }

        let prediction_domain =
            Interval::new(self.loss.prediction_domain.lo, self.loss.prediction_domain.hi)?;
        let outcome_domain =
            Interval::new(self.loss.outcome_domain.lo, self.loss.outcome_domain.hi)?;
        let loss = LossSpec::new(self.loss.kind, prediction_domain, outcome_domain);

        if self.mode == ExcessLossMode::Mixture && self.loss.kind != LossKind::Square {
            return Err(semantic(
                "mode",
                "mixture mode needs a strongly convex loss (square)",
            ));
        }

        self.environment.validate(&prediction_domain)?;

        let prior = match &self.prior {
            PriorConfig::Named(s) if s == "uniform" => ProbabilityVector::uniform(self.m)?,
            PriorConfig::Named(s) => {
                return Err(semantic(
                    "prior",
                    format!("unknown prior name {s:?}; use \"uniform\" or a weight list"),
                ));
            }
            PriorConfig::Weights(w) => {
                if w.len() != self.m {
                    return Err(semantic(
                        "prior",
                        format!("{} weights for m = {}", w.len(), self.m),
                    ));
                }
                ProbabilityVector::new(w.clone())?
            }
        };

        if let Some(eta) = self.eta {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(semantic("eta", format!("{eta} is not a positive real")));
            }
        }
        if let Some(schedule) = &self.rate_schedule {
            schedule.validate(self.m)?;
        }

        let (rule, eta) = match self.variant {
            Variant::BoaFixed => {
                let eta = match (self.eta, self.mode) {
                    (Some(eta), _) => eta,
                    (None, ExcessLossMode::Mixture) => mixture_default_rate(&loss),
                    (None, _) => {
                        return Err(semantic(
                            "eta",
                            "boa-fixed requires eta outside mixture mode",
                        ));
                    }
                };
                match &self.rate_schedule {
                    None => {}
                    Some(RateSchedule::KnownRange { ranges }) => {
                        let max_e = ranges.iter().cloned().fold(0.0f64, f64::max);
                        if eta > 1.0 / (2.0 * max_e) {
                            return Err(semantic(
                                "eta",
                                format!(
                                    "{eta} exceeds the safe rate 1/(2 max E) = {} for the declared ranges",
                                    1.0 / (2.0 * max_e)
                                ),
                            ));
                        }
                    }
                    Some(_) => {
                        return Err(semantic(
                            "rate_schedule",
                            "boa-fixed only accepts declared known ranges (for the eta pre-check)",
                        ));
                    }
                }
                (StepRule::Fixed { eta }, Some(eta))
            }
            Variant::BoaMulti => {
                if self.eta.is_some() {
                    return Err(semantic(
                        "eta",
                        "boa-multi derives per-expert rates from the declared ranges; drop eta",
                    ));
                }
                let Some(RateSchedule::KnownRange { ranges }) = &self.rate_schedule else {
                    return Err(semantic(
                        "rate_schedule",
                        "boa-multi requires a known-range schedule; rates are 1/(2 E_j)",
                    ));
                };
                let etas: Vec<f64> = ranges.iter().map(|e| 1.0 / (2.0 * e)).collect();
                (StepRule::Multi { etas }, None)
            }
            Variant::BoaAdaptive => {
                if self.eta.is_some() {
                    return Err(semantic(
                        "eta",
                        "boa-adaptive takes its rates from rate_schedule; drop eta",
                    ));
                }
                let Some(schedule) = self.rate_schedule.clone() else {
                    return Err(semantic("rate_schedule", "boa-adaptive requires one"));
                };
                (
                    StepRule::Adaptive { schedule },
                    None,
                )
            }
            Variant::Ewa => {
                let Some(eta) = self.eta else {
                    return Err(semantic("eta", "ewa requires eta"));
                };
                if self.rate_schedule.is_some() {
                    return Err(semantic("rate_schedule", "ewa has no rate schedule"));
                }
                (StepRule::Ewa { eta }, Some(eta))
            }
        };

        let confidence = self
            .confidence_x
            .map(ConfidenceParam::new)
            .transpose()
            .map_err(|e| semantic("confidence_x", e.to_string()))?;

        Ok(ResolvedExperiment {
            name: self.name.clone(),
            variant: self.variant,
            mode: self.mode,
            loss,
            horizons,
            replications: self.replications,
            seed: self.seed,
            prior,
            environment: self.environment.clone(),
            rule,
            eta,
            schedule: self.rate_schedule.clone(),
            confidence,
            compute_convex_oracle: self.compute_convex_oracle,
            output: self.output.clone(),
        })
    }
}
