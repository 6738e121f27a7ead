//! Outcome streams and expert pools for simulation runs.
//!
//! An environment couples an outcome process with a fixed roster of expert
//! rules. Each call to [`Environment::step`] draws exactly one PRNG
//! variate, even for deterministic processes, so that switching the
//! outcome process never shifts the random stream consumed by anything
//! else seeded from the same generator. Replications use
//! [`crate::rng::derive_seed`] to give every repetition its own stream.
//!
//! Outcomes are clipped to the outcome interval and each clip is counted.
//! For the Gaussian process the analytic risk formula ignores clipping,
//! so it is only reported when both tails place negligible mass outside
//! the interval; [`CLIP_NEGLIGIBLE_Z`] is the z-score at which a single
//! tail holds 5e-7 of the mass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{Interval, LossKind, LossSpec};
use crate::rng::SplitMix64;

/// Tail z-score above which clipping is treated as negligible for
/// analytic risk reporting. Each tail then holds at most 5e-7 mass.
pub const CLIP_NEGLIGIBLE_Z: f64 = 4.891638481163185;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvironmentError {
    #[error("environment needs at least one expert")]
    NoExperts,
    #[error("expert {index} predicts {value}, outside the prediction domain [{lo}, {hi}]")]
    ExpertOutsideDomain {
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("outcome process parameter {name} is {value}; expected a finite value{extra}")]
    BadParameter {
        name: &'static str,
        value: f64,
        extra: &'static str,
    },
    #[error("no analytic risk here: {reason}")]
    NotAnalytic { reason: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OutcomeProcess {
    /// theta + sigma Z with Z standard normal, clipped to the outcome
    /// interval.
    IidGaussianShift { mean: f64, stddev: f64 },
    /// Uniform on the outcome interval.
    IidUniform,
    /// Deterministic alternation: round k (from 0) emits values[k mod 2].
    AdversarialAlternating { values: [f64; 2] },
    /// Deterministic ramp start + slope * k, clipped to the outcome
    /// interval.
    AdversarialDriftingMean { start: f64, slope: f64 },
}

impl OutcomeProcess {
    fn validate(&self) -> Result<(), EnvironmentError> {
        let bad = |name: &'static str, value: f64, extra: &'static str| {
            Err(EnvironmentError::BadParameter { name, value, extra })
        };
        match self {
            OutcomeProcess::IidGaussianShift { mean, stddev } => {
                if !mean.is_finite() {
                    return bad("mean", *mean, "");
                }
                if !(stddev.is_finite() && *stddev > 0.0) {
                    return bad("stddev", *stddev, " greater than zero");
                }
            }
            OutcomeProcess::IidUniform => {}
            OutcomeProcess::AdversarialAlternating { values } => {
                for v in values {
                    if !v.is_finite() {
                        return bad("values", *v, "");
                    }
                }
            }
            OutcomeProcess::AdversarialDriftingMean { start, slope } => {
                if !start.is_finite() {
                    return bad("start", *start, "");
                }
                if !slope.is_finite() {
                    return bad("slope", *slope, "");
                }
            }
        }
        Ok(())
    }

    /// Expected squared-loss risk of the constant prediction `candidate`,
    /// when it has a clean closed form. Gaussian risk is suppressed when
    /// clipping would distort it.
    pub fn analytic_risk(&self, domain: &Interval, candidate: f64) -> Option<f64> {
        match self {
            OutcomeProcess::IidGaussianShift { mean, stddev } => {
                let upper_z = (domain.hi - mean) / stddev;
                let lower_z = (mean - domain.lo) / stddev;
                if upper_z < CLIP_NEGLIGIBLE_Z || lower_z < CLIP_NEGLIGIBLE_Z {
                    return None;
                }
                let bias = mean - candidate;
                Some(stddev * stddev + bias * bias)
            }
            OutcomeProcess::IidUniform => {
                let width = domain.diameter();
                let mid = 0.5 * (domain.lo + domain.hi);
                let bias = mid - candidate;
                Some(width * width / 12.0 + bias * bias)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExpertRule {
    Constant { value: f64 },
    /// Round k (from 0) predicts `even` when k is even, `odd` otherwise.
    Alternating { even: f64, odd: f64 },
}

impl ExpertRule {
    pub fn predict(&self, step: usize) -> f64 {
        match self {
            ExpertRule::Constant { value } => *value,
            ExpertRule::Alternating { even, odd } => {
                if step % 2 == 0 {
                    *even
                } else {
                    *odd
                }
            }
        }
    }

    fn extreme_values(&self) -> [f64; 2] {
        match self {
            ExpertRule::Constant { value } => [*value, *value],
            ExpertRule::Alternating { even, odd } => [*even, *odd],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub outcomes: OutcomeProcess,
    pub experts: Vec<ExpertRule>,
}

impl EnvironmentSpec {
    pub fn validate(&self, prediction_domain: &Interval) -> Result<(), EnvironmentError> {
        if self.experts.is_empty() {
            return Err(EnvironmentError::NoExperts);
        }
        self.outcomes.validate()?;
        for (index, rule) in self.experts.iter().enumerate() {
            for value in rule.extreme_values() {
                if !prediction_domain.contains_with_slack(value) {
                    return Err(EnvironmentError::ExpertOutsideDomain {
                        index,
                        value,
                        lo: prediction_domain.lo,
                        hi: prediction_domain.hi,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One emitted round: the expert predictions, then the realized outcome.
/// Experts here never look at covariates, so none are carried.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSample {
    pub expert_preds: Vec<f64>,
    pub y: f64,
}

/// One concrete realization of an environment: the spec plus a seeded
/// stream position.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvironmentSpec,
    outcome_domain: Interval,
    rng: SplitMix64,
    step: usize,
    clip_events: usize,
}

impl Environment {
    pub fn new(spec: EnvironmentSpec, outcome_domain: Interval, seed: u64) -> Self {
        Environment {
            spec,
            outcome_domain,
            rng: SplitMix64::new(seed),
            step: 0,
            clip_events: 0,
        }
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn num_experts(&self) -> usize {
        self.spec.experts.len()
    }

    /// Rounds emitted so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Outcomes that had to be clipped into the outcome interval.
    pub fn clip_events(&self) -> usize {
        self.clip_events
    }

    /// Emit one round. Exactly one uniform variate is consumed regardless
    /// of the process.
    pub fn step(&mut self) -> RoundSample {
        let k = self.step;
        let expert_preds: Vec<f64> = self.spec.experts.iter().map(|e| e.predict(k)).collect();
        let u = self.rng.next_f64();
        let raw = match &self.spec.outcomes {
            OutcomeProcess::IidGaussianShift { mean, stddev } => {
                mean + stddev * crate::rng::inverse_normal_cdf(u)
            }
            OutcomeProcess::IidUniform => {
                self.outcome_domain.lo + self.outcome_domain.diameter() * u
            }
            OutcomeProcess::AdversarialAlternating { values } => values[k % 2],
            OutcomeProcess::AdversarialDriftingMean { start, slope } => start + slope * k as f64,
        };
        let y = if self.outcome_domain.contains_with_slack(raw) {
            raw
        } else {
            self.clip_events += 1;
            self.outcome_domain.clamp(raw)
        };
        self.step = k + 1;
        RoundSample { expert_preds, y }
    }

    /// Squared-loss risk of expert j, when it exists in closed form.
    ///
    /// Requires an iid outcome process with negligible clipping, a square
    /// loss, and a constant expert; anything else has no closed form here.
    pub fn analytic_risk(&self, expert_index: usize, spec: &LossSpec) -> Result<f64, EnvironmentError> {
        let rule = self.spec.experts.get(expert_index).ok_or(
            EnvironmentError::NotAnalytic {
                reason: "no such expert",
            },
        )?;
        let candidate = match rule {
            ExpertRule::Constant { value } => *value,
            ExpertRule::Alternating { .. } => {
                return Err(EnvironmentError::NotAnalytic {
                    reason: "expert is not constant",
                })
            }
        };
        analytic_candidate_risk(&self.spec.outcomes, &self.outcome_domain, spec, candidate)
    }

    /// Analytic risks of all experts, or the reason one is missing.
    pub fn expert_risks(&self, spec: &LossSpec) -> Result<Vec<f64>, EnvironmentError> {
        (0..self.num_experts())
            .map(|j| self.analytic_risk(j, spec))
            .collect()
    }

    /// Index of the analytically best expert and its risk gap to the
    /// runner-up, for calibrating experiments. Ties go to the lowest
    /// index and report a zero gap.
    pub fn best_expert_and_gap(&self, spec: &LossSpec) -> Result<(usize, f64), EnvironmentError> {
        let risks = self.expert_risks(spec)?;
        if risks.len() < 2 {
            return Err(EnvironmentError::NotAnalytic {
                reason: "need at least two experts for a gap",
            });
        }
        let mut best = 0usize;
        for (j, &r) in risks.iter().enumerate() {
            if r < risks[best] {
                best = j;
            }
        }
        let runner_up = risks
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != best)
            .map(|(_, &r)| r)
            .fold(f64::INFINITY, f64::min);
        Ok((best, runner_up - risks[best]))
    }
}

/// Squared-loss risk of a constant prediction under an iid process, with
/// the same validity guards as [`Environment::analytic_risk`]. The
/// candidate need not be one of the experts; mixtures of constant experts
/// are themselves constants.
pub fn analytic_candidate_risk(
    process: &OutcomeProcess,
    domain: &Interval,
    spec: &LossSpec,
    candidate: f64,
) -> Result<f64, EnvironmentError> {
    if spec.kind != LossKind::Square {
        return Err(EnvironmentError::NotAnalytic {
            reason: "loss is not square",
        });
    }
    process
        .analytic_risk(domain, candidate)
        .ok_or(EnvironmentError::NotAnalytic {
            reason: "process is adversarial or clipping is non-negligible",
        })
}
