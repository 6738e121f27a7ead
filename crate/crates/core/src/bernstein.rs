//! Monte-Carlo verification of the empirical-Bernstein supermartingale
//! property.
//!
//! For a martingale M with increments bounded below by -1/2, the
//! statistic exp(M_n - [M]_n) built from the realized quadratic variation
//! [M]_n = sum_t (dM_t)^2 has expectation at most 1 at every horizon.
//! (The classical Freedman-style inequalities use the predictable
//! variation instead; they are not implemented here.) The estimator in
//! this module samples independent paths from a configured increment law
//! and reports the sample mean with its standard error, so "at most 1 in
//! expectation" becomes a falsifiable assertion: mean <= 1 + 3 SE.
//!
//! The increment families deliberately stress the bound near its edge
//! (laws whose worst increment sits at -1/2 exactly) and tie it back to
//! the aggregation engine: the excess-loss family tracks one expert of a
//! live fixed-rate run in an environment with analytic conditional
//! means, whose scaled centered losses are exactly the martingale the
//! aggregation analysis relies on.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{excess_losses, AggregatorState, EngineError, EtaPolicy, ExcessLossMode};
use crate::environments::{Environment, EnvironmentError, EnvironmentSpec};
use crate::losses::{LossError, LossSpec};
use crate::rng::{derive_seed, SplitMix64};
use crate::simplex::{ProbabilityVector, SimplexError};

/// Increments must stay at or above this floor for the statistic's
/// expectation bound to hold.
pub const INCREMENT_FLOOR: f64 = -0.5;

const MIN_REPLICATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BernsteinError {
    #[error("increment law violates the martingale hypothesis: {reason}")]
    HypothesisViolation { reason: String },
    #[error("increment {index} is {value}, below the -1/2 floor")]
    IncrementBelowFloor { index: usize, value: f64 },
    #[error("increment {index} is not finite ({value})")]
    NonFiniteIncrement { index: usize, value: f64 },
    #[error("{reps} replications requested, at least {MIN_REPLICATIONS} required")]
    TooFewReplications { reps: usize },
    #[error("tracked expert {index} out of range for {experts} experts")]
    TrackedExpertOutOfRange { index: usize, experts: usize },
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// Scaled centered excess losses of one tracked expert inside a live
/// fixed-rate aggregation run. The environment must admit analytic
/// per-expert risks, which provide the conditional means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoaExcessLossConfig {
    pub environment: EnvironmentSpec,
    pub loss: LossSpec,
    pub eta: f64,
    pub tracked_expert: usize,
}

/// Increment laws for the simulated martingales. Every law has
/// conditional mean zero; validation rejects parameters that could emit
/// an increment below -1/2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MartingaleKind {
    /// +a or -a with equal probability.
    ScaledRademacher { a: f64 },
    /// scale*(1-p) with probability p, -scale*p otherwise.
    CenteredBernoulli { p: f64, scale: f64 },
    /// Uniform on [-a, a].
    BoundedUniform { a: f64 },
    /// eta * (conditional mean - realized) excess loss of one expert in
    /// a fixed-rate aggregation run.
    BoaExcessLoss(BoaExcessLossConfig),
}

impl MartingaleKind {
    pub fn validate(&self) -> Result<(), BernsteinError> {
        let bad = |reason: String| Err(BernsteinError::HypothesisViolation { reason });
        match self {
            MartingaleKind::ScaledRademacher { a } | MartingaleKind::BoundedUniform { a } => {
                if !(a.is_finite() && (0.0..=0.5).contains(a)) {
                    return bad(format!("amplitude {a} outside [0, 1/2]"));
                }
            }
            MartingaleKind::CenteredBernoulli { p, scale } => {
                if !(p.is_finite() && *p > 0.0 && *p < 1.0) {
                    return bad(format!("success probability {p} outside (0, 1)"));
                }
                if !(scale.is_finite() && *scale >= 0.0) {
                    return bad(format!("scale {scale} not a finite nonnegative real"));
                }
                let up = scale * (1.0 - p);
                let down = -scale * p;
                let mean = p * up + (1.0 - p) * down;
                if down < INCREMENT_FLOOR || up < INCREMENT_FLOOR {
                    return bad(format!(
                        "two-point law takes value {down} below the -1/2 floor"
                    ));
                }
                if mean.abs() > 1e-12 * scale.max(1.0) {
                    return bad(format!("two-point law has mean {mean}, not centered"));
                }
            }
            MartingaleKind::BoaExcessLoss(cfg) => {
                if !(cfg.eta.is_finite() && cfg.eta > 0.0) {
                    return bad(format!("learning rate {} not positive", cfg.eta));
                }
                cfg.environment.validate(&cfg.loss.prediction_domain)?;
                if cfg.tracked_expert >= cfg.environment.experts.len() {
                    return Err(BernsteinError::TrackedExpertOutOfRange {
                        index: cfg.tracked_expert,
                        experts: cfg.environment.experts.len(),
                    });
                }
                let probe = Environment::new(cfg.environment.clone(), cfg.loss.outcome_domain, 0);
                probe.expert_risks(&cfg.loss)?;
                let worst = excess_loss_range(cfg)?;
                if 2.0 * cfg.eta * worst > 0.5 {
                    return bad(format!(
                        "2 * eta * max excess loss = {} exceeds 1/2; increments can fall below the floor",
                        2.0 * cfg.eta * worst
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Largest possible |excess loss| for any expert: the worst single raw
/// loss over the outcome domain, since centering keeps excess losses
/// within the raw spread.
fn excess_loss_range(cfg: &BoaExcessLossConfig) -> Result<f64, BernsteinError> {
    let lo = cfg.loss.outcome_domain.lo;
    let hi = cfg.loss.outcome_domain.hi;
    let mut worst = 0.0f64;
    for rule in &cfg.environment.experts {
        for y in [lo, hi] {
            for step in [0, 1] {
                let p = rule.predict(step);
                worst = worst.max(cfg.loss.eval(y, p)?);
            }
        }
    }
    Ok(worst)
}

/// A realized martingale path with its running sums.
#[derive(Debug, Clone, PartialEq)]
pub struct MartingalePath {
    increments: Vec<f64>,
    running: Vec<f64>,
    quad_variation: Vec<f64>,
}

impl MartingalePath {
    pub fn new(increments: Vec<f64>) -> Result<Self, BernsteinError> {
        let mut running = Vec::with_capacity(increments.len());
        let mut quad_variation = Vec::with_capacity(increments.len());
        let mut m = 0.0;
        let mut q = 0.0;
        for (index, &dm) in increments.iter().enumerate() {
            if !dm.is_finite() {
                return Err(BernsteinError::NonFiniteIncrement { index, value: dm });
            }
            if dm < INCREMENT_FLOOR {
                return Err(BernsteinError::IncrementBelowFloor { index, value: dm });
            }
            m += dm;
            q += dm * dm;
            running.push(m);
            quad_variation.push(q);
        }
        Ok(MartingalePath {
            increments,
            running,
            quad_variation,
        })
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn running(&self) -> &[f64] {
        &self.running
    }

    pub fn quad_variation(&self) -> &[f64] {
        &self.quad_variation
    }

    /// M_n, zero for the empty path.
    pub fn final_value(&self) -> f64 {
        self.running.last().copied().unwrap_or(0.0)
    }

    /// [M]_n, zero for the empty path.
    pub fn final_quad_variation(&self) -> f64 {
        self.quad_variation.last().copied().unwrap_or(0.0)
    }
}

/// exp(M_n - [M]_n); has expectation at most 1 under the increment
/// floor hypothesis.
pub fn bernstein_statistic(path: &MartingalePath) -> f64 {
    (path.final_value() - path.final_quad_variation()).exp()
}

fn sample_path(kind: &MartingaleKind, n: usize, seed: u64) -> Result<MartingalePath, BernsteinError> {
    let increments = match kind {
        MartingaleKind::ScaledRademacher { a } => {
            let mut rng = SplitMix64::new(seed);
            (0..n)
                .map(|_| if rng.next_f64() < 0.5 { -a } else { *a })
                .collect()
        }
        MartingaleKind::CenteredBernoulli { p, scale } => {
            let mut rng = SplitMix64::new(seed);
            let up = scale * (1.0 - p);
            let down = -scale * p;
            (0..n)
                .map(|_| if rng.next_f64() < *p { up } else { down })
                .collect()
        }
        MartingaleKind::BoundedUniform { a } => {
            let mut rng = SplitMix64::new(seed);
            (0..n).map(|_| a * (2.0 * rng.next_f64() - 1.0)).collect()
        }
        MartingaleKind::BoaExcessLoss(cfg) => boa_increments(cfg, n, seed)?,
    };
    MartingalePath::new(increments)
}

fn boa_increments(
    cfg: &BoaExcessLossConfig,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>, BernsteinError> {
    let mut env = Environment::new(cfg.environment.clone(), cfg.loss.outcome_domain, seed);
    let risks = env.expert_risks(&cfg.loss)?;
    let m = env.num_experts();
    let prior = ProbabilityVector::uniform(m)?;
    let mut state = AggregatorState::fixed(prior)?;
    let mut increments = Vec::with_capacity(n);
    for t in 1..=n {
        let w_prev = state.weights().clone();
        let sample = env.step();
        let ell = excess_losses(
            ExcessLossMode::Centered,
            &w_prev,
            &sample.expert_preds,
            sample.y,
            &cfg.loss,
            t,
        )?;
        let mean_risk: f64 = w_prev
            .values()
            .iter()
            .zip(&risks)
            .map(|(w, r)| w * r)
            .sum();
        let conditional_mean = risks[cfg.tracked_expert] - mean_risk;
        increments.push(cfg.eta * (conditional_mean - ell.values[cfg.tracked_expert]));
        state.step_fixed(&ell, cfg.eta, EtaPolicy::Record)?;
    }
    Ok(increments)
}

/// Draw one path of length `n` from the configured increment law.
pub fn simulate_martingale(
    kind: &MartingaleKind,
    n: usize,
    seed: u64,
) -> Result<MartingalePath, BernsteinError> {
    kind.validate()?;
    sample_path(kind, n, seed)
}

/// Sample mean and standard error of the statistic over `reps`
/// independent paths. Replications run in parallel over derived seeds;
/// the reduction order is fixed, so results are reproducible for a given
/// seed regardless of thread count.
pub fn estimate_expectation(
    kind: &MartingaleKind,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<(f64, f64), BernsteinError> {
    kind.validate()?;
    if reps < MIN_REPLICATIONS {
        return Err(BernsteinError::TooFewReplications { reps });
    }
    let stats: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let path = sample_path(kind, n, derive_seed(seed, r as u64))?;
            Ok(bernstein_statistic(&path))
        })
        .collect::<Result<_, BernsteinError>>()?;
    let mean = stats.iter().sum::<f64>() / reps as f64;
    let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (reps - 1) as f64;
    Ok((mean, var.sqrt() / (reps as f64).sqrt()))
}
