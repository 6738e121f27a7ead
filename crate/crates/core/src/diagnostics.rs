//! Verification harness: run ledgers, guarantee evaluators, offline
//! oracles, and online-to-batch conversion.
//!
//! A [`RiskLedger`] records everything one aggregation run produced:
//! weights in force, predictions, raw and excess losses, the aggregated
//! forecast and its loss, and (when the environment admits closed forms)
//! per-round predictive risks. The bound evaluators read cumulative
//! quantities off the ledger and report the right-hand sides that the
//! theory says must dominate the run:
//!
//! ```txt
//! fixed rate        min_j { L_j + eta * S_j + log(1/prior_j) / eta }
//! adaptive, known   min_j { L_j + sqrt(S_j) * (sqrt(2 log(1/prior_j)) / (sqrt(2)-1)
//!                           + B / sqrt(log(1/prior_j)))
//!                           + E_j * (2 log(1/prior_j) + 2 B + 1) },
//!                   B = log(1 + log(n)/2)
//! adaptive, est.    min_j { L_j + sqrt(S_j) * (sqrt(2 log(1/prior_j)) / (sqrt(2)-1)
//!                           + (B' + 8 E_j) / sqrt(log(1/prior_j)))
//!                           + 4 E_j * (log(1/prior_j) + B' + 3) },
//!                   B' = log(1 + log(n)/2 + log(E) + c log 2)
//! stochastic        min_j { T * R_j + 2 eta * S_j + (log(1/prior_j) + x) / eta }
//! ```
//!
//! with L_j the cumulative raw loss of expert j, S_j its cumulative
//! squared excess loss, E_j its range, R_j its analytic risk, T the round
//! count, and x the confidence parameter (coverage 1 - e^{-x}). Minima
//! run over point masses on the experts, where the prior's log ratio is
//! exact.
//!
//! The bounds attach to different left-hand sides. With centered excess
//! losses the fixed-rate bound dominates the weight-averaged cumulative
//! loss sum_t <pi_{t-1}, raw_t>; with linearized losses and a convex loss
//! function it dominates the aggregated forecaster's own cumulative loss;
//! the mixture construction gives both at once against a doubled expert
//! term, which [`bound_fixed_mixture`] evaluates. The adaptive bounds
//! dominate the aggregated cumulative loss under linearized losses. The
//! stochastic bound dominates the cumulative predictive risk with
//! probability 1 - e^{-x} per run, which [`risk_bound_stochastic`] pairs
//! with violation counting across replications.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    excess_losses, AggregatorState, EngineError, EtaPolicy, ExcessLossMode, ExcessLossVector,
    StateFlags,
};
use crate::environments::{analytic_candidate_risk, Environment, EnvironmentError, EnvironmentSpec};
use crate::losses::{LossError, LossKind, LossSpec};
use crate::rates::{RangeInfo, RateSchedule};
use crate::rng::SplitMix64;
use crate::simplex::{mixture_predict, ProbabilityVector, SimplexError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("ledger holds no rounds")]
    EmptyLedger,
    #[error("weight history is empty")]
    EmptyHistory,
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFiniteSample,
    #[error("quantile level {q} outside (0, 1)")]
    InvalidQuantile { q: f64 },
    #[error("confidence parameter {x} must be positive and finite")]
    InvalidConfidence { x: f64 },
    #[error("bound needs a clean run, but {violations} step-size violations were recorded")]
    FlaggedRun { violations: usize },
    #[error("ledger carries no analytic risks")]
    NoAnalyticRisk,
    #[error("bound horizon must be at least 1")]
    InvalidHorizon,
    #[error("ranges cover {declared} experts, ledger has {experts}")]
    RangeArity { declared: usize, experts: usize },
    #[error("round log field {field} has {got} entries, expected {expected}")]
    BadRoundLog {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Environment(#[from] EnvironmentError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

/// Exponential confidence level: statements hold with probability
/// 1 - e^{-x}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParam {
    x: f64,
}

impl ConfidenceParam {
    pub fn new(x: f64) -> Result<Self, DiagnosticsError> {
        if !(x.is_finite() && x > 0.0) {
            return Err(DiagnosticsError::InvalidConfidence { x });
        }
        Ok(ConfidenceParam { x })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    /// Nominal violation probability e^{-x}.
    pub fn violation_probability(&self) -> f64 {
        (-self.x).exp()
    }
}

/// Everything recorded about one round, borrowed from the run loop.
#[derive(Debug, Clone, Copy)]
pub struct RoundLog<'a> {
    pub weights_prev: &'a [f64],
    pub weights_post: &'a [f64],
    pub rates: &'a [f64],
    pub preds: &'a [f64],
    pub raw_losses: &'a [f64],
    pub excess: &'a [f64],
    pub y: f64,
    pub fhat: f64,
    pub agg_loss: f64,
    pub predictive_risk: Option<f64>,
}

/// Columnar record of a full aggregation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskLedger {
    num_experts: usize,
    prior: ProbabilityVector,
    rounds: usize,
    weights_prev: Vec<f64>,
    weights_post: Vec<f64>,
    rates: Vec<f64>,
    preds: Vec<f64>,
    raw_losses: Vec<f64>,
    excess: Vec<f64>,
    outcomes: Vec<f64>,
    fhats: Vec<f64>,
    agg_losses: Vec<f64>,
    predictive_risks: Option<Vec<f64>>,
    expert_risks: Option<Vec<f64>>,
    flags: StateFlags,
    final_range_estimates: Option<Vec<f64>>,
}

impl RiskLedger {
    /// Fresh ledger. `expert_risks` carries the environment's analytic
    /// per-expert risks when they exist; rounds then record predictive
    /// risks as well.
    pub fn new(prior: ProbabilityVector, expert_risks: Option<Vec<f64>>) -> Self {
        let num_experts = prior.len();
        RiskLedger {
            num_experts,
            prior,
            rounds: 0,
            weights_prev: Vec::new(),
            weights_post: Vec::new(),
            rates: Vec::new(),
            preds: Vec::new(),
            raw_losses: Vec::new(),
            excess: Vec::new(),
            outcomes: Vec::new(),
            fhats: Vec::new(),
            agg_losses: Vec::new(),
            predictive_risks: expert_risks.as_ref().map(|_| Vec::new()),
            expert_risks,
            flags: StateFlags::default(),
            final_range_estimates: None,
        }
    }

    pub fn push_round(&mut self, log: RoundLog) -> Result<(), DiagnosticsError> {
        let m = self.num_experts;
        let check = |field: &'static str, len: usize| {
            if len != m {
                Err(DiagnosticsError::BadRoundLog {
                    field,
                    expected: m,
                    got: len,
                })
            } else {
                Ok(())
            }
        };
        check("weights_prev", log.weights_prev.len())?;
        check("weights_post", log.weights_post.len())?;
        check("rates", log.rates.len())?;
        check("preds", log.preds.len())?;
        check("raw_losses", log.raw_losses.len())?;
        check("excess", log.excess.len())?;
        self.weights_prev.extend_from_slice(log.weights_prev);
        self.weights_post.extend_from_slice(log.weights_post);
        self.rates.extend_from_slice(log.rates);
        self.preds.extend_from_slice(log.preds);
        self.raw_losses.extend_from_slice(log.raw_losses);
        self.excess.extend_from_slice(log.excess);
        self.outcomes.push(log.y);
        self.fhats.push(log.fhat);
        self.agg_losses.push(log.agg_loss);
        if let Some(pr) = &mut self.predictive_risks {
            pr.push(log.predictive_risk.ok_or(DiagnosticsError::NoAnalyticRisk)?);
        }
        self.rounds += 1;
        Ok(())
    }

    pub fn attach_flags(&mut self, flags: StateFlags) {
        self.flags = flags;
    }

    pub fn attach_range_estimates(&mut self, estimates: Vec<f64>) {
        self.final_range_estimates = Some(estimates);
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn prior(&self) -> &ProbabilityVector {
        &self.prior
    }

    pub fn flags(&self) -> &StateFlags {
        &self.flags
    }

    pub fn final_range_estimates(&self) -> Option<&[f64]> {
        self.final_range_estimates.as_deref()
    }

    pub fn expert_risks(&self) -> Option<&[f64]> {
        self.expert_risks.as_deref()
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn fhats(&self) -> &[f64] {
        &self.fhats
    }

    pub fn agg_losses(&self) -> &[f64] {
        &self.agg_losses
    }

    fn row(storage: &[f64], t: usize, m: usize) -> &[f64] {
        &storage[t * m..(t + 1) * m]
    }

    /// Weights in force entering round t (0-indexed round).
    pub fn weights_prev_row(&self, t: usize) -> &[f64] {
        Self::row(&self.weights_prev, t, self.num_experts)
    }

    /// Weights after round t's update.
    pub fn weights_post_row(&self, t: usize) -> &[f64] {
        Self::row(&self.weights_post, t, self.num_experts)
    }

    pub fn rates_row(&self, t: usize) -> &[f64] {
        Self::row(&self.rates, t, self.num_experts)
    }

    pub fn preds_row(&self, t: usize) -> &[f64] {
        Self::row(&self.preds, t, self.num_experts)
    }

    pub fn raw_losses_row(&self, t: usize) -> &[f64] {
        Self::row(&self.raw_losses, t, self.num_experts)
    }

    pub fn excess_row(&self, t: usize) -> &[f64] {
        Self::row(&self.excess, t, self.num_experts)
    }

    /// Cumulative loss of the aggregated forecaster.
    pub fn cumulative_agg_loss(&self) -> f64 {
        self.agg_losses.iter().sum()
    }

    /// Cumulative raw loss of expert j.
    pub fn cumulative_expert_loss(&self, j: usize) -> f64 {
        self.raw_losses
            .iter()
            .skip(j)
            .step_by(self.num_experts.max(1))
            .sum()
    }

    pub fn cumulative_expert_losses(&self) -> Vec<f64> {
        (0..self.num_experts)
            .map(|j| self.cumulative_expert_loss(j))
            .collect()
    }

    /// Expert with the smallest cumulative raw loss; ties go to the
    /// lowest index.
    pub fn best_expert(&self) -> Option<(usize, f64)> {
        if self.rounds == 0 || self.num_experts == 0 {
            return None;
        }
        let losses = self.cumulative_expert_losses();
        let mut best = 0usize;
        for (j, &l) in losses.iter().enumerate() {
            if l < losses[best] {
                best = j;
            }
        }
        Some((best, losses[best]))
    }

    /// Per-expert cumulative squared excess losses.
    pub fn sum_sq_excess(&self, j: usize) -> f64 {
        self.excess
            .iter()
            .skip(j)
            .step_by(self.num_experts.max(1))
            .map(|l| l * l)
            .sum()
    }

    /// Cumulative loss charged to the aggregate's own weights:
    /// sum_t <pi_{t-1}, raw_t>.
    pub fn expected_cumulative_loss(&self) -> f64 {
        (0..self.rounds)
            .map(|t| {
                self.weights_prev_row(t)
                    .iter()
                    .zip(self.raw_losses_row(t))
                    .map(|(w, l)| w * l)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Sum of per-round predictive risks, when the run recorded them.
    pub fn cumulative_predictive_risk(&self) -> Option<f64> {
        self.predictive_risks.as_ref().map(|v| v.iter().sum())
    }

    /// Entrywise mean of the weights the forecaster actually used.
    pub fn batch_average_weights(&self) -> Result<ProbabilityVector, DiagnosticsError> {
        if self.rounds == 0 {
            return Err(DiagnosticsError::EmptyHistory);
        }
        let m = self.num_experts;
        let mut acc = vec![0.0; m];
        for t in 0..self.rounds {
            for (a, w) in acc.iter_mut().zip(self.weights_prev_row(t)) {
                *a += w;
            }
        }
        for a in &mut acc {
            *a /= self.rounds as f64;
        }
        Ok(ProbabilityVector::new(acc)?)
    }
}

/// Cumulative loss of the aggregate minus that of the best expert.
pub fn regret_vs_best_expert(ledger: &RiskLedger) -> Result<f64, DiagnosticsError> {
    let (_, best) = ledger.best_expert().ok_or(DiagnosticsError::EmptyLedger)?;
    Ok(ledger.cumulative_agg_loss() - best)
}

/// Entrywise arithmetic mean of a weight history.
pub fn batch_average(history: &[ProbabilityVector]) -> Result<ProbabilityVector, DiagnosticsError> {
    let first = history.first().ok_or(DiagnosticsError::EmptyHistory)?;
    let m = first.len();
    let mut acc = vec![0.0; m];
    for w in history {
        if w.len() != m {
            return Err(SimplexError::DimensionMismatch {
                left: m,
                right: w.len(),
            }
            .into());
        }
        for (a, v) in acc.iter_mut().zip(w.values()) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= history.len() as f64;
    }
    Ok(ProbabilityVector::new(acc)?)
}

/// Empirical q-quantile with linear interpolation between order
/// statistics (the convention with h = (n-1) q).
pub fn excess_risk_quantile(samples: &[f64], q: f64) -> Result<f64, DiagnosticsError> {
    if samples.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(DiagnosticsError::InvalidQuantile { q });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFiniteSample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

fn require_clean(ledger: &RiskLedger) -> Result<(), DiagnosticsError> {
    let violations = ledger.flags().eta_violations.len();
    if violations > 0 {
        return Err(DiagnosticsError::FlaggedRun { violations });
    }
    Ok(())
}

fn require_nonempty(ledger: &RiskLedger) -> Result<(), DiagnosticsError> {
    if ledger.rounds() == 0 {
        return Err(DiagnosticsError::EmptyLedger);
    }
    Ok(())
}

fn min_over_experts(
    ledger: &RiskLedger,
    per_expert: impl Fn(usize) -> f64,
) -> f64 {
    (0..ledger.num_experts())
        .map(per_expert)
        .fold(f64::INFINITY, f64::min)
}

/// Fixed-rate bound: min_j { L_j + eta S_j + log(1/prior_j)/eta }.
///
/// Dominates `expected_cumulative_loss` when centered excess losses were
/// fed to the engine, and the aggregated cumulative loss under linearized
/// losses with a convex loss function. Requires a run with no step-size
/// violations.
pub fn bound_fixed_ms(
    ledger: &RiskLedger,
    eta: f64,
    prior: &ProbabilityVector,
) -> Result<f64, DiagnosticsError> {
    require_nonempty(ledger)?;
    require_clean(ledger)?;
    Ok(min_over_experts(ledger, |j| {
        ledger.cumulative_expert_loss(j)
            + eta * ledger.sum_sq_excess(j)
            + (1.0 / prior.get(j)).ln() / eta
    }))
}

/// Mixture-loss variant of the fixed-rate bound, with the expert term
/// doubled: min_j { 2 L_j + eta S_j + log(1/prior_j)/eta }. Dominates the
/// sum of the aggregated cumulative loss and the weight-averaged one.
pub fn bound_fixed_mixture(
    ledger: &RiskLedger,
    eta: f64,
    prior: &ProbabilityVector,
) -> Result<f64, DiagnosticsError> {
    require_nonempty(ledger)?;
    require_clean(ledger)?;
    Ok(min_over_experts(ledger, |j| {
        2.0 * ledger.cumulative_expert_loss(j)
            + eta * ledger.sum_sq_excess(j)
            + (1.0 / prior.get(j)).ln() / eta
    }))
}

/// Adaptive-rate bound on the aggregated cumulative loss.
///
/// `n` is the horizon parameter of the slowly-growing term B (callers use
/// rounds - 1, floored at 1). With `known_range` the declared ranges must
/// genuinely bound the excess losses and the run must be clean; the
/// estimated-range variant tolerates recorded step-size violations, which
/// legitimately occur on rounds where the estimate grows.
pub fn bound_adaptive(
    ledger: &RiskLedger,
    prior: &ProbabilityVector,
    ranges: &RangeInfo,
    n: usize,
    known_range: bool,
) -> Result<f64, DiagnosticsError> {
    require_nonempty(ledger)?;
    if known_range {
        require_clean(ledger)?;
    }
    if n == 0 {
        return Err(DiagnosticsError::InvalidHorizon);
    }
    if ranges.per_expert.len() != ledger.num_experts() {
        return Err(DiagnosticsError::RangeArity {
            declared: ranges.per_expert.len(),
            experts: ledger.num_experts(),
        });
    }
    let log_n = (n as f64).ln();
    let b = if known_range {
        (1.0 + 0.5 * log_n).ln()
    } else {
        (1.0 + 0.5 * log_n + ranges.cap.ln() + ranges.c as f64 * std::f64::consts::LN_2).ln()
    };
    let sqrt2m1 = std::f64::consts::SQRT_2 - 1.0;
    Ok(min_over_experts(ledger, |j| {
        let lp = (1.0 / prior.get(j)).ln();
        let e_j = ranges.per_expert[j];
        let sq = ledger.sum_sq_excess(j).sqrt();
        let variance_term = if sq == 0.0 {
            0.0
        } else if known_range {
            sq * ((2.0 * lp).sqrt() / sqrt2m1 + b / lp.sqrt())
        } else {
            sq * ((2.0 * lp).sqrt() / sqrt2m1 + (b + 8.0 * e_j) / lp.sqrt())
        };
        let tail = if known_range {
            e_j * (2.0 * lp + 2.0 * b + 1.0)
        } else {
            4.0 * e_j * (lp + b + 3.0)
        };
        ledger.cumulative_expert_loss(j) + variance_term + tail
    }))
}

/// High-probability bound on the cumulative predictive risk:
/// min_j { T R_j + 2 eta S_j + (log(1/prior_j) + x)/eta }, valid with
/// probability 1 - e^{-x} per run. Needs analytic expert risks on the
/// ledger and a clean run.
pub fn risk_bound_stochastic(
    ledger: &RiskLedger,
    eta: f64,
    prior: &ProbabilityVector,
    x: &ConfidenceParam,
) -> Result<f64, DiagnosticsError> {
    require_nonempty(ledger)?;
    require_clean(ledger)?;
    let risks = ledger
        .expert_risks()
        .ok_or(DiagnosticsError::NoAnalyticRisk)?;
    let t = ledger.rounds() as f64;
    Ok(min_over_experts(ledger, |j| {
        t * risks[j]
            + 2.0 * eta * ledger.sum_sq_excess(j)
            + ((1.0 / prior.get(j)).ln() + x.x()) / eta
    }))
}

/// Result of the offline convex-combination oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexOracleResult {
    pub weights: ProbabilityVector,
    /// Cumulative loss of the best combination found.
    pub value: f64,
    /// Restart finals agreed within 1e-6 of each other.
    pub converged: bool,
    /// Spread of the restart final values, on the cumulative-loss scale.
    pub restart_spread: f64,
}

const ORACLE_RESTARTS: usize = 20;
const ORACLE_ITERS: usize = 5000;
const ORACLE_SPREAD_TOL: f64 = 1e-6;

enum OracleProblem<'a> {
    /// Square loss admits exact averaged Gram form:
    /// value(w) = w'Aw - 2 b'w + c, grad = 2 (Aw - b).
    Quadratic {
        a: Vec<f64>,
        b: Vec<f64>,
        c: f64,
        m: usize,
    },
    General {
        ledger: &'a RiskLedger,
        spec: &'a LossSpec,
    },
}

impl<'a> OracleProblem<'a> {
    fn build(ledger: &'a RiskLedger, spec: &'a LossSpec) -> Self {
        match spec.kind {
            LossKind::Square => {
                let m = ledger.num_experts();
                let n = ledger.rounds() as f64;
                let mut a = vec![0.0; m * m];
                let mut b = vec![0.0; m];
                let mut c = 0.0;
                for t in 0..ledger.rounds() {
                    let p = ledger.preds_row(t);
                    let y = ledger.outcomes()[t];
                    for i in 0..m {
                        b[i] += y * p[i];
                        for j in 0..m {
                            a[i * m + j] += p[i] * p[j];
                        }
                    }
                    c += y * y;
                }
                for v in &mut a {
                    *v /= n;
                }
                for v in &mut b {
                    *v /= n;
                }
                c /= n;
                OracleProblem::Quadratic { a, b, c, m }
            }
            LossKind::Absolute => OracleProblem::General { ledger, spec },
        }
    }

    /// Average per-round loss of the combination.
    fn value(&self, w: &[f64]) -> f64 {
        match self {
            OracleProblem::Quadratic { a, b, c, m } => {
                let mut quad = 0.0;
                let mut lin = 0.0;
                for i in 0..*m {
                    let mut row = 0.0;
                    for j in 0..*m {
                        row += a[i * m + j] * w[j];
                    }
                    quad += w[i] * row;
                    lin += b[i] * w[i];
                }
                quad - 2.0 * lin + c
            }
            OracleProblem::General { ledger, spec } => {
                let n = ledger.rounds();
                let mut acc = 0.0;
                for t in 0..n {
                    let p = ledger.preds_row(t);
                    let r: f64 = w.iter().zip(p).map(|(wi, pi)| wi * pi).sum();
                    acc += spec
                        .eval(ledger.outcomes()[t], r)
                        .expect("combination stays inside the prediction domain");
                }
                acc / n as f64
            }
        }
    }

    fn grad(&self, w: &[f64], out: &mut [f64]) {
        match self {
            OracleProblem::Quadratic { a, b, m, .. } => {
                for i in 0..*m {
                    let mut row = 0.0;
                    for j in 0..*m {
                        row += a[i * m + j] * w[j];
                    }
                    out[i] = 2.0 * (row - b[i]);
                }
            }
            OracleProblem::General { ledger, spec } => {
                out.fill(0.0);
                let n = ledger.rounds();
                for t in 0..n {
                    let p = ledger.preds_row(t);
                    let r: f64 = w.iter().zip(p).map(|(wi, pi)| wi * pi).sum();
                    let slope = spec
                        .subgradient(ledger.outcomes()[t], r)
                        .expect("combination stays inside the prediction domain");
                    for (o, pi) in out.iter_mut().zip(p) {
                        *o += slope * pi;
                    }
                }
                for o in out.iter_mut() {
                    *o /= n as f64;
                }
            }
        }
    }

    /// Crude curvature scale for the base step size.
    fn step_base(&self) -> f64 {
        let scale = match self {
            OracleProblem::Quadratic { a, m, .. } => {
                2.0 * (0..*m).map(|i| a[i * m + i]).sum::<f64>()
            }
            OracleProblem::General { ledger, .. } => {
                let n = ledger.rounds();
                (0..n)
                    .map(|t| {
                        ledger.preds_row(t).iter().fold(0.0f64, |acc, p| acc.max(p.abs()))
                    })
                    .sum::<f64>()
                    / n as f64
            }
        };
        (1.0 / scale.max(1e-12)).min(1.0)
    }

    /// The quadratic path has a Lipschitz gradient, so a constant safe
    /// step converges; the nonsmooth path needs a diminishing one.
    fn step_at(&self, base: f64, k: usize) -> f64 {
        match self {
            OracleProblem::Quadratic { .. } => base,
            OracleProblem::General { .. } => base.min(1.0 / ((k + 1) as f64).sqrt()),
        }
    }
}

fn eg_descend(problem: &OracleProblem, start: &[f64], iters: usize) -> (Vec<f64>, f64) {
    let m = start.len();
    let mut lw: Vec<f64> = start.iter().map(|&x| x.max(1e-300).ln()).collect();
    let mut w = start.to_vec();
    let mut g = vec![0.0; m];
    let base = problem.step_base();
    for k in 0..iters {
        problem.grad(&w, &mut g);
        let step = problem.step_at(base, k);
        for (lwj, gj) in lw.iter_mut().zip(&g) {
            *lwj -= step * gj;
        }
        let mx = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lz = mx + lw.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (lwj, wj) in lw.iter_mut().zip(&mut w) {
            *lwj -= lz;
            *wj = lwj.exp();
        }
    }
    let value = problem.value(&w);
    (w, value)
}

fn golden_section(problem: &OracleProblem, iters: usize) -> (Vec<f64>, f64) {
    let invphi = 0.5 * (5.0f64.sqrt() - 1.0);
    let eval = |alpha: f64| problem.value(&[alpha, 1.0 - alpha]);
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = eval(d);
        }
    }
    let alpha = 0.5 * (a + b);
    (vec![alpha, 1.0 - alpha], eval(alpha))
}

/// Best fixed convex combination of the experts in hindsight.
///
/// Exponentiated-gradient descent from twenty deterministic restarts,
/// plus every vertex as a candidate (so the value never exceeds the best
/// single expert), plus a golden-section sweep when there are exactly
/// two experts. `converged` reports whether the restarts agreed within
/// 1e-6 in cumulative value; disagreement flags the result rather than
/// failing it.
pub fn best_convex_oracle(
    ledger: &RiskLedger,
    spec: &LossSpec,
    seed: u64,
) -> Result<ConvexOracleResult, DiagnosticsError> {
    require_nonempty(ledger)?;
    let m = ledger.num_experts();
    let n = ledger.rounds() as f64;
    let problem = OracleProblem::build(ledger, spec);

    let mut rng = SplitMix64::new(seed);
    let mut starts = Vec::with_capacity(ORACLE_RESTARTS);
    starts.push(vec![1.0 / m as f64; m]);
    while starts.len() < ORACLE_RESTARTS {
        let raw: Vec<f64> = (0..m).map(|_| -rng.next_f64().ln()).collect();
        let s: f64 = raw.iter().sum();
        starts.push(raw.into_iter().map(|v| v / s).collect());
    }

    let mut best_w: Option<Vec<f64>> = None;
    let mut best_v = f64::INFINITY;
    let mut final_lo = f64::INFINITY;
    let mut final_hi = f64::NEG_INFINITY;
    for start in &starts {
        let (w, v) = eg_descend(&problem, start, ORACLE_ITERS);
        final_lo = final_lo.min(v);
        final_hi = final_hi.max(v);
        if v < best_v {
            best_v = v;
            best_w = Some(w);
        }
    }
    for j in 0..m {
        let mut vertex = vec![0.0; m];
        vertex[j] = 1.0;
        let v = problem.value(&vertex);
        if v < best_v {
            best_v = v;
            best_w = Some(vertex);
        }
    }
    if m == 2 {
        let (w, v) = golden_section(&problem, 200);
        if v < best_v {
            best_v = v;
            best_w = Some(w);
        }
    }

    let restart_spread = (final_hi - final_lo) * n;
    let weights = ProbabilityVector::new(best_w.expect("at least one candidate"))?;
    Ok(ConvexOracleResult {
        weights,
        value: best_v * n,
        converged: restart_spread <= ORACLE_SPREAD_TOL,
        restart_spread,
    })
}

/// How the engine is stepped each round.
#[derive(Debug, Clone, PartialEq)]
pub enum StepRule {
    Fixed { eta: f64 },
    Multi { etas: Vec<f64> },
    Adaptive { schedule: RateSchedule },
    Ewa { eta: f64 },
}

/// A completed run: its ledger, the final engine state, and how many
/// outcomes the environment had to clip.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub ledger: RiskLedger,
    pub state: AggregatorState,
    pub clip_events: usize,
}

/// Drive one seeded stream end to end: predict, observe, form excess
/// losses, step the weights, and record everything.
pub fn run_stream(
    env_spec: &EnvironmentSpec,
    seed: u64,
    rounds: usize,
    prior: &ProbabilityVector,
    rule: &StepRule,
    mode: ExcessLossMode,
    spec: &LossSpec,
    policy: EtaPolicy,
) -> Result<StreamOutcome, DiagnosticsError> {
    env_spec.validate(&spec.prediction_domain)?;
    if prior.len() != env_spec.experts.len() {
        return Err(EngineError::WrongArity {
            expected: env_spec.experts.len(),
            got: prior.len(),
        }
        .into());
    }
    let mut env = Environment::new(env_spec.clone(), spec.outcome_domain, seed);
    let analytic = env.expert_risks(spec).ok();
    let mut state = match rule {
        StepRule::Fixed { .. } => AggregatorState::fixed(prior.clone())?,
        StepRule::Multi { .. } => AggregatorState::multi(prior.clone())?,
        StepRule::Adaptive { schedule } => AggregatorState::adaptive(prior.clone(), schedule)?,
        StepRule::Ewa { .. } => AggregatorState::ewa(prior.clone())?,
    };
    let mut ledger = RiskLedger::new(prior.clone(), analytic.clone());

    for t in 1..=rounds {
        let w_prev = state.weights().clone();
        let sample = env.step();
        let fhat = mixture_predict(&w_prev, &sample.expert_preds)?;
        let agg_loss = spec.eval(sample.y, fhat)?;
        let raw: Vec<f64> = sample
            .expert_preds
            .iter()
            .map(|&p| spec.eval(sample.y, p))
            .collect::<Result<_, _>>()?;
        let ell = match rule {
            StepRule::Ewa { .. } => ExcessLossVector::new(raw.clone(), t),
            _ => excess_losses(mode, &w_prev, &sample.expert_preds, sample.y, spec, t)?,
        };
        match rule {
            StepRule::Fixed { eta } => {
                state.step_fixed(&ell, *eta, policy)?;
            }
            StepRule::Multi { etas } => {
                state.step_multi(&ell, etas, policy)?;
            }
            StepRule::Adaptive { schedule } => {
                state.step_adaptive(&ell, schedule)?;
            }
            StepRule::Ewa { eta } => {
                state.step_ewa(&raw, *eta)?;
            }
        }
        let predictive_risk = if analytic.is_some() {
            Some(analytic_candidate_risk(
                &env.spec().outcomes,
                &spec.outcome_domain,
                spec,
                fhat,
            )?)
        } else {
            None
        };
        ledger.push_round(RoundLog {
            weights_prev: w_prev.values(),
            weights_post: state.weights().values(),
            rates: state.rates(),
            preds: &sample.expert_preds,
            raw_losses: &raw,
            excess: &ell.values,
            y: sample.y,
            fhat,
            agg_loss,
            predictive_risk,
        })?;
    }

    ledger.attach_flags(state.flags().clone());
    if let Some(est) = state.range_estimates() {
        ledger.attach_range_estimates(est.to_vec());
    }
    Ok(StreamOutcome {
        clip_events: env.clip_events(),
        ledger,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{ExpertRule, OutcomeProcess};
    use crate::losses::Interval;
    use crate::rng::derive_seed;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0).unwrap()
    }

    fn square_spec() -> LossSpec {
        LossSpec::new(LossKind::Square, unit(), unit())
    }

    fn uniform_env(experts: Vec<f64>) -> EnvironmentSpec {
        EnvironmentSpec {
            outcomes: OutcomeProcess::IidUniform,
            experts: experts
                .into_iter()
                .map(|value| ExpertRule::Constant { value })
                .collect(),
        }
    }

    fn gaussian_env(experts: Vec<f64>, mean: f64, stddev: f64) -> EnvironmentSpec {
        EnvironmentSpec {
            outcomes: OutcomeProcess::IidGaussianShift { mean, stddev },
            experts: experts
                .into_iter()
                .map(|value| ExpertRule::Constant { value })
                .collect(),
        }
    }

    /// Hand-built ledger with the given aggregated and raw losses; the
    /// other columns carry placeholder values consistent in arity.
    fn synthetic_ledger(agg: &[f64], raw_rows: &[Vec<f64>]) -> RiskLedger {
        let m = raw_rows[0].len();
        let prior = ProbabilityVector::uniform(m).unwrap();
        let mut ledger = RiskLedger::new(prior.clone(), None);
        let w = vec![1.0 / m as f64; m];
        for (t, (a, raw)) in agg.iter().zip(raw_rows).enumerate() {
            let mean: f64 = raw.iter().map(|l| l / m as f64).sum();
            let excess: Vec<f64> = raw.iter().map(|l| l - mean).collect();
            ledger
                .push_round(RoundLog {
                    weights_prev: &w,
                    weights_post: &w,
                    rates: &vec![0.1; m],
                    preds: &vec![0.5; m],
                    raw_losses: raw,
                    excess: &excess,
                    y: 0.5,
                    fhat: 0.5,
                    agg_loss: *a,
                    predictive_risk: None,
                })
                .expect("arity consistent");
            let _ = t;
        }
        ledger
    }

    #[test]
    fn regret_is_additive_over_rounds() {
        let ledger = synthetic_ledger(&[1.0, 1.0], &[vec![0.0, 3.0], vec![0.0, 3.0]]);
        assert_eq!(regret_vs_best_expert(&ledger).unwrap(), 2.0);
    }

    #[test]
    fn single_expert_run_has_zero_regret() {
        let out = run_stream(
            &uniform_env(vec![0.5]),
            derive_seed(1, 0),
            50,
            &ProbabilityVector::new(vec![1.0]).unwrap(),
            &StepRule::Ewa { eta: 0.5 },
            ExcessLossMode::Centered,
            &square_spec(),
            EtaPolicy::Enforce,
        )
        .unwrap();
        assert!(regret_vs_best_expert(&out.ledger).unwrap().abs() < 1e-12);
        assert_eq!(out.ledger.weights_post_row(49), &[1.0]);
    }

    #[test]
    fn regret_matches_brute_force_resummation() {
        let out = run_stream(
            &uniform_env(vec![0.2, 0.5, 0.9]),
            derive_seed(5, 3),
            100,
            &ProbabilityVector::uniform(3).unwrap(),
            &StepRule::Fixed { eta: 0.3 },
            ExcessLossMode::Centered,
            &square_spec(),
            EtaPolicy::Enforce,
        )
        .unwrap();
        let ledger = &out.ledger;
        let agg: f64 = (0..100).map(|t| ledger.agg_losses()[t]).sum();
        let best = (0..3)
            .map(|j| (0..100).map(|t| ledger.raw_losses_row(t)[j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let direct = agg - best;
        assert!((regret_vs_best_expert(ledger).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn ledger_cumulative_quantities_are_nondecreasing() {
        let out = run_stream(
            &uniform_env(vec![0.3, 0.7]),
            derive_seed(8, 0),
            200,
            &ProbabilityVector::uniform(2).unwrap(),
            &StepRule::Fixed { eta: 0.2 },
            ExcessLossMode::Centered,
            &square_spec(),
            EtaPolicy::Enforce,
        )
        .unwrap();
        let mut acc = 0.0;
        for &l in out.ledger.agg_losses() {
            assert!(l >= 0.0);
            let next = acc + l;
            assert!(next >= acc);
            acc = next;
        }
        assert_eq!(out.ledger.rounds(), 200);
    }

    #[test]
    fn run_stream_is_deterministic_in_the_seed() {
        let go = || {
            run_stream(
                &gaussian_env(vec![0.4, 0.6], 0.5, 0.1),
                derive_seed(77, 4),
                50,
                &ProbabilityVector::uniform(2).unwrap(),
                &StepRule::Adaptive {
                    schedule: RateSchedule::UnknownRange { c: 30 },
                },
                ExcessLossMode::Linearized,
                &square_spec(),
                EtaPolicy::Record,
            )
            .unwrap()
        };
        let a = go();
        let b = go();
        assert_eq!(a.ledger, b.ledger);
    }

    #[test]
    fn oracle_symmetric_experts_split_evenly() {
        let mut ledger = RiskLedger::new(ProbabilityVector::uniform(2).unwrap(), None);
        for _ in 0..20 {
            ledger
                .push_round(RoundLog {
                    weights_prev: &[0.5, 0.5],
                    weights_post: &[0.5, 0.5],
                    rates: &[0.1, 0.1],
                    preds: &[0.0, 1.0],
                    raw_losses: &[0.25, 0.25],
                    excess: &[0.0, 0.0],
                    y: 0.5,
                    fhat: 0.5,
                    agg_loss: 0.0,
                    predictive_risk: None,
                })
                .unwrap();
        }
        let r = best_convex_oracle(&ledger, &square_spec(), 17).unwrap();
        assert!((r.weights.get(0) - 0.5).abs() < 1e-6);
        assert!(r.value.abs() < 1e-10);
        assert!(r.converged, "spread {}", r.restart_spread);
    }

    #[test]
    fn oracle_interpolates_exactly_at_quarter_target() {
        let mut ledger = RiskLedger::new(ProbabilityVector::uniform(2).unwrap(), None);
        for _ in 0..10 {
            ledger
                .push_round(RoundLog {
                    weights_prev: &[0.5, 0.5],
                    weights_post: &[0.5, 0.5],
                    rates: &[0.1, 0.1],
                    preds: &[0.0, 1.0],
                    raw_losses: &[0.0625, 0.5625],
                    excess: &[-0.25, 0.25],
                    y: 0.25,
                    fhat: 0.5,
                    agg_loss: 0.0625,
                    predictive_risk: None,
                })
                .unwrap();
        }
        let r = best_convex_oracle(&ledger, &square_spec(), 31).unwrap();
        assert!((r.weights.get(0) - 0.75).abs() < 1e-7, "{:?}", r.weights);
        assert!(r.value.abs() < 1e-12);
    }

    #[test]
    fn oracle_single_expert_returns_its_loss() {
        let out = run_stream(
            &uniform_env(vec![0.4]),
            derive_seed(2, 0),
            30,
            &ProbabilityVector::new(vec![1.0]).unwrap(),
            &StepRule::Ewa { eta: 0.3 },
            ExcessLossMode::Centered,
            &square_spec(),
            EtaPolicy::Enforce,
        )
        .unwrap();
        let r = best_convex_oracle(&out.ledger, &square_spec(), 5).unwrap();
        assert_eq!(r.weights.values(), &[1.0]);
        let direct = out.ledger.cumulative_expert_loss(0);
        assert!((r.value - direct).abs() < 1e-9 * direct.max(1.0));
    }

    #[test]
    fn oracle_never_loses_to_any_vertex() {
        for s in 0..5u64 {
            let out = run_stream(
                &gaussian_env(vec![0.2, 0.45, 0.7, 0.95], 0.55, 0.08),
                derive_seed(400, s),
                80,
                &ProbabilityVector::uniform(4).unwrap(),
                &StepRule::Fixed { eta: 0.2 },
                ExcessLossMode::Centered,
                &square_spec(),
                EtaPolicy::Enforce,
            )
            .unwrap();
            let r = best_convex_oracle(&out.ledger, &square_spec(), 1000 + s).unwrap();
            for j in 0..4 {
                let vertex = out.ledger.cumulative_expert_loss(j);
                assert!(
                    r.value <= vertex + 1e-9 * vertex.max(1.0),
                    "seed {s}: oracle {} vs vertex {j} at {vertex}",
                    r.value
                );
            }
        }
    }

    #[test]
    fn oracle_handles_absolute_loss() {
        // Outcomes sit at 0.25; under absolute loss any combination
        // predicting 0.25 is optimal, so the oracle value is 0.
        let spec = LossSpec::new(LossKind::Absolute, unit(), unit());
        let mut ledger = RiskLedger::new(ProbabilityVector::uniform(2).unwrap(), None);
        for _ in 0..12 {
            ledger
                .push_round(RoundLog {
                    weights_prev: &[0.5, 0.5],
                    weights_post: &[0.5, 0.5],
                    rates: &[0.1, 0.1],
                    preds: &[0.0, 1.0],
                    raw_losses: &[0.25, 0.75],
                    excess: &[-0.25, 0.25],
                    y: 0.25,
                    fhat: 0.5,
                    agg_loss: 0.25,
                    predictive_risk: None,
                })
                .unwrap();
        }
        let r = best_convex_oracle(&ledger, &spec, 9).unwrap();
        assert!(r.value < 1e-4, "value {}", r.value);
        assert!((r.weights.get(0) - 0.75).abs() < 1e-3);
    }

    #[test]
    fn fixed_bound_single_round_hand_value() {
        let mut ledger = RiskLedger::new(ProbabilityVector::uniform(2).unwrap(), None);
        ledger
            .push_round(RoundLog {
                weights_prev: &[0.5, 0.5],
                weights_post: &[0.47502081252105999, 0.52497918747894],
                rates: &[0.1, 0.1],
                preds: &[0.0, 1.0],
                raw_losses: &[1.0, 0.0],
                excess: &[0.5, -0.5],
                y: 1.0,
                fhat: 0.5,
                agg_loss: 0.25,
                predictive_risk: None,
            })
            .unwrap();
        let prior = ProbabilityVector::uniform(2).unwrap();
        let rhs = bound_fixed_ms(&ledger, 0.1, &prior).unwrap();
        assert!((rhs - 6.9564718055994526).abs() < 1e-12, "{rhs}");
        let lhs = ledger.expected_cumulative_loss();
        assert!((lhs - 0.5).abs() < 1e-15);
        assert!(lhs <= rhs);
    }

    #[test]
    fn fixed_bound_all_zero_losses_reduces_to_prior_term() {
        let ledger = synthetic_ledger(&[0.0; 4], &vec![vec![0.0, 0.0]; 4]);
        let prior = ProbabilityVector::uniform(2).unwrap();
        let rhs = bound_fixed_ms(&ledger, 0.1, &prior).unwrap();
        assert!((rhs - std::f64::consts::LN_2 / 0.1).abs() < 1e-12);
        assert_eq!(ledger.expected_cumulative_loss(), 0.0);
    }

    #[test]
    fn fixed_bound_rejects_flagged_runs() {
        let mut ledger = synthetic_ledger(&[0.0], &vec![vec![0.0, 0.0]]);
        let mut flags = StateFlags::default();
        flags.eta_violations.push(crate::engine::EtaViolation {
            round: 1,
            expert: 0,
            product: 0.7,
        });
        ledger.attach_flags(flags);
        let prior = ProbabilityVector::uniform(2).unwrap();
        assert!(matches!(
            bound_fixed_ms(&ledger, 0.1, &prior),
            Err(DiagnosticsError::FlaggedRun { violations: 1 })
        ));
    }

    #[test]
    fn fixed_bound_dominates_on_random_streams() {
        for s in 0..40u64 {
            let out = run_stream(
                &uniform_env(vec![0.1, 0.35, 0.6, 0.85]),
                derive_seed(31, s),
                250,
                &ProbabilityVector::uniform(4).unwrap(),
                &StepRule::Fixed { eta: 0.4 },
                ExcessLossMode::Centered,
                &square_spec(),
                EtaPolicy::Enforce,
            )
            .unwrap();
            let prior = ProbabilityVector::uniform(4).unwrap();
            let rhs = bound_fixed_ms(&out.ledger, 0.4, &prior).unwrap();
            let lhs = out.ledger.expected_cumulative_loss();
            assert!(lhs <= rhs, "seed {s}: {lhs} > {rhs}");
        }
    }

    #[test]
    fn mixture_bound_dominates_combined_loss() {
        for s in 0..20u64 {
            let out = run_stream(
                &gaussian_env(vec![0.3, 0.5, 0.8], 0.5, 0.1),
                derive_seed(90, s),
                300,
                &ProbabilityVector::uniform(3).unwrap(),
                &StepRule::Fixed { eta: 0.05 },
                ExcessLossMode::Mixture,
                &square_spec(),
                EtaPolicy::Enforce,
            )
            .unwrap();
            let prior = ProbabilityVector::uniform(3).unwrap();
            let rhs = bound_fixed_mixture(&out.ledger, 0.05, &prior).unwrap();
            let lhs = out.ledger.cumulative_agg_loss() + out.ledger.expected_cumulative_loss();
            assert!(lhs <= rhs, "seed {s}: {lhs} > {rhs}");
        }
    }

    #[test]
    fn adaptive_bound_horizon_one_has_zero_b_term() {
        // At n = 1 the B term vanishes for known ranges, so two identical
        // experts with zero excess losses give exactly
        // L + E (2 log 2 + 1) at uniform prior.
        let ledger = synthetic_ledger(&[0.25; 3], &vec![vec![0.25, 0.25]; 3]);
        let prior = ProbabilityVector::uniform(2).unwrap();
        let ranges = RangeInfo::declared(vec![1.0, 1.0], 30).unwrap();
        let rhs = bound_adaptive(&ledger, &prior, &ranges, 1, true).unwrap();
        let expected = 0.75 + 1.0 * (2.0 * std::f64::consts::LN_2 + 1.0);
        assert!((rhs - expected).abs() < 1e-12, "{rhs} vs {expected}");
    }

    #[test]
    fn adaptive_bound_requires_positive_horizon_and_matching_ranges() {
        let ledger = synthetic_ledger(&[0.1], &vec![vec![0.1, 0.2]]);
        let prior = ProbabilityVector::uniform(2).unwrap();
        let ranges = RangeInfo::declared(vec![1.0, 1.0], 30).unwrap();
        assert!(matches!(
            bound_adaptive(&ledger, &prior, &ranges, 0, true),
            Err(DiagnosticsError::InvalidHorizon)
        ));
        let wrong = RangeInfo::declared(vec![1.0], 30).unwrap();
        assert!(matches!(
            bound_adaptive(&ledger, &prior, &wrong, 1, true),
            Err(DiagnosticsError::RangeArity { .. })
        ));
    }

    #[test]
    fn adaptive_bounds_dominate_on_random_streams() {
        let spec = square_spec();
        let experts = vec![0.15, 0.4, 0.65, 0.9];
        let prior = ProbabilityVector::uniform(4).unwrap();
        // Linearized excess losses are bounded by C_b |c_j - fhat|, and
        // the mixture stays inside the expert hull.
        let hull = 0.9 - 0.15;
        let declared: Vec<f64> = experts.iter().map(|_| 2.0 * hull).collect();
        for s in 0..25u64 {
            let known = RateSchedule::KnownRange {
                ranges: declared.clone(),
            };
            let out = run_stream(
                &uniform_env(experts.clone()),
                derive_seed(610, s),
                200,
                &prior,
                &StepRule::Adaptive {
                    schedule: known,
                },
                ExcessLossMode::Linearized,
                &spec,
                EtaPolicy::Record,
            )
            .unwrap();
            let ranges = RangeInfo::declared(declared.clone(), 30).unwrap();
            let n = out.ledger.rounds().saturating_sub(1).max(1);
            let rhs = bound_adaptive(&out.ledger, &prior, &ranges, n, true).unwrap();
            let lhs = out.ledger.cumulative_agg_loss();
            assert!(lhs <= rhs, "known, seed {s}: {lhs} > {rhs}");

            let unknown = RateSchedule::UnknownRange { c: 30 };
            let out = run_stream(
                &uniform_env(experts.clone()),
                derive_seed(611, s),
                200,
                &prior,
                &StepRule::Adaptive { schedule: unknown },
                ExcessLossMode::Linearized,
                &spec,
                EtaPolicy::Record,
            )
            .unwrap();
            let est = out.ledger.final_range_estimates().unwrap().to_vec();
            let ranges = RangeInfo::from_observed(&est, 30).unwrap();
            let rhs = bound_adaptive(&out.ledger, &prior, &ranges, n, false).unwrap();
            let lhs = out.ledger.cumulative_agg_loss();
            assert!(lhs <= rhs, "unknown, seed {s}: {lhs} > {rhs}");
        }
    }

    #[test]
    fn stochastic_bound_cancels_exactly_for_identical_experts() {
        let out = run_stream(
            &gaussian_env(vec![0.5, 0.5, 0.5], 0.5, 0.1),
            derive_seed(12, 0),
            40,
            &ProbabilityVector::uniform(3).unwrap(),
            &StepRule::Fixed { eta: 0.2 },
            ExcessLossMode::Centered,
            &square_spec(),
            EtaPolicy::Enforce,
        )
        .unwrap();
        let prior = ProbabilityVector::uniform(3).unwrap();
        let x = ConfidenceParam::new(1.5).unwrap();
        let rhs = risk_bound_stochastic(&out.ledger, 0.2, &prior, &x).unwrap();
        let lhs = out.ledger.cumulative_predictive_risk().unwrap();
        let gap = rhs - lhs;
        let expected = (3.0f64.ln() + 1.5) / 0.2;
        assert!((gap - expected).abs() < 1e-10, "{gap} vs {expected}");
    }

    #[test]
    fn stochastic_bound_needs_analytic_risks() {
        let ledger = synthetic_ledger(&[0.1], &vec![vec![0.1, 0.2]]);
        let prior = ProbabilityVector::uniform(2).unwrap();
        let x = ConfidenceParam::new(1.0).unwrap();
        assert!(matches!(
            risk_bound_stochastic(&ledger, 0.1, &prior, &x),
            Err(DiagnosticsError::NoAnalyticRisk)
        ));
    }

    #[test]
    fn confidence_param_validation() {
        assert!(ConfidenceParam::new(0.0).is_err());
        assert!(ConfidenceParam::new(-1.0).is_err());
        assert!(ConfidenceParam::new(f64::NAN).is_err());
        let x = ConfidenceParam::new(20f64.ln()).unwrap();
        assert!((x.violation_probability() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn batch_average_examples() {
        let a = ProbabilityVector::new(vec![1.0, 0.0]).unwrap();
        let b = ProbabilityVector::new(vec![0.0, 1.0]).unwrap();
        let avg = batch_average(&[a.clone(), b]).unwrap();
        assert_eq!(avg.values(), &[0.5, 0.5]);
        let same = batch_average(&[a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(same.values(), &[1.0, 0.0]);
        assert!(matches!(
            batch_average(&[]),
            Err(DiagnosticsError::EmptyHistory)
        ));
    }

    #[test]
    fn batch_average_matches_independent_resummation() {
        let mut rng = SplitMix64::new(2024);
        let m = 5;
        let mut history = Vec::new();
        let mut acc = vec![0.0f64; m];
        for _ in 0..100 {
            let raw: Vec<f64> = (0..m).map(|_| -rng.next_f64().ln()).collect();
            let s: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.into_iter().map(|v| v / s).collect();
            for (a, v) in acc.iter_mut().zip(&w) {
                *a += v;
            }
            history.push(ProbabilityVector::new(w).unwrap());
        }
        let avg = batch_average(&history).unwrap();
        for (a, v) in acc.iter().zip(avg.values()) {
            assert!((a / 100.0 - v).abs() < 1e-14);
        }
    }

    #[test]
    fn ledger_batch_average_agrees_with_free_function() {
        let out = run_stream(
            &uniform_env(vec![0.2, 0.8]),
            derive_seed(55, 0),
            60,
            &ProbabilityVector::uniform(2).unwrap(),
            &StepRule::Fixed { eta: 0.3 },
            ExcessLossMode::Centered,
            &square_spec(),
            EtaPolicy::Enforce,
        )
        .unwrap();
        let rows: Vec<ProbabilityVector> = (0..60)
            .map(|t| ProbabilityVector::new(out.ledger.weights_prev_row(t).to_vec()).unwrap())
            .collect();
        let a = batch_average(&rows).unwrap();
        let b = out.ledger.batch_average_weights().unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn quantile_examples_and_properties() {
        assert_eq!(
            excess_risk_quantile(&[5.0, 1.0, 4.0, 2.0, 3.0], 0.5).unwrap(),
            3.0
        );
        assert_eq!(excess_risk_quantile(&[2.5; 9], 0.3).unwrap(), 2.5);
        assert!(matches!(
            excess_risk_quantile(&[], 0.5),
            Err(DiagnosticsError::EmptySample)
        ));
        assert!(excess_risk_quantile(&[1.0], 1.0).is_err());
        assert!(excess_risk_quantile(&[1.0, f64::NAN], 0.5).is_err());

        let mut rng = SplitMix64::new(66);
        let sample: Vec<f64> = (0..10_000).map(|_| rng.next_f64()).collect();
        let q95 = excess_risk_quantile(&sample, 0.95).unwrap();
        assert!((q95 - 0.95).abs() < 0.02, "{q95}");

        // Monotone in q, equivariant under affine maps.
        let mut prev = f64::NEG_INFINITY;
        for k in 1..20 {
            let q = k as f64 / 20.0;
            let v = excess_risk_quantile(&sample, q).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        let mapped: Vec<f64> = sample.iter().map(|v| 3.0 * v - 7.0).collect();
        let direct = excess_risk_quantile(&mapped, 0.25).unwrap();
        let via = 3.0 * excess_risk_quantile(&sample, 0.25).unwrap() - 7.0;
        assert!((direct - via).abs() < 1e-12);
    }

    #[test]
    fn averaged_prediction_never_beats_average_loss_pointwise() {
        // Convexity of the loss in the prediction makes this exact, not
        // just in expectation.
        let spec = square_spec();
        let mut rng = SplitMix64::new(404);
        for _ in 0..200 {
            let vals: Vec<f64> = (0..4).map(|_| rng.next_f64()).collect();
            let y = rng.next_f64();
            let avg_pred = vals.iter().sum::<f64>() / 4.0;
            let lhs = spec.eval(y, avg_pred).unwrap();
            let rhs = vals
                .iter()
                .map(|&v| spec.eval(y, v).unwrap())
                .sum::<f64>()
                / 4.0;
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn run_stream_records_analytic_risks_when_available() {
        let out = run_stream(
            &gaussian_env(vec![0.4, 0.6], 0.5, 0.1),
            derive_seed(2, 2),
            10,
            &ProbabilityVector::uniform(2).unwrap(),
            &StepRule::Fixed { eta: 0.2 },
            ExcessLossMode::Centered,
            &square_spec(),
            EtaPolicy::Enforce,
        )
        .unwrap();
        let risks = out.ledger.expert_risks().unwrap();
        assert!((risks[0] - 0.02).abs() < 1e-15);
        assert!(out.ledger.cumulative_predictive_risk().is_some());

        let adversarial = EnvironmentSpec {
            outcomes: OutcomeProcess::AdversarialAlternating { values: [1.0, 0.0] },
            experts: vec![
                ExpertRule::Constant { value: 0.4 },
                ExpertRule::Constant { value: 0.6 },
            ],
        };
        let out = run_stream(
            &adversarial,
            0,
            10,
            &ProbabilityVector::uniform(2).unwrap(),
            &StepRule::Fixed { eta: 0.2 },
            ExcessLossMode::Centered,
            &square_spec(),
            EtaPolicy::Enforce,
        )
        .unwrap();
        assert!(out.ledger.expert_risks().is_none());
        assert!(out.ledger.cumulative_predictive_risk().is_none());
    }
}
