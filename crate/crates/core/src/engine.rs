//! Aggregation engine: second-order exponential weights over an expert set.
//!
//! All variants share the same shape. Before round t the engine holds
//! weights pi_{t-1}; the forecaster predicts with the weighted mixture,
//! the round's excess losses ell_jt are formed, and the weights move. The
//! update is second order: the exponent charges ell + eta*ell^2 rather
//! than ell alone, which is what lets small-variance experts keep large
//! weight.
//!
//! ```txt
//! fixed rate      log pi_jt = log pi_j,t-1 - eta * ell_jt * (1 + eta * ell_jt) - log Z_t
//! multi rate      same with a per-expert eta_j
//! adaptive rate   L_jt   = L_j,t-1 + ell_jt * (1 + eta_j,t-1 * ell_jt)
//!                 eta_jt = schedule rate from the history through round t
//!                 pi_jt  = eta_jt * exp(-eta_jt * L_jt) * pi_j0 / Z_t
//! ewa             log pi_jt = log pi_j,t-1 - eta * loss_jt - log Z_t
//! ```
//!
//! The adaptive weights are rebuilt from the prior every round (order M
//! work, no recursion in pi itself), and the corrected cumulative loss
//! L_jt is charged with the rate that was in force when the loss arrived,
//! not the refreshed one. Initially L_j0 = 0 and the adaptive rate is 0,
//! so the first round's L is the plain excess loss with no second-order
//! term. With a constant schedule the adaptive recursion telescopes into
//! the fixed-rate one exactly; a test pins that equivalence.
//!
//! The fixed-rate update admits a closed form, since the per-round factors
//! commute: pi_jn is proportional to pi_j0 * exp(-eta * sum_s ell_js * (1 +
//! eta * ell_js)). [`closed_form_weights_fixed`] evaluates it directly and
//! serves as the reference the iterated update is tested against.
//!
//! Every rate is subject to the step-size condition eta * ell_jt <= 1/2.
//! This module enforces the stronger two-sided form eta * |ell_jt| <= 1/2:
//! it is simpler to state, implies the one-sided condition, and is what
//! the monotonicity of the update in ell requires anyway. Fixed and
//! multi-rate steps either reject a violating round or record it and
//! continue, at the caller's option; the adaptive step always records,
//! because with estimated ranges a violation can genuinely occur on rounds
//! where the range estimate grows and the run is expected to continue.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LossError, LossSpec};
use crate::rates::{
    rate_known_range, rate_unknown_range, update_range_estimate, RateError, RateSchedule,
};
use crate::simplex::{
    mixture_predict, normalize_log_weights, LogWeightVector, ProbabilityVector, SimplexError,
};

/// Hard ceiling on eta * |ell| from the step-size condition.
pub const ETA_CONDITION_BOUND: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("step-size condition violated: {0}")]
    EtaConditionViolated(EtaViolation),
    #[error("operation requires variant {expected:?}, state is {got:?}")]
    VariantMismatch { expected: Variant, got: Variant },
    #[error("prior entry {index} is {value}; every expert needs positive prior mass")]
    PriorNotPositive { index: usize, value: f64 },
    #[error("excess losses have {got} entries for {expected} experts")]
    WrongArity { expected: usize, got: usize },
    #[error("excess loss {index} is {value}; losses must be finite")]
    NonFiniteLoss { index: usize, value: f64 },
    #[error("rate {index} is {value}; rates must be positive and finite")]
    InvalidRate { index: usize, value: f64 },
    #[error("mixture mode needs a strongly convex loss (C_l > 0)")]
    MixtureNeedsCurvature,
    #[error("state was built for a {built:?} schedule but stepped with {passed:?}")]
    ScheduleMismatch { built: ScheduleShape, passed: ScheduleShape },
    #[error(transparent)]
    Simplex(#[from] SimplexError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Rate(#[from] RateError),
}

/// A recorded breach of eta * |ell| <= 1/2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaViolation {
    pub round: usize,
    pub expert: usize,
    /// The offending product eta * |ell|.
    pub product: f64,
}

impl std::fmt::Display for EtaViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "eta * |ell| = {} > 1/2 at round {}, expert {}",
            self.product, self.round, self.expert
        )
    }
}

/// What a step should do when the step-size condition fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtaPolicy {
    /// Refuse the step and leave the state untouched.
    Enforce,
    /// Apply the step anyway and record the violation.
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BoaFixed,
    BoaMulti,
    BoaAdaptive,
    Ewa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcessLossMode {
    /// loss_j minus the weighted mean loss under the pre-update weights.
    Centered,
    /// Subgradient at the mixture times (pred_j - mixture).
    Linearized,
    /// Sum of the two; needs strong convexity to be useful.
    Mixture,
}

/// Shape tag used to detect schedule mix-ups between construction and
/// stepping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleShape {
    Fixed,
    KnownRange,
    UnknownRange,
}

impl From<&RateSchedule> for ScheduleShape {
    fn from(s: &RateSchedule) -> Self {
        match s {
            RateSchedule::Fixed { .. } => ScheduleShape::Fixed,
            RateSchedule::KnownRange { .. } => ScheduleShape::KnownRange,
            RateSchedule::UnknownRange { .. } => ScheduleShape::UnknownRange,
        }
    }
}

/// One round's excess losses, tagged with the round they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcessLossVector {
    pub values: Vec<f64>,
    pub round: usize,
}

impl ExcessLossVector {
    pub fn new(values: Vec<f64>, round: usize) -> Self {
        ExcessLossVector { values, round }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }
}

/// Excess losses for one round under the given mode.
///
/// All three modes center to zero under the pre-update weights: the
/// centered mode by construction, the linearized mode because the weighted
/// mean of (pred_j - mixture) vanishes, and the mixture mode as the sum of
/// the two. Callers rely on this to read regret statements off the sums of
/// excess losses.
pub fn excess_losses(
    mode: ExcessLossMode,
    w_prev: &ProbabilityVector,
    expert_preds: &[f64],
    y: f64,
    spec: &LossSpec,
    round: usize,
) -> Result<ExcessLossVector, EngineError> {
    if w_prev.len() != expert_preds.len() {
        return Err(EngineError::WrongArity {
            expected: w_prev.len(),
            got: expert_preds.len(),
        });
    }
    if matches!(mode, ExcessLossMode::Mixture) && spec.constants().c_l == 0.0 {
        return Err(EngineError::MixtureNeedsCurvature);
    }
    let raw: Vec<f64> = expert_preds
        .iter()
        .map(|&p| spec.eval(y, p))
        .collect::<Result<_, _>>()?;
    let values = match mode {
        ExcessLossMode::Centered => centered_values(w_prev, &raw),
        ExcessLossMode::Linearized => linearized_values(w_prev, expert_preds, y, spec)?,
        ExcessLossMode::Mixture => {
            let lin = linearized_values(w_prev, expert_preds, y, spec)?;
            let cen = centered_values(w_prev, &raw);
            lin.iter().zip(&cen).map(|(a, b)| a + b).collect()
        }
    };
    debug_assert!(
        {
            let c = spec.constants();
            let cap = match mode {
                ExcessLossMode::Centered | ExcessLossMode::Linearized => c.c_b * c.d,
                ExcessLossMode::Mixture => 2.0 * c.c_b * c.d,
            };
            values.iter().all(|v| v.abs() <= cap + 1e-9)
        },
        "excess loss exceeded its structural bound"
    );
    Ok(ExcessLossVector::new(values, round))
}

/// Centered excess losses straight from raw per-expert losses.
pub fn excess_from_raw(
    w_prev: &ProbabilityVector,
    raw_losses: &[f64],
    round: usize,
) -> Result<ExcessLossVector, EngineError> {
    if w_prev.len() != raw_losses.len() {
        return Err(EngineError::WrongArity {
            expected: w_prev.len(),
            got: raw_losses.len(),
        });
    }
    Ok(ExcessLossVector::new(
        centered_values(w_prev, raw_losses),
        round,
    ))
}

fn centered_values(w: &ProbabilityVector, raw: &[f64]) -> Vec<f64> {
    let mean: f64 = w.iter().zip(raw).map(|(wj, lj)| wj * lj).sum();
    raw.iter().map(|lj| lj - mean).collect()
}

fn linearized_values(
    w: &ProbabilityVector,
    preds: &[f64],
    y: f64,
    spec: &LossSpec,
) -> Result<Vec<f64>, EngineError> {
    let fhat = mixture_predict(w, preds)?;
    let slope = spec.subgradient(y, fhat)?;
    Ok(preds.iter().map(|&p| slope * (p - fhat)).collect())
}

/// Outcome of one engine step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub eta_violation: Option<EtaViolation>,
    /// Experts whose range estimate grew this round.
    pub range_doublings: Vec<usize>,
    /// Every refreshed rate was zero; the weights fell back to the prior.
    pub all_zero_rate: bool,
}

/// Recorded anomalies over the life of a state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StateFlags {
    pub eta_violations: Vec<EtaViolation>,
    /// (round, expert) pairs where the range estimate grew.
    pub range_doublings: Vec<(usize, usize)>,
    pub all_zero_rate_rounds: Vec<usize>,
}

/// Weights, corrected cumulative losses, and per-expert rate statistics
/// for one aggregation run.
#[derive(Debug, Clone)]
pub struct AggregatorState {
    variant: Variant,
    prior: ProbabilityVector,
    log_weights: LogWeightVector,
    weights: ProbabilityVector,
    cum_corrected: Vec<f64>,
    rates: Vec<f64>,
    sum_sq: Vec<f64>,
    max_abs: Vec<f64>,
    range_est: Option<Vec<f64>>,
    schedule_shape: Option<ScheduleShape>,
    round: usize,
    flags: StateFlags,
}

impl AggregatorState {
    fn build(
        variant: Variant,
        prior: ProbabilityVector,
        initial_rate: f64,
        range_est: Option<Vec<f64>>,
        schedule_shape: Option<ScheduleShape>,
    ) -> Result<Self, EngineError> {
        for (index, &value) in prior.values().iter().enumerate() {
            if value <= 0.0 {
                return Err(EngineError::PriorNotPositive { index, value });
            }
        }
        let m = prior.len();
        let log_weights = prior.to_log();
        Ok(AggregatorState {
            variant,
            weights: prior.clone(),
            prior,
            log_weights,
            cum_corrected: vec![0.0; m],
            rates: vec![initial_rate; m],
            sum_sq: vec![0.0; m],
            max_abs: vec![0.0; m],
            range_est,
            schedule_shape,
            round: 0,
            flags: StateFlags::default(),
        })
    }

    pub fn fixed(prior: ProbabilityVector) -> Result<Self, EngineError> {
        Self::build(Variant::BoaFixed, prior, 0.0, None, None)
    }

    pub fn multi(prior: ProbabilityVector) -> Result<Self, EngineError> {
        Self::build(Variant::BoaMulti, prior, 0.0, None, None)
    }

    pub fn ewa(prior: ProbabilityVector) -> Result<Self, EngineError> {
        Self::build(Variant::Ewa, prior, 0.0, None, None)
    }

    pub fn adaptive(
        prior: ProbabilityVector,
        schedule: &RateSchedule,
    ) -> Result<Self, EngineError> {
        schedule.validate(prior.len())?;
        let range_est = match schedule {
            RateSchedule::UnknownRange { c } => {
                Some(vec![2.0f64.powi(1 - *c as i32); prior.len()])
            }
            _ => None,
        };
        Self::build(
            Variant::BoaAdaptive,
            prior,
            schedule.initial_rate(),
            range_est,
            Some(schedule.into()),
        )
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn num_experts(&self) -> usize {
        self.prior.len()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn prior(&self) -> &ProbabilityVector {
        &self.prior
    }

    /// Current weights pi_t (the prior before any step).
    pub fn weights(&self) -> &ProbabilityVector {
        &self.weights
    }

    /// Corrected cumulative losses L_jt.
    pub fn cumulative_corrected(&self) -> &[f64] {
        &self.cum_corrected
    }

    /// Rates in force after the most recent step.
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Per-expert running sums of squared excess losses.
    pub fn sum_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    /// Per-expert running maxima of |ell|.
    pub fn max_abs(&self) -> &[f64] {
        &self.max_abs
    }

    /// Current dyadic range estimates, if the state runs an unknown-range
    /// schedule.
    pub fn range_estimates(&self) -> Option<&[f64]> {
        self.range_est.as_deref()
    }

    pub fn flags(&self) -> &StateFlags {
        &self.flags
    }

    fn check_ell(&self, ell: &ExcessLossVector) -> Result<(), EngineError> {
        if ell.len() != self.num_experts() {
            return Err(EngineError::WrongArity {
                expected: self.num_experts(),
                got: ell.len(),
            });
        }
        for (index, &value) in ell.values.iter().enumerate() {
            if !value.is_finite() {
                return Err(EngineError::NonFiniteLoss { index, value });
            }
        }
        Ok(())
    }

    fn eta_violation(&self, etas: &[f64], ell: &ExcessLossVector) -> Option<EtaViolation> {
        let mut worst: Option<EtaViolation> = None;
        for (j, (&eta, &l)) in etas.iter().zip(&ell.values).enumerate() {
            let product = eta * l.abs();
            if product > ETA_CONDITION_BOUND
                && worst.map_or(true, |w| product > w.product)
            {
                worst = Some(EtaViolation {
                    round: self.round + 1,
                    expert: j,
                    product,
                });
            }
        }
        worst
    }

    fn absorb_stats(&mut self, ell: &ExcessLossVector) {
        for (j, &l) in ell.values.iter().enumerate() {
            self.sum_sq[j] += l * l;
            self.max_abs[j] = self.max_abs[j].max(l.abs());
        }
    }

    /// Renormalizes the log weights and refreshes the cached simplex
    /// vector. Subtracting the log partition sum keeps the carrier bounded
    /// over arbitrarily long runs; it is a no-op on the weights themselves.
    fn refresh_weights(&mut self) -> Result<(), EngineError> {
        let max = self
            .log_weights
            .values()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(EngineError::Simplex(SimplexError::AllZeroMass));
        }
        let log_z = max
            + self
                .log_weights
                .values()
                .iter()
                .map(|&v| (v - max).exp())
                .sum::<f64>()
                .ln();
        for v in self.log_weights.values_mut() {
            *v -= log_z;
        }
        self.weights = normalize_log_weights(&self.log_weights)?;
        Ok(())
    }

    /// Fixed-rate second-order update.
    pub fn step_fixed(
        &mut self,
        ell: &ExcessLossVector,
        eta: f64,
        policy: EtaPolicy,
    ) -> Result<StepReport, EngineError> {
        if self.variant != Variant::BoaFixed {
            return Err(EngineError::VariantMismatch {
                expected: Variant::BoaFixed,
                got: self.variant,
            });
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(EngineError::InvalidRate {
                index: 0,
                value: eta,
            });
        }
        let etas = vec![eta; self.num_experts()];
        self.step_constant_rates(ell, &etas, policy)
    }

    /// Per-expert constant rates.
    pub fn step_multi(
        &mut self,
        ell: &ExcessLossVector,
        etas: &[f64],
        policy: EtaPolicy,
    ) -> Result<StepReport, EngineError> {
        if self.variant != Variant::BoaMulti {
            return Err(EngineError::VariantMismatch {
                expected: Variant::BoaMulti,
                got: self.variant,
            });
        }
        if etas.len() != self.num_experts() {
            return Err(EngineError::WrongArity {
                expected: self.num_experts(),
                got: etas.len(),
            });
        }
        for (index, &eta) in etas.iter().enumerate() {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(EngineError::InvalidRate { index, value: eta });
            }
        }
        self.step_constant_rates(ell, &etas.to_vec(), policy)
    }

    fn step_constant_rates(
        &mut self,
        ell: &ExcessLossVector,
        etas: &[f64],
        policy: EtaPolicy,
    ) -> Result<StepReport, EngineError> {
        self.check_ell(ell)?;
        let violation = self.eta_violation(etas, ell);
        if let (Some(v), EtaPolicy::Enforce) = (violation, policy) {
            return Err(EngineError::EtaConditionViolated(v));
        }
        for (j, (&eta, &l)) in etas.iter().zip(&ell.values).enumerate() {
            let corrected = l * (1.0 + eta * l);
            self.log_weights.values_mut()[j] -= eta * corrected;
            self.cum_corrected[j] += corrected;
        }
        self.absorb_stats(ell);
        self.rates.copy_from_slice(etas);
        self.refresh_weights()?;
        self.round += 1;
        if let Some(v) = violation {
            self.flags.eta_violations.push(v);
        }
        Ok(StepReport {
            eta_violation: violation,
            ..StepReport::default()
        })
    }

    /// Adaptive step: charge L with the old rates, refresh the rates from
    /// the enlarged history, then rebuild the weights from the prior.
    pub fn step_adaptive(
        &mut self,
        ell: &ExcessLossVector,
        schedule: &RateSchedule,
    ) -> Result<StepReport, EngineError> {
        if self.variant != Variant::BoaAdaptive {
            return Err(EngineError::VariantMismatch {
                expected: Variant::BoaAdaptive,
                got: self.variant,
            });
        }
        let built = self
            .schedule_shape
            .expect("adaptive state always carries a schedule shape");
        if built != ScheduleShape::from(schedule) {
            return Err(EngineError::ScheduleMismatch {
                built,
                passed: schedule.into(),
            });
        }
        self.check_ell(ell)?;
        schedule.validate(self.num_experts())?;

        // The violation that matters here is against the rates that charge
        // L this round, i.e. the ones refreshed last round.
        let violation = self.eta_violation(&self.rates, ell);

        for (j, &l) in ell.values.iter().enumerate() {
            self.cum_corrected[j] += l * (1.0 + self.rates[j] * l);
        }
        self.absorb_stats(ell);

        let mut report = StepReport {
            eta_violation: violation,
            ..StepReport::default()
        };
        for j in 0..self.num_experts() {
            let prior_j = self.prior.get(j);
            self.rates[j] = if prior_j >= 1.0 {
                // A single expert holding all prior mass has nothing to
                // learn; rate zero sends the weights back to the prior.
                0.0
            } else {
                match schedule {
                    RateSchedule::Fixed { eta } => *eta,
                    RateSchedule::KnownRange { ranges } => {
                        rate_known_range(prior_j, self.sum_sq[j], ranges[j])?
                    }
                    RateSchedule::UnknownRange { c } => {
                        let est = self
                            .range_est
                            .as_mut()
                            .expect("unknown-range state carries estimates");
                        let next = update_range_estimate(Some(est[j]), self.max_abs[j], *c);
                        if next > est[j] {
                            report.range_doublings.push(j);
                            self.flags.range_doublings.push((self.round + 1, j));
                        }
                        est[j] = next;
                        rate_unknown_range(prior_j, self.sum_sq[j], next)?
                    }
                }
            };
        }

        if self.rates.iter().all(|&eta| eta == 0.0) {
            report.all_zero_rate = true;
            self.flags.all_zero_rate_rounds.push(self.round + 1);
            self.log_weights = self.prior.to_log();
        } else {
            for (j, lw) in self.log_weights.values_mut().iter_mut().enumerate() {
                // ln(eta) is -inf for a zero rate: that expert gets zero
                // mass, matching eta * exp(...) * prior = 0.
                *lw = self.rates[j].ln() - self.rates[j] * self.cum_corrected[j]
                    + self.prior.get(j).ln();
            }
        }
        self.refresh_weights()?;
        self.round += 1;
        if let Some(v) = violation {
            self.flags.eta_violations.push(v);
        }
        Ok(report)
    }

    /// First-order exponential weights on raw losses.
    pub fn step_ewa(&mut self, raw_losses: &[f64], eta: f64) -> Result<StepReport, EngineError> {
        if self.variant != Variant::Ewa {
            return Err(EngineError::VariantMismatch {
                expected: Variant::Ewa,
                got: self.variant,
            });
        }
        if raw_losses.len() != self.num_experts() {
            return Err(EngineError::WrongArity {
                expected: self.num_experts(),
                got: raw_losses.len(),
            });
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(EngineError::InvalidRate {
                index: 0,
                value: eta,
            });
        }
        for (index, &value) in raw_losses.iter().enumerate() {
            if !value.is_finite() {
                return Err(EngineError::NonFiniteLoss { index, value });
            }
        }
        for (j, &l) in raw_losses.iter().enumerate() {
            self.log_weights.values_mut()[j] -= eta * l;
            self.cum_corrected[j] += l;
            self.sum_sq[j] += l * l;
            self.max_abs[j] = self.max_abs[j].max(l.abs());
        }
        self.rates.fill(eta);
        self.refresh_weights()?;
        self.round += 1;
        Ok(StepReport::default())
    }
}

/// Fixed-rate weights evaluated in one shot from the whole history.
pub fn closed_form_weights_fixed(
    history: &[ExcessLossVector],
    eta: f64,
    prior: &ProbabilityVector,
) -> Result<ProbabilityVector, EngineError> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(EngineError::InvalidRate {
            index: 0,
            value: eta,
        });
    }
    let m = prior.len();
    let mut log_w: Vec<f64> = prior.values().iter().map(|&p| p.ln()).collect();
    for ell in history {
        if ell.len() != m {
            return Err(EngineError::WrongArity {
                expected: m,
                got: ell.len(),
            });
        }
        for (j, &l) in ell.values.iter().enumerate() {
            log_w[j] -= eta * l * (1.0 + eta * l);
        }
    }
    Ok(normalize_log_weights(&LogWeightVector::new(log_w)?)?)
}

/// Square-loss identity: the mixture-mode excess loss equals the centered
/// value of (pred_j + mixture - 2y)^2. Exposed for tests and diagnostics.
pub fn square_loss_mixture_identity(
    w_prev: &ProbabilityVector,
    preds: &[f64],
    y: f64,
) -> Result<Vec<f64>, EngineError> {
    let fhat = mixture_predict(w_prev, preds)?;
    let g: Vec<f64> = preds
        .iter()
        .map(|&p| {
            let s = p + fhat - 2.0 * y;
            s * s
        })
        .collect();
    Ok(centered_values(w_prev, &g))
}
