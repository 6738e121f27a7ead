//! Learning-rate schedules.
//!
//! A fixed schedule uses one rate for everything. The adaptive schedules
//! retune each expert's rate from its own history after every round:
//!
//! ```txt
//! known range:    eta_jt = min( 1/(2*E_j),  sqrt( log(1/prior_j) / sum_s ell_js^2 ) )
//! unknown range:  eta_jt = min( 1/E_jt,     sqrt( log(1/prior_j) / sum_s ell_js^2 ) )
//! ```
//!
//! where E_j is a declared bound on |ell_jt| and E_jt is the running dyadic
//! estimate produced by [`update_range_estimate`]. An empty squared-loss sum
//! makes the square-root term +inf, so the range term is selected; this is
//! the convention that keeps the very first rate well defined when the
//! first excess loss is zero.
//!
//! The dyadic estimator returns E = 2^(k+1) for the smallest integer
//! k >= -c with 2^k >= max observed |ell|, so the estimate at least doubles
//! whenever it moves and never shrinks. The floor exponent c bounds how far
//! the estimate can start below 1; rounds where the estimate grows are the
//! only rounds on which the unknown-range rate can violate the step-size
//! condition, and the engine records them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default floor exponent for the dyadic range estimator.
pub const DEFAULT_RANGE_FLOOR_EXPONENT: u32 = 30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RateError {
    #[error("prior mass {prior} leaves nothing to learn (need prior < 1)")]
    PriorNotInformative { prior: f64 },
    #[error("prior mass {prior} is not in (0, 1)")]
    InvalidPrior { prior: f64 },
    #[error("range bound {value} must be positive and finite")]
    InvalidRange { value: f64 },
    #[error("squared-loss sum {value} must be nonnegative and finite")]
    InvalidSumSquares { value: f64 },
    #[error("schedule declares {declared} ranges for {experts} experts")]
    RangeCountMismatch { declared: usize, experts: usize },
    #[error("floor exponent must be at least 1")]
    InvalidFloorExponent,
}

/// How the engine assigns per-expert learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RateSchedule {
    /// One constant rate for every expert and round.
    Fixed { eta: f64 },
    /// Per-expert declared bounds E_j on |ell_jt|.
    KnownRange { ranges: Vec<f64> },
    /// Ranges estimated on the fly with floor exponent c.
    UnknownRange { c: u32 },
}

impl RateSchedule {
    pub fn validate(&self, num_experts: usize) -> Result<(), RateError> {
        match self {
            RateSchedule::Fixed { eta } => {
                if !(eta.is_finite() && *eta > 0.0) {
                    return Err(RateError::InvalidRange { value: *eta });
                }
            }
            RateSchedule::KnownRange { ranges } => {
                if ranges.len() != num_experts {
                    return Err(RateError::RangeCountMismatch {
                        declared: ranges.len(),
                        experts: num_experts,
                    });
                }
                for &e in ranges {
                    if !(e.is_finite() && e > 0.0) {
                        return Err(RateError::InvalidRange { value: e });
                    }
                }
            }
            RateSchedule::UnknownRange { c } => {
                if *c == 0 {
                    return Err(RateError::InvalidFloorExponent);
                }
            }
        }
        Ok(())
    }

    /// Rate in force before any data: the constant for fixed schedules,
    /// zero for the adaptive ones (no rate until the first refresh).
    pub fn initial_rate(&self) -> f64 {
        match self {
            RateSchedule::Fixed { eta } => *eta,
            _ => 0.0,
        }
    }
}

fn check_prior(prior: f64) -> Result<(), RateError> {
    if !(prior.is_finite() && prior > 0.0) {
        return Err(RateError::InvalidPrior { prior });
    }
    if prior >= 1.0 {
        return Err(RateError::PriorNotInformative { prior });
    }
    Ok(())
}

fn check_sum_sq(sum_sq: f64) -> Result<(), RateError> {
    if !(sum_sq.is_finite() && sum_sq >= 0.0) {
        return Err(RateError::InvalidSumSquares { value: sum_sq });
    }
    Ok(())
}

fn check_range(e: f64) -> Result<(), RateError> {
    if !(e.is_finite() && e > 0.0) {
        return Err(RateError::InvalidRange { value: e });
    }
    Ok(())
}

fn sqrt_term(prior: f64, sum_sq: f64) -> f64 {
    if sum_sq == 0.0 {
        f64::INFINITY
    } else {
        (-(prior.ln()) / sum_sq).sqrt()
    }
}

/// Rate for an expert whose excess losses are known to stay in [-E, E].
pub fn rate_known_range(prior: f64, sum_sq: f64, e: f64) -> Result<f64, RateError> {
    check_prior(prior)?;
    check_sum_sq(sum_sq)?;
    check_range(e)?;
    Ok(f64::min(1.0 / (2.0 * e), sqrt_term(prior, sum_sq)))
}

/// Rate for an expert whose range is only estimated; note the cap is 1/E,
/// not 1/(2E), because the dyadic estimate already at least doubles the
/// largest observation.
pub fn rate_unknown_range(prior: f64, sum_sq: f64, e_t: f64) -> Result<f64, RateError> {
    check_prior(prior)?;
    check_sum_sq(sum_sq)?;
    check_range(e_t)?;
    Ok(f64::min(1.0 / e_t, sqrt_term(prior, sum_sq)))
}

#[inline]
fn two_pow(k: i32) -> f64 {
    2.0f64.powi(k)
}

/// Dyadic range estimate after observing an absolute excess loss.
///
/// Returns 2^(k+1) for the smallest integer k >= -c with 2^k >= `abs_ell`,
/// floored at the previous estimate so the sequence never decreases. Pass
/// `None` for a fresh expert (equivalent to a previous estimate of
/// 2^(-c+1), the value returned when nothing has been observed).
pub fn update_range_estimate(prev: Option<f64>, abs_ell: f64, c: u32) -> f64 {
    assert!(
        abs_ell.is_finite() && abs_ell >= 0.0,
        "absolute excess loss {abs_ell} must be finite and nonnegative"
    );
    assert!(c >= 1, "floor exponent must be at least 1");
    let floor_k = -(c as i32);
    let k = if abs_ell <= two_pow(floor_k) {
        floor_k
    } else {
        // log2 + ceil gets within one of the true exponent; the two
        // correction loops make the boundary cases exact.
        let mut k = abs_ell.log2().ceil() as i32;
        while k > floor_k && two_pow(k - 1) >= abs_ell {
            k -= 1;
        }
        while two_pow(k) < abs_ell {
            k += 1;
        }
        k
    };
    let fresh = two_pow(k + 1);
    match prev {
        Some(p) => fresh.max(p),
        None => fresh,
    }
}

/// Effective range information for bound evaluation: a per-expert bound on
/// |ell_jt|, a global cap, and the floor exponent of the estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeInfo {
    pub per_expert: Vec<f64>,
    pub cap: f64,
    pub c: u32,
}

impl RangeInfo {
    /// Declared ranges, capped by their own maximum.
    pub fn declared(per_expert: Vec<f64>, c: u32) -> Result<Self, RateError> {
        if per_expert.is_empty() {
            return Err(RateError::RangeCountMismatch {
                declared: 0,
                experts: 0,
            });
        }
        let floor = two_pow(-(c as i32));
        let mut cap = f64::NEG_INFINITY;
        let per_expert: Vec<f64> = per_expert
            .into_iter()
            .map(|e| {
                check_range(e)?;
                let e = e.max(floor);
                cap = cap.max(e);
                Ok(e)
            })
            .collect::<Result<_, RateError>>()?;
        Ok(RangeInfo { per_expert, cap, c })
    }

    /// Ranges taken from observed maxima, floored at 2^-c.
    pub fn from_observed(max_abs: &[f64], c: u32) -> Result<Self, RateError> {
        Self::declared(
            max_abs
                .iter()
                .map(|&m| m.max(two_pow(-(c as i32))))
                .collect(),
            c,
        )
    }
}
