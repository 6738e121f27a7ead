//! Probability vectors over a finite expert set and the log-space
//! arithmetic used to maintain them.
//!
//! Aggregation weights are always carried as log weights and exponentiated
//! through max-subtraction, so underflow to zero mass is possible for
//! individual experts but overflow never is. A normalized vector is
//! accepted when its total mass is within 1e-9 of one and is then rescaled
//! to unit mass, so downstream arithmetic can treat it as exactly
//! normalized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the total mass of an acceptable probability vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimplexError {
    #[error("probability vector must have at least one entry")]
    Empty,
    #[error("entry {index} is {value}, expected a finite value")]
    NonFiniteEntry { index: usize, value: f64 },
    #[error("entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entries sum to {sum}, more than {SIMPLEX_TOLERANCE} away from 1")]
    MassNotUnit { sum: f64 },
    #[error("all log weights are -inf; no mass left to normalize")]
    AllZeroMass,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("KL divergence undefined: q has mass at entry {index} where p has none")]
    AbsoluteContinuityViolation { index: usize },
    #[error("log weight {index} is {value}; +inf and NaN are not valid log weights")]
    InvalidLogWeight { index: usize, value: f64 },
}

/// A point on the probability simplex, indexed 0..M-1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector {
    values: Vec<f64>,
}

impl ProbabilityVector {
    /// Accepts entries that are nonnegative and sum to 1 within
    /// [`SIMPLEX_TOLERANCE`], then rescales to unit mass exactly.
    pub fn new(values: Vec<f64>) -> Result<Self, SimplexError> {
        if values.is_empty() {
            return Err(SimplexError::Empty);
        }
        for (index, &value) in values.iter().enumerate() {
            if !value.is_finite() {
                return Err(SimplexError::NonFiniteEntry { index, value });
            }
            if value < 0.0 {
                return Err(SimplexError::NegativeEntry { index, value });
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(SimplexError::MassNotUnit { sum });
        }
        let values = values.into_iter().map(|v| v / sum).collect();
        Ok(ProbabilityVector { values })
    }

    pub fn uniform(m: usize) -> Result<Self, SimplexError> {
        if m == 0 {
            return Err(SimplexError::Empty);
        }
        Ok(ProbabilityVector {
            values: vec![1.0 / m as f64; m],
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, j: usize) -> f64 {
        self.values[j]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// Entrywise natural log; zero entries map to -inf.
    pub fn to_log(&self) -> LogWeightVector {
        LogWeightVector {
            values: self.values.iter().map(|v| v.ln()).collect(),
        }
    }
}

/// Unnormalized weights carried in log space. Entries may be -inf (zero
/// mass) but never +inf or NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeightVector {
    values: Vec<f64>,
}

impl LogWeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self, SimplexError> {
        if values.is_empty() {
            return Err(SimplexError::Empty);
        }
        for (index, &value) in values.iter().enumerate() {
            if value.is_nan() || value == f64::INFINITY {
                return Err(SimplexError::InvalidLogWeight { index, value });
            }
        }
        Ok(LogWeightVector { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Exponentiates log weights into a probability vector.
///
/// The maximum log weight is subtracted before exponentiation so the
/// largest term is exactly 1; entries far below the maximum underflow to
/// zero mass, which is the intended behavior for hopeless experts.
pub fn normalize_log_weights(lw: &LogWeightVector) -> Result<ProbabilityVector, SimplexError> {
    let max = lw
        .values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(SimplexError::AllZeroMass);
    }
    let exps: Vec<f64> = lw.values.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbabilityVector {
        values: exps.into_iter().map(|e| e / sum).collect(),
    })
}

/// Mixture prediction sum_j w_j * pred_j.
pub fn mixture_predict(w: &ProbabilityVector, preds: &[f64]) -> Result<f64, SimplexError> {
    if w.len() != preds.len() {
        return Err(SimplexError::DimensionMismatch {
            left: w.len(),
            right: preds.len(),
        });
    }
    Ok(w.values.iter().zip(preds).map(|(wj, pj)| wj * pj).sum())
}

/// Kullback-Leibler divergence KL(q || p) in nats.
///
/// Terms with q_j = 0 contribute zero regardless of p_j. The result is
/// clamped at zero: it is nonnegative in exact arithmetic and rounding can
/// leave a value like -1e-17 when q is very close to p.
pub fn kl_divergence(
    q: &ProbabilityVector,
    p: &ProbabilityVector,
) -> Result<f64, SimplexError> {
    if q.len() != p.len() {
        return Err(SimplexError::DimensionMismatch {
            left: q.len(),
            right: p.len(),
        });
    }
    let mut sum = 0.0;
    for (index, (&qj, &pj)) in q.values.iter().zip(&p.values).enumerate() {
        if qj == 0.0 {
            continue;
        }
        if pj == 0.0 {
            return Err(SimplexError::AbsoluteContinuityViolation { index });
        }
        sum += qj * (qj / pj).ln();
    }
    Ok(sum.max(0.0))
}

/// Shape of a prediction stream: number of experts and number of rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_experts: usize,
    pub horizon: usize,
}

impl StreamConfig {
    pub fn new(num_experts: usize, horizon: usize) -> Result<Self, SimplexError> {
        if num_experts == 0 {
            return Err(SimplexError::Empty);
        }
        Ok(StreamConfig {
            num_experts,
            horizon,
        })
    }
}
