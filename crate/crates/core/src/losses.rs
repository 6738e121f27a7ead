//! Loss functions on a bounded prediction domain.
//!
//! Square and absolute loss, their subgradients in the prediction
//! argument, and the constants that drive learning-rate selection: the
//! Lipschitz bound C_b on the subgradient, the strong-convexity modulus
//! C_l, and the prediction-domain diameter D. These always satisfy
//! C_l * D <= 2 * C_b.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed when checking that a prediction lies in its domain.
pub const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("interval [{lo}, {hi}] is not a valid domain (need finite lo < hi)")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("prediction {value} lies outside [{lo}, {hi}] by more than {DOMAIN_SLACK}")]
    DomainViolation { value: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Square,
    Absolute,
}

/// Closed bounded interval with positive length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self, LossError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(LossError::InvalidInterval { lo, hi });
        }
        Ok(Interval { lo, hi })
    }

    pub fn diameter(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains_with_slack(&self, x: f64) -> bool {
        x >= self.lo - DOMAIN_SLACK && x <= self.hi + DOMAIN_SLACK
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

/// A loss kind together with the prediction domain and the outcome domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub prediction_domain: Interval,
    pub outcome_domain: Interval,
}

impl LossSpec {
    pub fn new(
        kind: LossKind,
        prediction_domain: Interval,
        outcome_domain: Interval,
    ) -> Self {
        LossSpec {
            kind,
            prediction_domain,
            outcome_domain,
        }
    }

    /// Loss of prediction `p` against outcome `y`.
    ///
    /// Predictions outside the prediction domain by more than
    /// [`DOMAIN_SLACK`] are hard errors; there is no silent clamping.
    pub fn eval(&self, y: f64, p: f64) -> Result<f64, LossError> {
        self.check_prediction(p)?;
        Ok(match self.kind {
            LossKind::Square => (y - p) * (y - p),
            LossKind::Absolute => (y - p).abs(),
        })
    }

    /// Subgradient of the loss in its prediction argument.
    ///
    /// For absolute loss the subdifferential at p = y is [-1, 1]; this
    /// returns 0, the minimum-norm element.
    pub fn subgradient(&self, y: f64, p: f64) -> Result<f64, LossError> {
        self.check_prediction(p)?;
        Ok(match self.kind {
            LossKind::Square => 2.0 * (p - y),
            LossKind::Absolute => {
                if p > y {
                    1.0
                } else if p < y {
                    -1.0
                } else {
                    0.0
                }
            }
        })
    }

    /// (C_b, C_l, D) for this loss on its declared domains.
    ///
    /// C_b bounds |d/dp loss(y, p)| over both domains, C_l is the
    /// strong-convexity modulus in p (zero for absolute loss), and D is
    /// the prediction-domain diameter.
    pub fn constants(&self) -> LossConstants {
        let d = self.prediction_domain.diameter();
        match self.kind {
            LossKind::Square => {
                let reach = f64::max(
                    (self.outcome_domain.hi - self.prediction_domain.lo).abs(),
                    (self.outcome_domain.lo - self.prediction_domain.hi).abs(),
                );
                LossConstants {
                    c_b: 2.0 * reach,
                    c_l: 2.0,
                    d,
                }
            }
            LossKind::Absolute => LossConstants {
                c_b: 1.0,
                c_l: 0.0,
                d,
            },
        }
    }

    fn check_prediction(&self, p: f64) -> Result<(), LossError> {
        if !self.prediction_domain.contains_with_slack(p) {
            return Err(LossError::DomainViolation {
                value: p,
                lo: self.prediction_domain.lo,
                hi: self.prediction_domain.hi,
            });
        }
        Ok(())
    }
}

/// Curvature and gradient constants of a loss on bounded domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    /// Bound on the absolute subgradient.
    pub c_b: f64,
    /// Strong-convexity modulus in the prediction argument.
    pub c_l: f64,
    /// Diameter of the prediction domain.
    pub d: f64,
}
