//! Bernstein Online Aggregation: second-order exponential weights over a
//! finite pool of experts, with fixed, per-expert, and adaptive learning
//! rates, plus the verification machinery used to check its regret and
//! risk guarantees numerically.
//!
//! The crate is organized bottom-up:
//!
//! - [`rng`]: seeded PRNG and seed derivation for reproducible streams
//! - [`simplex`]: validated probability vectors and log-weight math
//! - [`losses`]: square and absolute losses on bounded intervals
//! - [`rates`]: learning-rate schedules and the range doubling estimator
//! - [`engine`]: the aggregation recursions themselves
//! - [`environments`]: synthetic data streams with analytic risks
//! - [`diagnostics`]: run ledgers, bound evaluators, offline oracles,
//!   online-to-batch conversion
//! - [`bernstein`]: Monte-Carlo check of the underlying supermartingale
//!   inequality

pub mod bernstein;
pub mod diagnostics;
pub mod engine;
pub mod environments;
pub mod losses;
pub mod rates;
pub mod rng;
pub mod simplex;

pub use engine::{AggregatorState, EtaPolicy, ExcessLossMode, Variant};
pub use losses::{Interval, LossKind, LossSpec};
pub use simplex::ProbabilityVector;
