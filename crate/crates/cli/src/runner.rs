//! Executes resolved experiments: single traced runs, parallel seed
//! sweeps, convex-oracle reports, and martingale estimates.
//!
//! Every (n, replication) cell is an independent stream seeded with
//! derive_seed(base, replication), so a replication sees the same stream
//! prefix at every horizon of a sweep. The engine always runs with the
//! recording step-size policy; violations surface in `eta_flag_count`
//! (and as a nonzero exit under `--strict`), and bound evaluators that
//! need a clean run report `NaN` on flagged cells.
//!
//! Which bound a cell reports depends on the variant and mode:
//!
//! - boa-fixed with `confidence_x` set and analytic risks available:
//!   the high-probability risk bound, checked against the cumulative
//!   predictive risk.
//! - boa-fixed otherwise: the fixed-rate regret bound, checked against
//!   the weight-averaged cumulative loss (centered), the aggregate's
//!   own cumulative loss (linearized), or their sum against the
//!   doubled-expert-term variant (mixture).
//! - boa-adaptive with a known-range or estimated-range schedule: the
//!   matching adaptive bound, same left-hand-side convention; mixture
//!   mode reports no adaptive bound.
//! - boa-multi and ewa report no bound.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use boa_core::bernstein::{estimate_expectation, BernsteinError, MartingaleKind};
use boa_core::diagnostics::{
    best_convex_oracle, bound_adaptive, bound_fixed_ms, bound_fixed_mixture, regret_vs_best_expert,
    risk_bound_stochastic, run_stream, ConvexOracleResult, DiagnosticsError, StreamOutcome,
};
use boa_core::engine::{EtaPolicy, ExcessLossMode, Variant};
use boa_core::environments::analytic_candidate_risk;
use boa_core::rates::{RangeInfo, RateSchedule};
use boa_core::rng::derive_seed;

use crate::config::ResolvedExperiment;
use crate::csvout::SummaryRow;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("run expects a single horizon and a single replication; got {horizons} horizons x {replications} replications (use sweep)")]
    NotASingleRun {
        horizons: usize,
        replications: usize,
    },
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Bernstein(#[from] BernsteinError),
    #[error(transparent)]
    Rate(#[from] boa_core::rates::RateError),
}

/// A finished cell: its summary row plus the full stream record.
pub struct CellOutcome {
    pub row: SummaryRow,
    pub outcome: StreamOutcome,
}

fn expert_values(exp: &ResolvedExperiment) -> Option<Vec<f64>> {
    exp.environment
        .experts
        .iter()
        .map(|r| match r {
            boa_core::environments::ExpertRule::Constant { value } => Some(*value),
            _ => None,
        })
        .collect()
}

fn batch_excess_risk(exp: &ResolvedExperiment, outcome: &StreamOutcome) -> f64 {
    let Some(risks) = outcome.ledger.expert_risks() else {
        return f64::NAN;
    };
    let Some(values) = expert_values(exp) else {
        return f64::NAN;
    };
    let Ok(pi_bar) = outcome.ledger.batch_average_weights() else {
        return f64::NAN;
    };
    let f_bar: f64 = pi_bar
        .values()
        .iter()
        .zip(&values)
        .map(|(w, v)| w * v)
        .sum();
    let best = risks.iter().cloned().fold(f64::INFINITY, f64::min);
    match analytic_candidate_risk(
        &exp.environment.outcomes,
        &exp.loss.outcome_domain,
        &exp.loss,
        f_bar,
    ) {
        Ok(r) => r - best,
        Err(_) => f64::NAN,
    }
}

/// Returns (bound_value, bound_violated) per the policy in the module
/// doc; (NaN, NaN) when no bound applies or the run is flagged.
fn bound_and_violation(exp: &ResolvedExperiment, outcome: &StreamOutcome) -> (f64, f64) {
    let ledger = &outcome.ledger;
    let none = (f64::NAN, f64::NAN);
    let check = |rhs: Result<f64, DiagnosticsError>, lhs: f64| match rhs {
        Ok(rhs) => (rhs, if lhs > rhs { 1.0 } else { 0.0 }),
        Err(_) => none,
    };
    match exp.variant {
        Variant::BoaFixed => {
            let eta = exp.eta.expect("resolved boa-fixed always carries eta");
            if let (Some(conf), Some(lhs)) = (&exp.confidence, ledger.cumulative_predictive_risk())
            {
                return check(
                    risk_bound_stochastic(ledger, eta, &exp.prior, conf),
                    lhs,
                );
            }
            match exp.mode {
                ExcessLossMode::Centered => check(
                    bound_fixed_ms(ledger, eta, &exp.prior),
                    ledger.expected_cumulative_loss(),
                ),
                ExcessLossMode::Linearized => check(
                    bound_fixed_ms(ledger, eta, &exp.prior),
                    ledger.cumulative_agg_loss(),
                ),
                ExcessLossMode::Mixture => check(
                    bound_fixed_mixture(ledger, eta, &exp.prior),
                    ledger.cumulative_agg_loss() + ledger.expected_cumulative_loss(),
                ),
            }
        }
        Variant::BoaAdaptive => {
            if exp.mode == ExcessLossMode::Mixture {
                return none;
            }
            let (ranges, known) = match &exp.schedule {
                Some(RateSchedule::KnownRange { ranges }) => {
                    match RangeInfo::declared(ranges.clone(), 30) {
                        Ok(r) => (r, true),
                        Err(_) => return none,
                    }
                }
                Some(RateSchedule::UnknownRange { c }) => {
                    let Some(est) = ledger.final_range_estimates() else {
                        return none;
                    };
                    match RangeInfo::from_observed(est, *c) {
                        Ok(r) => (r, false),
                        Err(_) => return none,
                    }
                }
                _ => return none,
            };
            let n = ledger.rounds().saturating_sub(1).max(1);
            let lhs = match exp.mode {
                ExcessLossMode::Centered => ledger.expected_cumulative_loss(),
                _ => ledger.cumulative_agg_loss(),
            };
            check(bound_adaptive(ledger, &exp.prior, &ranges, n, known), lhs)
        }
        Variant::BoaMulti | Variant::Ewa => none,
    }
}

/// Run one (n, replication) cell end to end.
pub fn run_cell(exp: &ResolvedExperiment, n: usize, rep: u64) -> Result<CellOutcome, RunnerError> {
    let stream_seed = derive_seed(exp.seed, rep);
    let start = Instant::now();
    let outcome = run_stream(
        &exp.environment,
        stream_seed,
        n,
        &exp.prior,
        &exp.rule,
        exp.mode,
        &exp.loss,
        EtaPolicy::Record,
    )?;
    let regret_best = regret_vs_best_expert(&outcome.ledger)?;
    let regret_convex = if exp.compute_convex_oracle {
        let oracle = best_convex_oracle(&outcome.ledger, &exp.loss, derive_seed(stream_seed, 1))?;
        outcome.ledger.cumulative_agg_loss() - oracle.value
    } else {
        f64::NAN
    };
    let batch = batch_excess_risk(exp, &outcome);
    let (bound_value, bound_violated) = bound_and_violation(exp, &outcome);
    let flags = outcome.ledger.flags();
    let row = SummaryRow {
        seed: stream_seed,
        n,
        variant: exp.variant,
        mode: exp.mode,
        regret_best,
        regret_convex,
        batch_excess_risk: batch,
        bound_value,
        bound_violated,
        eta_flag_count: flags.eta_violations.len(),
        range_doublings: flags.range_doublings.len(),
        wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok(CellOutcome { row, outcome })
}

/// Single-cell run (the `run` subcommand): requires exactly one horizon
/// and one replication.
pub fn run_single(exp: &ResolvedExperiment) -> Result<CellOutcome, RunnerError> {
    if exp.horizons.len() != 1 || exp.replications != 1 {
        return Err(RunnerError::NotASingleRun {
            horizons: exp.horizons.len(),
            replications: exp.replications,
        });
    }
    run_cell(exp, exp.horizons[0], 0)
}

/// Full sweep over horizons x replications, parallel across cells,
/// rows in deterministic (n, replication) order.
pub fn run_sweep(exp: &ResolvedExperiment) -> Result<Vec<SummaryRow>, RunnerError> {
    let mut horizons = exp.horizons.clone();
    horizons.sort_unstable();
    horizons.dedup();
    let cells: Vec<(usize, u64)> = horizons
        .iter()
        .flat_map(|&n| (0..exp.replications as u64).map(move |r| (n, r)))
        .collect();
    cells
        .par_iter()
        .map(|&(n, rep)| run_cell(exp, n, rep).map(|c| c.row))
        .collect()
}

/// Convex-oracle report for one cell (the `oracle` subcommand).
pub fn run_oracle(exp: &ResolvedExperiment) -> Result<(ConvexOracleResult, SummaryRow), RunnerError> {
    let cell = run_single(exp)?;
    let stream_seed = derive_seed(exp.seed, 0);
    let oracle = best_convex_oracle(&cell.outcome.ledger, &exp.loss, derive_seed(stream_seed, 1))?;
    Ok((oracle, cell.row))
}

/// One estimate row of the `bernstein` subcommand.
#[derive(Debug, Clone)]
pub struct BernsteinRow {
    pub n: usize,
    pub reps: usize,
    pub mean: f64,
    pub standard_error: f64,
}

pub fn run_bernstein(
    kind: &MartingaleKind,
    horizons: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<BernsteinRow>, RunnerError> {
    let mut rows = Vec::with_capacity(horizons.len());
    for (i, &n) in horizons.iter().enumerate() {
        let (mean, standard_error) = estimate_expectation(kind, n, reps, derive_seed(seed, i as u64))?;
        rows.push(BernsteinRow {
            n,
            reps,
            mean,
            standard_error,
        });
    }
    Ok(rows)
}
