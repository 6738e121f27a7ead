//! Log-log rate fitting over sweep summaries: per-horizon quantiles of
//! a chosen column regressed against log(n).

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use boa_core::diagnostics::{excess_risk_quantile, DiagnosticsError};

const MIN_HORIZONS: usize = 4;
const MIN_REPS_PER_HORIZON: usize = 30;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {MIN_HORIZONS} horizons with {MIN_REPS_PER_HORIZON}+ replications each; got {horizons} horizons, smallest cell {min_reps}")]
    InsufficientData { horizons: usize, min_reps: usize },
    #[error("column {column:?} not found in the summary header")]
    MissingColumn { column: String },
    #[error("column {column:?} has a non-finite value at horizon n = {n}")]
    NonFiniteValue { column: String, n: usize },
    #[error("quantile of {column:?} at n = {n} is {value}, not positive; cannot take logs")]
    NonPositiveQuantile { column: String, n: usize, value: f64 },
    #[error("csv read error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Quantile(#[from] DiagnosticsError),
}

/// Least-squares fit of log(quantile) against log(n): `residual` is the
/// root-mean-square vertical deviation of the fitted line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
}

/// Fit from already-grouped (horizon, samples) pairs.
pub fn fit_rate_from_groups(
    groups: &BTreeMap<usize, Vec<f64>>,
    column: &str,
    q: f64,
) -> Result<RateFit, FitError> {
    let min_reps = groups.values().map(Vec::len).min().unwrap_or(0);
    if groups.len() < MIN_HORIZONS || min_reps < MIN_REPS_PER_HORIZON {
        return Err(FitError::InsufficientData {
            horizons: groups.len(),
            min_reps,
        });
    }
    let mut xs = Vec::with_capacity(groups.len());
    let mut ys = Vec::with_capacity(groups.len());
    for (&n, samples) in groups {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(FitError::NonFiniteValue {
                column: column.to_owned(),
                n,
            });
        }
        let value = excess_risk_quantile(samples, q)?;
        if value <= 0.0 {
            return Err(FitError::NonPositiveQuantile {
                column: column.to_owned(),
                n,
                value,
            });
        }
        xs.push((n as f64).ln());
        ys.push(value.ln());
    }
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    Ok(RateFit {
        slope,
        intercept,
        residual: (sse / k).sqrt(),
    })
}

/// Read a sweep summary CSV and fit the q-quantile of `column` against
/// the horizon column `n`.
pub fn fit_rate(path: &Path, column: &str, q: f64) -> Result<RateFit, FitError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| FitError::MissingColumn {
            column: column.to_owned(),
        })?;
    let n_col = headers
        .iter()
        .position(|h| h == "n")
        .ok_or_else(|| FitError::MissingColumn {
            column: "n".to_owned(),
        })?;
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let n: usize = record[n_col].parse().map_err(|_| FitError::MissingColumn {
            column: "n".to_owned(),
        })?;
        let v: f64 = record[col].parse().unwrap_or(f64::NAN);
        groups.entry(n).or_default().push(v);
    }
    fit_rate_from_groups(&groups, column, q)
}
