//! CSV emission: one formatting rule for reals (17 significant digits,
//! `NaN` for non-applicable cells) and the trace/summary schemas.

use std::io::Write;

use boa_core::diagnostics::RiskLedger;
use boa_core::engine::{ExcessLossMode, Variant};

/// 17 significant digits, enough to round-trip any f64; non-applicable
/// cells are spelled `NaN`.
pub fn format_real(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_owned()
    } else {
        format!("{v:.16e}")
    }
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::BoaFixed => "boa-fixed",
        Variant::BoaMulti => "boa-multi",
        Variant::BoaAdaptive => "boa-adaptive",
        Variant::Ewa => "ewa",
    }
}

pub fn mode_name(m: ExcessLossMode) -> &'static str {
    match m {
        ExcessLossMode::Centered => "centered",
        ExcessLossMode::Linearized => "linearized",
        ExcessLossMode::Mixture => "mixture",
    }
}

/// One summary row per (n, replication) cell.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub seed: u64,
    pub n: usize,
    pub variant: Variant,
    pub mode: ExcessLossMode,
    pub regret_best: f64,
    pub regret_convex: f64,
    pub batch_excess_risk: f64,
    pub bound_value: f64,
    /// 0 = held, 1 = violated, NaN = no bound evaluated.
    pub bound_violated: f64,
    pub eta_flag_count: usize,
    pub range_doublings: usize,
    pub wallclock_ms: f64,
}

pub const SUMMARY_HEADER: [&str; 12] = [
    "seed",
    "n",
    "variant",
    "mode",
    "regret_best",
    "regret_convex",
    "batch_excess_risk",
    "bound_value",
    "bound_violated",
    "eta_flag_count",
    "range_doublings",
    "wallclock_ms",
];

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.n.to_string(),
            variant_name(r.variant).to_owned(),
            mode_name(r.mode).to_owned(),
            format_real(r.regret_best),
            format_real(r.regret_convex),
            format_real(r.batch_excess_risk),
            format_real(r.bound_value),
            format_real(r.bound_violated),
            r.eta_flag_count.to_string(),
            r.range_doublings.to_string(),
            format_real(r.wallclock_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-round trace: t, y, fhat, loss_agg, then per-expert blocks
/// (pred_j, loss_j, ell_j, eta_j, weight_j). Weights and rates are the
/// post-update values for the round.
pub fn write_trace<W: Write>(out: W, ledger: &RiskLedger) -> csv::Result<()> {
    let m = ledger.num_experts();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "t".to_owned(),
        "y".to_owned(),
        "fhat".to_owned(),
        "loss_agg".to_owned(),
    ];
    for j in 1..=m {
        header.push(format!("pred_{j}"));
        header.push(format!("loss_{j}"));
        header.push(format!("ell_{j}"));
        header.push(format!("eta_{j}"));
        header.push(format!("weight_{j}"));
    }
    w.write_record(&header)?;
    for t in 0..ledger.rounds() {
        let mut rec = vec![
            (t + 1).to_string(),
            format_real(ledger.outcomes()[t]),
            format_real(ledger.fhats()[t]),
            format_real(ledger.agg_losses()[t]),
        ];
        let preds = ledger.preds_row(t);
        let raw = ledger.raw_losses_row(t);
        let ell = ledger.excess_row(t);
        let rates = ledger.rates_row(t);
        let weights = ledger.weights_post_row(t);
        for j in 0..m {
            rec.push(format_real(preds[j]));
            rec.push(format_real(raw[j]));
            rec.push(format_real(ell[j]));
            rec.push(format_real(rates[j]));
            rec.push(format_real(weights[j]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
