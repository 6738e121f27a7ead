//! Acceptance gate. Every release-blocking property runs here, one
//! criterion per line of output, with hard wallclock limits asserted
//! where the contract states one. Run with `--nocapture` to see the
//! per-criterion lines on success.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use boa_cli::config::parse_config;
use boa_cli::fitrate::fit_rate_from_groups;
use boa_cli::runner::run_sweep;
use boa_core::bernstein::{estimate_expectation, BoaExcessLossConfig, MartingaleKind};
use boa_core::diagnostics::{bound_adaptive, bound_fixed_ms, run_stream, StepRule};
use boa_core::engine::{closed_form_weights_fixed, ExcessLossVector};
use boa_core::environments::{EnvironmentSpec, ExpertRule, OutcomeProcess};
use boa_core::rates::{RangeInfo, RateSchedule};
use boa_core::rng::{derive_seed, inverse_normal_cdf, SplitMix64};
use boa_core::{
    AggregatorState, EtaPolicy, ExcessLossMode, Interval, LossKind, LossSpec, ProbabilityVector,
};

fn unit_square() -> LossSpec {
    let unit = Interval::new(0.0, 1.0).unwrap();
    LossSpec::new(LossKind::Square, unit, unit)
}

fn random_constant_experts(rng: &mut SplitMix64, m: usize) -> Vec<ExpertRule> {
    (0..m)
        .map(|_| ExpertRule::Constant {
            value: rng.next_f64(),
        })
        .collect()
}

fn random_environment(rng: &mut SplitMix64, m: usize, flavor: usize) -> EnvironmentSpec {
    let outcomes = match flavor % 4 {
        0 => OutcomeProcess::IidUniform,
        1 => OutcomeProcess::IidGaussianShift {
            mean: 0.3 + 0.4 * rng.next_f64(),
            stddev: 0.05 + 0.05 * rng.next_f64(),
        },
        2 => OutcomeProcess::AdversarialAlternating {
            values: [rng.next_f64(), rng.next_f64()],
        },
        _ => OutcomeProcess::AdversarialDriftingMean {
            start: 0.5 * rng.next_f64(),
            slope: 0.001 * rng.next_f64(),
        },
    };
    EnvironmentSpec {
        outcomes,
        experts: random_constant_experts(rng, m),
    }
}

fn resolve_shipped(name: &str) -> boa_cli::ResolvedExperiment {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    parse_config(&text).unwrap().resolve().unwrap()
}

fn group_by_horizon(
    rows: &[boa_cli::SummaryRow],
    value: impl Fn(&boa_cli::SummaryRow) -> f64,
) -> BTreeMap<usize, Vec<f64>> {
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for row in rows {
        groups.entry(row.n).or_default().push(value(row));
    }
    groups
}

fn enforce_limit(elapsed: Duration, limit: Duration, what: &str) {
    assert!(
        elapsed <= limit,
        "{what} took {:.1} s, limit {:.0} s",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
}

/// Iterated fixed-rate updates agree with the product form to 1e-10 in
/// sup norm on 50 random loss streams (M=10, n=1000, losses in [-1,1],
/// eta=0.4, within the step-size condition). Limit 5 s.
fn criterion_1() -> String {
    let start = Instant::now();
    let (m, n, eta) = (10usize, 1000usize, 0.4f64);
    let prior = ProbabilityVector::uniform(m).unwrap();
    let mut worst: f64 = 0.0;
    for s in 0..50u64 {
        let mut rng = SplitMix64::new(derive_seed(1001, s));
        let mut state = AggregatorState::fixed(prior.clone()).unwrap();
        let mut history = Vec::with_capacity(n);
        for t in 1..=n {
            let ell: Vec<f64> = (0..m).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
            history.push(ExcessLossVector::new(ell, t));
            state
                .step_fixed(&history[t - 1], eta, EtaPolicy::Enforce)
                .unwrap();
            let closed = closed_form_weights_fixed(&history, eta, &prior).unwrap();
            for j in 0..m {
                worst = worst.max((state.weights().get(j) - closed.get(j)).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(worst <= 1e-10, "sup-norm gap {worst:.3e} exceeds 1e-10");
    enforce_limit(elapsed, Duration::from_secs(5), "criterion 1");
    format!("sup gap {:.2e}, {} ms", worst, elapsed.as_millis())
}

/// The fixed-rate deterministic bound dominates the weight-averaged
/// cumulative loss on 1000 random streams with the step-size condition
/// enforced; zero violations. Limit 30 s.
fn criterion_2() -> String {
    let start = Instant::now();
    let spec = unit_square();
    let eta = 0.4f64;
    let prior = ProbabilityVector::uniform(8).unwrap();
    let rule = StepRule::Fixed { eta };
    let mut violations = 0usize;
    let mut slack = f64::INFINITY;
    for s in 0..1000u64 {
        let mut rng = SplitMix64::new(derive_seed(2002, s));
        let env = random_environment(&mut rng, 8, s as usize);
        let out = run_stream(
            &env,
            derive_seed(2003, s),
            200,
            &prior,
            &rule,
            ExcessLossMode::Centered,
            &spec,
            EtaPolicy::Enforce,
        )
        .unwrap();
        let lhs = out.ledger.expected_cumulative_loss();
        let rhs = bound_fixed_ms(&out.ledger, eta, &prior).unwrap();
        if lhs > rhs {
            violations += 1;
        }
        slack = slack.min(rhs - lhs);
    }
    let elapsed = start.elapsed();
    assert_eq!(violations, 0, "bound violated on {violations} streams");
    enforce_limit(elapsed, Duration::from_secs(30), "criterion 2");
    format!(
        "0/1000 violations, min slack {:.3}, {} ms",
        slack,
        elapsed.as_millis()
    )
}

/// Both adaptive-rate bounds (declared and estimated ranges) dominate
/// the aggregated cumulative loss in linearized mode across 200 seeded
/// streams for each of M in {2, 10, 50}; zero violations. Limit 60 s.
fn criterion_3() -> String {
    let start = Instant::now();
    let spec = unit_square();
    let n = 500usize;
    let mut checked = 0usize;
    let mut slack = f64::INFINITY;
    for &m in &[2usize, 10, 50] {
        let prior = ProbabilityVector::uniform(m).unwrap();
        for s in 0..200u64 {
            let mut rng = SplitMix64::new(derive_seed(3000 + m as u64, s));
            let env = random_environment(&mut rng, m, s as usize);
            let seed = derive_seed(3100 + m as u64, s);

            let known = RateSchedule::KnownRange {
                ranges: vec![2.0; m],
            };
            let out = run_stream(
                &env,
                seed,
                n,
                &prior,
                &StepRule::Adaptive { schedule: known },
                ExcessLossMode::Linearized,
                &spec,
                EtaPolicy::Record,
            )
            .unwrap();
            let lhs = out.ledger.cumulative_agg_loss();
            let ranges = RangeInfo::declared(vec![2.0; m], 30).unwrap();
            let rhs = bound_adaptive(&out.ledger, &prior, &ranges, n - 1, true).unwrap();
            assert!(lhs <= rhs, "declared-range bound violated: m={m} s={s}");
            slack = slack.min(rhs - lhs);

            let unknown = RateSchedule::UnknownRange { c: 30 };
            let out = run_stream(
                &env,
                seed,
                n,
                &prior,
                &StepRule::Adaptive { schedule: unknown },
                ExcessLossMode::Linearized,
                &spec,
                EtaPolicy::Record,
            )
            .unwrap();
            let lhs = out.ledger.cumulative_agg_loss();
            let estimates = out.state.range_estimates().unwrap().to_vec();
            let ranges = RangeInfo::from_observed(&estimates, 30).unwrap();
            let rhs = bound_adaptive(&out.ledger, &prior, &ranges, n - 1, false).unwrap();
            assert!(lhs <= rhs, "estimated-range bound violated: m={m} s={s}");
            slack = slack.min(rhs - lhs);
            checked += 2;
        }
    }
    let elapsed = start.elapsed();
    enforce_limit(elapsed, Duration::from_secs(60), "criterion 3");
    format!(
        "0/{checked} violations, min slack {:.3}, {} ms",
        slack,
        elapsed.as_millis()
    )
}

/// Monte Carlo supermartingale check: the estimated expectation of
/// exp(M_n - [M]_n) stays at or below 1 + 3 SE for all four increment
/// laws and n in {1, 10, 100} at 1e5 replications, and the two-point
/// n=1 case matches its exact mean within 3 SE. Limit 30 s.
fn criterion_4() -> String {
    let start = Instant::now();
    let boa_cfg = BoaExcessLossConfig {
        environment: EnvironmentSpec {
            outcomes: OutcomeProcess::IidGaussianShift {
                mean: 0.5,
                stddev: 0.1,
            },
            experts: vec![
                ExpertRule::Constant { value: 0.3 },
                ExpertRule::Constant { value: 0.5 },
                ExpertRule::Constant { value: 0.8 },
            ],
        },
        loss: unit_square(),
        eta: 0.2,
        tracked_expert: 1,
    };
    let kinds = [
        MartingaleKind::ScaledRademacher { a: 0.5 },
        MartingaleKind::CenteredBernoulli {
            p: 0.9,
            scale: 5.0 / 9.0,
        },
        MartingaleKind::BoundedUniform { a: 0.5 },
        MartingaleKind::BoaExcessLoss(boa_cfg),
    ];
    let reps = 100_000usize;
    let mut max_excess = f64::NEG_INFINITY;
    for (k, kind) in kinds.iter().enumerate() {
        for (i, &n) in [1usize, 10, 100].iter().enumerate() {
            let seed = derive_seed(4000 + k as u64, i as u64);
            let (mean, se) = estimate_expectation(kind, n, reps, seed).unwrap();
            assert!(
                mean <= 1.0 + 3.0 * se,
                "kind {k}, n {n}: mean {mean:.6} above 1 + 3 SE ({:.6})",
                1.0 + 3.0 * se
            );
            max_excess = max_excess.max((mean - 1.0) / se);
        }
    }
    let exact = (0.25f64.exp() + (-0.75f64).exp()) / 2.0;
    let (mean, se) =
        estimate_expectation(&MartingaleKind::ScaledRademacher { a: 0.5 }, 1, reps, 4242).unwrap();
    assert!(
        (mean - exact).abs() <= 3.0 * se,
        "two-point mean {mean:.6} not within 3 SE of {exact:.6}"
    );
    let elapsed = start.elapsed();
    enforce_limit(elapsed, Duration::from_secs(30), "criterion 4");
    format!(
        "12 estimates <= 1 + 3 SE (max z {:.2}), exact case off by {:.1} SE, {} ms",
        max_excess,
        ((mean - exact) / se).abs(),
        elapsed.as_millis()
    )
}

/// Fast-rate scaling: the 95% quantile of batch excess risk under the
/// shipped mixture-mode configuration decays with log-log slope in
/// [-1.2, -0.8] over n = 256..8192.
fn criterion_5() -> String {
    let start = Instant::now();
    let resolved = resolve_shipped("fastrate_ms.json");
    let rows = run_sweep(&resolved).unwrap();
    let groups = group_by_horizon(&rows, |r| r.batch_excess_risk);
    let fit = fit_rate_from_groups(&groups, "batch_excess_risk", 0.95).unwrap();
    assert!(
        (-1.2..=-0.8).contains(&fit.slope),
        "batch excess risk slope {:.3} outside [-1.2, -0.8]",
        fit.slope
    );
    format!(
        "slope {:.3} (residual {:.3}), {:.1} s",
        fit.slope,
        fit.residual,
        start.elapsed().as_secs_f64()
    )
}

/// Slow-rate scaling: the 95% quantile of per-round regret against the
/// best convex combination, under the shipped adaptive linearized
/// configuration, decays with slope in [-0.65, -0.35].
fn criterion_6() -> String {
    let start = Instant::now();
    let resolved = resolve_shipped("slowrate_c.json");
    let rows = run_sweep(&resolved).unwrap();
    let groups = group_by_horizon(&rows, |r| r.regret_convex / r.n as f64);
    let fit = fit_rate_from_groups(&groups, "regret_convex_per_round", 0.95).unwrap();
    assert!(
        (-0.65..=-0.35).contains(&fit.slope),
        "per-round convex regret slope {:.3} outside [-0.65, -0.35]",
        fit.slope
    );
    format!(
        "slope {:.3} (residual {:.3}), {:.1} s",
        fit.slope,
        fit.residual,
        start.elapsed().as_secs_f64()
    )
}

/// Deviation frequency: at confidence x = log 20 the stochastic risk
/// bound fails on at most a 0.05 + 3 sqrt(0.05 * 0.95 / 1000) fraction
/// of 1000 replications. Limit 2 min.
fn criterion_7() -> String {
    let start = Instant::now();
    let resolved = resolve_shipped("deviation.json");
    let rows = run_sweep(&resolved).unwrap();
    assert_eq!(rows.len(), 1000);
    let mut violated = 0usize;
    for row in &rows {
        assert!(
            row.bound_violated == 0.0 || row.bound_violated == 1.0,
            "replication without an evaluated bound"
        );
        violated += row.bound_violated as usize;
    }
    let fraction = violated as f64 / rows.len() as f64;
    let limit = 0.05 + 3.0 * (0.05f64 * 0.95 / 1000.0).sqrt();
    let elapsed = start.elapsed();
    assert!(
        fraction <= limit,
        "violation fraction {fraction:.4} above {limit:.4}"
    );
    enforce_limit(elapsed, Duration::from_secs(120), "criterion 7");
    format!(
        "{violated}/1000 violations (limit {:.3}), {} ms",
        limit,
        elapsed.as_millis()
    )
}

/// Invariant spot checks: PRNG golden values, the pointwise inequality
/// behind the supermartingale statistic, per-round centering, simplex
/// validity, monotone adaptive rates, and subgradients against finite
/// differences. The full suites live in the library's module and
/// integration tests; CSV golden files are checked by the binary tests.
fn criterion_8() -> String {
    assert_eq!(derive_seed(7, 0), 7191089600892374487);
    assert_eq!(derive_seed(7, 1), 309689372594955804);
    assert_eq!(derive_seed(11, 0), 5833679380957638813);
    assert!((inverse_normal_cdf(0.975) - 1.959963984540054).abs() < 1e-7);

    let mut x = -0.5f64;
    while x <= 10.0 {
        assert!(
            (x - x * x).exp() <= 1.0 + x + 1e-15,
            "pointwise inequality fails at x = {x}"
        );
        x += 1e-3;
    }

    let spec = unit_square();
    let env = EnvironmentSpec {
        outcomes: OutcomeProcess::IidGaussianShift {
            mean: 0.5,
            stddev: 0.1,
        },
        experts: vec![
            ExpertRule::Constant { value: 0.2 },
            ExpertRule::Constant { value: 0.45 },
            ExpertRule::Alternating {
                even: 0.3,
                odd: 0.7,
            },
        ],
    };
    let prior = ProbabilityVector::uniform(3).unwrap();

    let centered = run_stream(
        &env,
        derive_seed(8008, 0),
        300,
        &prior,
        &StepRule::Fixed { eta: 0.3 },
        ExcessLossMode::Centered,
        &spec,
        EtaPolicy::Enforce,
    )
    .unwrap();
    for t in 0..centered.ledger.rounds() {
        let w = centered.ledger.weights_prev_row(t);
        let ell = centered.ledger.excess_row(t);
        let dot: f64 = w.iter().zip(ell).map(|(a, b)| a * b).sum();
        assert!(dot.abs() <= 1e-12, "centering off by {dot:.2e} at round {t}");
        let post = centered.ledger.weights_post_row(t);
        let total: f64 = post.iter().sum();
        assert!((total - 1.0).abs() <= 1e-9 && post.iter().all(|&v| v >= 0.0));
    }

    let adaptive = run_stream(
        &env,
        derive_seed(8008, 1),
        300,
        &prior,
        &StepRule::Adaptive {
            schedule: RateSchedule::UnknownRange { c: 30 },
        },
        ExcessLossMode::Linearized,
        &spec,
        EtaPolicy::Record,
    )
    .unwrap();
    for j in 0..3 {
        for t in 1..adaptive.ledger.rounds() {
            let prev = adaptive.ledger.rates_row(t - 1)[j];
            let cur = adaptive.ledger.rates_row(t)[j];
            assert!(cur <= prev + 1e-15, "rate grew for expert {j} at round {t}");
        }
    }

    let h = 1e-6;
    for kind in [LossKind::Square, LossKind::Absolute] {
        let probe = LossSpec::new(kind, spec.prediction_domain, spec.outcome_domain);
        for &(y, p) in &[(0.3f64, 0.7f64), (0.9, 0.2), (0.5, 0.501)] {
            let fd = (probe.eval(y, p + h).unwrap() - probe.eval(y, p - h).unwrap()) / (2.0 * h);
            let grad = probe.subgradient(y, p).unwrap();
            assert!(
                (fd - grad).abs() <= 1e-6 * grad.abs().max(1.0),
                "{kind:?} subgradient off at (y={y}, p={p})"
            );
        }
    }

    "spot checks pass; full suites run in the module and binary tests".to_owned()
}

#[test]
fn acceptance_criteria() {
    let criteria: Vec<(&str, fn() -> String)> = vec![
        ("1 recursion vs closed form", criterion_1),
        ("2 fixed-rate bound", criterion_2),
        ("3 adaptive bounds", criterion_3),
        ("4 supermartingale Monte Carlo", criterion_4),
        ("5 fast-rate slope", criterion_5),
        ("6 slow-rate slope", criterion_6),
        ("7 deviation frequency", criterion_7),
        ("8 invariant suites", criterion_8),
    ];

    let hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let mut failures = Vec::new();
    for (name, run) in criteria {
        match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(payload) => {
                let message = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic without message".to_owned());
                println!("criterion {name}: FAIL ({message})");
                failures.push(name);
            }
        }
    }
    panic::set_hook(hook);
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
