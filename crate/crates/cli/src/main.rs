use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use boa_cli::config::{parse_config, ConfigError, Horizons};
use boa_cli::csvout::{format_real, write_summary, write_trace};
use boa_cli::fitrate::{fit_rate, FitError};
use boa_cli::runner::{
    run_bernstein, run_oracle, run_single, run_sweep, BernsteinRow, RunnerError,
};
use boa_core::bernstein::MartingaleKind;

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 1;
const EXIT_STRICT: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "boa",
    version,
    about = "Bernstein online aggregation experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path; overrides the config's `output`. Defaults to
    /// stdout (sweep, bernstein, oracle) or `<name>-trace.csv` (run).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Exit with code 2 if the run recorded step-size violations (or,
    /// for oracle, failed to converge).
    #[arg(long)]
    strict: bool,
    /// Worker threads; 0 or absent means automatic. Falls back to the
    /// BOA_THREADS environment variable.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct FitRateArgs {
    /// Sweep summary CSV to read.
    #[arg(long)]
    input: PathBuf,
    /// Summary column to fit.
    #[arg(long)]
    column: String,
    /// Quantile level in (0, 1).
    #[arg(long, default_value_t = 0.95)]
    quantile: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Run one traced cell: per-round trace CSV plus a summary row.
    Run(CommonArgs),
    /// Run every (n, replication) cell and emit the summary CSV.
    Sweep(CommonArgs),
    /// Fit a log-log rate to a quantile of a sweep summary column.
    FitRate(FitRateArgs),
    /// Monte-Carlo estimate of the martingale statistic's expectation.
    Bernstein(CommonArgs),
    /// Report the best fixed convex combination in hindsight for one cell.
    Oracle(CommonArgs),
}

/// Config for the `bernstein` subcommand.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BernsteinConfig {
    name: String,
    martingale: MartingaleKind,
    n: Horizons,
    reps: usize,
    seed: u64,
    #[serde(default)]
    output: Option<PathBuf>,
}

enum CliFailure {
    Config(String),
    Io(String),
}

impl CliFailure {
    fn code(&self) -> u8 {
        match self {
            CliFailure::Config(_) => EXIT_CONFIG,
            CliFailure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliFailure::Config(m) | CliFailure::Io(m) => m,
        }
    }
}

impl From<ConfigError> for CliFailure {
    fn from(e: ConfigError) -> Self {
        CliFailure::Config(e.to_string())
    }
}

impl From<RunnerError> for CliFailure {
    fn from(e: RunnerError) -> Self {
        CliFailure::Config(e.to_string())
    }
}

impl From<FitError> for CliFailure {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Csv(inner) => CliFailure::Io(inner.to_string()),
            other => CliFailure::Config(other.to_string()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliFailure> {
    fs::read_to_string(path)
        .map_err(|e| CliFailure::Config(format!("cannot read config {}: {e}", path.display())))
}

fn write_csv(
    out: Option<&Path>,
    emit: impl FnOnce(&mut dyn Write) -> csv::Result<()>,
) -> Result<(), CliFailure> {
    let io_err = |e: csv::Error| CliFailure::Io(e.to_string());
    match out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| {
                CliFailure::Io(format!("cannot write {}: {e}", path.display()))
            })?;
            let mut buf = std::io::BufWriter::new(file);
            emit(&mut buf).map_err(io_err)?;
            buf.flush()
                .map_err(|e| CliFailure::Io(format!("cannot write {}: {e}", path.display())))
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            emit(&mut lock).map_err(io_err)
        }
    }
}

fn resolve_threads(args_threads: Option<usize>) -> usize {
    if let Some(t) = args_threads {
        return t;
    }
    std::env::var("BOA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn with_thread_pool<T: Send>(
    threads: usize,
    body: impl FnOnce() -> T + Send,
) -> Result<T, CliFailure> {
    if threads == 0 {
        return Ok(body());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliFailure::Config(format!("cannot build a {threads}-thread pool: {e}")))?;
    Ok(pool.install(body))
}

fn write_bernstein_rows(out: &mut dyn Write, rows: &[BernsteinRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "reps", "mean", "standard_error"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.reps.to_string(),
            format_real(r.mean),
            format_real(r.standard_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_run(args: &CommonArgs) -> Result<u8, CliFailure> {
    let mut cfg = parse_config(&read_text(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let exp = cfg.resolve()?;
    let threads = resolve_threads(args.threads);
    let cell = with_thread_pool(threads, || run_single(&exp))??;
    let trace_path = args
        .out
        .clone()
        .or_else(|| exp.output.clone())
        .unwrap_or_else(|| PathBuf::from(format!("{}-trace.csv", exp.name)));
    write_csv(Some(&trace_path), |w| write_trace(w, &cell.outcome.ledger))?;
    write_csv(None, |w| write_summary(w, std::slice::from_ref(&cell.row)))?;
    if args.strict && cell.row.eta_flag_count > 0 {
        return Ok(EXIT_STRICT);
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(args: &CommonArgs) -> Result<u8, CliFailure> {
    let mut cfg = parse_config(&read_text(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let exp = cfg.resolve()?;
    let threads = resolve_threads(args.threads);
    let rows = with_thread_pool(threads, || run_sweep(&exp))??;
    let out = args.out.clone().or_else(|| exp.output.clone());
    write_csv(out.as_deref(), |w| write_summary(w, &rows))?;
    if args.strict && rows.iter().any(|r| r.eta_flag_count > 0) {
        return Ok(EXIT_STRICT);
    }
    Ok(EXIT_OK)
}

fn cmd_fit_rate(args: &FitRateArgs) -> Result<u8, CliFailure> {
    let fit = fit_rate(&args.input, &args.column, args.quantile)?;
    println!(
        "column,quantile,slope,intercept,residual\n{},{},{},{},{}",
        args.column,
        format_real(args.quantile),
        format_real(fit.slope),
        format_real(fit.intercept),
        format_real(fit.residual)
    );
    Ok(EXIT_OK)
}

fn cmd_bernstein(args: &CommonArgs) -> Result<u8, CliFailure> {
    let mut cfg: BernsteinConfig = serde_json::from_str(&read_text(&args.config)?)
        .map_err(|e| CliFailure::Config(format!("config parse error: {e}")))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let horizons = cfg.n.as_vec();
    if horizons.is_empty() || cfg.reps == 0 {
        return Err(CliFailure::Config(
            "bernstein config needs at least one horizon and one replication".into(),
        ));
    }
    let threads = resolve_threads(args.threads);
    let rows =
        with_thread_pool(threads, || run_bernstein(&cfg.martingale, &horizons, cfg.reps, cfg.seed))??;
    let out = args.out.clone().or(cfg.output);
    write_csv(out.as_deref(), |w| write_bernstein_rows(w, &rows))?;
    let _ = cfg.name;
    Ok(EXIT_OK)
}

fn cmd_oracle(args: &CommonArgs) -> Result<u8, CliFailure> {
    let mut cfg = parse_config(&read_text(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let exp = cfg.resolve()?;
    let threads = resolve_threads(args.threads);
    let (oracle, row) = with_thread_pool(threads, || run_oracle(&exp))??;
    let out = args.out.clone().or_else(|| exp.output.clone());
    write_csv(out.as_deref(), |w| {
        let mut writer = csv::Writer::from_writer(w);
        let mut header = vec![
            "seed".to_owned(),
            "n".to_owned(),
            "value".to_owned(),
            "converged".to_owned(),
            "restart_spread".to_owned(),
        ];
        for j in 1..=oracle.weights.len() {
            header.push(format!("weight_{j}"));
        }
        writer.write_record(&header)?;
        let mut rec = vec![
            row.seed.to_string(),
            row.n.to_string(),
            format_real(oracle.value),
            if oracle.converged { "1" } else { "0" }.to_owned(),
            format_real(oracle.restart_spread),
        ];
        for w in oracle.weights.values() {
            rec.push(format_real(*w));
        }
        writer.write_record(&rec)?;
        writer.flush()?;
        Ok(())
    })?;
    if args.strict && !oracle.converged {
        return Ok(EXIT_STRICT);
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::FitRate(args) => cmd_fit_rate(args),
        Command::Bernstein(args) => cmd_bernstein(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}
