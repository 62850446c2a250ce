use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;

use phibe::environments::LqrSystem;
use phibe::experiments::{self, ExperimentConfig, ExperimentKind, SweepMode};
use phibe::oracles::oracle_report;
use phibe::Error;

#[derive(Parser)]
#[command(name = "phibe", version, about = "PhiBE and BE policy-iteration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Error-vs-iteration comparison for one case.
    RunCase(RunArgs),
    /// Gain error against the interval length.
    DtSweep(RunArgs),
    /// Final errors against the data budget.
    BatchSweep(RunArgs),
    /// Closed-form 1D error surfaces.
    Atlas(RunArgs),
    /// Print K, P and the discretized gains for a linear-quadratic system.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output`, else `out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Overrides the dt-sweep mode.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Oracle,
    Sampled,
}

#[derive(Args)]
struct OracleArgs {
    /// Drift matrix, rows separated by `;`, e.g. "1,0;0,1".
    #[arg(long, allow_hyphen_values = true)]
    a: String,
    #[arg(long, allow_hyphen_values = true)]
    b: String,
    /// State reward weight (negative definite).
    #[arg(long, allow_hyphen_values = true)]
    q: String,
    /// Action reward weight (negative definite).
    #[arg(long, allow_hyphen_values = true)]
    r: String,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long)]
    dt: f64,
}

fn parse_matrix(name: &str, text: &str) -> Result<DMatrix<f64>, Error> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Config(format!("--{name}: {e}")))?;
    let ncols = rows.first().map_or(0, Vec::len);
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!(
            "--{name}: rows must be non-empty and of equal length"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn oracle(args: &OracleArgs) -> Result<(), Error> {
    let sys = LqrSystem::new(
        parse_matrix("a", &args.a)?,
        parse_matrix("b", &args.b)?,
        parse_matrix("q", &args.q)?,
        parse_matrix("r", &args.r)?,
        args.sigma,
        args.beta,
    )?;
    let report = oracle_report(&sys, args.dt)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<(), Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(reps) = args.reps {
        config.repetitions = reps;
    }
    if let Some(mode) = args.mode {
        let sweep = config
            .dt_sweep
            .as_mut()
            .ok_or_else(|| Error::Config("--mode needs a dt_sweep section".into()))?;
        sweep.mode = match mode {
            Mode::Oracle => SweepMode::Oracle,
            Mode::Sampled => SweepMode::Sampled,
        };
    }
    let out = args
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let record = experiments::run(&config, kind)?;
    experiments::write_outputs(&record, &config, &out)?;
    for f in &record.failures {
        log::warn!(
            "{} repetition {} at {}={} failed: {}",
            f.algorithm,
            f.repetition,
            f.x_name,
            f.x,
            f.message
        );
    }
    for s in &record.slopes {
        println!(
            "slope {} {}: {:.4} ({} points)",
            s.algorithm, s.metric, s.slope, s.points
        );
    }
    println!(
        "{} {}: {} rows, {} failed runs, wrote {}",
        kind.name(),
        record.name,
        record.rows.len(),
        record.failures.len(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::RunCase(a) => run(ExperimentKind::RunCase, a),
        Command::DtSweep(a) => run(ExperimentKind::DtSweep, a),
        Command::BatchSweep(a) => run(ExperimentKind::BatchSweep, a),
        Command::Atlas(a) => run(ExperimentKind::Atlas, a),
        Command::Oracle(a) => oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
