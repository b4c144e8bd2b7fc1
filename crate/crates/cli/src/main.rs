//! `lsa-infer`: experiment orchestration for the LSA inference laboratory.
//!
//! Exit codes: 0 success, 1 config error, 2 numeric divergence, 3 failed
//! acceptance assertion under `--assert`.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CommandError, RunContext};

#[derive(Parser)]
#[command(
    name = "lsa-infer",
    version,
    about = "Linear stochastic approximation with averaging, bootstrap inference, and rate experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Fail (exit 3) when the run misses its configured acceptance band.
    #[arg(long, default_value_t = false)]
    assert: bool,
    /// Worker-thread count; 0 uses all cores. Overrides the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory. Overrides the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Bootstrap replicate count. Overrides the config.
    #[arg(long = "M")]
    m_replicates: Option<usize>,
    /// Confidence level. Overrides the config.
    #[arg(long)]
    level: Option<f64>,
    /// Multiplier-weight law: two_point | exp | poisson. Overrides the config.
    #[arg(long)]
    weights: Option<String>,
    /// Outer replication count (the config's "R"). Overrides the config.
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one recorded trajectory and store it (CSV + binary record).
    Simulate(CommonArgs),
    /// Run the online multiplier bootstrap and extract confidence sets.
    Bootstrap(CommonArgs),
    /// Measure empirical coverage of the bootstrap confidence sets.
    Coverage(CommonArgs),
    /// Deterministic covariance-gap series and its log-log rate.
    #[command(name = "covariance-gap")]
    CovarianceGap(CommonArgs),
    /// Half-space distance of the scaled average to its Gaussian reference.
    #[command(name = "clt-rates")]
    CltRates(CommonArgs),
    /// Bootstrap-world vs real-world law distance over a horizon grid.
    #[command(name = "boot-validity")]
    BootValidity(CommonArgs),
    /// Evaluate the step-size and bootstrap admissibility conditions.
    #[command(name = "check-assumptions")]
    CheckAssumptions(CommonArgs),
    /// Policy-evaluation demo on a finite MDP.
    #[command(name = "td-demo")]
    TdDemo(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Bootstrap(_) => "bootstrap",
            Command::Coverage(_) => "coverage",
            Command::CovarianceGap(_) => "covariance-gap",
            Command::CltRates(_) => "clt-rates",
            Command::BootValidity(_) => "boot-validity",
            Command::CheckAssumptions(_) => "check-assumptions",
            Command::TdDemo(_) => "td-demo",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Simulate(a)
            | Command::Bootstrap(a)
            | Command::Coverage(a)
            | Command::CovarianceGap(a)
            | Command::CltRates(a)
            | Command::BootValidity(a)
            | Command::CheckAssumptions(a)
            | Command::TdDemo(a) => a,
        }
    }
}

fn build_context(name: &str, args: &CommonArgs) -> Result<RunContext, CommandError> {
    let started_unix = manifest::unix_now();
    let config_bytes = std::fs::read(&args.config).map_err(|e| {
        CommandError::Config(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let text = String::from_utf8(config_bytes.clone())
        .map_err(|_| CommandError::Config("config is not valid UTF-8".into()))?;
    let base_dir = args
        .config
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut config = config::parse_config(&text, &base_dir)
        .map_err(|e| CommandError::Config(e.to_string()))?;

    if let Some(dir) = &args.out_dir {
        config.out_dir = dir.clone();
    }
    if let Some(m) = args.m_replicates {
        config.m_replicates = m;
    }
    if let Some(level) = args.level {
        if !(0.0 < level && level < 1.0) {
            return Err(CommandError::Config(format!(
                "--level must lie in (0, 1), got {level}"
            )));
        }
        config.level = level;
    }
    if let Some(w) = &args.weights {
        config.weights = match w.as_str() {
            "two_point" => lsa_core::bootstrap::WeightScheme::TwoPoint,
            "exp" | "exponential" => lsa_core::bootstrap::WeightScheme::Exponential,
            "poisson" | "poisson_shifted" => lsa_core::bootstrap::WeightScheme::PoissonShifted,
            other => {
                return Err(CommandError::Config(format!(
                    "--weights must be two_point | exp | poisson, got {other}"
                )))
            }
        };
    }
    if let Some(r) = args.replications {
        config.replications = Some(r);
    }
    let workers = args.workers.unwrap_or(config.workers);
    if workers > 0 {
        // Ignore the error when a pool was already installed (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }

    let (seed, seed_from_env) = match std::env::var("LSA_INFER_SEED") {
        Ok(text) => {
            let parsed = text.parse::<u64>().map_err(|_| {
                CommandError::Config(format!(
                    "LSA_INFER_SEED must be an unsigned integer, got \"{text}\""
                ))
            })?;
            (parsed, true)
        }
        Err(_) => (config.seed, false),
    };

    eprintln!(
        "lsa-infer {name}: config {}, seed {seed}{}",
        args.config.display(),
        if seed_from_env { " (from LSA_INFER_SEED)" } else { "" }
    );

    Ok(RunContext {
        config,
        config_bytes,
        seed,
        seed_from_env,
        assert_mode: args.assert,
        workers,
        started_unix,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let outcome = build_context(name, cli.command.args())
        .and_then(|ctx| commands::run(name, &ctx));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CommandError::Config(_) => ExitCode::from(1),
                CommandError::Divergence(_) => ExitCode::from(2),
                CommandError::AssertFailed(_) => ExitCode::from(3),
                CommandError::Other(_) => ExitCode::from(1),
            }
        }
    }
}
