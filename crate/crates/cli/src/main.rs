//! `feller`: run simulation and verification checks from a config file.
//!
//! Exit codes: 0 when the run completes (including checks that end in a
//! refuted or failed status), 2 for configuration and usage errors, 3
//! when a resource cap aborts the run.

mod config;
mod report;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_config, OutputFormat};

#[derive(Parser)]
#[command(name = "feller", version, about = "Markov-Feller operator toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the report here instead of the config's output path or stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format; overrides the config.
    #[arg(long, value_enum)]
    format: Option<OutputFormat>,
    /// Size of the worker thread pool (default: all cores). Results are
    /// identical for any value.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every check in the config.
    Run(CommonArgs),
    /// Run only the simulate checks.
    Simulate(CommonArgs),
    /// Run only invariant estimation and residual checks.
    EstimateInvariant(CommonArgs),
    /// Run only the model condition checks.
    CheckConditions(CommonArgs),
    /// Run only the stability criterion checks.
    CheckCriteria(CommonArgs),
    /// Run only the coupling decomposition checks.
    CoupleVerify(CommonArgs),
    /// Run only the exact chain oracle checks.
    OracleChain(CommonArgs),
}

impl Cmd {
    fn family(&self) -> Option<&'static str> {
        match self {
            Cmd::Run(_) => None,
            Cmd::Simulate(_) => Some("simulate"),
            Cmd::EstimateInvariant(_) => Some("estimate-invariant"),
            Cmd::CheckConditions(_) => Some("check-conditions"),
            Cmd::CheckCriteria(_) => Some("check-criteria"),
            Cmd::CoupleVerify(_) => Some("couple-verify"),
            Cmd::OracleChain(_) => Some("oracle-chain"),
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Cmd::Run(a)
            | Cmd::Simulate(a)
            | Cmd::EstimateInvariant(a)
            | Cmd::CheckConditions(a)
            | Cmd::CheckCriteria(a)
            | Cmd::CoupleVerify(a)
            | Cmd::OracleChain(a) => a,
        }
    }
}

fn run(cli: &Cli) -> Result<(), (i32, String)> {
    let args = cli.cmd.args();

    if let Some(n) = args.threads {
        if n == 0 {
            return Err((2, "--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| (2, format!("thread pool: {e}")))?;
    }

    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| (2, format!("cannot read {}: {e}", args.config.display())))?;
    let mut cfg = load_config(&text).map_err(|e| (2, e))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }

    let (entries, wall_ms) =
        runner::run_checks(&cfg, cli.cmd.family()).map_err(|e| (e.exit_code(), e.message().into()))?;

    let canonical = report::canonical_config_text(&cfg);
    let report = report::build_report(cfg.seed, &canonical, entries, &wall_ms);

    let format = args
        .format
        .or_else(|| cfg.output.as_ref().map(|o| o.format))
        .unwrap_or_default();
    let rendered = match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
            s.push('\n');
            s
        }
        OutputFormat::Csv => report::to_csv(&report),
    };

    let out_path = args
        .out
        .clone()
        .or_else(|| cfg.output.as_ref().map(|o| PathBuf::from(&o.path)));
    match out_path {
        Some(path) => {
            std::fs::write(&path, rendered)
                .map_err(|e| (2, format!("cannot write {}: {e}", path.display())))?;
            println!(
                "report written to {} (determinism_hash {})",
                path.display(),
                report["determinism_hash"].as_str().unwrap_or("")
            );
        }
        None => print!("{rendered}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}
