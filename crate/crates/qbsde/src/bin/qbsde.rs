//! Command-line front end: thin argument parsing over the library's run
//! orchestration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qbsde::cli::{exit_code, run, CliCommand, Overrides};

#[derive(Parser)]
#[command(
    name = "qbsde",
    version,
    about = "Constrained exponential-utility indifference pricing via quadratic BSDEs"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the model config and sample the integrability diagnostics.
    Validate(CommonArgs),
    /// Solve both BSDE legs and report the indifference price.
    Price(CommonArgs),
    /// Price plus the optimal strategies, hedge, and utility check.
    Hedge(CommonArgs),
    /// Weak-duality audit of dual density candidates.
    DualAudit(CommonArgs),
    /// Prices across an alpha grid with asymptotic reference points.
    Sweep(CommonArgs),
    /// Small- and large-alpha limits (measure change and HJB ladder).
    Asymptotics(CommonArgs),
    /// Closed-form reference values for the degenerate cases.
    Oracle(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json and CSV tables.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed; overrides solver.seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Path count override.
    #[arg(long)]
    paths: Option<usize>,
    /// Time-step count override.
    #[arg(long)]
    steps: Option<usize>,
    /// Risk aversion override.
    #[arg(long, conflicts_with = "alpha_grid")]
    alpha: Option<f64>,
    /// Comma-separated risk-aversion grid override.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Worker thread count (default: QBSDE_THREADS or all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            // Usage problems (unknown command, bad flags) get their own
            // exit code, distinct from validation and numerics.
            let _ = e.print();
            return ExitCode::from(64);
        }
    };

    let (command, common) = match &args.command {
        Command::Validate(c) => (CliCommand::Validate, c),
        Command::Price(c) => (CliCommand::Price, c),
        Command::Hedge(c) => (CliCommand::Hedge, c),
        Command::DualAudit(c) => (CliCommand::DualAudit, c),
        Command::Sweep(c) => (CliCommand::Sweep, c),
        Command::Asymptotics(c) => (CliCommand::Asymptotics, c),
        Command::Oracle(c) => (CliCommand::Oracle, c),
    };

    let threads = common
        .threads
        .or_else(|| std::env::var("QBSDE_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    let overrides = Overrides {
        seed: common.seed,
        paths: common.paths,
        steps: common.steps,
        alpha: common.alpha,
        alpha_grid: common.alpha_grid.clone(),
    };

    match run(command, &common.config, &common.out, &overrides) {
        Ok(outcome) => {
            println!("{}: report written to {}", command.name(), outcome.report_path.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}: error: {err}", command.name());
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
