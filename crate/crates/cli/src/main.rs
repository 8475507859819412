use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use collapse_core::config::{parse_config, ExperimentKind};
use collapse_core::output::{write_results, OutputPaths};
use collapse_core::run::run_experiment;
use collapse_core::Error;

/// Quantum trajectory and collapse-model experiments.
#[derive(Parser)]
#[command(name = "collapse-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the master equation.
    RunMe(RunArgs),
    /// Run a trajectory ensemble and compare it with its master equation.
    RunEnsemble(RunArgs),
    /// Free-will test of a feedback model on two decompositions of one state.
    RunFwt(RunArgs),
    /// GRW-style jump ensemble with flash logs.
    RunGrw(RunArgs),
    /// CSL lattice ensemble with decoherence-rate analysis.
    RunCsl(RunArgs),
    /// Weak-order convergence study.
    RunConvergence(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides output.directory; default ./results).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Ensemble seed (overrides ensemble.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Affects speed only.
    #[arg(long)]
    workers: Option<usize>,
}

impl Command {
    fn split(self) -> (ExperimentKind, RunArgs) {
        match self {
            Command::RunMe(a) => (ExperimentKind::Me, a),
            Command::RunEnsemble(a) => (ExperimentKind::Ensemble, a),
            Command::RunFwt(a) => (ExperimentKind::Fwt, a),
            Command::RunGrw(a) => (ExperimentKind::Grw, a),
            Command::RunCsl(a) => (ExperimentKind::Csl, a),
            Command::RunConvergence(a) => (ExperimentKind::Convergence, a),
        }
    }
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn execute(kind: ExperimentKind, args: RunArgs) -> Result<PathBuf, Error> {
    let text = std::fs::read_to_string(&args.config).map_err(|source| Error::Io {
        path: args.config.clone(),
        source,
    })?;
    let mut config = parse_config(&text)?;
    if config.experiment != kind {
        return Err(Error::Config(vec![collapse_core::error::ConfigIssue {
            path: "experiment".into(),
            message: format!(
                "config is for \"{}\" but the subcommand runs \"{}\"",
                config.experiment.as_str(),
                kind.as_str()
            ),
        }]));
    }
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    if args.workers == Some(0) {
        return Err(Error::Domain("--workers must be at least 1".into()));
    }
    let out_dir = args
        .out
        .or_else(|| config.output.as_ref().and_then(|o| o.directory.clone()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    let output = run_experiment(&config, args.workers)?;
    write_results(&output, &OutputPaths::in_dir(&out_dir))?;
    if let Some(v) = output.summary["results"]["verdict"].as_str() {
        println!("verdict: {v}");
    }
    Ok(out_dir)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (kind, args) = cli.command.split();
    match execute(kind, args) {
        Ok(dir) => {
            println!("results written to {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
