use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ris_chanest::experiment::{run_experiment, write_outputs, ExperimentSpec, Method};
use ris_chanest::{selftest, Snr};
use serde_json::json;

/// Closed-loop joint DL/UL channel estimation for non-reciprocal RIS MIMO links.
#[derive(Parser)]
#[command(name = "ris-chanest", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an NMSE-versus-SNR Monte Carlo campaign described by a JSON config.
    Simulate {
        /// Experiment JSON document.
        #[arg(long)]
        config: PathBuf,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo runs per SNR point (overrides the config).
        #[arg(long)]
        runs: Option<usize>,
        /// Comma-separated SNR grid in dB; `inf` for a noiseless point.
        #[arg(long, value_delimiter = ',')]
        snr: Option<Vec<Snr>>,
        /// Comma-separated subset of proposed, fdd_ls, fdd_lskrf.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; 0 uses every core.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the built-in invariant checks and print a JSON summary.
    Selftest,
}

fn simulate(
    config: PathBuf,
    seed: Option<u64>,
    runs: Option<usize>,
    snr: Option<Vec<Snr>>,
    methods: Option<Vec<Method>>,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<()> {
    let mut spec = ExperimentSpec::load(&config).with_context(|| format!("reading {}", config.display()))?;
    if seed.is_some() {
        spec.master_seed = seed;
    }
    if runs.is_some() {
        spec.mc_runs = runs;
    }
    if snr.is_some() {
        spec.snr_db_grid = snr;
    }
    if let Some(m) = methods {
        spec.methods = m;
    }
    if let Some(dir) = out {
        spec.out_dir = dir;
    }
    if let Some(w) = workers {
        spec.workers = w;
    }
    spec.validate()?;

    let output = run_experiment(&spec)?;
    let written = write_outputs(&output)?;
    log::info!("finished in {:.1} s", output.wall_time_s);
    for path in &written {
        println!("{}", path.display());
    }
    for f in &output.failures {
        eprintln!("warning: {}: {} failed runs", f.variant, f.failed_runs);
    }
    Ok(())
}

fn error_summary(command: &str, err: &anyhow::Error) -> serde_json::Value {
    json!({
        "status": "error",
        "command": command,
        "error": err.to_string(),
        "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            config,
            seed,
            runs,
            snr,
            methods,
            out,
            workers,
        } => match simulate(config, seed, runs, snr, methods, out, workers) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{}", error_summary("simulate", &e));
                ExitCode::from(2)
            }
        },
        Command::Selftest => {
            let checks = selftest::run_all();
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            let summary = json!({
                "status": if failed.is_empty() { "ok" } else { "failed" },
                "failed": failed,
                "checks": checks,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
