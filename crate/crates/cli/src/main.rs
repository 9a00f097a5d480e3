mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lqhmm::em::with_jobs;
use lqhmm::Error;

use commands::Status;
use config::RunConfig;

/// Linear quantile hidden Markov models for longitudinal data with drop-out.
#[derive(Debug, Parser)]
#[command(name = "lqhmm", version, about)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for starts, bootstrap and simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Quantile level; repeat for several.
    #[arg(long = "tau", global = true)]
    taus: Vec<f64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model per quantile level.
    Fit { data: Option<PathBuf> },
    /// Fit an (m, G) grid and pick the lowest BIC.
    Select { data: Option<PathBuf> },
    /// Block bootstrap percentile intervals around a fitted parameter file.
    Bootstrap {
        data: Option<PathBuf>,
        params: Option<PathBuf>,
    },
    /// Generate a synthetic panel with its ground truth.
    Simulate,
    /// Monte Carlo study: bias, RMSE and ARI over replicates.
    Study,
    /// Compare fitted labels or parameters with ground truth.
    Evaluate {
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        classification: Option<PathBuf>,
        #[arg(long)]
        states: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        truth_params: Option<PathBuf>,
    },
}

fn build_config(cli: &Cli) -> lqhmm::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if !cli.taus.is_empty() {
        cfg.taus = cli.taus.clone();
    }
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            *slot = v.clone();
        }
    };
    match &cli.command {
        Command::Fit { data } | Command::Select { data } => set(&mut cfg.data, data),
        Command::Bootstrap { data, params } => {
            set(&mut cfg.data, data);
            set(&mut cfg.params, params);
        }
        Command::Evaluate {
            truth,
            classification,
            states,
            params,
            truth_params,
        } => {
            set(&mut cfg.truth, truth);
            set(&mut cfg.classification, classification);
            set(&mut cfg.states, states);
            set(&mut cfg.params, params);
            set(&mut cfg.truth_params, truth_params);
        }
        Command::Simulate | Command::Study => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> lqhmm::Result<Status> {
    let cfg = build_config(cli)?;
    with_jobs(cfg.jobs, || match cli.command {
        Command::Fit { .. } => commands::fit(&cfg),
        Command::Select { .. } => commands::select(&cfg),
        Command::Bootstrap { .. } => commands::bootstrap(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::Study => commands::study(&cfg),
        Command::Evaluate { .. } => commands::evaluate(&cfg),
    })?
}

fn exit_code(err: &Error) -> u8 {
    if err.is_input_error() {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Partial) => {
            eprintln!("warning: completed with some failed fits; see the outputs for details");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
