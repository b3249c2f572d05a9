use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use mcflow::config::RunConfig;
use mcflow::io::{orchestrate, orchestrate_reduced, RunSummary};
use mcflow::check_hypotheses;

/// Environment variable holding the worker-thread count.
const WORKERS_ENV: &str = "MCF_WORKERS";

/// Mean curvature flow of graphs of length-decreasing maps between model
/// spaces.
#[derive(Parser)]
#[command(name = "mcflow", version, about)]
struct Cli {
    /// Print the default configuration and exit.
    #[arg(long)]
    emit_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full 2D flow and write time series, verdicts and plot data.
    Run { config: PathBuf },
    /// Evaluate the curvature hypotheses for the configured spaces.
    CheckHypotheses { config: PathBuf },
    /// Run the reduced 1D solver for a rotationally symmetric configuration.
    Oracle { config: PathBuf },
}

fn init_workers() -> Result<(), String> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("{WORKERS_ENV} must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        return Err(format!("{WORKERS_ENV} must be a positive integer, got 0"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn load(path: &Path) -> Result<RunConfig, mcflow::Error> {
    RunConfig::load(path)
}

fn report(summary: &RunSummary) -> ExitCode {
    println!("termination: {}", summary.termination.name());
    println!("steps: {}", summary.steps);
    if summary.exploratory {
        println!("note: exploratory run (initial map is not length decreasing)");
    }
    if !summary.hypotheses.holds {
        println!("note: curvature hypotheses do not hold");
    }
    for v in &summary.report.verdicts {
        match v.first_violation {
            Some(t) => println!("{:<22} {} (first violation at t = {t})", v.name, v.status.name()),
            None => println!("{:<22} {}", v.name, v.status.name()),
        }
    }
    println!("output: {}", summary.output_dir.display());
    ExitCode::from(summary.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_workers() {
        error!("{e}");
        return ExitCode::from(2);
    }
    if cli.emit_default_config {
        print!("{}", RunConfig::default().emit());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("no command given; see --help");
        return ExitCode::from(2);
    };
    let result = match command {
        Command::Run { config } => load(&config).and_then(|c| orchestrate(&c)).map(|s| report(&s)),
        Command::Oracle { config } => load(&config)
            .and_then(|c| orchestrate_reduced(&c))
            .map(|s| report(&s)),
        Command::CheckHypotheses { config } => load(&config).and_then(|c| {
            let h = check_hypotheses(&c.domain_manifold()?, &c.target_manifold()?, c.sigma, c.mu)?;
            println!("holds: {}", h.holds);
            println!("margin: {}", h.margin);
            println!("slacks: {:?}", h.slacks);
            Ok(if h.holds { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }),
    };
    result.unwrap_or_else(|e| {
        error!("{e}");
        ExitCode::from(2)
    })
}
