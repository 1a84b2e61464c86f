mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// LVRT-constrained stability region estimation for lossless classical
/// multi-machine power systems.
#[derive(Debug, Parser)]
#[command(name = "lvrtcsr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pre- and post-fault stable equilibria and reduced network.
    Sep(RunArgs),
    /// Piecewise-linear LVRT fits and the approximate feasibility polytope.
    Polytope(RunArgs),
    /// Energy-function and LMI Lyapunov candidates with certificate residuals.
    Lff(RunArgs),
    /// Constrained stability region estimate for the fault-cleared state.
    Estimate(RunArgs),
    /// Stable / not-certified verdict and estimated critical clearing time.
    Assess(RunArgs),
    /// Brute-force grid classification and soundness audit.
    Oracle(RunArgs),
    /// Data for phase-portrait figures (two machines only).
    Plotdata(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Lines per piecewise-linear cosine fit.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub nline: u32,
    /// Level-set step; defaults to a 200th of the reference level.
    #[arg(long)]
    pub dv: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 keeps the runtime default.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Oracle grid resolution, `NxN`.
    #[arg(long, default_value = "201x201", value_parser = parse_grid)]
    pub grid: (usize, usize),
    /// Oracle simulation horizon in seconds.
    #[arg(long, default_value_t = 20.0)]
    pub horizon: f64,
    /// Multiply the estimate level before auditing (negative control).
    #[arg(long, hide = true, default_value_t = 1.0)]
    pub inflate_v: f64,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected NxN, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a < 2 || b < 2 {
        return Err("grid needs at least 2 points per axis".into());
    }
    Ok((a, b))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LVRTCSR_LOG", "warn")).init();
    // usage errors share exit code 1 with pipeline errors; 2 means not certified
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Sep(a) => commands::sep(&a),
        Command::Polytope(a) => commands::polytope(&a),
        Command::Lff(a) => commands::lff(&a),
        Command::Estimate(a) => commands::estimate(&a),
        Command::Assess(a) => commands::assess(&a),
        Command::Oracle(a) => commands::oracle(&a),
        Command::Plotdata(a) => commands::plotdata(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
