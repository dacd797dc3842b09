use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use density_steer_cli::commands::default_out;
use density_steer_cli::{parse_config, run, RunOptions, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Fp,
    Transform,
    Mc,
    Hjb,
    Vi,
    Sweep,
    Bench,
    Check,
}

impl From<Cmd> for Subcommand {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Fp => Subcommand::Fp,
            Cmd::Transform => Subcommand::Transform,
            Cmd::Mc => Subcommand::Mc,
            Cmd::Hjb => Subcommand::Hjb,
            Cmd::Vi => Subcommand::Vi,
            Cmd::Sweep => Subcommand::Sweep,
            Cmd::Bench => Subcommand::Bench,
            Cmd::Check => Subcommand::Check,
        }
    }
}

/// Density-based solvers for controlled diffusions with optimal stopping.
#[derive(Debug, Parser)]
#[command(name = "density-steer", version)]
struct Args {
    /// Pipeline to run.
    #[arg(value_enum)]
    command: Cmd,
    /// Benchmark name (bench) or check name (check).
    target: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default out/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to DENSITY_STEER_JOBS.
    #[arg(long)]
    jobs: Option<usize>,
    /// Multiplies every check tolerance.
    #[arg(long, default_value_t = 1.0)]
    tol_scale: f64,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cmd: Subcommand = args.command.into();
    let config = match args.config.as_deref().map(parse_config).transpose() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let opts = RunOptions {
        config,
        out: args.out.unwrap_or_else(|| default_out(cmd)),
        seed: args.seed,
        jobs: args.jobs,
        tol_scale: args.tol_scale,
        target: args.target,
    };
    match run(cmd, &opts) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
