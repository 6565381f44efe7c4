use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rte_cli::config::{parse_config, Mode};
use rte_cli::run::run;

#[derive(Parser)]
#[command(name = "rte", about = "Radiative transfer solver and studies", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file
    #[arg(long)]
    config: PathBuf,
    /// output directory for report files
    #[arg(long)]
    out: PathBuf,
    /// internal parallelism bound; determinism is guaranteed at 1
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// solve the lattice (or configured) problem and export the solution
    Solve(RunArgs),
    /// inner preconditioned CG iteration counts over (N_pre, g)
    PrecondStudy(RunArgs),
    /// contraction factors over (g, correction order, inner steps)
    SpectralStudy(RunArgs),
    /// compressed scattering matrix statistics over sphere levels
    CompressStudy(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match &cli.cmd {
        Cmd::Solve(a) => (Mode::Solve, a),
        Cmd::PrecondStudy(a) => (Mode::PrecondStudy, a),
        Cmd::SpectralStudy(a) => (Mode::SpectralStudy, a),
        Cmd::CompressStudy(a) => (Mode::CompressStudy, a),
    };
    if args.workers < 1 {
        eprintln!("config error: workers must be at least 1");
        return ExitCode::from(2);
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let cfg = match parse_config(&text, mode) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cfg, &args.out, args.workers) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
