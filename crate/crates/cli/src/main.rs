//! Command-line driver for the experiment pipeline.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 stage failure.

use clap::{Args, Parser, Subcommand};
use log::error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use toric_dm::experiment::{
    emit_tables, run_field_sweep, run_pipeline, ExperimentConfig, Force, RunManifest, Stage,
};
use toric_dm::Error;

#[derive(Parser)]
#[command(
    name = "toric-dm",
    version,
    about = "Diffusion-map sector detection for toric-code RBM ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline at the configured field.
    Run(RunArgs),
    /// Run the pipeline over the configured field grid.
    Sweep(RunArgs),
    /// Rewrite the CSV tables of an existing run directory.
    Emit {
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and check a configuration without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the one named in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Recompute a stage (seeds, ensemble, observables, similarity, diffmap) and
    /// everything after it, or `all`.
    #[arg(long)]
    force: Option<String>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) | Error::DegenerateLattice { .. } => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

fn parse_force(s: Option<&str>) -> Result<Force, Error> {
    match s {
        None => Ok(Force::None),
        Some("all") => Ok(Force::All),
        Some(stage) => Ok(Force::From(stage.parse::<Stage>()?)),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, u8> {
    ExperimentConfig::load(path).map_err(|e| {
        error!("{}: {e}", path.display());
        match e {
            Error::Io { .. } => EXIT_STAGE,
            _ => EXIT_CONFIG,
        }
    })
}

fn execute(args: &RunArgs, sweep: bool) -> Result<RunManifest, u8> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let force = parse_force(args.force.as_deref()).map_err(|e| {
        error!("{e}");
        EXIT_CONFIG
    })?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let result = if sweep {
        run_field_sweep(&cfg, &out, force)
    } else {
        run_pipeline(&cfg, &out, force)
    };
    result.map_err(|e| {
        error!("{e}");
        exit_code(&e)
    })
}

fn report(m: &RunManifest) {
    if let Some(s) = &m.summary {
        println!(
            "{}: {} members, {} sector(s), fixed-epsilon degeneracy {} (gap {:.3})",
            m.name, s.n_members, s.sector_count, s.fixed_degeneracy, s.fixed_gap
        );
    }
    for p in &m.field_points {
        match (&p.summary, &p.error) {
            (Some(s), _) => println!(
                "h = {}: {} sector(s), fixed-epsilon degeneracy {} (gap {:.3})",
                p.h, s.sector_count, s.fixed_degeneracy, s.fixed_gap
            ),
            (None, Some(e)) => println!("h = {}: failed: {e}", p.h),
            (None, None) => {}
        }
    }
    if let Some(f) = &m.fidelity_minimum {
        println!("fidelity minimum {:.4} at h = {}", f.fidelity, f.h);
    }
    for w in &m.warnings {
        println!("warning: {w}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => execute(args, false).map(|m| report(&m)),
        Command::Sweep(args) => execute(args, true).map(|m| report(&m)),
        Command::Emit { out } => emit_tables(out)
            .map(|files| {
                for f in files {
                    println!("{}", f.display());
                }
            })
            .map_err(|e| {
                error!("{e}");
                EXIT_STAGE
            }),
        Command::Validate { config } => {
            load_config(config).map(|c| println!("{}: ok ({})", config.display(), c.hash()))
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
