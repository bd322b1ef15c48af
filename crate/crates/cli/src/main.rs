use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idsm_cli::commands;
use idsm_cli::config::{LoadedConfig, Overrides, SchemeName};
use idsm_cli::CliError;

/// Iterative direct sampling reconstructions for elliptic inverse problems
/// with partial boundary data.
#[derive(Parser)]
#[command(name = "idsm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file, or a bundled preset name (ex1, ex2, ex3-p1, ex3-p99, ex4-a1, ex4-a2, ex5).
    #[arg(long)]
    config: String,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize noisy partial boundary data for a config.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct inclusions from a data bundle.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Data bundle written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        scheme: Option<SchemeName>,
        /// Overrides `[run] iterations`.
        #[arg(long)]
        max_iter: Option<usize>,
        /// Also write legacy VTK files per iteration.
        #[arg(long)]
        vtk: bool,
    },
    /// Re-check the invariants of a reconstruction bundle.
    Verify {
        /// Reconstruction bundle directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(common: &Common, scheme: Option<SchemeName>, max_iter: Option<usize>) -> Result<LoadedConfig, CliError> {
    let mut cfg = LoadedConfig::load(&common.config)?;
    cfg.apply(&Overrides { scheme, seed: common.seed, max_iter })?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load(&common, None, None)?;
            let m = commands::generate(&cfg, &common.out)?;
            println!("wrote {} data sets to {} (seed {}, noise {})", m.fluxes.len(), common.out.display(), m.seed, m.noise);
        }
        Command::Reconstruct { common, data, scheme, max_iter, vtk } => {
            let cfg = load(&common, scheme, max_iter)?;
            let s = commands::reconstruct(&cfg, &data, &common.out, vtk)?;
            println!(
                "{} iterations, {} PDE solves, final lambda {:.4}, results in {}",
                s.iterations,
                s.pde_solves,
                s.final_lambda,
                common.out.display()
            );
        }
        Command::Verify { out } => {
            commands::verify(&out)?;
            println!("all invariants hold for {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
