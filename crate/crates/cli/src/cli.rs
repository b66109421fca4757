//! Command-line surface.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::error::Result;
use crate::experiment::Experiment;
use crate::run;

#[derive(Debug, Parser)]
#[command(name = "apnn", version, about = "Kinetic reference solvers and residual-network training for the semiconductor Boltzmann equation")]
pub struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `-s problem.epsilon=1e-8`.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Artifact directory (same as `-s output.dir=...`).
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the kinetic problem with the micro-macro reference scheme.
    SolveRef,
    /// Solve the drift-diffusion limit.
    SolveLimit,
    /// Sample observations from the reference solution.
    GenData,
    /// Train one network and report its error.
    Train,
    /// Run a named multi-run experiment.
    Experiment {
        /// table1 | bp_forward | inverse_full | inverse_partial | ap_sweep
        name: String,
    },
    /// Relative l2 distance between the final-time profiles of two `t,x,rho[,phi]` files.
    Compare { a: PathBuf, b: PathBuf },
    /// Print every config key with its resolved value.
    ShowConfig,
}

pub fn load(cli: &Cli) -> Result<Config> {
    let mut overrides = cli.overrides.clone();
    if let Some(out) = &cli.out {
        overrides.push(format!("output.dir={}", out.display()));
    }
    Ok(Config::load(cli.config.as_deref(), &overrides)?)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    if let Command::Compare { a, b } = &cli.command {
        print!("{}", run::compare(a, b)?.render());
        return Ok(());
    }
    let cfg = load(&cli)?;
    let dir = cfg.output.dir.clone();
    match cli.command {
        Command::SolveRef => print!("{}", run::solve_ref(&cfg, &dir)?.render()),
        Command::SolveLimit => print!("{}", run::solve_limit(&cfg, &dir)?.render()),
        Command::GenData => {
            let d = run::gen_data(&cfg, &dir)?;
            println!("rho = {}\nmicro = {}\nphi = {}", d.rho.len(), d.micro.len(), d.phi.len());
        }
        Command::Train => print!("{}", run::train(&cfg, &dir)?.metrics.render()),
        Command::Experiment { name } => {
            let exp: Experiment = name.parse()?;
            print!("{}", crate::experiment::run_experiment(exp, &cfg, &dir)?);
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::Compare { .. } => unreachable!("handled above"),
    }
    Ok(())
}
