//! Multi-run experiments. Runs are independent and may execute concurrently;
//! each writes into its own subdirectory and summaries are assembled in a
//! fixed order afterwards.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use apnn_core::collision::CollisionContext;
use apnn_core::hermite::VelocityGrid;
use apnn_core::refsolver::{relative_l2, solve_drift_diffusion};
use rayon::prelude::*;

use crate::config::Config;
use crate::error::{AppError, Result};
use crate::plots::{line_plot, Series};
use crate::run::{self, fmt_f64, write_file, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Table1,
    BpForward,
    InverseFull,
    InversePartial,
    ApSweep,
}

pub const NAMES: &[&str] = &["table1", "bp_forward", "inverse_full", "inverse_partial", "ap_sweep"];

impl std::str::FromStr for Experiment {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "table1" => Experiment::Table1,
            "bp_forward" => Experiment::BpForward,
            "inverse_full" => Experiment::InverseFull,
            "inverse_partial" => Experiment::InversePartial,
            "ap_sweep" => Experiment::ApSweep,
            other => return Err(AppError::Usage(format!("unknown experiment `{other}` (expected one of {})", NAMES.join(", ")))),
        })
    }
}

impl std::fmt::Display for Experiment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Experiment::Table1 => "table1",
            Experiment::BpForward => "bp_forward",
            Experiment::InverseFull => "inverse_full",
            Experiment::InversePartial => "inverse_partial",
            Experiment::ApSweep => "ap_sweep",
        })
    }
}

/// One training run inside an experiment.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub dir: PathBuf,
    pub config: Config,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub spec: RunSpec,
    pub metrics: Metrics,
    pub sigma_history: Vec<f64>,
}

/// Applies the experiment's defaults (never overriding keys the user set).
pub fn prepare(exp: Experiment, base: &Config) -> Result<Config> {
    let mut c = base.clone();
    match exp {
        Experiment::Table1 | Experiment::ApSweep => {}
        Experiment::BpForward => {
            c.set_default("problem.kind", "\"bp\"")?;
            c.set_default("problem.epsilon", "1e-8")?;
            c.set_default("train.method", "\"apnn\"")?;
        }
        Experiment::InverseFull => {
            c.set_default("problem.epsilon", "1e-8")?;
            c.set_default("train.epochs", "20000")?;
            c.set("train.inverse", "\"full\"")?;
        }
        Experiment::InversePartial => {
            c.set_default("problem.epsilon", "1e-8")?;
            c.set_default("train.epochs", "50000")?;
            c.set_default("train.learning_rate", "1e-4")?;
            c.set_default("train.method", "\"apnn\"")?;
            c.set("train.inverse", "\"partial\"")?;
        }
    }
    Ok(c)
}

/// The training runs an experiment consists of, in summary order.
pub fn plan(exp: Experiment, cfg: &Config, dir: &Path) -> Result<Vec<RunSpec>> {
    let mut runs = Vec::new();
    let mut add = |name: String, sets: &[(&str, String)]| -> Result<()> {
        let mut c = cfg.clone();
        for (k, v) in sets {
            c.set(k, v)?;
        }
        runs.push(RunSpec { dir: dir.join(name), config: c });
        Ok(())
    };
    let seeds = &cfg.experiment.seeds;
    match exp {
        Experiment::Table1 => {
            for method in ["pinn", "apnn"] {
                for &eps in &cfg.experiment.epsilons {
                    for &seed in seeds {
                        add(
                            format!("{method}_eps{}_seed{seed}", fmt_f64(eps)),
                            &[("train.method", format!("\"{method}\"")), ("problem.epsilon", fmt_f64(eps)), ("train.seed", seed.to_string())],
                        )?;
                    }
                }
            }
        }
        Experiment::BpForward => {
            for &seed in seeds {
                add(format!("seed{seed}"), &[("train.seed", seed.to_string())])?;
            }
        }
        Experiment::InverseFull => {
            let methods: Vec<String> =
                if cfg.is_explicit("train.method") { vec![cfg.train.method.to_string()] } else { vec!["apnn".into(), "pinn".into()] };
            for method in &methods {
                for &seed in seeds {
                    add(format!("{method}_seed{seed}"), &[("train.method", format!("\"{method}\"")), ("train.seed", seed.to_string())])?;
                }
            }
        }
        Experiment::InversePartial => {
            for &s0 in &cfg.experiment.sigma0s {
                for &seed in seeds {
                    add(
                        format!("sigma0_{}_seed{seed}", fmt_f64(s0)),
                        &[("train.sigma0", fmt_f64(s0)), ("train.seed", seed.to_string())],
                    )?;
                }
            }
        }
        Experiment::ApSweep => {}
    }
    Ok(runs)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| AppError::Usage(format!("thread pool: {e}")))
}

/// Executes `runs` concurrently and returns their results in input order.
pub fn execute(runs: Vec<RunSpec>, jobs: usize) -> Result<Vec<RunResult>> {
    pool(jobs)?.install(|| {
        runs.into_par_iter()
            .map(|spec| {
                log::info!("run {}", spec.dir.display());
                let out = run::train(&spec.config, &spec.dir)?;
                Ok(RunResult { sigma_history: out.report.sigma_history, metrics: out.metrics, spec })
            })
            .collect()
    })
}

/// Runs experiment `exp` under `dir`, returning the summary rows written to `<name>.csv`.
pub fn run_experiment(exp: Experiment, base: &Config, dir: &Path) -> Result<String> {
    let inner = || -> Result<String> {
        let cfg = prepare(exp, base)?;
        write_file(&dir.join(run::CONFIG_FILE), &format!("# apnn {}\n{}", env!("CARGO_PKG_VERSION"), cfg.to_toml()))?;
        let summary = if exp == Experiment::ApSweep {
            ap_sweep(&cfg, dir)?
        } else {
            let results = execute(plan(exp, &cfg, dir)?, cfg.experiment.jobs)?;
            summarize(exp, &cfg, &results, dir)?
        };
        write_file(&dir.join(format!("{exp}.csv")), &summary)?;
        Ok(summary)
    };
    inner().map_err(|e| e.in_experiment(&exp.to_string()))
}

fn metric(r: &RunResult, key: &str) -> String {
    r.metrics.get(key).unwrap_or("none").to_string()
}

fn summarize(exp: Experiment, cfg: &Config, results: &[RunResult], dir: &Path) -> Result<String> {
    let mut runs = String::from("run,method,epsilon,seed,sigma0,final_error,phi_error,sigma_hat,sigma_error,final_loss\n");
    for r in results {
        let name = r.spec.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        writeln!(
            runs,
            "{name},{},{},{},{},{},{},{},{},{}",
            metric(r, "method"),
            metric(r, "epsilon"),
            metric(r, "seed"),
            metric(r, "sigma0"),
            metric(r, "final_error"),
            metric(r, "phi_error"),
            metric(r, "sigma_hat"),
            metric(r, "sigma_error"),
            metric(r, "final_loss")
        )
        .unwrap();
    }
    write_file(&dir.join("runs.csv"), &runs)?;
    match exp {
        Experiment::Table1 => table1(cfg, results, dir),
        _ => Ok(runs),
    }
    .and_then(|s| {
        if cfg.output.svg {
            plot_summary(exp, cfg, results, dir)?;
        }
        Ok(s)
    })
}

/// Median over seeds of each method's error per ε, one row per method.
fn table1(cfg: &Config, results: &[RunResult], _dir: &Path) -> Result<String> {
    let eps = &cfg.experiment.epsilons;
    let mut out = String::from("method");
    for e in eps {
        write!(out, ",eps={}", fmt_f64(*e)).unwrap();
    }
    out.push('\n');
    for method in ["pinn", "apnn"] {
        out.push_str(method);
        for &e in eps {
            let mut errs: Vec<f64> = results
                .iter()
                .filter(|r| r.metrics.get("method") == Some(method) && r.metrics.get_f64("epsilon") == Some(e))
                .filter_map(|r| r.metrics.get_f64("final_error"))
                .collect();
            errs.sort_by(f64::total_cmp);
            let med = if errs.is_empty() { f64::NAN } else { errs[errs.len() / 2] };
            write!(out, ",{}", fmt_f64(med)).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

fn plot_summary(exp: Experiment, cfg: &Config, results: &[RunResult], dir: &Path) -> Result<()> {
    match exp {
        Experiment::Table1 => {
            let series: Vec<Series> = ["pinn", "apnn"]
                .iter()
                .map(|&m| Series {
                    label: m,
                    points: results
                        .iter()
                        .filter(|r| r.metrics.get("method") == Some(m))
                        .filter_map(|r| Some((r.metrics.get_f64("epsilon")?.log10(), r.metrics.get_f64("final_error")?)))
                        .collect(),
                })
                .collect();
            line_plot(&dir.join("table1.svg"), "relative error against log10 epsilon", "log10 epsilon", "error", &series, true)
        }
        Experiment::InverseFull | Experiment::InversePartial => {
            let first = cfg.experiment.seeds.first().copied();
            let labels: Vec<String> = results.iter().map(|r| r.spec.dir.file_name().unwrap().to_string_lossy().into_owned()).collect();
            let series: Vec<Series> = results
                .iter()
                .zip(&labels)
                .filter(|(r, _)| first.is_none_or(|s| r.spec.config.train.seed == s))
                .map(|(r, l)| Series {
                    label: l.as_str(),
                    points: r.sigma_history.iter().enumerate().map(|(e, s)| ((e + 1) as f64, *s)).collect(),
                })
                .collect();
            line_plot(&dir.join("sigma.svg"), "scattering coefficient", "epoch", "sigma", &series, false)
        }
        _ => Ok(()),
    }
}

/// Reference solutions across ε against the drift-diffusion limit.
fn ap_sweep(cfg: &Config, dir: &Path) -> Result<String> {
    let ctx = CollisionContext::new(VelocityGrid::new(cfg.problem.n_velocity)?, cfg.problem.kernel.clone())?;
    let dd = solve_drift_diffusion(&cfg.problem, &cfg.solver, ctx.mobility_constant()?)?;
    let limit = &dd.last().expect("initial state is always recorded").1.values;
    let eps = cfg.experiment.ap_epsilons.clone();
    let profiles: Vec<Vec<f64>> = pool(cfg.experiment.jobs)?.install(|| {
        eps.par_iter()
            .map(|&e| {
                let mut c = cfg.clone();
                c.problem.epsilon = e;
                Ok(run::reference(&c)?.last().rho.values.clone())
            })
            .collect::<Result<_>>()
    })?;
    let mut out = String::from("epsilon,rel_l2_vs_limit,rel_l2_vs_next\n");
    for (k, &e) in eps.iter().enumerate() {
        let next = profiles.get(k + 1).map(|p| relative_l2(&profiles[k], p)).transpose()?;
        writeln!(
            out,
            "{},{},{}",
            fmt_f64(e),
            fmt_f64(relative_l2(&profiles[k], limit)?),
            next.map_or_else(|| "none".into(), fmt_f64)
        )
        .unwrap();
    }
    if cfg.output.svg {
        let pts = eps.iter().zip(&profiles).filter(|(e, _)| **e > 0.0).map(|(e, p)| (e.log10(), relative_l2(p, limit).unwrap_or(f64::NAN))).collect();
        line_plot(&dir.join("ap_sweep.svg"), "distance to the drift-diffusion limit", "log10 epsilon", "relative error", &[Series { label: "kinetic", points: pts }], true)?;
    }
    Ok(out)
}
