//! Single-run pipelines: reference solves, data generation and training.

use std::fmt::Write as _;
use std::path::Path;

use apnn_core::collision::CollisionContext;
use apnn_core::hermite::VelocityGrid;
use apnn_core::losses::Observations;
use apnn_core::refsolver::{solve_drift_diffusion, spatial_nodes, KineticSolver, Trajectory};
use apnn_core::train::{train_forward, train_inverse, InverseMode, ReferenceProfile, TrainReport, TrainedModel};

use crate::config::Config;
use crate::data::{generate_observations, Dataset};
use crate::error::{AppError, Result};
use crate::plots::{line_plot, Series};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.txt";
pub const TIMING_FILE: &str = "timing.txt";

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics(pub Vec<(String, String)>);

impl Metrics {
    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.0.push((key.into(), value.into()));
    }

    pub fn push_f64(&mut self, key: &str, value: Option<f64>) {
        self.push(key, value.map_or_else(|| "none".into(), fmt_f64));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .filter_map(|l| l.split_once(" = "))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.render())
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn echo_config(cfg: &Config, dir: &Path) -> Result<()> {
    let header = format!("# apnn {}\n", env!("CARGO_PKG_VERSION"));
    write_file(&dir.join(CONFIG_FILE), &(header + &cfg.to_toml()))
}

/// Kinetic reference trajectory for the configured problem.
pub fn reference(cfg: &Config) -> Result<Trajectory> {
    Ok(KineticSolver::new(&cfg.problem, &cfg.solver)?.run()?)
}

pub fn reference_profile(traj: &Trajectory, with_phi: bool) -> ReferenceProfile {
    let last = traj.last();
    ReferenceProfile {
        time: last.time,
        x: traj.x.clone(),
        rho: last.rho.values.clone(),
        phi: with_phi.then(|| last.phi.values.clone()),
    }
}

/// `solve-ref`: kinetic solution on the configured grid.
pub fn solve_ref(cfg: &Config, dir: &Path) -> Result<Metrics> {
    let traj = reference(cfg)?;
    let with_phi = cfg.problem.uses_poisson();
    echo_config(cfg, dir)?;
    write_file(&dir.join("density.csv"), &traj.density_csv(with_phi))?;
    write_file(&dir.join("psi.csv"), &traj.psi_csv())?;
    let last = traj.last();
    let grid = VelocityGrid::new(cfg.problem.n_velocity)?;
    let mut m = Metrics::default();
    m.push("problem", cfg.problem.kind.to_string());
    m.push_f64("epsilon", Some(cfg.problem.epsilon));
    m.push_f64("time", Some(last.time));
    m.push("steps", last.step.to_string());
    m.push_f64("mass", Some(last.rho.values.iter().sum::<f64>() * cfg.solver.dx));
    m.push_f64("max_mean_psi", Some(last.psi.max_mean(&grid)));
    m.write(&dir.join(METRICS_FILE))?;
    if cfg.output.svg {
        let mut series = vec![Series { label: "rho", points: xy(&traj.x, &last.rho.values) }];
        if with_phi {
            series.push(Series { label: "phi", points: xy(&traj.x, &last.phi.values) });
        }
        line_plot(&dir.join("density.svg"), "reference solution at final time", "x", "value", &series, false)?;
    }
    Ok(m)
}

/// `solve-limit`: drift-diffusion solution with the mobility of the configured kernel.
pub fn solve_limit(cfg: &Config, dir: &Path) -> Result<Metrics> {
    let ctx = CollisionContext::new(VelocityGrid::new(cfg.problem.n_velocity)?, cfg.problem.kernel.clone())?;
    let mobility = ctx.mobility_constant()?;
    let snaps = solve_drift_diffusion(&cfg.problem, &cfg.solver, mobility)?;
    let x = spatial_nodes(&cfg.problem, &cfg.solver);
    echo_config(cfg, dir)?;
    let mut csv = String::from("t,x,rho\n");
    for (t, rho) in &snaps {
        for (xi, r) in x.iter().zip(&rho.values) {
            writeln!(csv, "{t:.16e},{xi:.16e},{r:.16e}").unwrap();
        }
    }
    write_file(&dir.join("density.csv"), &csv)?;
    let (t, last) = snaps.last().expect("initial state is always recorded");
    let mut m = Metrics::default();
    m.push("problem", cfg.problem.kind.to_string());
    m.push_f64("mobility", Some(mobility));
    m.push_f64("time", Some(*t));
    m.push_f64("mass", Some(last.values.iter().sum::<f64>() * cfg.solver.dx));
    m.write(&dir.join(METRICS_FILE))?;
    if cfg.output.svg {
        line_plot(&dir.join("density.svg"), "drift-diffusion density", "x", "rho", &[Series { label: "rho", points: xy(&x, &last.values) }], false)?;
    }
    Ok(m)
}

/// `gen-data`: observations sampled from the reference solution.
pub fn gen_data(cfg: &Config, dir: &Path) -> Result<Dataset> {
    let traj = reference(cfg)?;
    let d = sample(cfg, &traj)?;
    echo_config(cfg, dir)?;
    d.write(dir)?;
    Ok(d)
}

fn sample(cfg: &Config, traj: &Trajectory) -> Result<Dataset> {
    generate_observations(traj, cfg.problem.epsilon, cfg.problem.uses_poisson(), cfg.data.scenario, cfg.data.n_samples, cfg.data.seed)
}

/// Everything a training run produced.
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub report: TrainReport,
    pub metrics: Metrics,
}

/// `train`: reference solve, optional data generation, training, artifacts.
pub fn train(cfg: &Config, dir: &Path) -> Result<TrainOutcome> {
    let traj = reference(cfg)?;
    let with_phi = cfg.problem.uses_poisson();
    let profile = reference_profile(&traj, with_phi);
    echo_config(cfg, dir)?;
    let (model, report) = if cfg.train.inverse == InverseMode::None {
        train_forward(&cfg.problem, &cfg.train, Some(&profile))?
    } else {
        let data = match &cfg.data.dir {
            Some(d) => Dataset::read(d)?,
            None => {
                let d = sample(cfg, &traj)?;
                d.write(&dir.join("data"))?;
                d
            }
        };
        let obs: Observations = data.observations();
        train_inverse(&cfg.problem, &cfg.train, &obs, Some(&profile))?
    };

    let true_sigma = match &cfg.problem.kernel {
        apnn_core::collision::ScatteringKernel::Constant(s) => Some(*s),
        _ => None,
    };
    let mut m = Metrics::default();
    m.push("problem", cfg.problem.kind.to_string());
    m.push("method", cfg.train.method.to_string());
    m.push("inverse", cfg.train.inverse.to_string());
    m.push_f64("epsilon", Some(cfg.problem.epsilon));
    m.push("seed", cfg.train.seed.to_string());
    m.push("epochs", report.epochs.to_string());
    m.push_f64("initial_loss", report.history.first().map(|b| b.total));
    m.push_f64("final_loss", Some(report.final_loss.total));
    m.push_f64("final_error", report.final_error);
    m.push_f64("phi_error", report.phi_error);
    m.push_f64("sigma0", report.sigma_hat.map(|_| cfg.train.sigma0));
    m.push_f64("sigma_hat", report.sigma_hat);
    m.push_f64("sigma_error", report.sigma_hat.zip(true_sigma).map(|(s, t)| (s - t).abs() / t));
    m.push("sigma_clamped", report.sigma_clamped.to_string());
    m.push_f64("validation_loss", report.validation.last().map(|v| v.1));
    m.write(&dir.join(METRICS_FILE))?;
    write_file(&dir.join(TIMING_FILE), &format!("wall_s = {:.3}\n", report.wall_s))?;
    write_file(&dir.join("history.csv"), &report.history_csv(&cfg.train.weights))?;
    if !report.sigma_history.is_empty() {
        let mut s = String::from("epoch,sigma\n");
        for (e, v) in report.sigma_history.iter().enumerate() {
            writeln!(s, "{},{}", e + 1, fmt_f64(*v)).unwrap();
        }
        write_file(&dir.join("sigma.csv"), &s)?;
    }
    if !report.validation.is_empty() {
        let mut s = String::from("epoch,loss\n");
        for (e, v) in &report.validation {
            writeln!(s, "{e},{}", fmt_f64(*v)).unwrap();
        }
        write_file(&dir.join("validation.csv"), &s)?;
    }
    let rho = model.density(profile.time, &profile.x)?;
    let phi = model.potential(profile.time, &profile.x)?;
    let mut s = String::from(if with_phi { "x,rho_ref,rho_pred,phi_ref,phi_pred\n" } else { "x,rho_ref,rho_pred\n" });
    for i in 0..profile.x.len() {
        write!(s, "{},{},{}", fmt_f64(profile.x[i]), fmt_f64(profile.rho[i]), fmt_f64(rho[i])).unwrap();
        if let (Some(pr), Some(pp)) = (&profile.phi, &phi) {
            write!(s, ",{},{}", fmt_f64(pr[i]), fmt_f64(pp[i])).unwrap();
        }
        s.push('\n');
    }
    write_file(&dir.join("profile.csv"), &s)?;
    model.primary.save(&dir.join("net_primary.txt"))?;
    if let Some(g) = &model.micro {
        g.save(&dir.join("net_micro.txt"))?;
    }
    if let Some(p) = &model.phi {
        p.save(&dir.join("net_phi.txt"))?;
    }
    if cfg.output.svg {
        plot_run(dir, &profile, &rho, phi.as_deref(), &report)?;
    }
    Ok(TrainOutcome { model, report, metrics: m })
}

fn plot_run(dir: &Path, profile: &ReferenceProfile, rho: &[f64], phi: Option<&[f64]>, report: &TrainReport) -> Result<()> {
    let x = &profile.x;
    line_plot(
        &dir.join("rho.svg"),
        "density at final time",
        "x",
        "rho",
        &[Series { label: "reference", points: xy(x, &profile.rho) }, Series { label: "network", points: xy(x, rho) }],
        false,
    )?;
    if let (Some(pr), Some(pp)) = (&profile.phi, phi) {
        line_plot(
            &dir.join("phi.svg"),
            "potential at final time",
            "x",
            "phi",
            &[Series { label: "reference", points: xy(x, pr) }, Series { label: "network", points: xy(x, pp) }],
            false,
        )?;
    }
    let epochs = |f: &dyn Fn(&apnn_core::losses::LossBreakdown) -> f64| -> Vec<(f64, f64)> {
        report.history.iter().enumerate().map(|(e, b)| ((e + 1) as f64, f(b))).collect()
    };
    line_plot(
        &dir.join("loss.svg"),
        "training loss",
        "epoch",
        "loss",
        &[
            Series { label: "total", points: epochs(&|b| b.total) },
            Series { label: "macro", points: epochs(&|b| b.ge_macro) },
            Series { label: "micro", points: epochs(&|b| b.ge_micro) },
            Series { label: "boundary", points: epochs(&|b| b.bc + b.phi_bc) },
            Series { label: "initial", points: epochs(&|b| b.ic) },
        ],
        true,
    )?;
    if !report.sigma_history.is_empty() {
        let pts = report.sigma_history.iter().enumerate().map(|(e, s)| ((e + 1) as f64, *s)).collect();
        line_plot(&dir.join("sigma.svg"), "scattering coefficient", "epoch", "sigma", &[Series { label: "sigma", points: pts }], false)?;
    }
    Ok(())
}

pub fn xy(x: &[f64], y: &[f64]) -> Vec<(f64, f64)> {
    x.iter().copied().zip(y.iter().copied()).collect()
}

/// Final-time `(x, ρ[, φ])` columns of a `t,x,rho[,phi]` file.
pub fn read_final_profile(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| AppError::csv(path, e))?;
    let headers = r.headers().map_err(|e| AppError::csv(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ct), Some(cx), Some(cr)) = (col("t"), col("x"), col("rho")) else {
        return Err(AppError::Usage(format!("{}: expected columns t,x,rho", path.display())));
    };
    let cp = col("phi");
    let mut rows: Vec<(f64, f64, f64, Option<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| AppError::csv(path, e))?;
        let num = |c: usize| -> Result<f64> {
            rec[c].trim().parse().map_err(|_| AppError::Usage(format!("{}: bad number `{}`", path.display(), &rec[c])))
        };
        rows.push((num(ct)?, num(cx)?, num(cr)?, cp.map(num).transpose()?));
    }
    let t_last = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let last: Vec<_> = rows.into_iter().filter(|r| r.0 == t_last).collect();
    if last.is_empty() {
        return Err(AppError::Usage(format!("{}: no rows", path.display())));
    }
    let phi = cp.map(|_| last.iter().map(|r| r.3.unwrap_or(f64::NAN)).collect());
    Ok((last.iter().map(|r| r.1).collect(), last.iter().map(|r| r.2).collect(), phi))
}

/// `compare`: relative ℓ² distance between the final-time profiles of two files.
pub fn compare(a: &Path, b: &Path) -> Result<Metrics> {
    let (xa, ra, pa) = read_final_profile(a)?;
    let (xb, rb, pb) = read_final_profile(b)?;
    if xa.len() != xb.len() || xa.iter().zip(&xb).any(|(p, q)| (p - q).abs() > 1e-9) {
        return Err(AppError::Usage("profiles are on different grids".into()));
    }
    let mut m = Metrics::default();
    m.push_f64("rho_rel_l2", Some(apnn_core::refsolver::relative_l2(&ra, &rb)?));
    if let (Some(pa), Some(pb)) = (pa, pb) {
        m.push_f64("phi_rel_l2", Some(apnn_core::refsolver::relative_l2(&pa, &pb)?));
    }
    Ok(m)
}
