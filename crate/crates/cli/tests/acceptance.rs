//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5 and 9 are deterministic and gate the exit status. The
//! training criteria 6-8 depend on the profile chosen through
//! `APNN_ACCEPTANCE_PROFILE`:
//!
//! * `quick` (default): not trained here; reported as SKIP unless a finished
//!   experiment directory is supplied (see below).
//! * `ci`: 2x64 nets, 5000 epochs, 20x24 collocation, criterion 6 at the
//!   reduced tolerances and the full-data half of criterion 7.
//! * `large`: 4x128 nets, 10000 epochs, 20x99 collocation, every part.
//!
//! `APNN_ACCEPTANCE_TABLE1`, `APNN_ACCEPTANCE_INVERSE_FULL`,
//! `APNN_ACCEPTANCE_INVERSE_PARTIAL`, `APNN_ACCEPTANCE_BP_FORWARD` and
//! `APNN_ACCEPTANCE_BP_INVERSE` may point at directories written by
//! `apnn experiment ...`; their `runs.csv` is then judged instead of training.
//! Training outcomes are reported but never change the exit status.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use apnn_cli::config::Config;
use apnn_cli::experiment::{run_experiment, Experiment};
use apnn_cli::run;
use apnn_core::collision::{CollisionContext, ScatteringKernel};
use apnn_core::hermite::VelocityGrid;
use apnn_core::losses::{CollocationSet, LossAssembler, LossWeights, Observations, PointSample, VelocitySample};
use apnn_core::net::{EvalSpec, Network};
use apnn_core::problem::ProblemConfig;
use apnn_core::refsolver::{relative_l2, solve_drift_diffusion, KineticSolver, SolverConfig};
use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const QUADRATURE_TOL: f64 = 1e-12;
const ORTHONORMAL_TOL: f64 = 1e-12;
const DERIV_ROW_TOL: f64 = 1e-12;
const ROUND_TRIP_TOL: f64 = 1e-11;
const EQUILIBRIUM_TOL: f64 = 1e-13;
const MASS_TOL: f64 = 1e-12;
const MOBILITY_TOL: f64 = 1e-13;
const AP_LIMIT_TOL: f64 = 2e-2;
const AP_CAUCHY_TOL: f64 = 1e-3;
const FIRST_ORDER_TOL: f64 = 1e-5;
const GRADIENT_TOL: f64 = 1e-4;
const FD_CASES: u64 = 50;
const LOSS_EPS_TOL: f64 = 1e-6;
const SEEDS_REQUIRED: usize = 2;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Verdict {
    status: Status,
    detail: String,
}

impl Verdict {
    fn check(ok: bool, detail: String) -> Self {
        Self { status: if ok { Status::Pass } else { Status::Fail }, detail }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self { status: Status::Skip, detail: detail.into() }
    }
}

type Outcome = Result<Verdict, String>;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Profile {
    Quick,
    Ci,
    Large,
}

fn profile() -> Profile {
    match std::env::var("APNN_ACCEPTANCE_PROFILE").as_deref() {
        Ok("ci") => Profile::Ci,
        Ok("large") => Profile::Large,
        Ok("quick") | Err(_) => Profile::Quick,
        Ok(other) => {
            eprintln!("unknown APNN_ACCEPTANCE_PROFILE `{other}`, using quick");
            Profile::Quick
        }
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        (a - b).abs() / b.abs()
    }
}

fn within_budget(v: Verdict, elapsed: Duration, budget: Duration) -> Verdict {
    if v.status == Status::Pass && elapsed > budget {
        return Verdict::check(false, format!("{}; took {:.1}s, budget {:.0}s", v.detail, elapsed.as_secs_f64(), budget.as_secs_f64()));
    }
    v
}

// ---------------------------------------------------------------- criterion 1

/// `∫ v^d M dv` for `M = exp(-v²)/√π`: zero for odd `d`, `(d-1)!!/2^{d/2}` otherwise.
fn gaussian_moment(d: u32) -> f64 {
    if d % 2 == 1 {
        return 0.0;
    }
    (1..d).step_by(2).map(f64::from).product::<f64>() / 2f64.powi(d as i32 / 2)
}

fn spectral_layer() -> Outcome {
    let n = 8;
    let grid = VelocityGrid::new(n).map_err(|e| e.to_string())?;
    let (v, w) = (grid.nodes(), grid.weights());

    let mut quad = 0.0f64;
    for d in 0..2 * n as u32 {
        let q: f64 = v.iter().zip(w).map(|(vj, wj)| vj.powi(d as i32) * wj).sum();
        quad = quad.max(rel(q, gaussian_moment(d)));
    }

    let basis = grid.basis();
    let mut ortho = 0.0f64;
    for k in 0..basis.nrows() {
        for l in 0..basis.nrows() {
            let s: f64 = (0..n).map(|j| basis[[k, j]] * basis[[l, j]] * w[j]).sum();
            ortho = ortho.max((s - if k == l { 1.0 } else { 0.0 }).abs());
        }
    }

    let deriv = grid.deriv();
    let rows = (0..n).map(|i| deriv.row(i).sum().abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut trip = 0.0f64;
    for _ in 0..20 {
        let psi: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = grid.analyze(&psi).and_then(|c| grid.synthesize_nodes(&c)).map_err(|e| e.to_string())?;
        let scale = psi.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        trip = trip.max(psi.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale);
    }

    let ok = quad <= QUADRATURE_TOL && ortho <= ORTHONORMAL_TOL && rows <= DERIV_ROW_TOL && trip <= ROUND_TRIP_TOL;
    Ok(Verdict::check(ok, format!("quadrature {quad:.1e}, orthonormality {ortho:.1e}, derivative rows {rows:.1e}, round trip {trip:.1e}")))
}

// ---------------------------------------------------------------- criterion 2

fn collision_properties() -> Outcome {
    let n = 8;
    let grid = VelocityGrid::new(n).map_err(|e| e.to_string())?;
    let constant = CollisionContext::new(grid.clone(), ScatteringKernel::Constant(2.0)).map_err(|e| e.to_string())?;

    let mut equilibrium = 0.0f64;
    for rho in [1.0, 0.37, 12.5] {
        let q = constant.apply_q_psi(&vec![rho; n]).map_err(|e| e.to_string())?;
        equilibrium = equilibrium.max(q.iter().fold(0.0, |m: f64, x| m.max(x.abs())) / rho);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut table = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let s = rng.random_range(0.5..3.0);
            table[[i, j]] = s;
            table[[j, i]] = s;
        }
    }
    let kernels = [ScatteringKernel::Constant(2.0), ScatteringKernel::Tabulated(table)];
    let mut mass = 0.0f64;
    for kernel in kernels {
        let ctx = CollisionContext::new(grid.clone(), kernel).map_err(|e| e.to_string())?;
        for _ in 0..20 {
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = ctx.apply_q_psi(&g).map_err(|e| e.to_string())?;
            mass = mass.max(grid.integrate(&q).abs());
        }
    }

    let t = constant.mobility_constant().map_err(|e| e.to_string())?;
    let t_err = (t - 0.25).abs();
    let ok = equilibrium <= EQUILIBRIUM_TOL && mass <= MASS_TOL && t_err <= MOBILITY_TOL;
    Ok(Verdict::check(ok, format!("|Q(rho M)| {equilibrium:.1e}, |<Q(g)>| {mass:.1e}, T = {t} (error {t_err:.1e})")))
}

// ---------------------------------------------------------------- criterion 3

fn final_density(eps: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, f64), String> {
    let p = ProblemConfig::semiconductor(eps);
    let solver = KineticSolver::new(&p, cfg).map_err(|e| e.to_string())?;
    let mobility = solver.context().mobility_constant().map_err(|e| e.to_string())?;
    let traj = solver.run().map_err(|e| e.to_string())?;
    Ok((traj.last().rho.values.clone(), mobility))
}

fn reference_ap() -> Outcome {
    let base = SolverConfig::default();
    let cfg = SolverConfig { dx: 0.01, dt: 5e-5, t_final: 0.1, snapshot_every: base.n_steps().max(1), ..base };
    let (rho6, mobility) = final_density(1e-6, &cfg)?;
    let (rho8, _) = final_density(1e-8, &cfg)?;
    let limit = solve_drift_diffusion(&ProblemConfig::semiconductor(1e-6), &cfg, mobility).map_err(|e| e.to_string())?;
    let rho_dd = &limit.last().ok_or("empty drift-diffusion run")?.1.values;
    let vs_limit = relative_l2(&rho6, rho_dd).map_err(|e| e.to_string())?;
    let cauchy = relative_l2(&rho6, &rho8).map_err(|e| e.to_string())?;
    Ok(Verdict::check(
        vs_limit <= AP_LIMIT_TOL && cauchy <= AP_CAUCHY_TOL,
        format!("eps=1e-6 vs drift-diffusion {vs_limit:.2e} (<= {AP_LIMIT_TOL:.0e}), eps 1e-6 vs 1e-8 {cauchy:.2e} (<= {AP_CAUCHY_TOL:.0e})"),
    ))
}

// ---------------------------------------------------------------- criterion 4

fn random_net(rng: &mut ChaCha8Rng, n_in: usize, seed: u64) -> Result<Network, String> {
    let depth = rng.random_range(1..=3);
    let mut widths = vec![n_in];
    widths.extend((0..depth).map(|_| rng.random_range(3..=12)));
    widths.push(1);
    let net = Network::xavier_init(&widths, seed).map_err(|e| e.to_string())?;
    let params = net.params().iter().map(|p| p + rng.random_range(-0.3..0.3)).collect();
    Network::from_params(&widths, params).map_err(|e| e.to_string())
}

/// `Σ_b c0 y + c1 (∂_1 y)² + c2 ∂_0 y · y + c3 ∂_11 y` and its parameter gradient.
fn mixed_loss(net: &Network, x: &Array2<f64>, c: [f64; 4], with_grad: bool) -> Result<(f64, Vec<f64>), String> {
    let mut eval = net.forward(x, &EvalSpec::with_second(&[0, 1], 1)).map_err(|e| e.to_string())?;
    let y = eval.values().to_vec();
    let yt = eval.tangent(0).ok_or("missing tangent")?.to_vec();
    let yx = eval.tangent(1).ok_or("missing tangent")?.to_vec();
    let yxx = eval.second().ok_or("missing second derivative")?.to_vec();
    let loss = (0..y.len()).map(|b| c[0] * y[b] + c[1] * yx[b] * yx[b] + c[2] * yt[b] * y[b] + c[3] * yxx[b]).sum();
    let mut grad = vec![0.0; net.n_params()];
    if with_grad {
        let a0 = (0..y.len()).map(|b| c[0] + c[2] * yt[b]).collect();
        let at = y.iter().map(|v| c[2] * v).collect();
        let ax = yx.iter().map(|v| 2.0 * c[1] * v).collect();
        let axx = vec![c[3]; y.len()];
        net.backward(&mut eval, &[Some(a0), Some(at), Some(ax), Some(axx)], &mut grad).map_err(|e| e.to_string())?;
    }
    Ok((loss, grad))
}

fn differentiation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut first, mut second, mut param) = (0.0f64, 0.0f64, 0.0f64);
    for case in 0..FD_CASES {
        let n_in = rng.random_range(2..=3);
        let net = random_net(&mut rng, n_in, case)?;
        let x: Vec<f64> = (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |z: &[f64]| -> Result<f64, String> { Ok(net.forward_point(z).map_err(|e| e.to_string())?[0].value) };

        let exact = net.forward_point(&x).map_err(|e| e.to_string())?[0].clone();
        let h = 1e-5;
        for k in 0..n_in {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let fd = (f(&xp)? - f(&xm)?) / (2.0 * h);
            first = first.max((fd - exact.input_grads[k]).abs() / exact.input_grads[k].abs().max(1e-3));
        }

        let batch = Array2::from_shape_fn((4, n_in), |_| rng.random_range(-1.0..1.0));
        let eval = net.forward(&batch, &EvalSpec::with_second(&[0, 1], 1)).map_err(|e| e.to_string())?;
        let h2 = 1e-4;
        for r in 0..batch.nrows() {
            let row: Vec<f64> = batch.row(r).to_vec();
            let shifted = |dx: f64| {
                let mut z = row.clone();
                z[1] += dx;
                f(&z)
            };
            let fd = (shifted(h2)? - 2.0 * shifted(0.0)? + shifted(-h2)?) / (h2 * h2);
            let ex = eval.second().ok_or("missing second derivative")?[r];
            second = second.max((fd - ex).abs() / ex.abs().max(1.0));
        }

        let c = [rng.random_range(-1.0..1.0), rng.random_range(0.1..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let (_, grad) = mixed_loss(&net, &batch, c, true)?;
        let hp = 1e-6;
        for _ in 0..10 {
            let k = rng.random_range(0..net.n_params());
            let mut plus = net.clone();
            plus.params_mut()[k] += hp;
            let mut minus = net.clone();
            minus.params_mut()[k] -= hp;
            let fd = (mixed_loss(&plus, &batch, c, false)?.0 - mixed_loss(&minus, &batch, c, false)?.0) / (2.0 * hp);
            param = param.max((fd - grad[k]).abs() / grad[k].abs().max(1e-2));
        }
    }
    Ok(Verdict::check(
        first <= FIRST_ORDER_TOL && second <= GRADIENT_TOL && param <= GRADIENT_TOL,
        format!("{FD_CASES} cases: input gradients {first:.1e}, second derivatives {second:.1e}, parameter gradients {param:.1e}"),
    ))
}

// ---------------------------------------------------------------- criterion 5

fn observations(problem: &ProblemConfig, rng: &mut ChaCha8Rng) -> Observations {
    let grid = VelocityGrid::new(problem.n_velocity).expect("velocity grid");
    let v = grid.nodes().to_vec();
    let mut point = || PointSample { t: rng.random_range(0.0..0.1), x: rng.random_range(0.0..1.0), value: rng.random_range(0.5..1.5) };
    let rho = (0..4).map(|_| point()).collect();
    let phi = if problem.uses_poisson() { (0..3).map(|_| point()).collect() } else { Vec::new() };
    let mut sample = || VelocitySample {
        t: rng.random_range(0.0..0.1),
        x: rng.random_range(0.0..1.0),
        v: v[rng.random_range(0..v.len())],
        value: rng.random_range(-0.1..0.1),
    };
    let g = (0..4).map(|_| sample()).collect();
    let f = (0..2).map(|_| sample()).collect();
    Observations { rho, g, f, phi }
}

fn loss_ap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut identical, mut drift, mut cases) = (true, 0.0f64, 0);
    for (k, problem) in [ProblemConfig::semiconductor(0.0), ProblemConfig::boltzmann_poisson(0.0)].into_iter().enumerate() {
        for seed in 0..10u64 {
            let data = observations(&problem, &mut rng);
            let colloc = CollocationSet::uniform(&problem, 4, 7).map_err(|e| e.to_string())?;
            let a = LossAssembler::new(&problem, colloc, LossWeights::default(), data).map_err(|e| e.to_string())?;
            let s = 100 * k as u64 + seed;
            let rho = random_net(&mut rng, 2, s)?;
            let g = random_net(&mut rng, 3, s + 1000)?;
            let phi_net = random_net(&mut rng, 2, s + 2000)?;
            let phi: Option<&dyn apnn_core::losses::Field> = if problem.uses_poisson() { Some(&phi_net) } else { None };
            let at0 = a.apnn_loss(&rho, &g, phi, 0.0).map_err(|e| e.to_string())?;
            let lim = a.limit_loss(&rho, &g, phi).map_err(|e| e.to_string())?;
            identical &= at0.total.to_bits() == lim.total.to_bits();
            let small = a.apnn_loss(&rho, &g, phi, 1e-8).map_err(|e| e.to_string())?;
            drift = drift.max((small.total - at0.total).abs() / at0.total);
            cases += 1;
        }
    }
    Ok(Verdict::check(
        identical && drift <= LOSS_EPS_TOL,
        format!("{cases} random head sets: eps=0 vs limit {}, |L(1e-8) - L(0)|/L(0) {drift:.1e}", if identical { "bit-identical" } else { "DIFFERENT" }),
    ))
}

// ------------------------------------------------------------ training criteria

/// One row of an experiment's `runs.csv`.
type Row = BTreeMap<String, String>;

fn read_runs(dir: &Path) -> Result<Vec<Row>, String> {
    let path = dir.join("runs.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or("empty runs.csv")?.split(',').collect();
    Ok(lines.map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect()).collect())
}

fn num(row: &Row, key: &str) -> Option<f64> {
    row.get(key).and_then(|v| v.parse().ok()).filter(|v: &f64| v.is_finite())
}

/// Per-seed values of `key` in rows matching every `(column, value)` filter.
fn values(rows: &[Row], filter: &[(&str, f64)], method: Option<&str>, key: &str) -> Vec<Option<f64>> {
    rows.iter()
        .filter(|r| method.is_none_or(|m| r.get("method").map(String::as_str) == Some(m)))
        .filter(|r| filter.iter().all(|(k, v)| num(r, k).is_some_and(|x| rel(x, *v) < 1e-9)))
        .map(|r| num(r, key))
        .collect()
}

fn fmt_values(vals: &[Option<f64>]) -> String {
    vals.iter().map(|v| v.map_or("none".to_string(), |x| format!("{x:.2e}"))).collect::<Vec<_>>().join("/")
}

fn hits(vals: &[Option<f64>], ok: impl Fn(f64) -> bool) -> usize {
    vals.iter().filter(|v| v.is_some_and(&ok)).count()
}

fn training_dir(name: &str) -> Option<PathBuf> {
    std::env::var_os(format!("APNN_ACCEPTANCE_{name}")).map(PathBuf::from)
}

/// Runs `exp` with `overrides` under a scratch directory and returns that directory.
fn train_experiment(exp: Experiment, overrides: &[String]) -> Result<PathBuf, String> {
    let root = std::env::temp_dir().join(format!("apnn-acceptance-{}", std::process::id()));
    let dir = root.join(exp.to_string());
    let cfg = Config::from_str_with("", overrides).map_err(|e| e.to_string())?;
    run_experiment(exp, &cfg, &dir).map_err(|e| e.to_string())?;
    Ok(dir)
}

fn network_overrides(p: Profile) -> Vec<String> {
    let net = match p {
        Profile::Large => ["train.hidden=[128, 128, 128, 128]", "train.epochs=10000", "train.n_t=20", "train.n_x=99"],
        _ => ["train.hidden=[64, 64]", "train.epochs=5000", "train.n_t=20", "train.n_x=24"],
    };
    net.iter().map(|s| s.to_string()).chain(["train.log_every=0".into(), "output.svg=false".into(), "experiment.jobs=0".into()]).collect()
}

fn table1(p: Profile) -> Outcome {
    let dir = match (training_dir("TABLE1"), p) {
        (Some(d), _) => d,
        (None, Profile::Quick) => return Ok(Verdict::skip("training not run in the quick profile")),
        (None, _) => {
            let mut o = network_overrides(p);
            o.push("experiment.epsilons=[1.0, 1e-3, 1e-8]".into());
            train_experiment(Experiment::Table1, &o)?
        }
    };
    // the reduced profile loosens both bounds to 1e-1
    let (apnn_tol, pinn_floor) = if p == Profile::Large { (5e-2, 2e-1) } else { (1e-1, 1e-1) };
    let rows = read_runs(&dir)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for eps in [1.0, 1e-3, 1e-8] {
        let a = values(&rows, &[("epsilon", eps)], Some("apnn"), "final_error");
        let good = hits(&a, |e| e <= apnn_tol);
        ok &= good >= SEEDS_REQUIRED;
        parts.push(format!("apnn eps={eps:e} {} ({good} <= {apnn_tol:.0e})", fmt_values(&a)));
    }
    for eps in [1e-3, 1e-8] {
        let v = values(&rows, &[("epsilon", eps)], Some("pinn"), "final_error");
        let good = hits(&v, |e| e >= pinn_floor);
        ok &= good >= SEEDS_REQUIRED;
        parts.push(format!("pinn eps={eps:e} {} ({good} >= {pinn_floor:.0e})", fmt_values(&v)));
    }
    Ok(Verdict::check(ok, parts.join("; ")))
}

fn sigma_check(rows: &[Row], filter: &[(&str, f64)], method: Option<&str>, tol: f64) -> (bool, String) {
    let v = values(rows, filter, method, "sigma_error");
    let good = hits(&v, |e| e <= tol);
    (good >= SEEDS_REQUIRED, format!("{} ({good} <= {tol:.0e})", fmt_values(&v)))
}

fn inverse_full(p: Profile) -> Outcome {
    let dir = match (training_dir("INVERSE_FULL"), p) {
        (Some(d), _) => d,
        (None, Profile::Quick) => return Ok(Verdict::skip("training not run in the quick profile")),
        (None, _) => {
            let mut o = network_overrides(p);
            o.push("train.method=\"apnn\"".into());
            train_experiment(Experiment::InverseFull, &o)?
        }
    };
    let (ok, detail) = sigma_check(&read_runs(&dir)?, &[], Some("apnn"), 5e-2);
    Ok(Verdict::check(ok, format!("full data, sigma relative error per seed {detail}")))
}

fn inverse_partial(p: Profile) -> Outcome {
    let dir = match (training_dir("INVERSE_PARTIAL"), p) {
        (Some(d), _) => d,
        (None, Profile::Large) => {
            let o: Vec<String> = ["train.hidden=[128, 128, 128, 128]", "train.n_t=20", "train.n_x=99", "train.log_every=0", "output.svg=false"]
                .iter()
                .map(|s| s.to_string())
                .collect();
            train_experiment(Experiment::InversePartial, &o)?
        }
        (None, _) => return Ok(Verdict::skip("50000-epoch runs only in the large profile")),
    };
    let rows = read_runs(&dir)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for s0 in [0.5, 1.0, 1.5, 1.7, 1.9] {
        let (pass, detail) = sigma_check(&rows, &[("sigma0", s0)], None, 1e-1);
        ok &= pass;
        parts.push(format!("sigma0={s0} {detail}"));
    }
    Ok(Verdict::check(ok, format!("partial data: {}", parts.join("; "))))
}

fn bp_forward(p: Profile) -> Outcome {
    let dir = match (training_dir("BP_FORWARD"), p) {
        (Some(d), _) => d,
        (None, Profile::Large) => train_experiment(Experiment::BpForward, &network_overrides(p))?,
        (None, _) => return Ok(Verdict::skip("stretch goal, large profile only")),
    };
    let rows = read_runs(&dir)?;
    let rho = values(&rows, &[], None, "final_error");
    let phi = values(&rows, &[], None, "phi_error");
    let good = rows.iter().filter(|r| num(r, "final_error").is_some_and(|e| e <= 1e-1) && num(r, "phi_error").is_some_and(|e| e <= 1e-1)).count();
    Ok(Verdict::check(good >= SEEDS_REQUIRED, format!("rho {} phi {} ({good} seeds with both <= 1e-1)", fmt_values(&rho), fmt_values(&phi))))
}

fn bp_inverse(p: Profile) -> Outcome {
    let dir = match (training_dir("BP_INVERSE"), p) {
        (Some(d), _) => d,
        (None, Profile::Large) => {
            let mut o = network_overrides(p);
            o.extend(["problem.kind=\"bp\"".to_string(), "train.method=\"apnn\"".to_string()]);
            train_experiment(Experiment::InverseFull, &o)?
        }
        (None, _) => return Ok(Verdict::skip("stretch goal, large profile only")),
    };
    let (ok, detail) = sigma_check(&read_runs(&dir)?, &[], Some("apnn"), 5e-2);
    Ok(Verdict::check(ok, format!("full data, sigma relative error per seed {detail}")))
}

// ---------------------------------------------------------------- criterion 9

fn determinism() -> Outcome {
    let base = [
        "solver.dx=0.05",
        "solver.dt=5e-4",
        "solver.snapshot_every=20",
        "train.hidden=[6, 6]",
        "train.phi_hidden=[6, 6]",
        "train.epochs=25",
        "train.n_t=3",
        "train.n_x=5",
        "train.log_every=0",
        "output.svg=false",
        "data.n_samples=20",
    ];
    let variants: [&[&str]; 4] = [
        &["train.method=\"apnn\"", "problem.epsilon=1e-3"],
        &["train.method=\"pinn\"", "problem.epsilon=0.1"],
        &["train.inverse=\"full\"", "problem.epsilon=1e-8"],
        &["train.inverse=\"partial\"", "train.validation_fraction=0.25"],
    ];
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (k, extra) in variants.iter().enumerate() {
        let overrides: Vec<String> = base.iter().chain(extra.iter()).map(|s| s.to_string()).collect();
        let cfg = Config::from_str_with("", &overrides).map_err(|e| e.to_string())?;
        let dirs = [scratch.path().join(format!("{k}a")), scratch.path().join(format!("{k}b"))];
        for d in &dirs {
            run::train(&cfg, d).map_err(|e| e.to_string())?;
        }
        for file in [run::METRICS_FILE, run::CONFIG_FILE, "history.csv", "profile.csv"] {
            let read = |d: &PathBuf| std::fs::read(d.join(file)).map_err(|e| format!("{file}: {e}"));
            if read(&dirs[0])? != read(&dirs[1])? {
                return Ok(Verdict::check(false, format!("run {k}: {file} differs between repeats")));
            }
            compared += 1;
        }
    }
    Ok(Verdict::check(true, format!("{} configurations, {compared} files byte-identical across repeats", variants.len())))
}

// ---------------------------------------------------------------- driver

struct Criterion {
    id: &'static str,
    name: &'static str,
    gating: bool,
    budget: Option<Duration>,
    run: Box<dyn Fn() -> Outcome>,
}

fn main() {
    let p = profile();
    println!("acceptance profile: {p:?}");
    let secs = |s: u64| Some(Duration::from_secs(s));
    let criteria = vec![
        Criterion { id: "1", name: "spectral layer", gating: true, budget: secs(1), run: Box::new(spectral_layer) },
        Criterion { id: "2", name: "collision operator", gating: true, budget: secs(1), run: Box::new(collision_properties) },
        Criterion { id: "3", name: "reference solver AP property", gating: true, budget: secs(120), run: Box::new(reference_ap) },
        Criterion { id: "4", name: "differentiation engine", gating: true, budget: secs(30), run: Box::new(differentiation) },
        Criterion { id: "5", name: "loss AP property", gating: true, budget: secs(10), run: Box::new(loss_ap) },
        Criterion { id: "6", name: "forward training table", gating: false, budget: None, run: Box::new(move || table1(p)) },
        Criterion { id: "7a", name: "inverse, full data", gating: false, budget: None, run: Box::new(move || inverse_full(p)) },
        Criterion { id: "7b", name: "inverse, partial data", gating: false, budget: None, run: Box::new(move || inverse_partial(p)) },
        Criterion { id: "8a", name: "Boltzmann-Poisson forward", gating: false, budget: None, run: Box::new(move || bp_forward(p)) },
        Criterion { id: "8b", name: "Boltzmann-Poisson inverse", gating: false, budget: None, run: Box::new(move || bp_inverse(p)) },
        Criterion { id: "9", name: "determinism", gating: true, budget: None, run: Box::new(determinism) },
    ];

    let mut gating_failures = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (c.run)())).unwrap_or_else(|panic| {
            let msg = panic.downcast_ref::<String>().cloned().or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let verdict = match outcome {
            Ok(v) => match c.budget {
                Some(b) => within_budget(v, elapsed, b),
                None => v,
            },
            Err(e) => Verdict::check(false, format!("error: {e}")),
        };
        let tag = match verdict.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        let gate = if c.gating { "" } else { " [non-gating]" };
        println!("criterion {:<2} {tag} {}{gate}: {} ({:.1}s)", c.id, c.name, verdict.detail, elapsed.as_secs_f64());
        if c.gating && verdict.status != Status::Pass {
            gating_failures += 1;
        }
    }
    if gating_failures > 0 {
        println!("{gating_failures} gating criteria failed");
        std::process::exit(1);
    }
    println!("all gating criteria passed");
}
