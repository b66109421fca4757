//! Empirical risks for PINN and APNN heads.
//!
//! Everything is evaluated in ψ-space: kinetic residuals are divided by the
//! Maxwellian, so `f = M(ρ + εψ)` for APNN heads and `f = M ψ_f` for PINN heads.
//! Boundary and initial terms use the velocity quadrature weights; the boundary
//! term is the time integral `Σ_i Δt Σ_{incoming j} w_j |·|²` normalized by the
//! time span, i.e. a mean over the boundary times.

use std::rc::Rc;

use ndarray::Array2;

use crate::collision::{CollisionContext, ScatteringKernel};
use crate::error::{Error, Result};
use crate::hermite::{maxwellian, VelocityGrid};
use crate::net::{EvalSpec, Evaluation, Network};
use crate::problem::ProblemConfig;
use crate::refsolver::Trajectory;
use crate::tape::{Adjoints, Tape, Var};

/// A scalar field that can be evaluated in batches with input derivatives.
pub trait Field {
    fn n_inputs(&self) -> usize;

    fn n_params(&self) -> usize;

    fn evaluate(&self, inputs: &Array2<f64>, spec: &EvalSpec, eval: &mut Evaluation) -> Result<()>;

    /// Accumulates parameter gradients given adjoints of each output stream.
    fn pull_back(&self, eval: &mut Evaluation, adjoints: &[Option<Vec<f64>>], grad: &mut [f64]) -> Result<()>;
}

impl Field for Network {
    fn n_inputs(&self) -> usize {
        Network::n_inputs(self)
    }

    fn n_params(&self) -> usize {
        Network::n_params(self)
    }

    fn evaluate(&self, inputs: &Array2<f64>, spec: &EvalSpec, eval: &mut Evaluation) -> Result<()> {
        if self.n_outputs() != 1 {
            return Err(Error::InvalidArgument("loss heads must have a single output".into()));
        }
        self.forward_into(inputs, spec, eval)
    }

    fn pull_back(&self, eval: &mut Evaluation, adjoints: &[Option<Vec<f64>>], grad: &mut [f64]) -> Result<()> {
        self.backward(eval, adjoints, grad)
    }
}

/// Piecewise-linear lookup of tabulated `(t, x)` or `(t, x, v_j)` data.
///
/// Derivative streams come from finite differences of the table, so a
/// reference solution can stand in for a trained head.
#[derive(Debug, Clone)]
pub struct TableField {
    times: Vec<f64>,
    xs: Vec<f64>,
    nodes: Vec<f64>,
    value: Vec<f64>,
    dt: Vec<f64>,
    dx: Vec<f64>,
    dxx: Vec<f64>,
}

/// First derivative of samples on a (possibly nonuniform) grid, second order throughout.
fn gradient_1d(y: &[f64], h: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n < 3 {
        return vec![if n == 2 { (y[1] - y[0]) / (h[1] - h[0]) } else { 0.0 }; n];
    }
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let (a, b) = (h[i] - h[i - 1], h[i + 1] - h[i]);
        out[i] = (a * a * y[i + 1] - b * b * y[i - 1] + (b * b - a * a) * y[i]) / (a * b * (a + b));
    }
    let (a, b) = (h[1] - h[0], h[2] - h[1]);
    out[0] = (-(2.0 * a + b) * b * y[0] + (a + b).powi(2) * y[1] - a * a * y[2]) / (a * b * (a + b));
    let (a, b) = (h[n - 2] - h[n - 3], h[n - 1] - h[n - 2]);
    out[n - 1] = (b * b * y[n - 3] - (a + b).powi(2) * y[n - 2] + (2.0 * b + a) * a * y[n - 1]) / (a * b * (a + b));
    out
}

fn second_1d(y: &[f64], h: &[f64]) -> Vec<f64> {
    let n = y.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let (a, b) = (h[i] - h[i - 1], h[i + 1] - h[i]);
        out[i] = 2.0 * (b * y[i - 1] - (a + b) * y[i] + a * y[i + 1]) / (a * b * (a + b));
    }
    out[0] = out[1];
    out[n - 1] = out[n - 2];
    out
}

fn bracket_index(grid: &[f64], p: f64) -> (usize, f64) {
    if grid.len() == 1 {
        return (0, 0.0);
    }
    let k = grid.partition_point(|&g| g <= p).clamp(1, grid.len() - 1) - 1;
    let s = ((p - grid[k]) / (grid[k + 1] - grid[k])).clamp(0.0, 1.0);
    (k, s)
}

fn node_index(nodes: &[f64], v: f64) -> Option<usize> {
    nodes.iter().position(|&n| (n - v).abs() <= 1e-9 * (1.0 + n.abs()))
}

impl TableField {
    /// `values` is laid out `[t][x][node]`; pass no nodes for a `(t, x)` field.
    pub fn new(times: Vec<f64>, xs: Vec<f64>, nodes: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let nv = nodes.len().max(1);
        let (nt, nx) = (times.len(), xs.len());
        if nt == 0 || nx == 0 {
            return Err(Error::EmptyData("lookup table has no samples".into()));
        }
        if values.len() != nt * nx * nv {
            return Err(Error::Shape { expected: nt * nx * nv, found: values.len() });
        }
        if times.windows(2).any(|w| w[1] <= w[0]) || xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("lookup axes must be strictly increasing".into()));
        }
        let at = |k: usize, i: usize, j: usize| (k * nx + i) * nv + j;
        let mut dt = vec![0.0; values.len()];
        let mut dx = vec![0.0; values.len()];
        let mut dxx = vec![0.0; values.len()];
        for i in 0..nx {
            for j in 0..nv {
                let col: Vec<f64> = (0..nt).map(|k| values[at(k, i, j)]).collect();
                for (k, d) in gradient_1d(&col, &times).into_iter().enumerate() {
                    dt[at(k, i, j)] = d;
                }
            }
        }
        for k in 0..nt {
            for j in 0..nv {
                let row: Vec<f64> = (0..nx).map(|i| values[at(k, i, j)]).collect();
                let d1 = gradient_1d(&row, &xs);
                let d2 = second_1d(&row, &xs);
                for i in 0..nx {
                    dx[at(k, i, j)] = d1[i];
                    dxx[at(k, i, j)] = d2[i];
                }
            }
        }
        Ok(Self { times, xs, nodes, value: values, dt, dx, dxx })
    }

    fn from_snapshots(traj: &Trajectory, with_nodes: bool, f: impl Fn(&crate::refsolver::KineticState, usize, usize) -> f64) -> Result<Self> {
        let times: Vec<f64> = traj.snapshots.iter().map(|s| s.time).collect();
        let nv = if with_nodes { traj.nodes.len() } else { 1 };
        let mut values = Vec::with_capacity(times.len() * traj.x.len() * nv);
        for s in &traj.snapshots {
            for i in 0..traj.x.len() {
                for j in 0..nv {
                    values.push(f(s, i, j));
                }
            }
        }
        let nodes = if with_nodes { traj.nodes.clone() } else { Vec::new() };
        Self::new(times, traj.x.clone(), nodes, values)
    }

    /// Raw density head `-ln ρ`.
    pub fn density_raw(traj: &Trajectory) -> Result<Self> {
        if traj.snapshots.iter().any(|s| s.rho.values.iter().any(|&r| !(r > 0.0))) {
            return Err(Error::InvalidArgument("density must be positive for the log head".into()));
        }
        Self::from_snapshots(traj, false, |s, i, _| -s.rho.values[i].ln())
    }

    pub fn micro(traj: &Trajectory) -> Result<Self> {
        Self::from_snapshots(traj, true, |s, i, j| s.psi.psi[[i, j]])
    }

    /// `f / M = ρ + εψ`.
    pub fn kinetic(traj: &Trajectory, epsilon: f64) -> Result<Self> {
        Self::from_snapshots(traj, true, |s, i, j| s.rho.values[i] + epsilon * s.psi.psi[[i, j]])
    }

    pub fn potential(traj: &Trajectory) -> Result<Self> {
        Self::from_snapshots(traj, false, |s, i, _| s.phi.values[i])
    }

    fn sample(&self, table: &[f64], t: f64, x: f64, j: usize) -> f64 {
        let nv = self.nodes.len().max(1);
        let nx = self.xs.len();
        let (k, a) = bracket_index(&self.times, t);
        let (i, b) = bracket_index(&self.xs, x);
        let k1 = (k + 1).min(self.times.len() - 1);
        let i1 = (i + 1).min(nx - 1);
        let at = |k: usize, i: usize| table[(k * nx + i) * nv + j];
        let lo = (1.0 - b) * at(k, i) + b * at(k, i1);
        let hi = (1.0 - b) * at(k1, i) + b * at(k1, i1);
        (1.0 - a) * lo + a * hi
    }
}

impl Field for TableField {
    fn n_inputs(&self) -> usize {
        if self.nodes.is_empty() {
            2
        } else {
            3
        }
    }

    fn n_params(&self) -> usize {
        0
    }

    fn evaluate(&self, inputs: &Array2<f64>, spec: &EvalSpec, eval: &mut Evaluation) -> Result<()> {
        if inputs.ncols() != self.n_inputs() {
            return Err(Error::Shape { expected: self.n_inputs(), found: inputs.ncols() });
        }
        let mut tables: Vec<&[f64]> = vec![&self.value];
        for &d in &spec.tangents {
            tables.push(match d {
                0 => &self.dt,
                1 => &self.dx,
                _ => return Err(Error::InvalidArgument("lookup fields differentiate in t and x only".into())),
            });
        }
        match spec.second {
            None => {}
            Some(1) => tables.push(&self.dxx),
            Some(_) => return Err(Error::InvalidArgument("lookup fields provide only ∂_xx".into())),
        }
        let mut rows = Vec::with_capacity(inputs.nrows());
        for r in inputs.rows() {
            let j = if self.nodes.is_empty() {
                0
            } else {
                node_index(&self.nodes, r[2])
                    .ok_or_else(|| Error::GridMismatch(format!("velocity {} is not a table node", r[2])))?
            };
            rows.push((r[0], r[1], j));
        }
        let streams = tables
            .iter()
            .map(|tab| rows.iter().map(|&(t, x, j)| self.sample(tab, t, x, j)).collect())
            .collect();
        *eval = Evaluation::from_streams(spec.clone(), streams)?;
        Ok(())
    }

    fn pull_back(&self, _: &mut Evaluation, _: &[Option<Vec<f64>>], _: &mut [f64]) -> Result<()> {
        Ok(())
    }
}

/// Interior tensor grid plus the boundary times and initial positions derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub x_left: f64,
    pub x_right: f64,
}

impl CollocationSet {
    /// `nt` interior times evenly spaced in `(0, T)` and `nx` interior points in `(x_L, x_R)`.
    pub fn uniform(problem: &ProblemConfig, nt: usize, nx: usize) -> Result<Self> {
        if nt == 0 || nx == 0 {
            return Err(Error::InvalidArgument("collocation counts must be positive".into()));
        }
        let times = (1..=nt).map(|i| problem.t_final * i as f64 / (nt + 1) as f64).collect();
        let len = problem.x_right - problem.x_left;
        let xs = (1..=nx).map(|i| problem.x_left + len * i as f64 / (nx + 1) as f64).collect();
        Ok(Self { times, xs, x_left: problem.x_left, x_right: problem.x_right })
    }

    pub fn n_interior(&self) -> usize {
        self.times.len() * self.xs.len()
    }

    /// `(N₁ = N₂, N₃, N₄)`: interior kinetic points, incoming boundary samples, initial samples.
    pub fn counts(&self, grid: &VelocityGrid) -> (usize, usize, usize) {
        let nv = grid.n_nodes();
        let left = grid.nodes().iter().filter(|&&v| v > 0.0).count();
        let right = grid.nodes().iter().filter(|&&v| v < 0.0).count();
        (self.n_interior() * nv, self.times.len() * (left + right), self.xs.len() * nv)
    }

    fn validate(&self, problem: &ProblemConfig) -> Result<()> {
        if self.times.is_empty() || self.xs.is_empty() {
            return Err(Error::EmptyData("collocation set is empty".into()));
        }
        let inside_t = self.times.iter().all(|&t| (0.0..=problem.t_final).contains(&t));
        let inside_x = self.xs.iter().all(|&x| (problem.x_left..=problem.x_right).contains(&x));
        if !inside_t || !inside_x {
            return Err(Error::InvalidArgument("collocation points outside the domain".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointSample {
    pub t: f64,
    pub x: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocitySample {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub value: f64,
}

/// Observed `ρ`, `g`, `f` and `φ` samples; `g` and `f` live on velocity nodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Observations {
    pub rho: Vec<PointSample>,
    pub g: Vec<VelocitySample>,
    pub f: Vec<VelocitySample>,
    pub phi: Vec<PointSample>,
}

impl Observations {
    pub fn is_empty(&self) -> bool {
        self.rho.is_empty() && self.g.is_empty() && self.f.is_empty() && self.phi.is_empty()
    }
}

/// Penalty weights `λ₁` (boundary), `λ₂` (initial) and the data weights `ω`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub bc: f64,
    pub ic: f64,
    pub poisson: f64,
    pub data_rho: f64,
    pub data_g: f64,
    pub data_f: f64,
    pub data_phi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bc: 1.0, ic: 1.0, poisson: 1.0, data_rho: 1.0, data_g: 1.0, data_f: 1.0, data_phi: 1.0 }
    }
}

/// Unweighted loss terms and the weighted total.
///
/// For PINN heads the kinetic residual is reported in `ge_micro` and `ge_macro` is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ge_macro: f64,
    pub ge_micro: f64,
    pub bc: f64,
    pub ic: f64,
    pub poisson: f64,
    pub phi_bc: f64,
    pub data_rho: f64,
    pub data_g: f64,
    pub data_f: f64,
    pub data_phi: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn terms(&self, w: &LossWeights) -> [(f64, f64); 10] {
        [
            (self.ge_macro, 1.0),
            (self.ge_micro, 1.0),
            (self.bc, w.bc),
            (self.ic, w.ic),
            (self.poisson, w.poisson),
            (self.phi_bc, w.bc),
            (self.data_rho, w.data_rho),
            (self.data_g, w.data_g),
            (self.data_f, w.data_f),
            (self.data_phi, w.data_phi),
        ]
    }

    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        let mut it = self.terms(w).into_iter();
        let (t0, w0) = it.next().expect("nonempty");
        it.fold(w0 * t0, |acc, (t, wt)| acc + wt * t)
    }

    /// Weighted sum of the data-misfit terms.
    pub fn data(&self, w: &LossWeights) -> f64 {
        w.data_rho * self.data_rho + w.data_g * self.data_g + w.data_f * self.data_f + w.data_phi * self.data_phi
    }
}

/// The networks (or lookups) whose risk is evaluated.
#[derive(Clone, Copy)]
pub enum Heads<'a> {
    /// `ρ = exp(−ρ̃(t, x))` and `ψ = ψ̃(t, x, v) − ⟨ψ̃⟩`.
    Apnn { rho: &'a dyn Field, g: &'a dyn Field },
    /// `f = M ψ_f(t, x, v)`.
    Pinn { f: &'a dyn Field },
}

#[derive(Clone, Copy)]
pub struct LossRequest<'a> {
    pub heads: Heads<'a>,
    /// Potential head; required exactly when the problem solves Poisson.
    pub phi: Option<&'a dyn Field>,
    /// Learnable scattering coefficient; `None` uses the problem's kernel.
    pub sigma: Option<f64>,
    pub epsilon: f64,
}

/// Parameter gradients of the total loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossGradients {
    /// `ρ̃` for APNN, `ψ_f` for PINN.
    pub primary: Vec<f64>,
    pub micro: Vec<f64>,
    pub phi: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub gradients: Option<LossGradients>,
}

/// Evaluation buffers reused across calls.
#[derive(Debug, Default)]
pub struct LossWorkspace {
    evals: [Evaluation; 6],
}

const PRIMARY_INT: usize = 0;
const MICRO_INT: usize = 1;
const PRIMARY_AUX: usize = 2;
const MICRO_AUX: usize = 3;
const PHI_INT: usize = 4;
const PHI_AUX: usize = 5;

struct Gathered {
    idx: Rc<Vec<usize>>,
    weights: Rc<Vec<f64>>,
    target: Vec<f64>,
}

/// How kinetic residuals are averaged over velocity nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum VelocityWeighting {
    /// Plain mean of the ψ-space residual.
    #[default]
    Uniform,
    /// Plain mean of the f-space residual, i.e. ψ-space residual scaled by `M(v_j)`.
    Maxwellian,
}

impl std::str::FromStr for VelocityWeighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "maxwellian" => Ok(Self::Maxwellian),
            other => Err(Error::InvalidArgument(format!("unknown velocity weighting `{other}` (expected uniform | maxwellian)"))),
        }
    }
}

impl std::fmt::Display for VelocityWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Maxwellian => "maxwellian",
        })
    }
}

/// Precomputed inputs and index maps for one problem, collocation set and dataset.
pub struct LossAssembler {
    problem: ProblemConfig,
    ctx: CollisionContext,
    colloc: CollocationSet,
    weights: LossWeights,
    kinetic_weights: Option<Rc<Vec<f64>>>,
    n_v: usize,
    k: Rc<Array2<f64>>,
    k_unit: Option<Rc<Array2<f64>>>,
    c: Rc<Array2<f64>>,
    w: Rc<Vec<f64>>,
    vw: Rc<Vec<f64>>,
    v_tiled: Rc<Vec<f64>>,
    two_v_tiled: Rc<Vec<f64>>,
    tx: Array2<f64>,
    txv: Array2<f64>,
    aux: Array2<f64>,
    auxv: Array2<f64>,
    phi_x_given: Vec<f64>,
    doping: Vec<f64>,
    bc: Gathered,
    ic: Gathered,
    phi_bc: Gathered,
    data_rho: Option<Gathered>,
    data_g: Option<Gathered>,
    data_f: Option<Gathered>,
    data_phi: Option<Gathered>,
}

fn with_velocity(rows: &Array2<f64>, nodes: &[f64]) -> Array2<f64> {
    let nv = nodes.len();
    Array2::from_shape_fn((rows.nrows() * nv, 3), |(r, c)| if c < 2 { rows[[r / nv, c]] } else { nodes[r % nv] })
}

impl LossAssembler {
    pub fn new(problem: &ProblemConfig, colloc: CollocationSet, weights: LossWeights, data: Observations) -> Result<Self> {
        problem.validate()?;
        colloc.validate(problem)?;
        let grid = VelocityGrid::new(problem.n_velocity)?;
        let ctx = CollisionContext::new(grid.clone(), problem.kernel.clone())?;
        let nodes = grid.nodes().to_vec();
        let nv = nodes.len();
        let (nt, nx) = (colloc.times.len(), colloc.xs.len());

        let tx = Array2::from_shape_fn((nt * nx, 2), |(r, c)| if c == 0 { colloc.times[r / nx] } else { colloc.xs[r % nx] });
        let txv = with_velocity(&tx, &nodes);
        let n_int = nt * nx;
        let tile = |f: &dyn Fn(f64) -> f64| -> Rc<Vec<f64>> { Rc::new((0..n_int * nv).map(|r| f(nodes[r % nv])).collect()) };
        let v_tiled = tile(&|v| v);
        let two_v_tiled = tile(&|v| 2.0 * v);
        let phi_x_given = (0..n_int).map(|r| problem.given_potential_gradient(tx[[r, 1]])).collect();
        let doping = (0..n_int).map(|r| problem.doping(tx[[r, 1]])).collect();

        // Auxiliary rows: boundary (t_i, x_L), (t_i, x_R) pairs, initial (0, x_i), then data sites.
        let mut aux_rows: Vec<[f64; 2]> = Vec::new();
        for &t in &colloc.times {
            aux_rows.push([t, colloc.x_left]);
            aux_rows.push([t, colloc.x_right]);
        }
        for &x in &colloc.xs {
            aux_rows.push([0.0, x]);
        }
        let w = grid.weights().to_vec();
        let mut bc = Gathered { idx: Rc::default(), weights: Rc::default(), target: Vec::new() };
        let (mut idx, mut wts) = (Vec::new(), Vec::new());
        for i in 0..nt {
            for (end, a) in [(0, problem.inflow_left), (1, problem.inflow_right)] {
                for j in 0..nv {
                    let incoming = if end == 0 { nodes[j] > 0.0 } else { nodes[j] < 0.0 };
                    if incoming {
                        idx.push((2 * i + end) * nv + j);
                        wts.push(w[j] / nt as f64);
                        bc.target.push(a);
                    }
                }
            }
        }
        bc.idx = Rc::new(idx);
        bc.weights = Rc::new(wts);
        let ic = Gathered {
            idx: Rc::new((0..nx * nv).map(|k| 2 * nt * nv + k).collect()),
            weights: Rc::new((0..nx * nv).map(|k| w[k % nv] / nx as f64).collect()),
            target: vec![problem.initial_density; nx * nv],
        };
        let phi_bc = Gathered {
            idx: Rc::new((0..2 * nt).collect()),
            weights: Rc::new(vec![1.0 / (2 * nt) as f64; 2 * nt]),
            target: (0..2 * nt).map(|r| if r % 2 == 0 { 0.0 } else { problem.bias_voltage }).collect(),
        };

        let point_data = |samples: &[PointSample], rows: &mut Vec<[f64; 2]>| -> Option<Gathered> {
            if samples.is_empty() {
                return None;
            }
            let start = rows.len();
            rows.extend(samples.iter().map(|s| [s.t, s.x]));
            Some(Gathered {
                idx: Rc::new((start..rows.len()).collect()),
                weights: Rc::new(vec![1.0 / samples.len() as f64; samples.len()]),
                target: samples.iter().map(|s| s.value).collect(),
            })
        };
        let velocity_data = |samples: &[VelocitySample], rows: &mut Vec<[f64; 2]>| -> Result<Option<Gathered>> {
            if samples.is_empty() {
                return Ok(None);
            }
            let start = rows.len();
            let mut idx = Vec::with_capacity(samples.len());
            let mut maxw = Vec::with_capacity(samples.len());
            for (k, s) in samples.iter().enumerate() {
                let j = node_index(&nodes, s.v)
                    .ok_or_else(|| Error::GridMismatch(format!("observation velocity {} is not a grid node", s.v)))?;
                rows.push([s.t, s.x]);
                idx.push((start + k) * nv + j);
                maxw.push(maxwellian(nodes[j]));
            }
            Ok(Some(Gathered { idx: Rc::new(idx), weights: Rc::new(maxw), target: samples.iter().map(|s| s.value).collect() }))
        };
        let data_rho = point_data(&data.rho, &mut aux_rows);
        let data_g = velocity_data(&data.g, &mut aux_rows)?;
        let data_f = velocity_data(&data.f, &mut aux_rows)?;
        let data_phi = point_data(&data.phi, &mut aux_rows);
        let aux = Array2::from_shape_fn((aux_rows.len(), 2), |(r, c)| aux_rows[r][c]);
        let auxv = with_velocity(&aux, &nodes);

        let k_unit = match problem.kernel {
            ScatteringKernel::Constant(_) => {
                let unit = CollisionContext::new(grid.clone(), ScatteringKernel::Constant(1.0))?;
                Some(Rc::new(unit.collision_matrix()))
            }
            ScatteringKernel::Tabulated(_) => None,
        };
        Ok(Self {
            problem: problem.clone(),
            k: Rc::new(ctx.collision_matrix()),
            k_unit,
            c: Rc::new(grid.deriv().clone()),
            vw: Rc::new(nodes.iter().zip(&w).map(|(v, w)| v * w).collect()),
            w: Rc::new(w),
            ctx,
            colloc,
            weights,
            kinetic_weights: None,
            n_v: nv,
            v_tiled,
            two_v_tiled,
            tx,
            txv,
            aux,
            auxv,
            phi_x_given,
            doping,
            bc,
            ic,
            phi_bc,
            data_rho,
            data_g,
            data_f,
            data_phi,
        })
    }

    pub fn problem(&self) -> &ProblemConfig {
        &self.problem
    }

    pub fn context(&self) -> &CollisionContext {
        &self.ctx
    }

    pub fn collocation(&self) -> &CollocationSet {
        &self.colloc
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: LossWeights) {
        self.weights = weights;
    }

    pub fn with_velocity_weighting(mut self, weighting: VelocityWeighting) -> Self {
        self.kinetic_weights = match weighting {
            VelocityWeighting::Uniform => None,
            VelocityWeighting::Maxwellian => {
                let n = self.v_tiled.len();
                Some(Rc::new(self.v_tiled.iter().map(|&v| maxwellian(v).powi(2) / n as f64).collect()))
            }
        };
        self
    }

    fn kinetic_mean_square(&self, tape: &mut Tape, r: Var) -> Result<Var> {
        match &self.kinetic_weights {
            Some(w) => tape.sum_squares(r, Some(w.clone()), 1.0),
            None => tape.mean_square(r),
        }
    }

    /// Total risk and, if requested, its parameter gradients.
    pub fn evaluate(&self, req: &LossRequest, ws: &mut LossWorkspace, with_grad: bool) -> Result<LossOutput> {
        self.run(req, ws, with_grad, false)
    }

    pub fn apnn_loss(&self, rho: &dyn Field, g: &dyn Field, phi: Option<&dyn Field>, epsilon: f64) -> Result<LossBreakdown> {
        let req = LossRequest { heads: Heads::Apnn { rho, g }, phi, sigma: None, epsilon };
        Ok(self.run(&req, &mut LossWorkspace::default(), false, false)?.breakdown)
    }

    pub fn pinn_loss(&self, f: &dyn Field, phi: Option<&dyn Field>, epsilon: f64) -> Result<LossBreakdown> {
        let req = LossRequest { heads: Heads::Pinn { f }, phi, sigma: None, epsilon };
        Ok(self.run(&req, &mut LossWorkspace::default(), false, false)?.breakdown)
    }

    /// Risk of the limit system: micro residual replaced by the limit residual, `ε = 0` in BC/IC.
    pub fn limit_loss(&self, rho: &dyn Field, g: &dyn Field, phi: Option<&dyn Field>) -> Result<LossBreakdown> {
        let req = LossRequest { heads: Heads::Apnn { rho, g }, phi, sigma: None, epsilon: 0.0 };
        Ok(self.run(&req, &mut LossWorkspace::default(), false, true)?.breakdown)
    }

    fn check_field(f: &dyn Field, n_inputs: usize, what: &str) -> Result<()> {
        if f.n_inputs() != n_inputs {
            return Err(Error::InvalidArgument(format!("{what} head takes {n_inputs} inputs, got {}", f.n_inputs())));
        }
        Ok(())
    }

    fn run(&self, req: &LossRequest, ws: &mut LossWorkspace, with_grad: bool, limit: bool) -> Result<LossOutput> {
        let eps = req.epsilon;
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be finite and >= 0, got {eps}")));
        }
        if matches!(req.heads, Heads::Pinn { .. }) && eps == 0.0 {
            return Err(Error::InvalidArgument("PINN risk is singular at epsilon = 0".into()));
        }
        match (self.problem.uses_poisson(), req.phi) {
            (true, None) => return Err(Error::InvalidArgument("Boltzmann-Poisson risk needs a potential head".into())),
            (false, Some(_)) => return Err(Error::InvalidArgument("given-potential problem takes no potential head".into())),
            (_, Some(p)) => Self::check_field(p, 2, "potential")?,
            _ => {}
        }
        if req.sigma.is_some() && self.k_unit.is_none() {
            return Err(Error::InvalidArgument("a learnable scattering coefficient needs a constant kernel".into()));
        }

        let nv = self.n_v;
        let first = EvalSpec::first(&[0, 1]);
        let primal = EvalSpec::primal();
        let (primary, micro): (&dyn Field, Option<&dyn Field>) = match req.heads {
            Heads::Apnn { rho, g } => {
                Self::check_field(rho, 2, "density")?;
                Self::check_field(g, 3, "micro")?;
                (rho, Some(g))
            }
            Heads::Pinn { f } => {
                Self::check_field(f, 3, "kinetic")?;
                (f, None)
            }
        };
        let primary_int = if micro.is_some() { &self.tx } else { &self.txv };
        let primary_aux = if micro.is_some() { &self.aux } else { &self.auxv };
        primary.evaluate(primary_int, &first, &mut ws.evals[PRIMARY_INT])?;
        primary.evaluate(primary_aux, &primal, &mut ws.evals[PRIMARY_AUX])?;
        if let Some(g) = micro {
            g.evaluate(&self.txv, &first, &mut ws.evals[MICRO_INT])?;
            g.evaluate(&self.auxv, &primal, &mut ws.evals[MICRO_AUX])?;
        }
        if let Some(p) = req.phi {
            p.evaluate(&self.tx, &EvalSpec::with_second(&[1], 1), &mut ws.evals[PHI_INT])?;
            p.evaluate(&self.aux, &primal, &mut ws.evals[PHI_AUX])?;
        }

        let mut tape = Tape::new();
        let leaves = |tape: &mut Tape, e: &Evaluation| -> Vec<Var> {
            (0..e.spec().n_streams()).map(|k| tape.leaf(e.stream(k).to_vec())).collect()
        };
        let p_int = leaves(&mut tape, &ws.evals[PRIMARY_INT]);
        let p_aux = leaves(&mut tape, &ws.evals[PRIMARY_AUX]);
        let (m_int, m_aux) = if micro.is_some() {
            (leaves(&mut tape, &ws.evals[MICRO_INT]), leaves(&mut tape, &ws.evals[MICRO_AUX]))
        } else {
            (Vec::new(), Vec::new())
        };
        let (phi_int, phi_aux) = if req.phi.is_some() {
            (leaves(&mut tape, &ws.evals[PHI_INT]), leaves(&mut tape, &ws.evals[PHI_AUX]))
        } else {
            (Vec::new(), Vec::new())
        };
        let sigma = req.sigma.map(|s| tape.param(0, s));

        let phi_x = match phi_int.first() {
            Some(_) => phi_int[1],
            None => tape.constant(self.phi_x_given.clone()),
        };
        let terms = Terms { a: self, nv, sigma };
        let mut b = LossBreakdown::default();
        let mut parts: Vec<(Var, f64)> = Vec::new();
        let mut record = |tape: &Tape, v: Var, w: f64, slot: &mut f64| {
            *slot = tape.scalar(v);
            parts.push((v, w));
        };

        // density on the interior grid and f/M on the auxiliary rows
        let (rho_int, fm_aux, psi_aux, rho_aux);
        match micro {
            Some(_) => {
                let neg = tape.scale(p_int[0], -1.0);
                let rho = tape.exp(neg);
                let rt = tape.mul(rho, p_int[1])?;
                let rho_t = tape.scale(rt, -1.0);
                let rx = tape.mul(rho, p_int[2])?;
                let rho_x = tape.scale(rx, -1.0);
                let psi = terms.centre(&mut tape, m_int[0])?;
                let psi_t = terms.centre(&mut tape, m_int[1])?;
                let psi_x = terms.centre(&mut tape, m_int[2])?;

                let dvg = terms.dv(&mut tape, psi)?;
                let flux_x = tape.group_dot(psi_x, self.vw.clone())?;
                let bdv = tape.group_dot(dvg, self.w.clone())?;
                let force = tape.mul(phi_x, bdv)?;
                let m1 = tape.add(rho_t, flux_x)?;
                let macro_res = tape.add(m1, force)?;

                let rphi = tape.mul(rho, phi_x)?;
                let rphi2 = tape.scale(rphi, 2.0);
                let drive = tape.sub(rho_x, rphi2)?;
                let drive_v = tape.repeat(drive, nv)?;
                let vdrive = tape.mul_const(drive_v, self.v_tiled.clone())?;
                let q = terms.collide(&mut tape, psi)?;
                let mut micro_res = tape.sub(vdrive, q)?;
                if !limit && eps != 0.0 {
                    let adv = tape.mul_const(psi_x, self.v_tiled.clone())?;
                    let phi_v = tape.repeat(phi_x, nv)?;
                    let fv = tape.mul(phi_v, dvg)?;
                    let transport = tape.add(adv, fv)?;
                    let transport = terms.centre(&mut tape, transport)?;
                    let a = tape.scale(psi_t, eps * eps);
                    let c = tape.scale(transport, eps);
                    let corr = tape.add(a, c)?;
                    micro_res = tape.add(micro_res, corr)?;
                }
                let v = tape.mean_square(macro_res)?;
                record(&tape, v, 1.0, &mut b.ge_macro);
                let v = self.kinetic_mean_square(&mut tape, micro_res)?;
                record(&tape, v, 1.0, &mut b.ge_micro);

                let neg = tape.scale(p_aux[0], -1.0);
                let ra = tape.exp(neg);
                let pa = terms.centre(&mut tape, m_aux[0])?;
                let rep = tape.repeat(ra, nv)?;
                fm_aux = if !limit && eps != 0.0 {
                    let s = tape.scale(pa, eps);
                    tape.add(rep, s)?
                } else {
                    rep
                };
                rho_int = rho;
                psi_aux = pa;
                rho_aux = ra;
            }
            None => {
                let f = p_int[0];
                let dvf = terms.dv(&mut tape, f)?;
                let q = terms.collide(&mut tape, f)?;
                let a = tape.scale(p_int[1], eps);
                let adv = tape.mul_const(p_int[2], self.v_tiled.clone())?;
                let phi_v = tape.repeat(phi_x, nv)?;
                let force = tape.mul(phi_v, dvf)?;
                let qs = tape.scale(q, 1.0 / eps);
                let r1 = tape.add(a, adv)?;
                let r2 = tape.add(r1, force)?;
                let res = tape.sub(r2, qs)?;
                let v = self.kinetic_mean_square(&mut tape, res)?;
                record(&tape, v, 1.0, &mut b.ge_micro);

                rho_int = tape.group_dot(f, self.w.clone())?;
                fm_aux = p_aux[0];
                let centred = terms.centre(&mut tape, fm_aux)?;
                psi_aux = tape.scale(centred, 1.0 / eps);
                rho_aux = tape.group_dot(fm_aux, self.w.clone())?;
            }
        }

        let v = terms.misfit(&mut tape, fm_aux, &self.bc, None)?;
        record(&tape, v, self.weights.bc, &mut b.bc);
        let v = terms.misfit(&mut tape, fm_aux, &self.ic, None)?;
        record(&tape, v, self.weights.ic, &mut b.ic);

        if req.phi.is_some() {
            let bphi = tape.scale(phi_int[2], self.problem.debye_beta);
            let c = tape.constant(self.doping.clone());
            let charge = tape.sub(rho_int, c)?;
            let res = tape.sub(bphi, charge)?;
            let v = tape.mean_square(res)?;
            record(&tape, v, self.weights.poisson, &mut b.poisson);
            let v = terms.misfit(&mut tape, phi_aux[0], &self.phi_bc, None)?;
            record(&tape, v, self.weights.bc, &mut b.phi_bc);
        }

        if let Some(d) = &self.data_rho {
            let v = terms.misfit(&mut tape, rho_aux, d, None)?;
            record(&tape, v, self.weights.data_rho, &mut b.data_rho);
        }
        if let Some(d) = &self.data_g {
            let v = terms.misfit(&mut tape, psi_aux, d, Some(d.weights.clone()))?;
            record(&tape, v, self.weights.data_g, &mut b.data_g);
        }
        if let Some(d) = &self.data_f {
            let v = terms.misfit(&mut tape, fm_aux, d, Some(d.weights.clone()))?;
            record(&tape, v, self.weights.data_f, &mut b.data_f);
        }
        if let Some(d) = &self.data_phi {
            let Some(&phi_a) = phi_aux.first() else {
                return Err(Error::InvalidArgument("potential observations need a potential head".into()));
            };
            let v = terms.misfit(&mut tape, phi_a, d, None)?;
            record(&tape, v, self.weights.data_phi, &mut b.data_phi);
        }

        let mut root = tape.scale(parts[0].0, parts[0].1);
        for &(v, w) in &parts[1..] {
            let s = tape.scale(v, w);
            root = tape.add(root, s)?;
        }
        b.total = b.weighted_total(&self.weights);
        debug_assert_eq!(b.total.to_bits(), tape.scalar(root).to_bits());
        if !with_grad {
            return Ok(LossOutput { breakdown: b, gradients: None });
        }

        let mut adj = tape.backward(root)?;
        let mut grads = LossGradients {
            primary: vec![0.0; primary.n_params()],
            micro: vec![0.0; micro.map_or(0, |m| m.n_params())],
            phi: vec![0.0; req.phi.map_or(0, |p| p.n_params())],
            sigma: adj.param(0),
        };
        let mut pull = |field: &dyn Field, slot: usize, vars: &[Var], grad: &mut [f64], adj: &mut Adjoints| -> Result<()> {
            let a: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| adj.take(v)).collect();
            field.pull_back(&mut ws.evals[slot], &a, grad)
        };
        pull(primary, PRIMARY_INT, &p_int, &mut grads.primary, &mut adj)?;
        pull(primary, PRIMARY_AUX, &p_aux, &mut grads.primary, &mut adj)?;
        if let Some(g) = micro {
            pull(g, MICRO_INT, &m_int, &mut grads.micro, &mut adj)?;
            pull(g, MICRO_AUX, &m_aux, &mut grads.micro, &mut adj)?;
        }
        if let Some(p) = req.phi {
            pull(p, PHI_INT, &phi_int, &mut grads.phi, &mut adj)?;
            pull(p, PHI_AUX, &phi_aux, &mut grads.phi, &mut adj)?;
        }
        Ok(LossOutput { breakdown: b, gradients: Some(grads) })
    }
}

struct Terms<'a> {
    a: &'a LossAssembler,
    nv: usize,
    sigma: Option<Var>,
}

impl Terms<'_> {
    /// `(I − Π)` on every velocity block.
    fn centre(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let m = tape.group_dot(x, self.a.w.clone())?;
        let r = tape.repeat(m, self.nv)?;
        tape.sub(x, r)
    }

    /// `∂_v(Mψ)/M = Cψ − 2vψ`.
    fn dv(&self, tape: &mut Tape, psi: Var) -> Result<Var> {
        let c = tape.group_matvec(psi, self.a.c.clone())?;
        let s = tape.mul_const(psi, self.a.two_v_tiled.clone())?;
        tape.sub(c, s)
    }

    fn collide(&self, tape: &mut Tape, psi: Var) -> Result<Var> {
        match (self.sigma, &self.a.k_unit) {
            (Some(s), Some(k)) => {
                let q = tape.group_matvec(psi, k.clone())?;
                tape.mul_scalar(q, s)
            }
            _ => tape.group_matvec(psi, self.a.k.clone()),
        }
    }

    /// `Σ_k c_k (scale_k x[idx_k] − target_k)²` with the set's quadrature or mean weights.
    fn misfit(&self, tape: &mut Tape, x: Var, set: &Gathered, scale: Option<Rc<Vec<f64>>>) -> Result<Var> {
        let g = tape.gather(x, set.idx.clone())?;
        let scaled = scale.is_some();
        let g = match scale {
            Some(s) => tape.mul_const(g, s)?,
            None => g,
        };
        let t = tape.constant(set.target.clone());
        let r = tape.sub(g, t)?;
        // scaled sets carry Maxwellian factors, not quadrature weights: plain mean
        if scaled {
            tape.mean_square(r)
        } else {
            tape.sum_squares(r, Some(set.weights.clone()), 1.0)
        }
    }
}

fn require_samples(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyData(format!("no {what} observations")));
    }
    Ok(())
}

fn mean_square(res: impl Iterator<Item = f64>) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(res.collect());
    tape.mean_square(v).map(|s| tape.scalar(s)).unwrap_or(0.0)
}

fn eval_rows(field: &dyn Field, rows: Vec<[f64; 3]>, n_inputs: usize) -> Result<Vec<f64>> {
    let inputs = Array2::from_shape_fn((rows.len(), n_inputs), |(r, c)| rows[r][c]);
    let mut e = Evaluation::default();
    field.evaluate(&inputs, &EvalSpec::primal(), &mut e)?;
    Ok(e.values().to_vec())
}

/// `(ω^ρ/N) Σ |ρ − ρ_obs|² + (ω^g/N) Σ |Mψ − g_obs|²` for APNN heads.
/// Partial data (no `g` samples) drops the `g` term.
pub fn data_loss_apnn(rho: &dyn Field, g: &dyn Field, grid: &VelocityGrid, data: &Observations, weights: &LossWeights) -> Result<f64> {
    require_samples(data.rho.len() + data.g.len(), "density or micro")?;
    let mut total = 0.0;
    if !data.rho.is_empty() {
        let raw = eval_rows(rho, data.rho.iter().map(|s| [s.t, s.x, 0.0]).collect(), 2)?;
        total += weights.data_rho * mean_square(raw.iter().zip(&data.rho).map(|(r, s)| (-r).exp() - s.value));
    }
    if !data.g.is_empty() {
        let nodes = grid.nodes();
        let w = grid.weights();
        let nv = nodes.len();
        let rows = data.g.iter().flat_map(|s| nodes.iter().map(move |&v| [s.t, s.x, v])).collect();
        let raw = eval_rows(g, rows, 3)?;
        let mut res = Vec::with_capacity(data.g.len());
        for (k, s) in data.g.iter().enumerate() {
            let blk = &raw[k * nv..(k + 1) * nv];
            let mean: f64 = blk.iter().zip(w).map(|(a, b)| a * b).sum();
            let j = node_index(nodes, s.v).ok_or_else(|| Error::GridMismatch(format!("velocity {} is not a grid node", s.v)))?;
            res.push((blk[j] - mean) * maxwellian(nodes[j]) - s.value);
        }
        total += weights.data_g * mean_square(res.into_iter());
    }
    Ok(total)
}

/// `(ω^f/N) Σ |M ψ_f − f|²`.
pub fn data_loss_pinn(f: &dyn Field, data: &Observations, weights: &LossWeights) -> Result<f64> {
    require_samples(data.f.len(), "kinetic")?;
    let raw = eval_rows(f, data.f.iter().map(|s| [s.t, s.x, s.v]).collect(), 3)?;
    Ok(weights.data_f * mean_square(raw.iter().zip(&data.f).map(|(p, s)| p * maxwellian(s.v) - s.value)))
}

/// `(ω^φ/N) Σ |φ − φ_obs|²`.
pub fn data_loss_phi(phi: &dyn Field, data: &Observations, weights: &LossWeights) -> Result<f64> {
    require_samples(data.phi.len(), "potential")?;
    let raw = eval_rows(phi, data.phi.iter().map(|s| [s.t, s.x, 0.0]).collect(), 2)?;
    Ok(weights.data_phi * mean_square(raw.iter().zip(&data.phi).map(|(p, s)| p - s.value)))
}
