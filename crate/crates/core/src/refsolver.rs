//! Deterministic reference solvers.
//!
//! [`KineticSolver`] advances the micro-macro system with an IMEX splitting:
//! transport, force and source terms of the micro equation are explicit
//! (upwind in `x` for `v ∂_x g`), the collision term is implicit, and the
//! density is then updated conservatively with the post-collision micro
//! field. The scheme stays stable and consistent as `ε → 0`, where it
//! reduces to an explicit discretization of the drift-diffusion equation
//! solved directly by [`solve_drift_diffusion`].

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, LU, Dyn};

use crate::collision::{CollisionContext, ScatteringKernel};
use crate::error::{Error, Result};
use crate::hermite::VelocityGrid;
use crate::micromacro::{bracket, bracket_v_derivative, flux, MacroField, MicroField, PotentialField};
use crate::problem::ProblemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryKind {
    Inflow,
    Periodic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub dx: f64,
    pub dt: f64,
    pub t_final: f64,
    pub bc: BoundaryKind,
    /// Record a snapshot every this many steps (the final step is always recorded).
    pub snapshot_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { dx: 0.01, dt: 5e-5, t_final: 0.1, bc: BoundaryKind::Inflow, snapshot_every: 100 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0) || !(self.dt > 0.0) || !(self.t_final >= 0.0) {
            return Err(Error::InvalidArgument("dx, dt must be positive and t_final non-negative".into()));
        }
        if self.snapshot_every == 0 {
            return Err(Error::InvalidArgument("snapshot_every must be positive".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }

    /// Number of cells on `[x_left, x_right]`.
    pub fn n_cells(&self, problem: &ProblemConfig) -> usize {
        ((problem.x_right - problem.x_left) / self.dx).round() as usize
    }
}

/// Spatial nodes: `N + 1` points for inflow, `N` points for periodic.
pub fn spatial_nodes(problem: &ProblemConfig, cfg: &SolverConfig) -> Vec<f64> {
    let n = cfg.n_cells(problem);
    let count = match cfg.bc {
        BoundaryKind::Inflow => n + 1,
        BoundaryKind::Periodic => n,
    };
    (0..count).map(|i| problem.x_left + i as f64 * cfg.dx).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KineticState {
    pub time: f64,
    pub step: usize,
    pub rho: MacroField,
    pub psi: MicroField,
    pub phi: PotentialField,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub nodes: Vec<f64>,
    pub snapshots: Vec<KineticState>,
}

impl Trajectory {
    pub fn last(&self) -> &KineticState {
        self.snapshots.last().expect("trajectory always holds the initial state")
    }

    /// `t,x,rho[,phi]` with 17 significant digits.
    pub fn density_csv(&self, with_phi: bool) -> String {
        let mut out = String::from(if with_phi { "t,x,rho,phi\n" } else { "t,x,rho\n" });
        for s in &self.snapshots {
            for (i, x) in self.x.iter().enumerate() {
                write!(out, "{:.16e},{:.16e},{:.16e}", s.time, x, s.rho.values[i]).unwrap();
                if with_phi {
                    write!(out, ",{:.16e}", s.phi.values[i]).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    /// `t,x,v,psi` with 17 significant digits.
    pub fn psi_csv(&self) -> String {
        let mut out = String::from("t,x,v,psi\n");
        for s in &self.snapshots {
            for (i, x) in self.x.iter().enumerate() {
                for (j, v) in self.nodes.iter().enumerate() {
                    writeln!(out, "{:.16e},{:.16e},{:.16e},{:.16e}", s.time, x, v, s.psi.psi[[i, j]]).unwrap();
                }
            }
        }
        out
    }
}

enum CollisionSolve {
    /// Componentwise `1 / (ε² + Δt λ_j)`.
    Diagonal(Vec<f64>),
    Dense(LU<f64, Dyn, Dyn>),
}

/// AP micro-macro IMEX solver.
pub struct KineticSolver {
    problem: ProblemConfig,
    cfg: SolverConfig,
    ctx: CollisionContext,
    x: Vec<f64>,
    given_phi: PotentialField,
    collision: CollisionSolve,
}

impl KineticSolver {
    pub fn new(problem: &ProblemConfig, cfg: &SolverConfig) -> Result<Self> {
        problem.validate()?;
        cfg.validate()?;
        if !(problem.epsilon > 0.0) {
            return Err(Error::InvalidArgument("kinetic solver needs epsilon > 0".into()));
        }
        if problem.uses_poisson() && cfg.bc == BoundaryKind::Periodic {
            return Err(Error::InvalidArgument("Poisson coupling needs Dirichlet ends".into()));
        }
        let grid = VelocityGrid::new(problem.n_velocity)?;
        let ctx = CollisionContext::new(grid, problem.kernel.clone())?;
        let x = spatial_nodes(problem, cfg);
        let given_phi = if problem.uses_poisson() {
            PotentialField::zeros(x.len(), cfg.dx)
        } else {
            PotentialField::with_gradient(
                x.iter().map(|&xi| problem.given_potential(xi)).collect(),
                x.iter().map(|&xi| problem.given_potential_gradient(xi)).collect(),
                cfg.dx,
            )
        };
        let eps2 = problem.epsilon * problem.epsilon;
        let collision = match ctx.kernel() {
            ScatteringKernel::Constant(_) => {
                CollisionSolve::Diagonal(ctx.lambda_nodes().iter().map(|l| 1.0 / (eps2 + cfg.dt * l)).collect())
            }
            ScatteringKernel::Tabulated(_) => {
                // the rank-one `1 wᵀ` term fixes the mean and leaves zero-mean solutions unchanged
                let k = ctx.collision_matrix();
                let w = ctx.grid().weights();
                let n = k.nrows();
                let a = DMatrix::from_fn(n, n, |i, j| {
                    let diag = if i == j { eps2 } else { 0.0 };
                    diag - cfg.dt * k[[i, j]] + w[j]
                });
                CollisionSolve::Dense(a.lu())
            }
        };
        Ok(Self { problem: problem.clone(), cfg: cfg.clone(), ctx, x, given_phi, collision })
    }

    /// Replaces the given potential (semiconductor problem only).
    pub fn with_potential(mut self, phi: PotentialField) -> Result<Self> {
        if self.problem.uses_poisson() {
            return Err(Error::InvalidArgument("the Poisson problem computes its own potential".into()));
        }
        if phi.values.len() != self.x.len() {
            return Err(Error::Shape { expected: self.x.len(), found: phi.values.len() });
        }
        self.given_phi = phi;
        Ok(self)
    }

    pub fn context(&self) -> &CollisionContext {
        &self.ctx
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn problem(&self) -> &ProblemConfig {
        &self.problem
    }

    /// Maxwellian initial data `f = ρ_0 M`.
    pub fn initial_state(&self) -> Result<KineticState> {
        let rho = MacroField::new(vec![self.problem.initial_density; self.x.len()], self.cfg.dx);
        self.state_from(0, rho, MicroField::zeros(self.x.len(), self.ctx.grid().n_nodes()))
    }

    /// Builds a state at `step` from a density and micro field.
    pub fn state_from(&self, step: usize, rho: MacroField, psi: MicroField) -> Result<KineticState> {
        let phi = self.potential_for(&rho)?;
        Ok(KineticState { time: step as f64 * self.cfg.dt, step, rho, psi, phi })
    }

    fn potential_for(&self, rho: &MacroField) -> Result<PotentialField> {
        if self.problem.uses_poisson() {
            solve_poisson(rho, &self.problem, &self.x)
        } else {
            Ok(self.given_phi.clone())
        }
    }

    fn periodic(&self) -> bool {
        self.cfg.bc == BoundaryKind::Periodic
    }

    fn neighbours(&self, i: usize) -> (usize, usize) {
        let n = self.x.len();
        if self.periodic() {
            ((i + n - 1) % n, (i + 1) % n)
        } else {
            (i - 1, i + 1)
        }
    }

    fn interior(&self) -> std::ops::Range<usize> {
        if self.periodic() {
            0..self.x.len()
        } else {
            1..self.x.len() - 1
        }
    }

    /// Inflow rows: incoming nodes carry `(F/M − ρ)/ε`, outgoing nodes are
    /// extrapolated from the neighbour and shifted to keep `⟨ψ⟩ = 0`.
    fn apply_inflow(&self, psi: &mut MicroField, rho: &MacroField) {
        let n = self.x.len();
        let eps = self.problem.epsilon;
        let v = self.ctx.grid().nodes();
        let w = self.ctx.grid().weights();
        for (row, inner, data, incoming) in [
            (0usize, 1usize, self.problem.inflow_left, 1.0f64),
            (n - 1, n - 2, self.problem.inflow_right, -1.0f64),
        ] {
            let gap = data - rho.values[row];
            let value = if gap == 0.0 { 0.0 } else { gap / eps };
            let mut mean = 0.0;
            let mut out_weight = 0.0;
            for j in 0..v.len() {
                if v[j] * incoming > 0.0 {
                    psi.psi[[row, j]] = value;
                } else {
                    psi.psi[[row, j]] = psi.psi[[inner, j]];
                    out_weight += w[j];
                }
                mean += psi.psi[[row, j]] * w[j];
            }
            for j in 0..v.len() {
                if v[j] * incoming <= 0.0 {
                    psi.psi[[row, j]] -= mean / out_weight;
                }
            }
        }
    }

    /// One IMEX step.
    pub fn step(&self, state: &KineticState) -> Result<KineticState> {
        let eps = self.problem.epsilon;
        let eps2 = eps * eps;
        let dt = self.cfg.dt;
        let dx = self.cfg.dx;
        let grid = self.ctx.grid();
        let v = grid.nodes();
        let nv = v.len();
        let n = self.x.len();
        let step = state.step + 1;

        let phi = self.potential_for(&state.rho)?;
        let rho = &state.rho;
        let mut psi = state.psi.clone();
        if !self.periodic() {
            self.apply_inflow(&mut psi, rho);
        }

        let mut next = psi.clone();
        let mut transport = vec![0.0; nv];
        let mut rhs = vec![0.0; nv];
        for i in self.interior() {
            let (im, ip) = self.neighbours(i);
            let row = psi.psi.row(i);
            let row = row.as_slice().expect("row-major");
            let dv = grid.apply_v_derivative_unchecked(row);
            let phix = phi.gradient[i];
            for j in 0..nv {
                let upwind = if v[j] > 0.0 {
                    (row[j] - psi.psi[[im, j]]) / dx
                } else {
                    (psi.psi[[ip, j]] - row[j]) / dx
                };
                transport[j] = v[j] * upwind + phix * (dv[j] - 2.0 * v[j] * row[j]);
            }
            let mean = bracket(grid, &transport);
            let drho = (rho.values[ip] - rho.values[im]) / (2.0 * dx);
            let drive = drho - 2.0 * rho.values[i] * phix;
            for j in 0..nv {
                let explicit = eps * (transport[j] - mean) + v[j] * drive;
                rhs[j] = eps2 * row[j] - dt * explicit;
            }
            let solved: Vec<f64> = match &self.collision {
                CollisionSolve::Diagonal(inv) => rhs.iter().zip(inv).map(|(r, s)| r * s).collect(),
                CollisionSolve::Dense(lu) => {
                    let sol = lu
                        .solve(&DVector::from_column_slice(&rhs))
                        .ok_or_else(|| Error::Numerical { step, reason: "singular collision system".into() })?;
                    sol.iter().copied().collect()
                }
            };
            let m = bracket(grid, &solved);
            for j in 0..nv {
                next.psi[[i, j]] = solved[j] - m;
            }
        }
        if !self.periodic() {
            self.apply_inflow(&mut next, rho);
        }

        let mut fl = flux(grid, &next);
        if !self.periodic() && n >= 3 {
            // extrapolated boundary fluxes
            fl[0] = 2.0 * fl[1] - fl[2];
            fl[n - 1] = 2.0 * fl[n - 2] - fl[n - 3];
        }
        let mut rho_next = rho.values.clone();
        for i in self.interior() {
            let (im, ip) = self.neighbours(i);
            let row = next.psi.row(i);
            let dvg = bracket_v_derivative(grid, row.as_slice().expect("row-major"));
            rho_next[i] = rho.values[i] - dt * ((fl[ip] - fl[im]) / (2.0 * dx) + phi.gradient[i] * dvg);
        }
        if !self.periodic() {
            rho_next[0] = self.problem.inflow_left;
            rho_next[n - 1] = self.problem.inflow_right;
        }

        if rho_next.iter().chain(next.psi.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numerical { step, reason: "non-finite value in kinetic state".into() });
        }
        let rho_next = MacroField::new(rho_next, dx);
        let phi_next = self.potential_for(&rho_next)?;
        Ok(KineticState { time: step as f64 * dt, step, rho: rho_next, psi: next, phi: phi_next })
    }

    /// Advances `n_steps` from `state`, recording every `snapshot_every`-th
    /// step and the last one. The starting state is recorded first.
    pub fn advance(&self, state: KineticState, n_steps: usize) -> Result<Trajectory> {
        let mut snapshots = vec![state.clone()];
        let mut cur = state;
        for k in 1..=n_steps {
            cur = self.step(&cur)?;
            if cur.step % self.cfg.snapshot_every == 0 || k == n_steps {
                snapshots.push(cur.clone());
            }
        }
        Ok(Trajectory { x: self.x.clone(), nodes: self.ctx.grid().nodes().to_vec(), snapshots })
    }

    /// Full run from the initial data to `t_final`.
    pub fn run(&self) -> Result<Trajectory> {
        self.advance(self.initial_state()?, self.cfg.n_steps())
    }
}

/// Tridiagonal solve of `β (φ_{i−1} − 2φ_i + φ_{i+1})/Δx² = ρ_i − c(x_i)` with
/// `φ(x_0) = 0`, `φ(x_N) = V`.
pub fn solve_poisson(rho: &MacroField, problem: &ProblemConfig, x: &[f64]) -> Result<PotentialField> {
    let n = rho.values.len();
    if x.len() != n {
        return Err(Error::Shape { expected: n, found: x.len() });
    }
    if !(problem.debye_beta > 0.0) {
        return Err(Error::InvalidArgument("debye_beta must be positive".into()));
    }
    if rho.values.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical { step: 0, reason: "non-finite density in Poisson solve".into() });
    }
    let dx = rho.dx;
    let mut phi = vec![0.0; n];
    phi[n - 1] = problem.bias_voltage;
    let m = n.saturating_sub(2);
    if m > 0 {
        // -φ_{i-1} + 2φ_i - φ_{i+1} = -(Δx²/β)(ρ_i - c_i)
        let scale = dx * dx / problem.debye_beta;
        let mut d: Vec<f64> = (1..n - 1).map(|i| -scale * (rho.values[i] - problem.doping(x[i]))).collect();
        d[0] += phi[0];
        d[m - 1] += phi[n - 1];
        // Thomas algorithm for tridiag(-1, 2, -1)
        let mut c_prime = vec![0.0; m];
        let mut d_prime = vec![0.0; m];
        c_prime[0] = -0.5;
        d_prime[0] = d[0] / 2.0;
        for k in 1..m {
            let denom = 2.0 + c_prime[k - 1];
            c_prime[k] = -1.0 / denom;
            d_prime[k] = (d[k] + d_prime[k - 1]) / denom;
        }
        phi[m] = d_prime[m - 1];
        for k in (0..m - 1).rev() {
            phi[k + 1] = d_prime[k] - c_prime[k] * phi[k + 2];
        }
    }
    Ok(PotentialField::from_values(phi, dx))
}

/// Explicit march of `∂_t ρ = T (ρ_xx − 2 ∂_x(ρ ∂_x φ))`.
///
/// Inflow boundaries become Dirichlet data `ρ = ⟨F⟩`. Returns the density at
/// the initial time and at every `snapshot_every`-th step (plus the last).
pub fn solve_drift_diffusion(
    problem: &ProblemConfig,
    cfg: &SolverConfig,
    mobility: f64,
) -> Result<Vec<(f64, MacroField)>> {
    let x = spatial_nodes(problem, cfg);
    let rho0 = vec![problem.initial_density; x.len()];
    solve_drift_diffusion_from(problem, cfg, mobility, rho0, None)
}

/// As [`solve_drift_diffusion`] with explicit initial density and an optional
/// replacement for the given potential.
pub fn solve_drift_diffusion_from(
    problem: &ProblemConfig,
    cfg: &SolverConfig,
    mobility: f64,
    rho0: Vec<f64>,
    potential: Option<Vec<f64>>,
) -> Result<Vec<(f64, MacroField)>> {
    problem.validate()?;
    cfg.validate()?;
    if !(mobility > 0.0) {
        return Err(Error::InvalidArgument("mobility must be positive".into()));
    }
    let limit = cfg.dx * cfg.dx / (4.0 * mobility);
    if cfg.dt > limit {
        return Err(Error::Stability(format!("dt = {} exceeds dx^2/(4T) = {limit}", cfg.dt)));
    }
    let x = spatial_nodes(problem, cfg);
    let n = x.len();
    if rho0.len() != n {
        return Err(Error::Shape { expected: n, found: rho0.len() });
    }
    let periodic = cfg.bc == BoundaryKind::Periodic;
    let given: Vec<f64> = match potential {
        Some(p) => p,
        None if problem.uses_poisson() => vec![0.0; n],
        None => x.iter().map(|&xi| problem.given_potential(xi)).collect(),
    };
    let dx = cfg.dx;
    let mut rho = rho0;
    if !periodic {
        rho[0] = problem.inflow_left;
        rho[n - 1] = problem.inflow_right;
    }
    let mut out = vec![(0.0, MacroField::new(rho.clone(), dx))];
    let steps = cfg.n_steps();
    let idx = |i: isize| -> usize { i.rem_euclid(n as isize) as usize };
    for k in 1..=steps {
        let phi = if problem.uses_poisson() {
            solve_poisson(&MacroField::new(rho.clone(), dx), problem, &x)?.values
        } else {
            given.clone()
        };
        let face_flux = |a: usize, b: usize| -> f64 { 0.5 * (rho[a] + rho[b]) * (phi[b] - phi[a]) / dx };
        let mut next = rho.clone();
        let range = if periodic { 0..n } else { 1..n - 1 };
        for i in range {
            let im = idx(i as isize - 1);
            let ip = idx(i as isize + 1);
            let diffusion = (rho[ip] - 2.0 * rho[i] + rho[im]) / (dx * dx);
            let drift = (face_flux(i, ip) - face_flux(im, i)) / dx;
            next[i] = rho[i] + cfg.dt * mobility * (diffusion - 2.0 * drift);
        }
        if next.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numerical { step: k, reason: "non-finite density in drift-diffusion march".into() });
        }
        rho = next;
        if k % cfg.snapshot_every == 0 || k == steps {
            out.push((k as f64 * cfg.dt, MacroField::new(rho.clone(), dx)));
        }
    }
    Ok(out)
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape { expected: b.len(), found: a.len() });
    }
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    if den == 0.0 {
        return Err(Error::InvalidArgument("reference norm is zero".into()));
    }
    Ok((num / den).sqrt())
}
