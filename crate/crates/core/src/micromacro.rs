//! Projection, velocity bracket and grid residuals of the micro-macro system.
//!
//! All kinetic fields are carried in ψ-space (`g = ψ M`); residuals of the
//! micro equation are returned divided by `M`. Spatial derivatives are
//! second-order central in the interior and first-order one-sided at the two
//! end nodes.

use ndarray::Array2;

use crate::collision::CollisionContext;
use crate::error::{Error, Result};
use crate::hermite::VelocityGrid;

/// Density on a uniform spatial grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroField {
    pub values: Vec<f64>,
    pub dx: f64,
}

/// ψ = g/M on the `x × v` node grid, indexed `[x][v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroField {
    pub psi: Array2<f64>,
}

/// Electric potential with its spatial derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    pub values: Vec<f64>,
    pub gradient: Vec<f64>,
    pub dx: f64,
}

impl MacroField {
    pub fn new(values: Vec<f64>, dx: f64) -> Self {
        Self { values, dx }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn gradient(&self) -> Vec<f64> {
        spatial_derivative(&self.values, self.dx)
    }
}

impl MicroField {
    pub fn zeros(n_x: usize, n_v: usize) -> Self {
        Self { psi: Array2::zeros((n_x, n_v)) }
    }

    pub fn n_x(&self) -> usize {
        self.psi.nrows()
    }

    pub fn n_v(&self) -> usize {
        self.psi.ncols()
    }

    /// Largest discrete mean `|sum_j ψ(x_i, v_j) w_j|` over all `x_i`.
    pub fn max_mean(&self, grid: &VelocityGrid) -> f64 {
        self.psi
            .rows()
            .into_iter()
            .map(|row| bracket(grid, row.as_slice().expect("row-major")).abs())
            .fold(0.0, f64::max)
    }
}

impl PotentialField {
    /// Gradient by finite differences.
    pub fn from_values(values: Vec<f64>, dx: f64) -> Self {
        let gradient = spatial_derivative(&values, dx);
        Self { values, gradient, dx }
    }

    /// Potential with a known derivative.
    pub fn with_gradient(values: Vec<f64>, gradient: Vec<f64>, dx: f64) -> Self {
        Self { values, gradient, dx }
    }

    pub fn zeros(n: usize, dx: f64) -> Self {
        Self { values: vec![0.0; n], gradient: vec![0.0; n], dx }
    }
}

/// Central differences inside, one-sided at both ends.
pub fn spatial_derivative(values: &[f64], dx: f64) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut d = vec![0.0; n];
    d[0] = (values[1] - values[0]) / dx;
    d[n - 1] = (values[n - 1] - values[n - 2]) / dx;
    for i in 1..n - 1 {
        d[i] = (values[i + 1] - values[i - 1]) / (2.0 * dx);
    }
    d
}

fn column_derivative(psi: &Array2<f64>, dx: f64) -> Array2<f64> {
    let mut out = Array2::zeros(psi.raw_dim());
    for (j, col) in psi.columns().into_iter().enumerate() {
        let d = spatial_derivative(&col.to_vec(), dx);
        out.column_mut(j).assign(&ndarray::ArrayView1::from(&d));
    }
    out
}

/// `⟨ψ⟩ = sum_j ψ(v_j) w_j`.
pub fn bracket(grid: &VelocityGrid, psi_row: &[f64]) -> f64 {
    grid.integrate(psi_row)
}

/// `Π` in ψ-space: the constant vector `⟨ψ⟩`.
pub fn project_pi(grid: &VelocityGrid, psi_row: &[f64]) -> Vec<f64> {
    vec![bracket(grid, psi_row); psi_row.len()]
}

/// `⟨∂_v g⟩` for one spatial point: `sum_j [(Cψ)_j - 2 v_j ψ_j] w_j`.
pub fn bracket_v_derivative(grid: &VelocityGrid, psi_row: &[f64]) -> f64 {
    let d = grid.apply_v_derivative_unchecked(psi_row);
    d.iter()
        .zip(psi_row)
        .zip(grid.nodes())
        .zip(grid.weights())
        .map(|(((dp, p), v), w)| (dp - 2.0 * v * p) * w)
        .sum()
}

/// `⟨v ψ⟩` for every spatial point.
pub fn flux(grid: &VelocityGrid, psi: &MicroField) -> Vec<f64> {
    let vw: Vec<f64> = grid.nodes().iter().zip(grid.weights()).map(|(v, w)| v * w).collect();
    psi.psi
        .rows()
        .into_iter()
        .map(|row| row.iter().zip(&vw).map(|(p, c)| p * c).sum())
        .collect()
}

fn check_fields(n_x: usize, psi: &MicroField, phi: &PotentialField, grid: &VelocityGrid) -> Result<()> {
    if psi.n_x() != n_x || phi.values.len() != n_x || phi.gradient.len() != n_x {
        return Err(Error::GridMismatch(format!(
            "spatial sizes differ: density {n_x}, micro {}, potential {}",
            psi.n_x(),
            phi.values.len()
        )));
    }
    if psi.n_v() != grid.n_nodes() {
        return Err(Error::GridMismatch(format!(
            "micro field has {} velocity columns, grid has {} nodes",
            psi.n_v(),
            grid.n_nodes()
        )));
    }
    Ok(())
}

/// Macro residual `∂_t ρ + ∂_x⟨v g⟩ + ∂_x φ ⟨∂_v g⟩` with a caller-supplied `∂_t ρ`.
pub fn macro_residual(
    dt_rho: &[f64],
    psi: &MicroField,
    phi: &PotentialField,
    grid: &VelocityGrid,
) -> Result<Vec<f64>> {
    check_fields(dt_rho.len(), psi, phi, grid)?;
    let dflux = spatial_derivative(&flux(grid, psi), phi.dx);
    Ok((0..dt_rho.len())
        .map(|i| {
            let row = psi.psi.row(i);
            let dv = bracket_v_derivative(grid, row.as_slice().expect("row-major"));
            dt_rho[i] + dflux[i] + phi.gradient[i] * dv
        })
        .collect())
}

/// Residual of the ε → 0 micro equation, `v ∂_x ρ − 2 v ρ ∂_x φ − Q(g)`, over `M`.
pub fn limit_residual(
    rho: &MacroField,
    psi: &MicroField,
    phi: &PotentialField,
    ctx: &CollisionContext,
) -> Result<Array2<f64>> {
    let grid = ctx.grid();
    check_fields(rho.len(), psi, phi, grid)?;
    let drho = rho.gradient();
    let v = grid.nodes();
    let mut out = Array2::zeros(psi.psi.raw_dim());
    for i in 0..rho.len() {
        let row = psi.psi.row(i);
        let q = ctx.apply_q_psi_unchecked(row.as_slice().expect("row-major"));
        let drive = drho[i] - 2.0 * rho.values[i] * phi.gradient[i];
        for j in 0..v.len() {
            out[[i, j]] = v[j] * drive - q[j];
        }
    }
    Ok(out)
}

/// Residual of the micro equation over `M`:
/// `ε² ∂_t g + ε (I − Π)(v ∂_x g + ∂_x φ ∂_v g) + v ∂_x ρ M − 2 v ρ ∂_x φ M − Q(g)`.
///
/// At `ε = 0` this is exactly [`limit_residual`].
pub fn micro_residual(
    rho: &MacroField,
    dt_psi: &MicroField,
    psi: &MicroField,
    phi: &PotentialField,
    eps: f64,
    ctx: &CollisionContext,
) -> Result<Array2<f64>> {
    let mut out = limit_residual(rho, psi, phi, ctx)?;
    if eps == 0.0 {
        return Ok(out);
    }
    if dt_psi.psi.raw_dim() != psi.psi.raw_dim() {
        return Err(Error::GridMismatch("time derivative and micro field differ in shape".into()));
    }
    let grid = ctx.grid();
    let v = grid.nodes();
    let dpsi = column_derivative(&psi.psi, rho.dx);
    for i in 0..rho.len() {
        let row = psi.psi.row(i);
        let row = row.as_slice().expect("row-major");
        let dv = grid.apply_v_derivative_unchecked(row);
        let transport: Vec<f64> = (0..v.len())
            .map(|j| v[j] * dpsi[[i, j]] + phi.gradient[i] * (dv[j] - 2.0 * v[j] * row[j]))
            .collect();
        let mean = bracket(grid, &transport);
        for j in 0..v.len() {
            out[[i, j]] += eps * eps * dt_psi.psi[[i, j]] + eps * (transport[j] - mean);
        }
    }
    Ok(out)
}
