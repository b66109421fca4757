//! Linear anisotropic collision operator in ψ-space.
//!
//! For `g = ψ M` the operator is returned divided by the Maxwellian:
//! `(Q/M)(v_i) = sum_j σ(v_i, v_j) ψ_j w_j - λ(v_i) ψ_i` with the collision
//! frequency `λ(v_i) = sum_j σ(v_i, v_j) w_j`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::hermite::VelocityGrid;

/// Scattering coefficient σ(v, w) sampled on the velocity nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum ScatteringKernel {
    Constant(f64),
    /// `table[[i, j]] = σ(v_i, v_j)`.
    Tabulated(Array2<f64>),
}

impl ScatteringKernel {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        match self {
            ScatteringKernel::Constant(s) => *s,
            ScatteringKernel::Tabulated(t) => t[[i, j]],
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            ScatteringKernel::Constant(_) => true,
            ScatteringKernel::Tabulated(t) => {
                let n = t.nrows();
                (0..n).all(|i| (0..n).all(|j| t[[i, j]] == t[[j, i]]))
            }
        }
    }

    /// Reads a square CSV matrix, row `i` holding `σ(v_i, ·)`.
    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                l.split(',')
                    .map(|c| {
                        c.trim().parse::<f64>().map_err(|e| {
                            Error::InvalidArgument(format!("kernel entry `{}`: {e}", c.trim()))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidArgument("kernel table must be a non-empty square matrix".into()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let table = Array2::from_shape_vec((n, n), flat).expect("square");
        Ok(ScatteringKernel::Tabulated(table))
    }
}

/// Everything needed to apply `Q/M` on one velocity grid.
#[derive(Debug, Clone)]
pub struct CollisionContext {
    grid: VelocityGrid,
    kernel: ScatteringKernel,
    lambda: Vec<f64>,
    maxwellian: Vec<f64>,
}

impl CollisionContext {
    pub fn new(grid: VelocityGrid, kernel: ScatteringKernel) -> Result<Self> {
        let n = grid.n_nodes();
        if let ScatteringKernel::Tabulated(t) = &kernel {
            if t.nrows() != n || t.ncols() != n {
                return Err(Error::GridMismatch(format!(
                    "kernel table is {}x{}, velocity grid has {n} nodes",
                    t.nrows(),
                    t.ncols()
                )));
            }
        }
        let positive = match &kernel {
            ScatteringKernel::Constant(s) => *s > 0.0,
            ScatteringKernel::Tabulated(t) => t.iter().all(|&s| s > 0.0),
        };
        if !positive {
            return Err(Error::InvalidArgument("scattering kernel must be positive".into()));
        }
        let w = grid.weights();
        let lambda = (0..n).map(|i| (0..n).map(|j| kernel.value(i, j) * w[j]).sum()).collect();
        let maxwellian = grid.maxwellian_nodes();
        Ok(Self { grid, kernel, lambda, maxwellian })
    }

    pub fn grid(&self) -> &VelocityGrid {
        &self.grid
    }

    pub fn kernel(&self) -> &ScatteringKernel {
        &self.kernel
    }

    pub fn lambda_nodes(&self) -> &[f64] {
        &self.lambda
    }

    pub fn maxwellian_nodes(&self) -> &[f64] {
        &self.maxwellian
    }

    pub fn collision_frequency(&self, i: usize) -> f64 {
        self.lambda[i]
    }

    /// `(Q/M)` applied to a ψ vector on the nodes.
    pub fn apply_q_psi(&self, psi: &[f64]) -> Result<Vec<f64>> {
        let n = self.grid.n_nodes();
        if psi.len() != n {
            return Err(Error::Shape { expected: n, found: psi.len() });
        }
        Ok(self.apply_q_psi_unchecked(psi))
    }

    pub(crate) fn apply_q_psi_unchecked(&self, psi: &[f64]) -> Vec<f64> {
        let w = self.grid.weights();
        match &self.kernel {
            ScatteringKernel::Constant(s) => {
                let mean: f64 = psi.iter().zip(w).map(|(p, wj)| s * p * wj).sum();
                psi.iter().zip(&self.lambda).map(|(p, l)| mean - l * p).collect()
            }
            ScatteringKernel::Tabulated(t) => (0..psi.len())
                .map(|i| {
                    let gain: f64 = (0..psi.len()).map(|j| t[[i, j]] * psi[j] * w[j]).sum();
                    gain - self.lambda[i] * psi[i]
                })
                .collect(),
        }
    }

    /// Matrix `K` with `(Q/M) ψ = K ψ`.
    pub fn collision_matrix(&self) -> Array2<f64> {
        let n = self.grid.n_nodes();
        let w = self.grid.weights();
        Array2::from_shape_fn((n, n), |(i, j)| {
            let gain = self.kernel.value(i, j) * w[j];
            if i == j {
                gain - self.lambda[i]
            } else {
                gain
            }
        })
    }

    /// Drift-diffusion mobility `T = sum_j v_j^2 / λ(v_j) w_j`.
    pub fn mobility_constant(&self) -> Result<f64> {
        if self.lambda.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidArgument("collision frequency must be positive".into()));
        }
        Ok(self
            .grid
            .nodes()
            .iter()
            .zip(self.grid.weights())
            .zip(&self.lambda)
            .map(|((v, w), l)| v * v / l * w)
            .sum())
    }
}
