//! Hermite spectral layer in velocity.
//!
//! The velocity variable is discretized on the nodes of a Gauss-Hermite rule
//! whose weights are normalized against the Maxwellian `M(v) = e^{-v^2}/sqrt(pi)`,
//! so that `sum_j w_j = 1`. The basis `h_k` is orthonormal against the same
//! measure (`h_0 = 1`, `h_1 = sqrt(2) v`, ...), which keeps analysis,
//! synthesis, the collision frequency and every velocity bracket on a single
//! inner product.
//!
//! Kinetic quantities are carried in ψ-space (`g = ψ M`); the derivative
//! matrix [`VelocityGrid::deriv`] differentiates ψ, not g.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Quadrature nodes, Maxwellian-normalized weights, sampled basis and the
/// spectral velocity-derivative stencil.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrid {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    order: usize,
    /// `basis[[k, j]] = h_k(v_j)` for `k = 0..=order`.
    basis: Array2<f64>,
    /// `deriv[[i, j]] = C_j(v_i)`.
    deriv: Array2<f64>,
}

/// Orthonormal Hermite function `h_k(v)` (orthonormal against `M(v) dv`).
pub fn hermite_eval(k: usize, v: f64) -> f64 {
    let mut prev = 0.0;
    let mut cur = 1.0;
    for j in 0..k {
        let jf = j as f64;
        let next = v * (2.0 / (jf + 1.0)).sqrt() * cur - (jf / (jf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Values `h_0(v) ..= h_order(v)`.
fn hermite_all(order: usize, v: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(order + 1);
    out.push(1.0);
    let mut prev = 0.0;
    let mut cur = 1.0;
    for j in 0..order {
        let jf = j as f64;
        let next = v * (2.0 / (jf + 1.0)).sqrt() * cur - (jf / (jf + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
        out.push(cur);
    }
    out
}

/// Normalized Maxwellian `e^{-v^2} / sqrt(pi)`.
pub fn maxwellian(v: f64) -> f64 {
    (-v * v).exp() / std::f64::consts::PI.sqrt()
}

impl VelocityGrid {
    /// Builds the grid with the default expansion order `n_nodes - 1`.
    pub fn new(n_nodes: usize) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("velocity grid needs at least one node".into()));
        }
        Self::with_order(n_nodes, n_nodes - 1)
    }

    /// Builds the grid from the eigen-decomposition of the Hermite Jacobi
    /// matrix (Golub-Welsch).
    pub fn with_order(n_nodes: usize, order: usize) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("velocity grid needs at least one node".into()));
        }
        if order >= n_nodes {
            return Err(Error::InvalidArgument(format!(
                "expansion order {order} must be below the node count {n_nodes}"
            )));
        }
        let (nodes, weights) = gauss_hermite_maxwellian(n_nodes);

        let mut basis = Array2::zeros((order + 1, n_nodes));
        for (j, &v) in nodes.iter().enumerate() {
            for (k, hk) in hermite_all(order, v).into_iter().enumerate() {
                basis[[k, j]] = hk;
            }
        }

        // C_j(v_i) = sum_k sqrt(2k) h_k(v_j) h_{k-1}(v_i) w_j
        let mut deriv = Array2::zeros((n_nodes, n_nodes));
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                let mut acc = 0.0;
                for k in 1..=order {
                    acc += (2.0 * k as f64).sqrt() * basis[[k, j]] * basis[[k - 1, i]];
                }
                deriv[[i, j]] = acc * weights[j];
            }
        }
        // rows annihilate constants exactly
        for i in 0..n_nodes {
            let row_sum: f64 = (0..n_nodes).map(|j| deriv[[i, j]]).sum();
            let total_w: f64 = weights.iter().sum();
            for j in 0..n_nodes {
                deriv[[i, j]] -= row_sum * weights[j] / total_w;
            }
        }

        Ok(Self { nodes, weights, order, basis, deriv })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn deriv(&self) -> &Array2<f64> {
        &self.deriv
    }

    /// Maxwellian sampled at the nodes.
    pub fn maxwellian_nodes(&self) -> Vec<f64> {
        self.nodes.iter().map(|&v| maxwellian(v)).collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n_nodes() {
            return Err(Error::Shape { expected: self.n_nodes(), found: len });
        }
        Ok(())
    }

    /// Hermite coefficients `ψ_k = sum_j ψ(v_j) h_k(v_j) w_j`.
    pub fn analyze(&self, psi_nodes: &[f64]) -> Result<Vec<f64>> {
        self.check_len(psi_nodes.len())?;
        Ok((0..=self.order)
            .map(|k| {
                psi_nodes
                    .iter()
                    .zip(&self.weights)
                    .enumerate()
                    .map(|(j, (p, w))| p * self.basis[[k, j]] * w)
                    .sum()
            })
            .collect())
    }

    /// Evaluates `sum_k ψ_k h_k(v)` at an arbitrary velocity.
    pub fn synthesize(&self, coeffs: &[f64], v: f64) -> f64 {
        hermite_all(coeffs.len().saturating_sub(1), v)
            .iter()
            .zip(coeffs)
            .map(|(h, c)| h * c)
            .sum()
    }

    /// Evaluates the expansion at every node.
    pub fn synthesize_nodes(&self, coeffs: &[f64]) -> Result<Vec<f64>> {
        if coeffs.len() > self.order + 1 {
            return Err(Error::Shape { expected: self.order + 1, found: coeffs.len() });
        }
        Ok((0..self.n_nodes())
            .map(|j| coeffs.iter().enumerate().map(|(k, c)| c * self.basis[[k, j]]).sum())
            .collect())
    }

    /// `∂_v ψ` at the nodes through the precomputed stencil.
    pub fn apply_v_derivative(&self, psi_nodes: &[f64]) -> Result<Vec<f64>> {
        self.check_len(psi_nodes.len())?;
        Ok(self.apply_v_derivative_unchecked(psi_nodes))
    }

    pub(crate) fn apply_v_derivative_unchecked(&self, psi_nodes: &[f64]) -> Vec<f64> {
        let n = self.n_nodes();
        (0..n)
            .map(|i| (0..n).map(|j| self.deriv[[i, j]] * psi_nodes[j]).sum())
            .collect()
    }

    /// Quadrature of `ψ` against the Maxwellian, `sum_j ψ_j w_j`.
    pub fn integrate(&self, psi_nodes: &[f64]) -> f64 {
        psi_nodes.iter().zip(&self.weights).map(|(p, w)| p * w).sum()
    }
}

/// Nodes and weights for `∫ p(v) M(v) dv`, symmetric and with unit total weight.
fn gauss_hermite_maxwellian(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    // monic recurrence p_{k+1} = v p_k - (k/2) p_{k-1}
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let first = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for j in 0..n {
        let mirror = n - 1 - j;
        nodes[j] = 0.5 * (pairs[j].0 - pairs[mirror].0);
        weights[j] = 0.5 * (pairs[j].1 + pairs[mirror].1);
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (nodes, weights)
}
