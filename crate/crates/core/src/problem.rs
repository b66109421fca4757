//! Problem definitions: the given-potential semiconductor problem and the
//! Boltzmann-Poisson device problem.

use std::f64::consts::E;

use crate::collision::ScatteringKernel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    /// Given potential `φ(x) = exp(-50 e (1/4 - x)^2)`.
    Semiconductor,
    /// Potential from `β φ_xx = ρ − c(x)`, `φ(0) = 0`, `φ(1) = V`.
    BoltzmannPoisson,
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semiconductor" => Ok(ProblemKind::Semiconductor),
            "bp" => Ok(ProblemKind::BoltzmannPoisson),
            other => Err(Error::InvalidArgument(format!(
                "unknown problem `{other}` (expected semiconductor | bp)"
            ))),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ProblemKind::Semiconductor => "semiconductor",
            ProblemKind::BoltzmannPoisson => "bp",
        })
    }
}

/// Physical setup shared by the reference solvers and the residual losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub epsilon: f64,
    pub kernel: ScatteringKernel,
    pub n_velocity: usize,
    pub t_final: f64,
    pub x_left: f64,
    pub x_right: f64,
    /// Inflow data as multiples of the Maxwellian: `F_L = a_L M`, `F_R = a_R M`.
    pub inflow_left: f64,
    pub inflow_right: f64,
    /// Initial data `f = ρ_0 M`.
    pub initial_density: f64,
    pub bias_voltage: f64,
    pub debye_beta: f64,
    pub doping_m: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self::semiconductor(1.0)
    }
}

impl ProblemConfig {
    pub fn semiconductor(epsilon: f64) -> Self {
        Self {
            kind: ProblemKind::Semiconductor,
            epsilon,
            kernel: ScatteringKernel::Constant(2.0),
            n_velocity: 8,
            t_final: 0.1,
            x_left: 0.0,
            x_right: 1.0,
            inflow_left: 1.0,
            inflow_right: 1.0,
            initial_density: 1.0,
            bias_voltage: 5.0,
            debye_beta: 0.002,
            doping_m: (1.0 - 0.001) / 2.0,
        }
    }

    pub fn boltzmann_poisson(epsilon: f64) -> Self {
        Self { kind: ProblemKind::BoltzmannPoisson, ..Self::semiconductor(epsilon) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::InvalidArgument("t_final must be positive".into()));
        }
        if !(self.x_right > self.x_left) {
            return Err(Error::InvalidArgument("spatial domain is empty".into()));
        }
        if self.n_velocity == 0 {
            return Err(Error::InvalidArgument("n_velocity must be positive".into()));
        }
        if self.kind == ProblemKind::BoltzmannPoisson && !(self.debye_beta > 0.0) {
            return Err(Error::InvalidArgument("debye_beta must be positive".into()));
        }
        Ok(())
    }

    /// Given potential of the semiconductor problem.
    pub fn given_potential(&self, x: f64) -> f64 {
        (-50.0 * E * (0.25 - x).powi(2)).exp()
    }

    pub fn given_potential_gradient(&self, x: f64) -> f64 {
        self.given_potential(x) * 100.0 * E * (0.25 - x)
    }

    /// Doping profile `c(x) = 1 − (1−m) ρ_0 [tanh((x−0.3)/0.02) − tanh((x−0.7)/0.02)]`.
    pub fn doping(&self, x: f64) -> f64 {
        1.0 - (1.0 - self.doping_m)
            * self.initial_density
            * (((x - 0.3) / 0.02).tanh() - ((x - 0.7) / 0.02).tanh())
    }

    pub fn uses_poisson(&self) -> bool {
        self.kind == ProblemKind::BoltzmannPoisson
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn potential_peak_and_gradient() {
        let p = ProblemConfig::semiconductor(1.0);
        assert_eq!(p.given_potential(0.25), 1.0);
        let h = 1e-6;
        for &x in &[0.1, 0.2, 0.3, 0.6] {
            let fd = (p.given_potential(x + h) - p.given_potential(x - h)) / (2.0 * h);
            assert!((fd - p.given_potential_gradient(x)).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn doping_profile_shape() {
        let p = ProblemConfig::boltzmann_poisson(1e-8);
        assert!((p.doping(0.0) - 1.0).abs() < 1e-12);
        assert!((p.doping(1.0) - 1.0).abs() < 1e-12);
        // tanh(10) = 1 - 4.1e-9
        assert!((p.doping(0.5) - (2.0 * p.doping_m - 1.0)).abs() < 1e-8);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("bp".parse::<ProblemKind>().unwrap(), ProblemKind::BoltzmannPoisson);
        assert!("plasma".parse::<ProblemKind>().is_err());
    }
}
