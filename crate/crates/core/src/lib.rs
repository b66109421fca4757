//! Kinetic micro-macro solvers and asymptotic-preserving residual networks
//! for the semiconductor Boltzmann and Boltzmann-Poisson equations.

pub mod collision;
pub mod error;
pub mod hermite;
pub mod losses;
pub mod micromacro;
pub mod net;
pub mod problem;
pub mod refsolver;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
