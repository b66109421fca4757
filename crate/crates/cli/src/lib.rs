//! Configuration, data generation, experiment orchestration and artifact
//! emission for the `apnn` command.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod plots;
pub mod run;

pub use error::{AppError, Result};
