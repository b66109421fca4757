//! Synthetic observations sampled from a reference trajectory.

use std::fs::File;
use std::path::Path;

use apnn_core::hermite::maxwellian;
use apnn_core::losses::{Observations, PointSample, VelocitySample};
use apnn_core::refsolver::Trajectory;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Scenario;
use crate::error::{AppError, Result};

pub const RHO_FILE: &str = "rho.csv";
pub const MICRO_FILE: &str = "micro.csv";
pub const PHI_FILE: &str = "phi.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub t: f64,
    pub x: f64,
    pub value: f64,
}

/// One velocity-resolved sample: `g = M ψ` and `f = ρ M + ε g` at the same point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroRow {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub g: f64,
    pub f: f64,
}

/// Sampled observations in file form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub rho: Vec<PointRow>,
    pub micro: Vec<MicroRow>,
    pub phi: Vec<PointRow>,
}

impl Dataset {
    pub fn observations(&self) -> Observations {
        let point = |r: &PointRow| PointSample { t: r.t, x: r.x, value: r.value };
        Observations {
            rho: self.rho.iter().map(point).collect(),
            g: self.micro.iter().map(|r| VelocitySample { t: r.t, x: r.x, v: r.v, value: r.g }).collect(),
            f: self.micro.iter().map(|r| VelocitySample { t: r.t, x: r.x, v: r.v, value: r.f }).collect(),
            phi: self.phi.iter().map(point).collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        write_rows(&dir.join(RHO_FILE), &self.rho, &["t", "x", "rho"])?;
        write_rows(&dir.join(MICRO_FILE), &self.micro, &["t", "x", "v", "g", "f"])?;
        write_rows(&dir.join(PHI_FILE), &self.phi, &["t", "x", "phi"])?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Self { rho: read_rows(&dir.join(RHO_FILE))?, micro: read_rows(&dir.join(MICRO_FILE))?, phi: read_rows(&dir.join(PHI_FILE))? })
    }
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let file = File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(header).map_err(|e| AppError::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| AppError::csv(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    // columns are positional; the header names the observed quantity
    r.records()
        .map(|rec| rec.and_then(|rec| rec.deserialize(None)))
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| AppError::csv(path, e))
}

/// Draws `n` distinct snapshot grid points per observed quantity.
///
/// Full: `ρ` and velocity-resolved `g`, `f` (plus `φ` when the potential is
/// solved for). Partial: `ρ` (plus `φ`).
pub fn generate_observations(
    traj: &Trajectory,
    epsilon: f64,
    with_phi: bool,
    scenario: Scenario,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let (ns, nx, nv) = (traj.snapshots.len(), traj.x.len(), traj.nodes.len());
    let points = ns * nx;
    if n > points {
        return Err(AppError::Usage(format!("{n} samples requested but the trajectory has only {points} space-time points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point_rows = |field: &dyn Fn(usize, usize) -> f64| -> Vec<PointRow> {
        index::sample(&mut rng, points, n)
            .into_iter()
            .map(|k| {
                let (s, i) = (k / nx, k % nx);
                PointRow { t: traj.snapshots[s].time, x: traj.x[i], value: field(s, i) }
            })
            .collect()
    };
    let rho = point_rows(&|s, i| traj.snapshots[s].rho.values[i]);
    let phi = if with_phi { point_rows(&|s, i| traj.snapshots[s].phi.values[i]) } else { Vec::new() };
    let micro = match scenario {
        Scenario::Partial => Vec::new(),
        Scenario::Full => index::sample(&mut rng, points * nv, n)
            .into_iter()
            .map(|k| {
                let (s, i, j) = (k / (nx * nv), (k / nv) % nx, k % nv);
                let snap = &traj.snapshots[s];
                let m = maxwellian(traj.nodes[j]);
                let g = m * snap.psi.psi[[i, j]];
                MicroRow { t: snap.time, x: traj.x[i], v: traj.nodes[j], g, f: snap.rho.values[i] * m + epsilon * g }
            })
            .collect(),
    };
    Ok(Dataset { rho, micro, phi })
}
