//! Run configuration: TOML sections flattened to dotted keys, with
//! command-line `key=value` overrides applied on top.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use apnn_core::collision::ScatteringKernel;
use apnn_core::losses::LossWeights;
use apnn_core::problem::{ProblemConfig, ProblemKind};
use apnn_core::refsolver::{BoundaryKind, SolverConfig};
use apnn_core::train::{AdamConfig, TrainConfig};
use thiserror::Error;
use toml::Value;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config {path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("malformed override `{0}` (expected key=value)")]
    Override(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("{key}: expected {expected}, found {found}")]
    Type { key: String, expected: &'static str, found: String },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Full,
    Partial,
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Scenario::Full),
            "partial" => Ok(Scenario::Partial),
            other => Err(format!("unknown scenario `{other}` (expected full | partial)")),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Full => "full",
            Scenario::Partial => "partial",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub scenario: Scenario,
    pub n_samples: usize,
    pub seed: u64,
    /// Directory with previously generated observations; empty means generate.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sigma0s: Vec<f64>,
    pub ap_epsilons: Vec<f64>,
    /// Concurrent runs; 0 uses every available core.
    pub jobs: usize,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub problem: ProblemConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub experiment: ExperimentConfig,
    explicit: BTreeSet<String>,
}

/// Every accepted key with its one-line description, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("problem.kind", "semiconductor | bp"),
    ("problem.epsilon", "Knudsen number ε"),
    ("problem.sigma", "constant scattering coefficient σ"),
    ("problem.n_velocity", "Hermite velocity nodes"),
    ("problem.t_final", "final time"),
    ("problem.x_left", "left end of the slab"),
    ("problem.x_right", "right end of the slab"),
    ("problem.inflow_left", "inflow density at the left wall (F_L = a M)"),
    ("problem.inflow_right", "inflow density at the right wall (F_R = a M)"),
    ("problem.initial_density", "initial density (f = ρ₀ M)"),
    ("problem.bias_voltage", "applied bias V (bp)"),
    ("problem.debye_beta", "Poisson coefficient β (bp)"),
    ("problem.doping_m", "doping depth m (bp)"),
    ("solver.dx", "reference grid spacing"),
    ("solver.dt", "reference time step"),
    ("solver.bc", "inflow | periodic"),
    ("solver.snapshot_every", "steps between stored snapshots"),
    ("train.method", "apnn | pinn"),
    ("train.inverse", "none | full | partial"),
    ("train.epochs", "Adam steps"),
    ("train.learning_rate", "Adam step size"),
    ("train.seed", "initialization seed"),
    ("train.sigma0", "initial guess for σ (inverse)"),
    ("train.hidden", "hidden layer widths of the ρ/ψ/f heads"),
    ("train.phi_hidden", "hidden layer widths of the φ head (bp)"),
    ("train.n_t", "interior collocation times"),
    ("train.n_x", "interior collocation positions"),
    ("train.lambda_bc", "boundary penalty λ₁"),
    ("train.lambda_ic", "initial penalty λ₂"),
    ("train.weight_poisson", "Poisson residual weight (bp)"),
    ("train.weight_rho", "density data weight"),
    ("train.weight_g", "micro data weight"),
    ("train.weight_f", "distribution data weight"),
    ("train.weight_phi", "potential data weight"),
    ("train.velocity_weighting", "maxwellian | uniform averaging of kinetic residuals"),
    ("train.validation_fraction", "share of velocity nodes held out of micro data"),
    ("train.divergence_factor", "abort when the loss exceeds this multiple of max(initial, 1)"),
    ("train.log_every", "epochs between progress lines (0 = quiet)"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator guard"),
    ("data.scenario", "full | partial"),
    ("data.n_samples", "samples per observed quantity"),
    ("data.seed", "sampling seed"),
    ("data.dir", "read observations from this directory instead of generating them"),
    ("output.dir", "artifact directory"),
    ("output.svg", "emit SVG line plots"),
    ("experiment.epsilons", "ε list for table1"),
    ("experiment.seeds", "training seeds per setting"),
    ("experiment.sigma0s", "initial guesses for inverse_partial"),
    ("experiment.ap_epsilons", "ε list for ap_sweep"),
    ("experiment.jobs", "concurrent runs (0 = all cores)"),
];

impl Default for Config {
    fn default() -> Self {
        Self::resolve(BTreeMap::new()).expect("defaults resolve")
    }
}

impl Config {
    /// Reads `path` (if any), applies `overrides`, and resolves every key.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut flat = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| ConfigError::Syntax { path: path.into(), message: e.to_string() })?;
            flatten("", table, &mut flat);
        }
        for o in overrides {
            let (key, value) = parse_override(o)?;
            flat.insert(key, value);
        }
        Self::resolve(flat)
    }

    /// Parses config text directly (used for echoes and tests).
    pub fn from_str_with(text: &str, overrides: &[String]) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Syntax { path: "<inline>".into(), message: e.to_string() })?;
        let mut flat = BTreeMap::new();
        flatten("", table, &mut flat);
        for o in overrides {
            let (key, value) = parse_override(o)?;
            flat.insert(key, value);
        }
        Self::resolve(flat)
    }

    /// Whether `key` was given in the file or as an override.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Sets a key as if it had been given explicitly.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut flat = self.to_flat();
        let (k, v) = parse_override(&format!("{key}={value}"))?;
        flat.insert(k, v);
        let mut explicit = self.explicit.clone();
        explicit.insert(key.to_string());
        *self = Self::resolve(flat)?;
        self.explicit = explicit;
        Ok(())
    }

    /// Sets `key` unless the user gave it.
    pub fn set_default(&mut self, key: &str, value: &str) -> Result<()> {
        if self.is_explicit(key) {
            return Ok(());
        }
        let explicit = self.explicit.clone();
        self.set(key, value)?;
        self.explicit = explicit;
        Ok(())
    }

    fn resolve(mut flat: BTreeMap<String, Value>) -> Result<Self> {
        let explicit: BTreeSet<String> = flat.keys().cloned().collect();
        if let Some(unknown) = flat.keys().find(|k| !KEYS.iter().any(|(known, _)| known == k)) {
            return Err(ConfigError::UnknownKey(unknown.clone()));
        }
        let mut r = Reader { flat: &mut flat };

        let kind: ProblemKind = r.parsed("problem.kind", ProblemKind::Semiconductor)?;
        let base = match kind {
            ProblemKind::Semiconductor => ProblemConfig::semiconductor(1.0),
            ProblemKind::BoltzmannPoisson => ProblemConfig::boltzmann_poisson(1.0),
        };
        let sigma = r.float("problem.sigma", 2.0)?;
        if !(sigma > 0.0) {
            return Err(invalid("problem.sigma", "must be positive"));
        }
        let problem = ProblemConfig {
            kind,
            epsilon: r.float("problem.epsilon", 1.0)?,
            kernel: ScatteringKernel::Constant(sigma),
            n_velocity: r.uint("problem.n_velocity", base.n_velocity)?,
            t_final: r.float("problem.t_final", base.t_final)?,
            x_left: r.float("problem.x_left", base.x_left)?,
            x_right: r.float("problem.x_right", base.x_right)?,
            inflow_left: r.float("problem.inflow_left", base.inflow_left)?,
            inflow_right: r.float("problem.inflow_right", base.inflow_right)?,
            initial_density: r.float("problem.initial_density", base.initial_density)?,
            bias_voltage: r.float("problem.bias_voltage", base.bias_voltage)?,
            debye_beta: r.float("problem.debye_beta", base.debye_beta)?,
            doping_m: r.float("problem.doping_m", base.doping_m)?,
        };
        problem.validate().map_err(|e| invalid("problem", &e.to_string()))?;

        let sd = SolverConfig::default();
        let bc: String = r.string("solver.bc", "inflow")?;
        let solver = SolverConfig {
            dx: r.float("solver.dx", sd.dx)?,
            dt: r.float("solver.dt", sd.dt)?,
            t_final: problem.t_final,
            bc: match bc.as_str() {
                "inflow" => BoundaryKind::Inflow,
                "periodic" => BoundaryKind::Periodic,
                other => return Err(invalid("solver.bc", &format!("unknown boundary `{other}` (expected inflow | periodic)"))),
            },
            snapshot_every: r.uint("solver.snapshot_every", sd.snapshot_every)?,
        };
        solver.validate().map_err(|e| invalid("solver", &e.to_string()))?;

        let td = TrainConfig::default();
        let lw = LossWeights::default();
        let train = TrainConfig {
            method: r.parsed("train.method", td.method)?,
            inverse: r.parsed("train.inverse", td.inverse)?,
            epochs: r.uint("train.epochs", td.epochs)?,
            learning_rate: r.float("train.learning_rate", td.learning_rate)?,
            seed: r.uint("train.seed", td.seed as usize)? as u64,
            sigma0: r.float("train.sigma0", td.sigma0)?,
            adam: AdamConfig {
                beta1: r.float("train.adam_beta1", td.adam.beta1)?,
                beta2: r.float("train.adam_beta2", td.adam.beta2)?,
                eps: r.float("train.adam_eps", td.adam.eps)?,
            },
            hidden: r.uints("train.hidden", &td.hidden)?,
            phi_hidden: r.uints("train.phi_hidden", &td.phi_hidden)?,
            n_t: r.uint("train.n_t", td.n_t)?,
            n_x: r.uint("train.n_x", td.n_x)?,
            weights: LossWeights {
                bc: r.float("train.lambda_bc", lw.bc)?,
                ic: r.float("train.lambda_ic", lw.ic)?,
                poisson: r.float("train.weight_poisson", lw.poisson)?,
                data_rho: r.float("train.weight_rho", lw.data_rho)?,
                data_g: r.float("train.weight_g", lw.data_g)?,
                data_f: r.float("train.weight_f", lw.data_f)?,
                data_phi: r.float("train.weight_phi", lw.data_phi)?,
            },
            velocity_weighting: r.parsed("train.velocity_weighting", td.velocity_weighting)?,
            validation_fraction: r.float("train.validation_fraction", td.validation_fraction)?,
            divergence_factor: r.float("train.divergence_factor", td.divergence_factor)?,
            log_every: r.uint("train.log_every", td.log_every)?,
        };
        train.validate().map_err(|e| invalid("train", &e.to_string()))?;
        if !(train.divergence_factor > 0.0) {
            return Err(invalid("train.divergence_factor", "must be positive"));
        }

        let dir: String = r.string("data.dir", "")?;
        let data = DataConfig {
            scenario: r.parsed("data.scenario", Scenario::Full)?,
            n_samples: r.uint("data.n_samples", 100)?,
            seed: r.uint("data.seed", 0)? as u64,
            dir: (!dir.is_empty()).then(|| PathBuf::from(dir)),
        };
        let output = OutputConfig { dir: PathBuf::from(r.string("output.dir", "out")?), svg: r.boolean("output.svg", true)? };
        let experiment = ExperimentConfig {
            epsilons: r.floats("experiment.epsilons", &[1.0, 0.1, 1e-3, 1e-8])?,
            seeds: r.uints("experiment.seeds", &[0, 1, 2])?.into_iter().map(|s| s as u64).collect(),
            sigma0s: r.floats("experiment.sigma0s", &[0.5, 1.0, 1.5, 1.7, 1.9])?,
            ap_epsilons: r.floats("experiment.ap_epsilons", &[1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-6, 1e-8])?,
            jobs: r.uint("experiment.jobs", 0)?,
        };
        Ok(Self { problem, solver, train, data, output, experiment, explicit })
    }

    fn to_flat(&self) -> BTreeMap<String, Value> {
        let text = self.to_toml();
        let table: toml::Table = toml::from_str(&text).expect("echo is valid TOML");
        let mut flat = BTreeMap::new();
        flatten("", table, &mut flat);
        flat
    }

    /// Every key with its resolved value, as loadable TOML.
    pub fn to_toml(&self) -> String {
        let p = &self.problem;
        let t = &self.train;
        let sigma = match &p.kernel {
            ScatteringKernel::Constant(s) => *s,
            ScatteringKernel::Tabulated(_) => unreachable!("configs only build constant kernels"),
        };
        let mut out = String::new();
        let mut section = |name: &str, rows: Vec<(&str, String)>| {
            writeln!(out, "[{name}]").unwrap();
            for (k, v) in rows {
                writeln!(out, "{k} = {v}").unwrap();
            }
            out.push('\n');
        };
        section(
            "problem",
            vec![
                ("kind", quote(&p.kind.to_string())),
                ("epsilon", float(p.epsilon)),
                ("sigma", float(sigma)),
                ("n_velocity", p.n_velocity.to_string()),
                ("t_final", float(p.t_final)),
                ("x_left", float(p.x_left)),
                ("x_right", float(p.x_right)),
                ("inflow_left", float(p.inflow_left)),
                ("inflow_right", float(p.inflow_right)),
                ("initial_density", float(p.initial_density)),
                ("bias_voltage", float(p.bias_voltage)),
                ("debye_beta", float(p.debye_beta)),
                ("doping_m", float(p.doping_m)),
            ],
        );
        section(
            "solver",
            vec![
                ("dx", float(self.solver.dx)),
                ("dt", float(self.solver.dt)),
                ("bc", quote(if self.solver.bc == BoundaryKind::Inflow { "inflow" } else { "periodic" })),
                ("snapshot_every", self.solver.snapshot_every.to_string()),
            ],
        );
        section(
            "train",
            vec![
                ("method", quote(&t.method.to_string())),
                ("inverse", quote(&t.inverse.to_string())),
                ("epochs", t.epochs.to_string()),
                ("learning_rate", float(t.learning_rate)),
                ("seed", t.seed.to_string()),
                ("sigma0", float(t.sigma0)),
                ("hidden", list(&t.hidden)),
                ("phi_hidden", list(&t.phi_hidden)),
                ("n_t", t.n_t.to_string()),
                ("n_x", t.n_x.to_string()),
                ("lambda_bc", float(t.weights.bc)),
                ("lambda_ic", float(t.weights.ic)),
                ("weight_poisson", float(t.weights.poisson)),
                ("weight_rho", float(t.weights.data_rho)),
                ("weight_g", float(t.weights.data_g)),
                ("weight_f", float(t.weights.data_f)),
                ("weight_phi", float(t.weights.data_phi)),
                ("velocity_weighting", quote(&t.velocity_weighting.to_string())),
                ("validation_fraction", float(t.validation_fraction)),
                ("divergence_factor", float(t.divergence_factor)),
                ("log_every", t.log_every.to_string()),
                ("adam_beta1", float(t.adam.beta1)),
                ("adam_beta2", float(t.adam.beta2)),
                ("adam_eps", float(t.adam.eps)),
            ],
        );
        section(
            "data",
            vec![
                ("scenario", quote(&self.data.scenario.to_string())),
                ("n_samples", self.data.n_samples.to_string()),
                ("seed", self.data.seed.to_string()),
                ("dir", quote(&self.data.dir.as_ref().map(|d| d.display().to_string()).unwrap_or_default())),
            ],
        );
        section(
            "output",
            vec![("dir", quote(&self.output.dir.display().to_string())), ("svg", self.output.svg.to_string())],
        );
        let e = &self.experiment;
        section(
            "experiment",
            vec![
                ("epsilons", floats(&e.epsilons)),
                ("seeds", list(&e.seeds)),
                ("sigma0s", floats(&e.sigma0s)),
                ("ap_epsilons", floats(&e.ap_epsilons)),
                ("jobs", e.jobs.to_string()),
            ],
        );
        out.truncate(out.trim_end().len());
        out.push('\n');
        out
    }
}

fn invalid(key: &str, message: &str) -> ConfigError {
    ConfigError::Invalid { key: key.into(), message: message.into() }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(s.into()));
    }
    let raw = raw.trim();
    // bare words such as `apnn` are taken as strings
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn float(x: f64) -> String {
    // `{:?}` is the shortest representation that round-trips
    let s = format!("{x:?}");
    if s.contains(['.', 'e', 'i', 'N']) {
        s
    } else {
        format!("{s}.0")
    }
}

fn floats(xs: &[f64]) -> String {
    format!("[{}]", xs.iter().map(|&x| float(x)).collect::<Vec<_>>().join(", "))
}

fn list<T: std::fmt::Display>(xs: &[T]) -> String {
    format!("[{}]", xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

fn quote(s: &str) -> String {
    Value::String(s.into()).to_string()
}

fn describe(v: &Value) -> String {
    match v {
        Value::String(s) => format!("string {s:?}"),
        Value::Integer(i) => format!("integer {i}"),
        Value::Float(x) => format!("float {x}"),
        Value::Boolean(b) => format!("boolean {b}"),
        Value::Array(_) => "array".into(),
        Value::Table(_) => "table".into(),
        Value::Datetime(d) => format!("datetime {d}"),
    }
}

struct Reader<'a> {
    flat: &'a mut BTreeMap<String, Value>,
}

impl Reader<'_> {
    fn float(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.flat.remove(key) {
            None => Ok(default),
            Some(v) => as_float(key, &v),
        }
    }

    fn uint(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.flat.remove(key) {
            None => Ok(default),
            Some(v) => as_uint(key, &v),
        }
    }

    fn boolean(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.flat.remove(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(b),
            Some(v) => Err(ConfigError::Type { key: key.into(), expected: "a boolean", found: describe(&v) }),
        }
    }

    fn string(&mut self, key: &str, default: &str) -> Result<String> {
        match self.flat.remove(key) {
            None => Ok(default.into()),
            Some(Value::String(s)) => Ok(s),
            Some(v) => Err(ConfigError::Type { key: key.into(), expected: "a string", found: describe(&v) }),
        }
    }

    fn parsed<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        match self.flat.remove(key) {
            None => Ok(default),
            Some(Value::String(s)) => s.parse().map_err(|e: T::Err| invalid(key, &e.to_string())),
            Some(v) => Err(ConfigError::Type { key: key.into(), expected: "a string", found: describe(&v) }),
        }
    }

    fn floats(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.flat.remove(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(a)) => a.iter().enumerate().map(|(i, v)| as_float(&format!("{key}[{i}]"), v)).collect(),
            Some(v) => Err(ConfigError::Type { key: key.into(), expected: "an array of numbers", found: describe(&v) }),
        }
    }

    fn uints(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.flat.remove(key) {
            None => Ok(default.to_vec()),
            Some(Value::Array(a)) => a.iter().enumerate().map(|(i, v)| as_uint(&format!("{key}[{i}]"), v)).collect(),
            Some(v) => Err(ConfigError::Type { key: key.into(), expected: "an array of integers", found: describe(&v) }),
        }
    }
}

fn as_float(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(ConfigError::Type { key: key.into(), expected: "a number", found: describe(other) }),
    }
}

fn as_uint(key: &str, v: &Value) -> Result<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(ConfigError::Type { key: key.into(), expected: "a non-negative integer", found: describe(other) }),
    }
}
