//! Full-batch Adam training for forward and inverse problems.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hermite::VelocityGrid;
use crate::losses::{
    data_loss_apnn, data_loss_pinn, CollocationSet, Heads, LossAssembler, LossBreakdown, LossRequest, LossWeights,
    LossWorkspace, Observations, VelocitySample, VelocityWeighting,
};
use crate::net::Network;
use crate::problem::ProblemConfig;
use crate::refsolver::relative_l2;

/// Smallest admissible scattering coefficient.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Pinn,
    Apnn,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pinn" => Ok(Method::Pinn),
            "apnn" => Ok(Method::Apnn),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}` (expected pinn | apnn)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Pinn => "pinn",
            Method::Apnn => "apnn",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InverseMode {
    None,
    Full,
    Partial,
}

impl std::str::FromStr for InverseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(InverseMode::None),
            "full" => Ok(InverseMode::Full),
            "partial" => Ok(InverseMode::Partial),
            other => Err(Error::InvalidArgument(format!("unknown inverse mode `{other}` (expected none | full | partial)"))),
        }
    }
}

impl std::fmt::Display for InverseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InverseMode::None => "none",
            InverseMode::Full => "full",
            InverseMode::Partial => "partial",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Bias-corrected Adam update for step `t` (1-based).
pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut AdamMoments, t: u64, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(Error::Shape { expected: n, found: grads.len() });
    }
    if t == 0 {
        return Err(Error::InvalidArgument("Adam steps are counted from 1".into()));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Diverged { epoch: t as usize, reason: format!("non-finite gradient entry {k}") });
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..n {
        let g = grads[k];
        moments.m[k] = cfg.beta1 * moments.m[k] + (1.0 - cfg.beta1) * g;
        moments.v[k] = cfg.beta2 * moments.v[k] + (1.0 - cfg.beta2) * g * g;
        let mh = moments.m[k] / c1;
        let vh = moments.v[k] / c2;
        params[k] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub inverse: InverseMode,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Initial guess for the learnable scattering coefficient.
    pub sigma0: f64,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    /// Hidden widths of the potential head (Boltzmann-Poisson only).
    pub phi_hidden: Vec<usize>,
    pub n_t: usize,
    pub n_x: usize,
    pub weights: LossWeights,
    pub velocity_weighting: VelocityWeighting,
    /// Fraction of velocity nodes whose micro observations are held out.
    pub validation_fraction: f64,
    /// Divergence when the loss exceeds this multiple of `max(initial, 1)`.
    pub divergence_factor: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Apnn,
            inverse: InverseMode::None,
            epochs: 10_000,
            learning_rate: 1e-3,
            seed: 0,
            sigma0: 0.5,
            adam: AdamConfig::default(),
            hidden: vec![128; 4],
            phi_hidden: vec![128; 14],
            n_t: 20,
            n_x: 99,
            weights: LossWeights::default(),
            velocity_weighting: VelocityWeighting::Maxwellian,
            validation_fraction: 0.2,
            divergence_factor: 1e6,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.phi_hidden.is_empty() || self.phi_hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidArgument("validation_fraction must lie in [0, 1)".into()));
        }
        if self.inverse != InverseMode::None && !(self.sigma0 > 0.0) {
            return Err(Error::InvalidArgument("sigma0 must be positive".into()));
        }
        Ok(())
    }
}

/// Trained heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub method: Method,
    /// `ρ̃(t, x)` for APNN, `ψ_f(t, x, v)` for PINN.
    pub primary: Network,
    pub micro: Option<Network>,
    pub phi: Option<Network>,
    pub sigma: Option<f64>,
    grid: VelocityGrid,
}

impl TrainedModel {
    /// Fresh Xavier-initialized heads for `problem`.
    pub fn init(problem: &ProblemConfig, cfg: &TrainConfig) -> Result<Self> {
        let grid = VelocityGrid::new(problem.n_velocity)?;
        let v = grid.nodes();
        let (vmin, vmax) = (v[0], v[v.len() - 1]);
        let (lo2, hi2) = ([0.0, problem.x_left], [problem.t_final, problem.x_right]);
        let (lo3, hi3) = ([0.0, problem.x_left, vmin], [problem.t_final, problem.x_right, vmax]);
        let widths = |n_in: usize, hidden: &[usize]| -> Vec<usize> {
            std::iter::once(n_in).chain(hidden.iter().copied()).chain(std::iter::once(1)).collect()
        };
        let seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (primary, micro) = match cfg.method {
            Method::Apnn => (
                Network::xavier_init(&widths(2, &cfg.hidden), seed)?.with_input_bounds(&lo2, &hi2)?,
                Some(Network::xavier_init(&widths(3, &cfg.hidden), seed + 1)?.with_input_bounds(&lo3, &hi3)?),
            ),
            Method::Pinn => (Network::xavier_init(&widths(3, &cfg.hidden), seed)?.with_input_bounds(&lo3, &hi3)?, None),
        };
        let phi = if problem.uses_poisson() {
            Some(Network::xavier_init(&widths(2, &cfg.phi_hidden), seed + 2)?.with_input_bounds(&lo2, &hi2)?)
        } else {
            None
        };
        let sigma = (cfg.inverse != InverseMode::None).then_some(cfg.sigma0);
        Ok(Self { method: cfg.method, primary, micro, phi, sigma, grid })
    }

    fn heads(&self) -> Heads<'_> {
        match (&self.micro, self.method) {
            (Some(g), Method::Apnn) => Heads::Apnn { rho: &self.primary, g },
            _ => Heads::Pinn { f: &self.primary },
        }
    }

    fn n_params(&self) -> usize {
        self.primary.n_params()
            + self.micro.as_ref().map_or(0, |m| m.n_params())
            + self.phi.as_ref().map_or(0, |p| p.n_params())
            + usize::from(self.sigma.is_some())
    }

    fn gather_params(&self, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(self.primary.params());
        if let Some(m) = &self.micro {
            out.extend_from_slice(m.params());
        }
        if let Some(p) = &self.phi {
            out.extend_from_slice(p.params());
        }
        if let Some(s) = self.sigma {
            out.push(s);
        }
    }

    fn scatter_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[off..off + dst.len()]);
            off += dst.len();
        };
        take(self.primary.params_mut());
        if let Some(m) = &mut self.micro {
            take(m.params_mut());
        }
        if let Some(p) = &mut self.phi {
            take(p.params_mut());
        }
        if let Some(s) = &mut self.sigma {
            *s = flat[off];
        }
    }

    /// Density at time `t` on the points `xs`.
    pub fn density(&self, t: f64, xs: &[f64]) -> Result<Vec<f64>> {
        match self.method {
            Method::Apnn => {
                let inputs = Array2::from_shape_fn((xs.len(), 2), |(r, c)| if c == 0 { t } else { xs[r] });
                Ok(self.primary.predict(&inputs)?.into_iter().map(|r| (-r).exp()).collect())
            }
            Method::Pinn => {
                let v = self.grid.nodes();
                let w = self.grid.weights();
                let nv = v.len();
                let inputs = Array2::from_shape_fn((xs.len() * nv, 3), |(r, c)| [t, xs[r / nv], v[r % nv]][c]);
                let psi = self.primary.predict(&inputs)?;
                Ok(psi.chunks_exact(nv).map(|b| b.iter().zip(w).map(|(p, w)| p * w).sum()).collect())
            }
        }
    }

    pub fn potential(&self, t: f64, xs: &[f64]) -> Result<Option<Vec<f64>>> {
        let Some(phi) = &self.phi else { return Ok(None) };
        let inputs = Array2::from_shape_fn((xs.len(), 2), |(r, c)| if c == 0 { t } else { xs[r] });
        Ok(Some(phi.predict(&inputs)?))
    }
}

/// Reference profiles at the final time used for the error report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProfile {
    pub time: f64,
    pub x: Vec<f64>,
    pub rho: Vec<f64>,
    pub phi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub method: Method,
    pub inverse: InverseMode,
    pub seed: u64,
    pub epochs: usize,
    /// Loss before each update.
    pub history: Vec<LossBreakdown>,
    /// `σ̂` after each update (inverse runs).
    pub sigma_history: Vec<f64>,
    /// `(epoch, loss)` on held-out micro observations.
    pub validation: Vec<(usize, f64)>,
    pub final_loss: LossBreakdown,
    pub final_error: Option<f64>,
    pub phi_error: Option<f64>,
    pub sigma_hat: Option<f64>,
    pub sigma_clamped: usize,
    pub wall_s: f64,
}

impl TrainReport {
    /// `epoch,total,ge_macro,ge_micro,bc,ic,data` rows.
    pub fn history_csv(&self, weights: &LossWeights) -> String {
        let mut s = String::from("epoch,total,ge_macro,ge_micro,bc,ic,data\n");
        for (e, b) in self.history.iter().enumerate() {
            s.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}\n",
                e + 1,
                b.total,
                b.ge_macro,
                b.ge_micro,
                b.bc + b.phi_bc,
                b.ic,
                b.data(weights)
            ));
        }
        s
    }
}

/// Splits micro observations by velocity node: a seeded fraction of nodes is held out.
pub fn validation_split(data: &Observations, grid: &VelocityGrid, fraction: f64, seed: u64) -> (Observations, Observations) {
    let nv = grid.n_nodes();
    let n_hold = ((fraction * nv as f64).round() as usize).min(nv.saturating_sub(1));
    let mut order: Vec<usize> = (0..nv).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e));
    let held: Vec<f64> = order[..n_hold].iter().map(|&j| grid.nodes()[j]).collect();
    let is_held = |s: &VelocitySample| held.iter().any(|&v| (v - s.v).abs() <= 1e-9 * (1.0 + v.abs()));
    let split = |samples: &[VelocitySample]| -> (Vec<VelocitySample>, Vec<VelocitySample>) {
        samples.iter().partition(|s| !is_held(s))
    };
    let (g_train, g_valid) = split(&data.g);
    let (f_train, f_valid) = split(&data.f);
    (
        Observations { rho: data.rho.clone(), g: g_train, f: f_train, phi: data.phi.clone() },
        Observations { g: g_valid, f: f_valid, ..Observations::default() },
    )
}

/// Raises a non-positive `σ` to [`SIGMA_FLOOR`]; true if it did.
pub fn clamp_sigma(sigma: &mut f64) -> bool {
    if *sigma <= 0.0 || sigma.is_nan() {
        *sigma = SIGMA_FLOOR;
        true
    } else {
        false
    }
}

/// `√(Σ|pred − ref|² / Σ|ref|²)`.
pub fn relative_l2_error(pred: &[f64], reference: &[f64]) -> Result<f64> {
    relative_l2(pred, reference)
}

fn validation_loss(model: &TrainedModel, valid: &Observations, w: &LossWeights) -> Result<Option<f64>> {
    match model.method {
        Method::Apnn if !valid.g.is_empty() => {
            let micro = model.micro.as_ref().expect("APNN model has a micro head");
            Ok(Some(data_loss_apnn(&model.primary, micro, &model.grid, valid, w)?))
        }
        Method::Pinn if !valid.f.is_empty() => Ok(Some(data_loss_pinn(&model.primary, valid, w)?)),
        _ => Ok(None),
    }
}

/// Minimizes the method's risk (plus data misfit for inverse runs) from a fresh initialization.
pub fn train(
    problem: &ProblemConfig,
    cfg: &TrainConfig,
    data: Option<&Observations>,
    reference: Option<&ReferenceProfile>,
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    let model = TrainedModel::init(problem, cfg)?;
    train_from(model, problem, cfg, data, reference)
}

/// Same as [`train`] from given heads.
pub fn train_from(
    mut model: TrainedModel,
    problem: &ProblemConfig,
    cfg: &TrainConfig,
    data: Option<&Observations>,
    reference: Option<&ReferenceProfile>,
) -> Result<(TrainedModel, TrainReport)> {
    cfg.validate()?;
    let start = Instant::now();
    if cfg.inverse != InverseMode::None && data.is_none_or(|d| d.is_empty()) {
        return Err(Error::EmptyData("inverse training needs observations".into()));
    }
    if cfg.method == Method::Pinn && problem.epsilon == 0.0 {
        return Err(Error::InvalidArgument("PINN training is singular at epsilon = 0".into()));
    }
    let grid = model.grid.clone();
    let (train_data, valid_data) = match data {
        Some(d) => validation_split(d, &grid, cfg.validation_fraction, cfg.seed),
        None => (Observations::default(), Observations::default()),
    };
    let colloc = CollocationSet::uniform(problem, cfg.n_t, cfg.n_x)?;
    let assembler = LossAssembler::new(problem, colloc, cfg.weights, train_data)?.with_velocity_weighting(cfg.velocity_weighting);
    let mut ws = LossWorkspace::default();

    let n = model.n_params();
    let mut flat = Vec::with_capacity(n);
    let mut grad = vec![0.0; n];
    let mut moments = AdamMoments::new(n);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut sigma_history = Vec::new();
    let mut validation = Vec::new();
    let mut sigma_clamped = 0;
    let mut scale = None;

    for epoch in 1..=cfg.epochs {
        let req = LossRequest { heads: model.heads(), phi: model.phi.as_ref().map(|p| p as _), sigma: model.sigma, epsilon: problem.epsilon };
        let out = assembler.evaluate(&req, &mut ws, true)?;
        let loss = out.breakdown.total;
        let limit = *scale.get_or_insert(cfg.divergence_factor * loss.max(1.0));
        if !loss.is_finite() || loss > limit {
            return Err(Error::Diverged { epoch, reason: format!("loss {loss:e} exceeds {limit:e}") });
        }
        let g = out.gradients.expect("requested");
        grad.clear();
        grad.extend_from_slice(&g.primary);
        grad.extend_from_slice(&g.micro);
        grad.extend_from_slice(&g.phi);
        if model.sigma.is_some() {
            grad.push(g.sigma);
        }
        history.push(out.breakdown);

        model.gather_params(&mut flat);
        adam_step(&mut flat, &grad, &mut moments, epoch as u64, cfg.learning_rate, &cfg.adam)
            .map_err(|e| match e {
                Error::Diverged { reason, .. } => Error::Diverged { epoch, reason },
                other => other,
            })?;
        if model.sigma.is_some() {
            let s = flat.last_mut().expect("sigma is the last parameter");
            let raw = *s;
            if clamp_sigma(s) {
                log::warn!("epoch {epoch}: scattering coefficient {raw:e} clamped to {SIGMA_FLOOR:e}");
                sigma_clamped += 1;
            }
        }
        model.scatter_params(&flat);
        if let Some(s) = model.sigma {
            sigma_history.push(s);
        }
        if cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch == cfg.epochs) {
            if let Some(v) = validation_loss(&model, &valid_data, &cfg.weights)? {
                validation.push((epoch, v));
            }
            log::info!("epoch {epoch}: loss {loss:.6e}{}", model.sigma.map(|s| format!(", sigma {s:.6}")).unwrap_or_default());
        }
    }

    let req = LossRequest { heads: model.heads(), phi: model.phi.as_ref().map(|p| p as _), sigma: model.sigma, epsilon: problem.epsilon };
    let final_loss = assembler.evaluate(&req, &mut ws, false)?.breakdown;
    let (final_error, phi_error) = match reference {
        Some(r) => {
            let rho = model.density(r.time, &r.x)?;
            let e_rho = relative_l2_error(&rho, &r.rho)?;
            let e_phi = match (&r.phi, model.potential(r.time, &r.x)?) {
                (Some(refp), Some(p)) => Some(relative_l2_error(&p, refp)?),
                _ => None,
            };
            (Some(e_rho), e_phi)
        }
        None => (None, None),
    };
    let report = TrainReport {
        method: cfg.method,
        inverse: cfg.inverse,
        seed: cfg.seed,
        epochs: cfg.epochs,
        history,
        sigma_history,
        validation,
        final_loss,
        final_error,
        phi_error,
        sigma_hat: model.sigma,
        sigma_clamped,
        wall_s: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Forward problem: no data, no learnable coefficient.
pub fn train_forward(problem: &ProblemConfig, cfg: &TrainConfig, reference: Option<&ReferenceProfile>) -> Result<(TrainedModel, TrainReport)> {
    if cfg.inverse != InverseMode::None {
        return Err(Error::InvalidArgument("forward training takes inverse = none".into()));
    }
    train(problem, cfg, None, reference)
}

/// Inverse problem: learns `σ` from observations starting at `cfg.sigma0`.
pub fn train_inverse(
    problem: &ProblemConfig,
    cfg: &TrainConfig,
    data: &Observations,
    reference: Option<&ReferenceProfile>,
) -> Result<(TrainedModel, TrainReport)> {
    if cfg.inverse == InverseMode::None {
        return Err(Error::InvalidArgument("inverse training needs inverse = full | partial".into()));
    }
    let data = match cfg.inverse {
        InverseMode::Partial => Observations { g: Vec::new(), f: Vec::new(), ..data.clone() },
        _ => data.clone(),
    };
    train(problem, cfg, Some(&data), reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::PointSample;

    fn tiny(method: Method) -> TrainConfig {
        TrainConfig { method, epochs: 4, hidden: vec![4], n_t: 2, n_x: 3, log_every: 0, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3, -1.2, 4.0];
        let mut m = AdamMoments::new(3);
        for t in 1..=5 {
            adam_step(&mut p, &[0.0; 3], &mut m, t, 0.1, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = [1.0];
        let mut m = AdamMoments::new(1);
        for t in 1..=500 {
            let g = [2.0 * x[0]];
            adam_step(&mut x, &g, &mut m, t, 0.1, &AdamConfig::default()).unwrap();
        }
        assert!(x[0].abs() <= 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut m = AdamMoments::new(2);
        let mut p = [1.0, 2.0];
        let err = adam_step(&mut p, &[0.0, f64::NAN], &mut m, 7, 0.1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 7, .. }));
        assert_eq!(p, [1.0, 2.0]);
        assert!(adam_step(&mut p, &[0.0], &mut m, 1, 0.1, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut p, &[0.0, 0.0], &mut m, 0, 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn relative_error_examples() {
        let r = [1.0, 2.0, 2.0];
        assert_eq!(relative_l2_error(&r, &r).unwrap(), 0.0);
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert!((relative_l2_error(&twice, &r).unwrap() - 1.0).abs() < 1e-15);
        let mut bumped = r;
        bumped[1] += 0.3;
        assert!((relative_l2_error(&bumped, &r).unwrap() - 0.1).abs() < 1e-14);
        assert!(relative_l2_error(&r, &[0.0; 3]).is_err());
    }

    #[test]
    fn sigma_clamp() {
        let mut s = -0.2;
        assert!(clamp_sigma(&mut s));
        assert_eq!(s, SIGMA_FLOOR);
        let mut s = 1.5;
        assert!(!clamp_sigma(&mut s));
        assert_eq!(s, 1.5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { hidden: vec![], ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { inverse: InverseMode::Full, sigma0: -1.0, ..TrainConfig::default() }.validate().is_err());
        for m in ["pinn", "apnn"] {
            assert_eq!(m.parse::<Method>().unwrap().to_string(), m);
        }
        for m in ["none", "full", "partial"] {
            assert_eq!(m.parse::<InverseMode>().unwrap().to_string(), m);
        }
        assert!("cnn".parse::<Method>().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let p = ProblemConfig::semiconductor(0.1);
        for method in [Method::Apnn, Method::Pinn] {
            let cfg = tiny(method);
            let (a, ra) = train_forward(&p, &cfg, None).unwrap();
            let (b, rb) = train_forward(&p, &cfg, None).unwrap();
            assert_eq!(a, b);
            assert_eq!(ra.history, rb.history);
            assert_eq!(ra.history.len(), cfg.epochs);
            assert!(ra.history.iter().all(|h| h.total.is_finite()));
            let (c, _) = train_forward(&p, &TrainConfig { seed: 1, ..cfg }, None).unwrap();
            assert_ne!(a.primary, c.primary);
        }
    }

    #[test]
    fn loss_above_ceiling_aborts() {
        let p = ProblemConfig::semiconductor(0.1);
        let cfg = TrainConfig { divergence_factor: 1e-9, ..tiny(Method::Apnn) };
        assert!(matches!(train_forward(&p, &cfg, None), Err(Error::Diverged { epoch: 1, .. })));
    }

    #[test]
    fn inverse_records_sigma_and_rejects_missing_data() {
        let p = ProblemConfig::semiconductor(1e-8);
        let cfg = TrainConfig { inverse: InverseMode::Partial, sigma0: 1.0, ..tiny(Method::Apnn) };
        let data = Observations {
            rho: vec![PointSample { t: 0.05, x: 0.5, value: 1.0 }, PointSample { t: 0.1, x: 0.3, value: 1.2 }],
            ..Observations::default()
        };
        let (model, rep) = train_inverse(&p, &cfg, &data, None).unwrap();
        assert_eq!(rep.sigma_history.len(), cfg.epochs);
        assert_eq!(rep.sigma_hat, model.sigma);
        assert_ne!(rep.sigma_hat, Some(1.0));
        assert!(train_inverse(&p, &cfg, &Observations::default(), None).is_err());
        assert!(train_forward(&p, &cfg, None).is_err());
        assert!(train_inverse(&p, &tiny(Method::Apnn), &data, None).is_err());
    }

    #[test]
    fn validation_split_holds_out_whole_nodes() {
        let grid = VelocityGrid::new(8).unwrap();
        let g: Vec<VelocitySample> = (0..40)
            .map(|k| VelocitySample { t: 0.01 * k as f64, x: 0.5, v: grid.nodes()[k % 8], value: k as f64 })
            .collect();
        let data = Observations { g, ..Observations::default() };
        let (train, valid) = validation_split(&data, &grid, 0.2, 3);
        assert_eq!(train.g.len() + valid.g.len(), 40);
        assert_eq!(valid.g.len(), 10);
        for s in &valid.g {
            assert!(train.g.iter().all(|t| t.v != s.v));
        }
        assert_eq!(validation_split(&data, &grid, 0.2, 3), (train, valid));
        let (all, none) = validation_split(&data, &grid, 0.0, 3);
        assert_eq!(all.g.len(), 40);
        assert!(none.g.is_empty());
    }
}
