//! Fully connected tanh networks with exact input derivatives.
//!
//! A forward pass propagates a stack of streams through every layer: the
//! primal activations, one tangent per requested input direction and
//! optionally one pure second derivative along a tangent direction. All
//! streams share one matrix product per layer. [`Network::backward`] pulls
//! adjoints of any stream back to the flat parameter vector, which gives
//! parameter gradients of losses built from input derivatives.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hermite::VelocityGrid;

const CHECKPOINT_TAG: &str = "apnn-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    widths: Vec<usize>,
    params: Vec<f64>,
    /// `x̂ = (x − shift) · scale` applied to raw inputs.
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
}

/// Which derivative streams a forward pass carries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalSpec {
    /// Input indices to differentiate along.
    pub tangents: Vec<usize>,
    /// Input index for a pure second derivative; must be listed in `tangents`.
    pub second: Option<usize>,
}

impl EvalSpec {
    pub fn primal() -> Self {
        Self::default()
    }

    pub fn first(tangents: &[usize]) -> Self {
        Self { tangents: tangents.to_vec(), second: None }
    }

    pub fn with_second(tangents: &[usize], second: usize) -> Self {
        Self { tangents: tangents.to_vec(), second: Some(second) }
    }

    pub fn n_streams(&self) -> usize {
        1 + self.tangents.len() + usize::from(self.second.is_some())
    }

    /// Stream index of the tangent along `input`.
    pub fn tangent_stream(&self, input: usize) -> Option<usize> {
        self.tangents.iter().position(|&t| t == input).map(|p| p + 1)
    }

    pub fn second_stream(&self) -> Option<usize> {
        self.second.map(|_| 1 + self.tangents.len())
    }
}

/// Output of a batched forward pass plus the buffers used by [`Network::backward`].
///
/// Passing the same evaluation back to [`Network::forward_into`] reuses its
/// buffers when the shapes match.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    batch: usize,
    n_out: usize,
    spec: EvalSpec,
    /// Per stream, `batch × n_out` row-major.
    outputs: Vec<Vec<f64>>,
    /// Input of each layer; the first holds only the normalized primal inputs.
    acts: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    zbar: Vec<Array2<f64>>,
    abar: Vec<Array2<f64>>,
}

fn ensure(bufs: &mut Vec<Array2<f64>>, i: usize, shape: (usize, usize)) {
    while bufs.len() <= i {
        bufs.push(Array2::zeros((0, 0)));
    }
    if bufs[i].dim() != shape {
        bufs[i] = Array2::zeros(shape);
    }
}

impl Evaluation {
    /// Scalar-output evaluation assembled from precomputed streams, ordered as in `spec`.
    pub fn from_streams(spec: EvalSpec, streams: Vec<Vec<f64>>) -> Result<Self> {
        if streams.len() != spec.n_streams() {
            return Err(Error::Shape { expected: spec.n_streams(), found: streams.len() });
        }
        let batch = streams[0].len();
        if let Some(s) = streams.iter().find(|s| s.len() != batch) {
            return Err(Error::Shape { expected: batch, found: s.len() });
        }
        Ok(Self { batch, n_out: 1, spec, outputs: streams, ..Self::default() })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n_outputs(&self) -> usize {
        self.n_out
    }

    pub fn spec(&self) -> &EvalSpec {
        &self.spec
    }

    pub fn stream(&self, k: usize) -> &[f64] {
        &self.outputs[k]
    }

    pub fn values(&self) -> &[f64] {
        &self.outputs[0]
    }

    /// Derivative along input `input`, if it was requested.
    pub fn tangent(&self, input: usize) -> Option<&[f64]> {
        self.spec.tangent_stream(input).map(|k| self.outputs[k].as_slice())
    }

    pub fn second(&self) -> Option<&[f64]> {
        self.spec.second_stream().map(|k| self.outputs[k].as_slice())
    }
}

/// A network output together with its derivatives along every input.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffValue {
    pub value: f64,
    pub input_grads: Vec<f64>,
}

/// `exp(x)` for `x ≤ 0`, branch-free, within 2 ulp of the libm result.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0;
    const LN2_HI: f64 = 0.693_147_180_369_123_816_49;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-700.0);
    let kk = x * std::f64::consts::LOG2_E + ROUND;
    let k = kk - ROUND;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    p * f64::from_bits(kk.to_bits().wrapping_add(1023) << 52)
}

#[inline(always)]
fn tanh(z: f64) -> f64 {
    let e = exp_nonpositive(-2.0 * z.abs());
    ((1.0 - e) / (1.0 + e)).copysign(z)
}

fn second_streams(spec: &EvalSpec) -> Option<(usize, usize)> {
    match (spec.second, spec.second_stream()) {
        (Some(d), Some(sec)) => Some((spec.tangent_stream(d).expect("second direction is a tangent"), sec)),
        _ => None,
    }
}

/// Hidden-layer activation of every stream: `s = tanh z`, `ṡ = q ż`,
/// `s̈ = q z̈ − 2 s q ż_d²` with `q = 1 − s²`.
fn tanh_streams_into(z: &Array2<f64>, batch: usize, spec: &EvalSpec, a: &mut Array2<f64>) {
    let block = batch * z.ncols();
    let zs = z.as_slice().expect("contiguous");
    let out = a.as_slice_mut().expect("contiguous");
    for (o, zi) in out[..block].iter_mut().zip(&zs[..block]) {
        *o = tanh(*zi);
    }
    let n_t = spec.tangents.len();
    let second = second_streams(spec);
    for k in 0..block {
        let s = out[k];
        let q = 1.0 - s * s;
        for t in 1..=n_t {
            out[t * block + k] = q * zs[t * block + k];
        }
        if let Some((ds, sec)) = second {
            let zd = zs[ds * block + k];
            out[sec * block + k] = q * zs[sec * block + k] - 2.0 * s * q * zd * zd;
        }
    }
}

/// Adjoint of [`tanh_streams_into`]: maps `ā` on the activations to `z̄`.
fn tanh_streams_adjoint_into(
    abar: &Array2<f64>,
    z: &Array2<f64>,
    act: &Array2<f64>,
    batch: usize,
    spec: &EvalSpec,
    zbar: &mut Array2<f64>,
) {
    let block = batch * z.ncols();
    let ab = abar.as_slice().expect("contiguous");
    let zs = z.as_slice().expect("contiguous");
    let acts = act.as_slice().expect("contiguous");
    let out = zbar.as_slice_mut().expect("contiguous");
    let n_t = spec.tangents.len();
    let second = second_streams(spec);
    for k in 0..block {
        let s = acts[k];
        let q = 1.0 - s * s;
        let mut primal = ab[k] * q;
        for t in 1..=n_t {
            let at = ab[t * block + k];
            out[t * block + k] = at * q;
            primal -= 2.0 * s * q * at * zs[t * block + k];
        }
        if let Some((ds, sec)) = second {
            let a2 = ab[sec * block + k];
            let zd = zs[ds * block + k];
            let z2 = zs[sec * block + k];
            out[sec * block + k] = a2 * q;
            out[ds * block + k] -= 4.0 * a2 * s * q * zd;
            primal += a2 * (-2.0 * s * q * z2 - 2.0 * zd * zd * q * (1.0 - 3.0 * s * s));
        }
        out[k] = primal;
    }
}

impl Network {
    /// Xavier-uniform weights, zero biases, identity input map.
    pub fn xavier_init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("network needs at least two non-zero layer widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(Self::count_params(widths));
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        let d = widths[0];
        Ok(Self { widths: widths.to_vec(), params, input_shift: vec![0.0; d], input_scale: vec![1.0; d] })
    }

    /// Builds a network from explicit parameters in layer order (`W` row-major, then `b`).
    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("network needs at least two non-zero layer widths".into()));
        }
        let expected = Self::count_params(widths);
        if params.len() != expected {
            return Err(Error::Shape { expected, found: params.len() });
        }
        let d = widths[0];
        Ok(Self { widths: widths.to_vec(), params, input_shift: vec![0.0; d], input_scale: vec![1.0; d] })
    }

    fn count_params(widths: &[usize]) -> usize {
        widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Maps each input from `[lower, upper]` onto `[−1, 1]` before the first layer.
    pub fn with_input_bounds(mut self, lower: &[f64], upper: &[f64]) -> Result<Self> {
        let d = self.widths[0];
        if lower.len() != d || upper.len() != d {
            return Err(Error::Shape { expected: d, found: lower.len().min(upper.len()) });
        }
        for k in 0..d {
            if !(upper[k] > lower[k]) {
                return Err(Error::InvalidArgument(format!("input {k} has an empty range")));
            }
            self.input_shift[k] = 0.5 * (lower[k] + upper[k]);
            self.input_scale[k] = 2.0 / (upper[k] - lower[k]);
        }
        Ok(self)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn n_hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self, layer: usize) -> (usize, usize) {
        let mut off = 0;
        for l in 0..layer {
            off += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }
        (off, off + self.widths[layer] * self.widths[layer + 1])
    }

    fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let (wo, bo) = self.layer_offsets(layer);
        ArrayView2::from_shape((self.widths[layer + 1], self.widths[layer]), &self.params[wo..bo]).expect("layer shape")
    }

    fn bias(&self, layer: usize) -> &[f64] {
        let (_, bo) = self.layer_offsets(layer);
        &self.params[bo..bo + self.widths[layer + 1]]
    }

    fn check_spec(&self, spec: &EvalSpec) -> Result<()> {
        let d = self.n_inputs();
        if spec.tangents.iter().any(|&t| t >= d) {
            return Err(Error::InvalidArgument(format!("tangent direction out of range for {d} inputs")));
        }
        if let Some(sd) = spec.second {
            if !spec.tangents.contains(&sd) {
                return Err(Error::InvalidArgument("second-derivative direction must also be a tangent".into()));
            }
        }
        Ok(())
    }

    /// Batched forward pass; `inputs` is `batch × n_inputs`.
    pub fn forward(&self, inputs: &Array2<f64>, spec: &EvalSpec) -> Result<Evaluation> {
        let mut eval = Evaluation::default();
        self.forward_into(inputs, spec, &mut eval)?;
        Ok(eval)
    }

    /// As [`Network::forward`], overwriting `eval` and reusing its buffers.
    pub fn forward_into(&self, inputs: &Array2<f64>, spec: &EvalSpec, eval: &mut Evaluation) -> Result<()> {
        let d = self.n_inputs();
        if inputs.ncols() != d {
            return Err(Error::Shape { expected: d, found: inputs.ncols() });
        }
        self.check_spec(spec)?;
        let batch = inputs.nrows();
        let n_s = spec.n_streams();
        let n_layers = self.widths.len() - 1;
        eval.batch = batch;
        eval.n_out = self.n_outputs();
        eval.spec = spec.clone();
        let Evaluation { acts, pre, outputs, .. } = eval;

        ensure(acts, 0, (batch, d));
        for (mut dst, src) in acts[0].rows_mut().into_iter().zip(inputs.rows()) {
            for k in 0..d {
                dst[k] = (src[k] - self.input_shift[k]) * self.input_scale[k];
            }
        }
        for l in 0..n_layers {
            ensure(pre, l, (n_s * batch, self.widths[l + 1]));
            if l == 0 {
                self.first_layer_into(&acts[0], spec, &mut pre[0]);
            } else {
                general_mat_mul(1.0, &acts[l], &self.weight(l).t(), 0.0, &mut pre[l]);
                let b = self.bias(l);
                for mut row in pre[l].slice_mut(s![0..batch, ..]).rows_mut() {
                    for (zi, bi) in row.iter_mut().zip(b) {
                        *zi += bi;
                    }
                }
            }
            if l + 1 < n_layers {
                ensure(acts, l + 1, (n_s * batch, self.widths[l + 1]));
                tanh_streams_into(&pre[l], batch, spec, &mut acts[l + 1]);
            }
        }
        let n_out = self.n_outputs();
        let flat = pre[n_layers - 1].as_slice().expect("contiguous");
        outputs.resize(n_s, Vec::new());
        outputs.truncate(n_s);
        for (k, out) in outputs.iter_mut().enumerate() {
            out.clear();
            out.extend_from_slice(&flat[k * batch * n_out..(k + 1) * batch * n_out]);
        }
        Ok(())
    }

    /// First affine map; tangent rows are constant columns of `W`, second rows vanish.
    fn first_layer_into(&self, xhat: &Array2<f64>, spec: &EvalSpec, z: &mut Array2<f64>) {
        let batch = xhat.nrows();
        let d = xhat.ncols();
        let w = self.weight(0);
        let b = self.bias(0);
        let width = b.len();
        for r in 0..batch {
            let xr = xhat.row(r);
            let mut zr = z.row_mut(r);
            for o in 0..width {
                let mut acc = b[o];
                for k in 0..d {
                    acc += xr[k] * w[[o, k]];
                }
                zr[o] = acc;
            }
        }
        for (p, &t) in spec.tangents.iter().enumerate() {
            let col: Vec<f64> = (0..width).map(|o| w[[o, t]] * self.input_scale[t]).collect();
            for mut row in z.slice_mut(s![(p + 1) * batch..(p + 2) * batch, ..]).rows_mut() {
                row.as_slice_mut().expect("contiguous").copy_from_slice(&col);
            }
        }
        if let Some(sec) = spec.second_stream() {
            z.slice_mut(s![sec * batch..(sec + 1) * batch, ..]).fill(0.0);
        }
    }

    /// Primal outputs only, `batch × n_out` row-major.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(self.forward(inputs, &EvalSpec::primal())?.outputs.swap_remove(0))
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂(stream k)` for each stream.
    ///
    /// `adjoints[k]` is `None` for streams the loss does not use.
    pub fn backward(&self, eval: &mut Evaluation, adjoints: &[Option<Vec<f64>>], grad: &mut [f64]) -> Result<()> {
        let n_s = eval.spec.n_streams();
        if adjoints.len() != n_s {
            return Err(Error::Shape { expected: n_s, found: adjoints.len() });
        }
        if grad.len() != self.params.len() {
            return Err(Error::Shape { expected: self.params.len(), found: grad.len() });
        }
        let batch = eval.batch;
        let n_out = eval.n_out;
        let n_layers = self.widths.len() - 1;
        if eval.pre.len() < n_layers || eval.pre[n_layers - 1].dim() != (n_s * batch, n_out) {
            return Err(Error::InvalidArgument("evaluation does not belong to this network".into()));
        }
        let Evaluation { acts, pre, zbar, abar, spec, .. } = eval;
        let last = n_layers - 1;
        ensure(zbar, last, (n_s * batch, n_out));
        {
            let dst = zbar[last].as_slice_mut().expect("contiguous");
            for (k, adj) in adjoints.iter().enumerate() {
                let block = &mut dst[k * batch * n_out..(k + 1) * batch * n_out];
                match adj {
                    Some(a) if a.len() == batch * n_out => block.copy_from_slice(a),
                    Some(a) => return Err(Error::Shape { expected: batch * n_out, found: a.len() }),
                    None => block.fill(0.0),
                }
            }
        }
        for l in (0..n_layers).rev() {
            if l < last {
                ensure(zbar, l, pre[l].dim());
                tanh_streams_adjoint_into(&abar[l + 1], &pre[l], &acts[l + 1], batch, spec, &mut zbar[l]);
            }
            let (n_o, n_i) = (self.widths[l + 1], self.widths[l]);
            let (wo, bo) = self.layer_offsets(l);
            {
                let mut gw = ArrayViewMut2::from_shape((n_o, n_i), &mut grad[wo..bo]).expect("layer shape");
                if l == 0 {
                    general_mat_mul(1.0, &zbar[0].slice(s![0..batch, ..]).t(), &acts[0], 1.0, &mut gw);
                    for (p, &t) in spec.tangents.iter().enumerate() {
                        let sums = zbar[0].slice(s![(p + 1) * batch..(p + 2) * batch, ..]).sum_axis(Axis(0));
                        for (o, v) in sums.iter().enumerate() {
                            gw[[o, t]] += v * self.input_scale[t];
                        }
                    }
                } else {
                    general_mat_mul(1.0, &zbar[l].t(), &acts[l], 1.0, &mut gw);
                }
            }
            let gb = &mut grad[bo..bo + n_o];
            for row in zbar[l].slice(s![0..batch, ..]).rows() {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            if l > 0 {
                ensure(abar, l, acts[l].dim());
                general_mat_mul(1.0, &zbar[l], &self.weight(l), 0.0, &mut abar[l]);
            }
        }
        Ok(())
    }

    /// Value and all input derivatives of every output at one point.
    pub fn forward_point(&self, input: &[f64]) -> Result<Vec<DiffValue>> {
        let d = self.n_inputs();
        if input.len() != d {
            return Err(Error::Shape { expected: d, found: input.len() });
        }
        let x = Array2::from_shape_vec((1, d), input.to_vec()).expect("one row");
        let all: Vec<usize> = (0..d).collect();
        let eval = self.forward(&x, &EvalSpec::first(&all))?;
        Ok((0..self.n_outputs())
            .map(|o| DiffValue { value: eval.outputs[0][o], input_grads: (1..=d).map(|k| eval.outputs[k][o]).collect() })
            .collect())
    }

    /// Text checkpoint: version tag, widths, input map, then one parameter per line.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_TAG}").unwrap();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "widths {}", self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(" ")).unwrap();
        writeln!(out, "input_shift {}", join(&self.input_shift)).unwrap();
        writeln!(out, "input_scale {}", join(&self.input_scale)).unwrap();
        writeln!(out, "params {}", self.params.len()).unwrap();
        for p in &self.params {
            writeln!(out, "{p:e}").unwrap();
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(CHECKPOINT_TAG) {
            return Err(bad("missing or unsupported version tag"));
        }
        let mut field = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing `{name}` line")))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected `{name}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let parse_f = |v: Vec<String>| -> Result<Vec<f64>> {
            v.iter().map(|s| s.parse::<f64>().map_err(|e| bad(&format!("bad number `{s}`: {e}")))).collect()
        };
        let widths: Vec<usize> = field("widths")?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| bad(&format!("bad width `{s}`: {e}"))))
            .collect::<Result<_>>()?;
        let shift = parse_f(field("input_shift")?)?;
        let scale = parse_f(field("input_scale")?)?;
        let count: usize = field("params")?
            .first()
            .ok_or_else(|| bad("missing parameter count"))?
            .parse()
            .map_err(|_| bad("bad parameter count"))?;
        let params: Vec<f64> = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| bad(&format!("bad parameter `{l}`: {e}"))))
            .collect::<Result<_>>()?;
        if params.len() != count {
            return Err(bad(&format!("expected {count} parameters, found {}", params.len())));
        }
        let mut net = Self::from_params(&widths, params).map_err(|e| bad(&e.to_string()))?;
        if shift.len() != widths[0] || scale.len() != widths[0] {
            return Err(bad("input map length differs from input width"));
        }
        net.input_shift = shift;
        net.input_scale = scale;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

/// `ρ = exp(−ρ̃(t, x))` with `∂ρ = −ρ ∂ρ̃`.
pub fn rho_head(net: &Network, t: f64, x: f64) -> Result<DiffValue> {
    if net.n_inputs() != 2 || net.n_outputs() != 1 {
        return Err(Error::InvalidArgument("density head expects a (t, x) -> scalar network".into()));
    }
    let raw = net.forward_point(&[t, x])?.swap_remove(0);
    let rho = (-raw.value).exp();
    Ok(DiffValue { value: rho, input_grads: raw.input_grads.iter().map(|g| -rho * g).collect() })
}

/// Micro head at one `(t, x)`: ψ on every velocity node with its `t`, `x` derivatives
/// and `∂_v g / M` on the nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroHead {
    pub psi: Vec<f64>,
    pub dt: Vec<f64>,
    pub dx: Vec<f64>,
    pub dv_g: Vec<f64>,
}

/// `ψ = ψ̃ − Σ_j ψ̃(v_j) w_j` with `ψ̃` the raw `(t, x, v)` network on the nodes.
pub fn g_head(net: &Network, t: f64, x: f64, grid: &VelocityGrid) -> Result<MicroHead> {
    if net.n_inputs() != 3 || net.n_outputs() != 1 {
        return Err(Error::GridMismatch("micro head expects a (t, x, v) -> scalar network".into()));
    }
    let v = grid.nodes();
    let w = grid.weights();
    let n = v.len();
    let inputs = Array2::from_shape_fn((n, 3), |(j, k)| [t, x, v[j]][k]);
    let eval = net.forward(&inputs, &EvalSpec::first(&[0, 1]))?;
    let centre = |s: &[f64]| -> Vec<f64> {
        let m: f64 = s.iter().zip(w).map(|(a, b)| a * b).sum();
        s.iter().map(|a| a - m).collect()
    };
    let psi = centre(eval.values());
    let dt = centre(eval.tangent(0).expect("requested"));
    let dx = centre(eval.tangent(1).expect("requested"));
    let c = grid.apply_v_derivative_unchecked(&psi);
    let mean: f64 = psi.iter().zip(w).map(|(a, b)| a * b).sum();
    let dv_g = (0..n).map(|j| c[j] - 2.0 * v[j] * psi[j] + 2.0 * v[j] * mean).collect();
    Ok(MicroHead { psi, dt, dx, dv_g })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_inputs(rng: &mut ChaCha8Rng, batch: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((batch, d), |_| rng.random_range(-1.0..1.0))
    }

    fn with_random_biases(net: Network, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = net.widths().to_vec();
        let mut params = net.params().to_vec();
        let mut off = 0;
        for p in widths.windows(2) {
            off += p[0] * p[1];
            for b in &mut params[off..off + p[1]] {
                *b = rng.random_range(-0.5..0.5);
            }
            off += p[1];
        }
        Network::from_params(&widths, params).unwrap()
    }

    #[test]
    fn tanh_matches_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100_000 {
            let z: f64 = rng.random_range(-25.0..25.0);
            assert!((tanh(z) - z.tanh()).abs() <= 4.5e-16, "{z}");
        }
        for z in [0.0, -0.0, 1e-300, 1e-12, 800.0, -800.0] {
            assert!((tanh(z) - z.tanh()).abs() <= 4.5e-16, "{z}");
        }
    }

    #[test]
    fn same_seed_same_network() {
        let a = Network::xavier_init(&[3, 16, 16, 1], 11).unwrap();
        let b = Network::xavier_init(&[3, 16, 16, 1], 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Network::xavier_init(&[3, 16, 16, 1], 12).unwrap());
    }

    #[test]
    fn default_architecture_has_four_hidden_layers() {
        let net = Network::xavier_init(&[3, 128, 128, 128, 128, 1], 0).unwrap();
        assert_eq!(net.n_hidden_layers(), 4);
        assert_eq!(net.n_params(), 3 * 128 + 128 + 3 * (128 * 128 + 128) + 128 + 1);
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let widths = [200, 300, 500];
        let net = Network::xavier_init(&widths, 5).unwrap();
        let b1 = (6.0f64 / 500.0).sqrt();
        let b2 = (6.0f64 / 800.0).sqrt();
        let p = net.params();
        let w1 = &p[..60_000];
        let w2 = &p[60_300..210_300];
        assert!(w1.iter().all(|w| w.abs() <= b1));
        assert!(w2.iter().all(|w| w.abs() <= b2));
        assert!(p[60_000..60_300].iter().all(|&b| b == 0.0));
        // uniform on [-b, b] has variance b²/3
        let var = w1.iter().map(|w| w * w).sum::<f64>() / w1.len() as f64;
        assert!((var - b1 * b1 / 3.0).abs() < 0.02 * b1 * b1);
        let max = w1.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        assert!(max > 0.99 * b1);
    }

    #[test]
    fn rejects_degenerate_widths() {
        assert!(Network::xavier_init(&[], 0).is_err());
        assert!(Network::xavier_init(&[3], 0).is_err());
        assert!(Network::xavier_init(&[3, 0, 1], 0).is_err());
    }

    #[test]
    fn linear_net_grads_are_the_weights() {
        let net = Network::from_params(&[3, 1], vec![0.5, -1.25, 2.0, 0.3]).unwrap();
        let out = net.forward_point(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(out[0].input_grads, vec![0.5, -1.25, 2.0]);
        assert!((out[0].value - (0.05 - 0.25 + 0.6 + 0.3)).abs() < 1e-15);
    }

    #[test]
    fn odd_network_is_odd() {
        let net = Network::xavier_init(&[2, 8, 8, 1], 3).unwrap();
        for x in [[0.3, -0.7], [1.5, 0.2]] {
            let a = net.forward_point(&x).unwrap()[0].value;
            let b = net.forward_point(&[-x[0], -x[1]]).unwrap()[0].value;
            assert!((a + b).abs() <= 1e-14);
        }
    }

    #[test]
    fn input_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for case in 0..10u64 {
            let net = with_random_biases(Network::xavier_init(&[3, 12, 12, 1], case).unwrap(), case + 100)
                .with_input_bounds(&[0.0, 0.0, -3.0], &[0.1, 1.0, 3.0])
                .unwrap();
            let x = [rng.random_range(0.0..0.1), rng.random_range(0.0..1.0), rng.random_range(-3.0..3.0)];
            let g = net.forward_point(&x).unwrap()[0].clone();
            for k in 0..3 {
                let h = 1e-5;
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fd = (net.forward_point(&xp).unwrap()[0].value - net.forward_point(&xm).unwrap()[0].value) / (2.0 * h);
                let err = (fd - g.input_grads[k]).abs() / g.input_grads[k].abs().max(1e-3);
                assert!(err <= 1e-5, "case {case} k {k}: {fd} vs {}", g.input_grads[k]);
            }
        }
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        let net = with_random_biases(Network::xavier_init(&[2, 10, 10, 1], 4).unwrap(), 9);
        let x = Array2::from_shape_vec((3, 2), vec![0.1, 0.2, -0.4, 0.9, 0.7, -0.3]).unwrap();
        let eval = net.forward(&x, &EvalSpec::with_second(&[0, 1], 1)).unwrap();
        let h = 1e-4;
        for r in 0..3 {
            let f = |dx: f64| net.forward_point(&[x[[r, 0]], x[[r, 1]] + dx]).unwrap()[0].value;
            let fd = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
            let exact = eval.second().unwrap()[r];
            assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1.0), "{fd} vs {exact}");
        }
    }

    #[test]
    fn batched_and_pointwise_agree_bitwise() {
        let net = Network::xavier_init(&[2, 7, 5, 1], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_inputs(&mut rng, 6, 2);
        let a = net.forward(&x, &EvalSpec::first(&[0, 1])).unwrap();
        let b = net.forward(&x, &EvalSpec::first(&[0, 1])).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(a.tangent(1), b.tangent(1));
    }

    #[test]
    fn reused_buffers_give_identical_results() {
        let net = with_random_biases(Network::xavier_init(&[2, 6, 6, 1], 3).unwrap(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut reused = Evaluation::default();
        for (batch, spec) in [
            (5, EvalSpec::with_second(&[0, 1], 1)),
            (3, EvalSpec::first(&[1])),
            (5, EvalSpec::with_second(&[0, 1], 1)),
        ] {
            let x = random_inputs(&mut rng, batch, 2);
            let mut fresh = net.forward(&x, &spec).unwrap();
            net.forward_into(&x, &spec, &mut reused).unwrap();
            for k in 0..spec.n_streams() {
                assert_eq!(fresh.stream(k), reused.stream(k));
            }
            let adj: Vec<Option<Vec<f64>>> = (0..spec.n_streams()).map(|k| Some(vec![0.5 + k as f64; batch])).collect();
            let mut g1 = vec![0.0; net.n_params()];
            let mut g2 = vec![0.0; net.n_params()];
            net.backward(&mut fresh, &adj, &mut g1).unwrap();
            net.backward(&mut reused, &adj, &mut g2).unwrap();
            assert_eq!(g1, g2);
        }
    }

    #[test]
    fn square_loss_gradient_on_linear_net() {
        let net = Network::from_params(&[2, 1], vec![0.7, -0.2, 0.1]).unwrap();
        let x = Array2::from_shape_vec((1, 2), vec![0.4, 1.5]).unwrap();
        let mut eval = net.forward(&x, &EvalSpec::primal()).unwrap();
        let out = eval.values()[0];
        let mut grad = vec![0.0; 3];
        net.backward(&mut eval, &[Some(vec![2.0 * out])], &mut grad).unwrap();
        assert!((grad[0] - 2.0 * out * 0.4).abs() < 1e-15);
        assert!((grad[1] - 2.0 * out * 1.5).abs() < 1e-15);
        assert!((grad[2] - 2.0 * out).abs() < 1e-15);
    }

    /// `L = Σ_b c0 y + c1 (∂_x y)² + c2 ∂_t y · y + c3 (∂_xx y)`.
    fn mixed_loss(net: &Network, x: &Array2<f64>, with_grad: bool) -> (f64, Vec<f64>) {
        let spec = EvalSpec::with_second(&[0, 1], 1);
        let mut eval = net.forward(x, &spec).unwrap();
        let y = eval.values().to_vec();
        let yt = eval.tangent(0).unwrap().to_vec();
        let yx = eval.tangent(1).unwrap().to_vec();
        let yxx = eval.second().unwrap().to_vec();
        let (c0, c1, c2, c3) = (0.3, 1.7, -0.8, 0.45);
        let mut loss = 0.0;
        for b in 0..y.len() {
            loss += c0 * y[b] + c1 * yx[b] * yx[b] + c2 * yt[b] * y[b] + c3 * yxx[b];
        }
        let mut grad = vec![0.0; net.n_params()];
        if with_grad {
            let a0: Vec<f64> = (0..y.len()).map(|b| c0 + c2 * yt[b]).collect();
            let at: Vec<f64> = y.iter().map(|v| c2 * v).collect();
            let ax: Vec<f64> = yx.iter().map(|v| 2.0 * c1 * v).collect();
            let axx = vec![c3; y.len()];
            net.backward(&mut eval, &[Some(a0), Some(at), Some(ax), Some(axx)], &mut grad).unwrap();
        }
        (loss, grad)
    }

    #[test]
    fn parameter_gradients_through_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..5u64 {
            let net = with_random_biases(Network::xavier_init(&[2, 9, 9, 1], case).unwrap(), case);
            let x = random_inputs(&mut rng, 4, 2);
            let (_, grad) = mixed_loss(&net, &x, true);
            for _ in 0..20 {
                let k = rng.random_range(0..net.n_params());
                let h = 1e-6;
                let mut plus = net.clone();
                plus.params_mut()[k] += h;
                let mut minus = net.clone();
                minus.params_mut()[k] -= h;
                let fd = (mixed_loss(&plus, &x, false).0 - mixed_loss(&minus, &x, false).0) / (2.0 * h);
                let err = (fd - grad[k]).abs() / grad[k].abs().max(1e-2);
                assert!(err <= 1e-4, "case {case} param {k}: fd {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn zero_fan_out_unit_gets_zero_gradient() {
        // hidden unit 2 has no outgoing weight, so its incoming row and bias never matter
        let mut net = with_random_biases(Network::xavier_init(&[2, 4, 1], 2).unwrap(), 3);
        let out_w = 2 * 4 + 4;
        net.params_mut()[out_w + 2] = 0.0;
        let x = Array2::from_shape_vec((2, 2), vec![0.1, 0.5, 0.3, -0.2]).unwrap();
        let mut eval = net.forward(&x, &EvalSpec::with_second(&[0, 1], 1)).unwrap();
        let mut grad = vec![0.0; net.n_params()];
        let ones = Some(vec![1.0, -2.0]);
        net.backward(&mut eval, &[ones.clone(), ones.clone(), ones.clone(), ones], &mut grad).unwrap();
        assert_eq!(&grad[4..6], &[0.0, 0.0]);
        assert_eq!(grad[8 + 2], 0.0);
        assert!(grad[0] != 0.0);
    }

    #[test]
    fn rho_head_is_positive_with_exact_derivatives() {
        let net = with_random_biases(Network::xavier_init(&[2, 8, 1], 6).unwrap(), 6);
        let r = rho_head(&net, 0.05, 0.4).unwrap();
        assert!(r.value > 0.0);
        let h = 1e-6;
        let fd = (rho_head(&net, 0.05, 0.4 + h).unwrap().value - rho_head(&net, 0.05, 0.4 - h).unwrap().value) / (2.0 * h);
        assert!((fd - r.input_grads[1]).abs() <= 1e-5 * fd.abs().max(1e-3));
        let zero = Network::from_params(&[2, 1], vec![0.0, 0.0, 0.0]).unwrap();
        assert_eq!(rho_head(&zero, 0.0, 0.0).unwrap().value, 1.0);
        let huge = Network::from_params(&[2, 1], vec![0.0, 0.0, 800.0]).unwrap();
        let tiny = rho_head(&huge, 0.0, 0.0).unwrap().value;
        assert!(tiny >= 0.0 && tiny < 1e-300);
    }

    #[test]
    fn g_head_mean_is_zero() {
        let grid = VelocityGrid::new(8).unwrap();
        let constant = Network::from_params(&[3, 1], vec![0.0, 0.0, 0.0, 2.5]).unwrap();
        let h = g_head(&constant, 0.1, 0.2, &grid).unwrap();
        assert!(h.psi.iter().all(|&p| p == 0.0));
        let net = with_random_biases(Network::xavier_init(&[3, 10, 10, 1], 1).unwrap(), 2);
        let h = g_head(&net, 0.03, 0.7, &grid).unwrap();
        assert!(grid.integrate(&h.psi).abs() <= 1e-15);
        assert!(grid.integrate(&h.dx).abs() <= 1e-15);
    }

    #[test]
    fn g_head_velocity_derivative_of_linear_psi() {
        let grid = VelocityGrid::new(8).unwrap();
        let net = Network::from_params(&[3, 1], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let h = g_head(&net, 0.0, 0.0, &grid).unwrap();
        // ∂_v(v M) / M = 1 − 2v²
        for (d, v) in h.dv_g.iter().zip(grid.nodes()) {
            assert!((d - (1.0 - 2.0 * v * v)).abs() <= 1e-10);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = Network::xavier_init(&[3, 5, 1], 9).unwrap().with_input_bounds(&[0.0, 0.0, -3.0], &[0.1, 1.0, 3.0]).unwrap();
        let back = Network::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(net, back);
        assert!(Network::from_checkpoint("garbage").is_err());
        let truncated: String = net.to_checkpoint().lines().take(8).collect::<Vec<_>>().join("\n");
        assert!(Network::from_checkpoint(&truncated).is_err());
    }

    #[test]
    fn shape_errors() {
        let net = Network::xavier_init(&[2, 3, 1], 0).unwrap();
        assert!(net.forward(&Array2::zeros((4, 3)), &EvalSpec::primal()).is_err());
        assert!(net.forward(&Array2::zeros((4, 2)), &EvalSpec::with_second(&[0], 1)).is_err());
        assert!(net.forward(&Array2::zeros((4, 2)), &EvalSpec::first(&[2])).is_err());
    }
}
