//! Small differentiable building blocks with hand-written backward passes,
//! an Adam optimizer, a central-difference gradient checker and a named
//! tensor checkpoint format.
//!
//! Activations are row-major matrices: one row per token (patch or agent).

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
    step: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let dim = value.dim();
        Self {
            name: name.into(),
            value,
            grad: Array2::zeros(dim),
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            step: 0,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Array2::zeros((rows, cols)))
    }

    /// Uniform Glorot initialization.
    pub fn glorot<R: Rng>(name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self::new(name, Array2::from_shape_fn((rows, cols), |_| rng.random_range(-a..a)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns parameters in a fixed, stable order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// `y = x·W + b`
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new<R: Rng>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::glorot(format!("{name}.weight"), inputs, outputs, rng),
            bias: Param::zeros(format!("{name}.bias"), 1, outputs),
        }
    }

    pub fn zeros(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), inputs, outputs),
            bias: Param::zeros(format!("{name}.bias"), 1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.value) + &self.bias.value
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value.t())
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&mut self, x: &Array2<f64>, dy: &Array2<f64>) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, &mut self.weight.grad);
        self.bias.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
}

impl Parameterized for Dense {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub fn tanh_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(f64::tanh)
}

/// Takes the forward *output* `y`.
pub fn tanh_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &t| *d *= 1.0 - t * t);
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_forward(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

/// Takes the forward output `y`; `dx_j = y_j (dy_j − Σ_k dy_k y_k)`.
pub fn softmax_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.dim());
    for ((yr, dyr), mut dxr) in y.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()) {
        let dot: f64 = yr.iter().zip(dyr.iter()).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Row-wise `log softmax`.
pub fn log_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    y
}

/// Mean over rows: `(k, E) → (1, E)`.
pub fn meanpool_forward(x: &Array2<f64>) -> Array2<f64> {
    x.mean_axis(Axis(0))
        .expect("meanpool over zero rows")
        .insert_axis(Axis(0))
}

pub fn meanpool_backward(dy: &Array2<f64>, rows: usize) -> Array2<f64> {
    let row = dy.row(0).mapv(|v| v / rows as f64);
    Array2::from_shape_fn((rows, dy.ncols()), |(_, j)| row[j])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !(ok(self.beta1) && ok(self.beta2)) {
            return Err(Error::InvalidArgument(format!(
                "Adam betas must lie in (0,1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidArgument("Adam lr must be finite >= 0 and eps > 0".into()));
        }
        Ok(())
    }
}

/// Bias-corrected Adam on every parameter, then zeroes the gradients.
///
/// All gradients are checked before any value changes, so a non-finite
/// gradient leaves the model untouched.
pub fn adam_step<M: Parameterized + ?Sized>(model: &mut M, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    let mut params = model.params_mut();
    if let Some(p) = params.iter().find(|p| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    for p in params.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let Param { value, grad, m, v, .. } = &mut **p;
        ndarray::Zip::from(value)
            .and(&*grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            });
        p.zero_grad();
    }
    if let Some(p) = params.iter().find(|p| p.value.iter().any(|w| !w.is_finite())) {
        return Err(Error::NonFinite(format!("parameter {} after update", p.name)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor: `rel = |a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Compares analytic gradients against central differences for every entry
/// of every parameter.
///
/// `analytic` must run forward + backward and return the loss, leaving
/// gradients in the parameters; `loss` must evaluate the same loss without
/// touching gradients.
pub fn gradcheck<M, A, L>(model: &mut M, mut analytic: A, loss: L, cfg: GradcheckConfig) -> GradReport
where
    M: Parameterized,
    A: FnMut(&mut M) -> f64,
    L: Fn(&M) -> f64,
{
    model.zero_grad();
    analytic(model);
    let grads: Vec<Array2<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    model.zero_grad();

    let mut tensors = Vec::new();
    for (pi, grad) in grads.iter().enumerate() {
        let mut check = TensorCheck {
            name: model.params()[pi].name.clone(),
            entries: grad.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for flat in 0..grad.len() {
            let idx = (flat / grad.ncols(), flat % grad.ncols());
            let orig = model.params()[pi].value[idx];
            model.params_mut()[pi].value[idx] = orig + cfg.step;
            let up = loss(model);
            model.params_mut()[pi].value[idx] = orig - cfg.step;
            let down = loss(model);
            model.params_mut()[pi].value[idx] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = grad[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            check.max_rel_err = check.max_rel_err.max(rel);
        }
        tensors.push(check);
    }
    GradReport { tensors }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

/// Writes `<base>.bin` (little-endian f64 values) and `<base>.json` (manifest).
pub fn save_checkpoint<M: Parameterized + ?Sized>(model: &M, base: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for p in model.params() {
        tensors.push(ManifestEntry {
            name: p.name.clone(),
            shape: [p.value.nrows(), p.value.ncols()],
            offset: blob.len(),
        });
        for &v in p.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        dtype: "f64".into(),
        tensors,
    };
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(base.with_extension("bin"), blob)?;
    fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

/// Loads values into an already-constructed model; names and shapes must match.
pub fn load_checkpoint<M: Parameterized + ?Sized>(model: &mut M, base: &Path) -> Result<()> {
    let manifest_path = base.with_extension("json");
    if !manifest_path.exists() {
        return Err(Error::MissingSidecar(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.dtype != "f64" {
        return Err(Error::Format(format!(
            "unsupported checkpoint dtype {}",
            manifest.dtype
        )));
    }
    let blob = fs::read(base.with_extension("bin"))?;
    let mut params = model.params_mut();
    if params.len() != manifest.tensors.len() {
        return Err(Error::Length {
            what: "checkpoint tensor count".into(),
            expected: params.len(),
            actual: manifest.tensors.len(),
        });
    }
    for (p, e) in params.iter_mut().zip(&manifest.tensors) {
        if p.name != e.name || [p.value.nrows(), p.value.ncols()] != e.shape {
            return Err(Error::Format(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.value.dim()
            )));
        }
        let end = e.offset + p.len() * 8;
        if end > blob.len() {
            return Err(Error::Length {
                what: format!("checkpoint blob for {}", e.name),
                expected: end,
                actual: blob.len(),
            });
        }
        for (dst, bytes) in p.value.iter_mut().zip(blob[e.offset..end].chunks_exact(8)) {
            *dst = f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"));
        }
        if p.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {}", e.name)));
        }
    }
    Ok(())
}
