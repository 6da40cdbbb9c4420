//! Fully connected networks over flattened parameter vectors, data
//! log-likelihoods, and the stochastic ELBO estimator with pathwise gradients.
//!
//! Parameters are a single flat vector: for each layer, the weight matrix in
//! row-major order (`s_out x s_in`) followed by the bias. That layout lets the
//! variational machinery treat the whole network as one `T`-dimensional
//! Gaussian.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::variational::{kl_diag_gauss, reparameterize, sigmoid, softplus, MeanFieldGaussian};

/// Default initial pre-softplus scale; softplus(-0.4) is about 0.51. The KL
/// anchor behaves like a quadratic with curvature `zeta / sigma_z^2`, so the
/// starting sigma has to satisfy `eta * zeta / sigma^2 < 2` with room to
/// spare: the global sigma tightens every round as clients feed precision
/// back through aggregation, and a small start leaves no headroom before the
/// anchor stiffens past the SGD stability limit.
pub const RHO_INIT: f64 = -0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::domain(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// Gaussian observation noise with fixed scale `sigma_eps`.
    GaussianRegression { sigma_eps: f64 },
    /// Softmax over the output logits, integer class targets.
    Categorical,
}

/// Architecture plus observation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// All layer sizes, input through output: `(s_0, ..., s_{L+1})`.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub likelihood: Likelihood,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, likelihood: Likelihood) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::domain(
                "layer_sizes needs at least input and output sizes",
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::domain("all layer sizes must be at least 1"));
        }
        if let Likelihood::GaussianRegression { sigma_eps } = likelihood {
            if !(sigma_eps > 0.0) {
                return Err(Error::domain(format!(
                    "sigma_eps must be positive, got {sigma_eps}"
                )));
            }
        }
        Ok(Self {
            layer_sizes,
            activation,
            likelihood,
        })
    }

    /// Total parameter count `T = sum_l (s_l + 1) * s_{l+1}`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of hidden layers.
    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len() - 2
    }

    /// Widest layer, input included.
    pub fn max_width(&self) -> usize {
        *self.layer_sizes.iter().max().unwrap()
    }

    fn check_theta(&self, theta: &Array1<f64>) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Dimension {
                what: "theta",
                expected: self.param_count(),
                actual: theta.len(),
            });
        }
        Ok(())
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Point-estimate initialization: per layer, weights and biases uniform in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        let mut theta = Vec::with_capacity(self.param_count());
        let last = self.layer_sizes.len() - 2;
        for (i, w) in self.layer_sizes.windows(2).enumerate() {
            let (s_in, s_out) = (w[0], w[1]);
            // Hidden layers start wide so their units kink at different spots
            // across the input range; the plain fan-in scale leaves every
            // feature nearly linear and the net never escapes that span at
            // small learning rates. The output layer keeps the narrow scale.
            let scale = if i < last { 3.0 } else { 1.0 };
            let bound = scale / (s_in as f64).sqrt();
            for _ in 0..(s_in + 1) * s_out {
                theta.push(rng.random_range(-bound..=bound));
            }
        }
        Array1::from_vec(theta)
    }

    /// Variational initialization: `mu` as in [`NetworkSpec::init_theta`],
    /// `rho` constant at `rho_init`.
    pub fn init_gaussian<R: Rng + ?Sized>(&self, rho_init: f64, rng: &mut R) -> MeanFieldGaussian {
        let mu = self.init_theta(rng);
        let rho = Array1::from_elem(mu.len(), rho_init);
        MeanFieldGaussian { mu, rho }
    }
}

/// Regression rows or integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Array2<f64>),
    Labels(Vec<usize>),
}

/// One target, borrowed from a dataset.
#[derive(Debug, Clone, Copy)]
pub enum TargetRef<'a> {
    Regression(ArrayView1<'a, f64>),
    Label(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// Inputs, one row per point (`n x s_0`).
    pub x: Array2<f64>,
    pub y: Targets,
}

impl LabeledDataset {
    pub fn new(x: Array2<f64>, y: Targets) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::domain("dataset must contain at least one point"));
        }
        let ny = match &y {
            Targets::Regression(r) => r.nrows(),
            Targets::Labels(l) => l.len(),
        };
        if ny != n {
            return Err(Error::Dimension {
                what: "dataset targets",
                expected: n,
                actual: ny,
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target(&self, j: usize) -> TargetRef<'_> {
        match &self.y {
            Targets::Regression(r) => TargetRef::Regression(r.row(j)),
            Targets::Labels(l) => TargetRef::Label(l[j]),
        }
    }

    /// Copies the given rows into a new dataset (duplicates allowed).
    pub fn select(&self, idx: &[usize]) -> Result<LabeledDataset> {
        if let Some(&bad) = idx.iter().find(|&&j| j >= self.len()) {
            return Err(Error::domain(format!(
                "select index {bad} out of range for {} points",
                self.len()
            )));
        }
        if idx.is_empty() {
            return Err(Error::domain("select needs at least one index"));
        }
        let x = Array2::from_shape_fn((idx.len(), self.x.ncols()), |(r, c)| self.x[[idx[r], c]]);
        let y = match &self.y {
            Targets::Regression(full) => Targets::Regression(Array2::from_shape_fn(
                (idx.len(), full.ncols()),
                |(r, c)| full[[idx[r], c]],
            )),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&j| l[j]).collect()),
        };
        LabeledDataset::new(x, y)
    }

    /// Checks that input and target dimensions fit the network.
    pub fn validate_for(&self, spec: &NetworkSpec) -> Result<()> {
        if self.x.ncols() != spec.input_dim() {
            return Err(Error::Dimension {
                what: "dataset input width",
                expected: spec.input_dim(),
                actual: self.x.ncols(),
            });
        }
        match (&self.y, &spec.likelihood) {
            (Targets::Regression(r), Likelihood::GaussianRegression { .. }) => {
                if r.ncols() != spec.output_dim() {
                    return Err(Error::Dimension {
                        what: "dataset target width",
                        expected: spec.output_dim(),
                        actual: r.ncols(),
                    });
                }
            }
            (Targets::Labels(l), Likelihood::Categorical) => {
                if let Some(&bad) = l.iter().find(|&&c| c >= spec.output_dim()) {
                    return Err(Error::domain(format!(
                        "label {bad} out of range for {} classes",
                        spec.output_dim()
                    )));
                }
            }
            _ => {
                return Err(Error::domain(
                    "dataset target kind does not match the network likelihood",
                ));
            }
        }
        Ok(())
    }
}

/// Standard MLP forward pass: affine plus activation per hidden layer, affine
/// at the output.
pub fn forward(spec: &NetworkSpec, theta: &Array1<f64>, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    spec.check_theta(theta)?;
    spec.check_input(x)?;
    let t = theta.as_slice().expect("theta is contiguous");
    let mut a: Vec<f64> = x.to_vec();
    let mut offset = 0;
    let last = spec.layer_sizes.len() - 2;
    for (l, w) in spec.layer_sizes.windows(2).enumerate() {
        let (s_in, s_out) = (w[0], w[1]);
        let weights = &t[offset..offset + s_in * s_out];
        let bias = &t[offset + s_in * s_out..offset + (s_in + 1) * s_out];
        offset += (s_in + 1) * s_out;
        let mut next = vec![0.0; s_out];
        for i in 0..s_out {
            let row = &weights[i * s_in..(i + 1) * s_in];
            let mut acc = bias[i];
            for (wj, aj) in row.iter().zip(&a) {
                acc += wj * aj;
            }
            next[i] = if l < last { spec.activation.apply(acc) } else { acc };
        }
        a = next;
    }
    Ok(Array1::from_vec(a))
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - lse).collect()
}

const LN_2PI: f64 = 1.8378770664093453;

fn likelihood_value(spec: &NetworkSpec, f: &[f64], y: TargetRef<'_>) -> Result<f64> {
    match (&spec.likelihood, y) {
        (Likelihood::GaussianRegression { sigma_eps }, TargetRef::Regression(y)) => {
            if y.len() != f.len() {
                return Err(Error::Dimension {
                    what: "regression target",
                    expected: f.len(),
                    actual: y.len(),
                });
            }
            let s2 = sigma_eps * sigma_eps;
            let sq: f64 = y.iter().zip(f).map(|(yi, fi)| (yi - fi) * (yi - fi)).sum();
            Ok(-sq / (2.0 * s2) - 0.5 * f.len() as f64 * (LN_2PI + s2.ln()))
        }
        (Likelihood::Categorical, TargetRef::Label(c)) => {
            if c >= f.len() {
                return Err(Error::domain(format!(
                    "label {c} out of range for {} classes",
                    f.len()
                )));
            }
            Ok(log_softmax(f)[c])
        }
        _ => Err(Error::domain(
            "target kind does not match the network likelihood",
        )),
    }
}

/// Gradient of the log-likelihood with respect to the network output.
fn likelihood_output_grad(spec: &NetworkSpec, f: &[f64], y: TargetRef<'_>) -> Result<Vec<f64>> {
    match (&spec.likelihood, y) {
        (Likelihood::GaussianRegression { sigma_eps }, TargetRef::Regression(y)) => {
            let s2 = sigma_eps * sigma_eps;
            Ok(y.iter().zip(f).map(|(yi, fi)| (yi - fi) / s2).collect())
        }
        (Likelihood::Categorical, TargetRef::Label(c)) => {
            let ls = log_softmax(f);
            Ok(ls
                .iter()
                .enumerate()
                .map(|(i, &l)| if i == c { 1.0 - l.exp() } else { -l.exp() })
                .collect())
        }
        _ => Err(Error::domain(
            "target kind does not match the network likelihood",
        )),
    }
}

/// Log-likelihood of one labeled point under parameters `theta`.
pub fn log_likelihood(
    spec: &NetworkSpec,
    theta: &Array1<f64>,
    x: ArrayView1<f64>,
    y: TargetRef<'_>,
) -> Result<f64> {
    let f = forward(spec, theta, x)?;
    likelihood_value(spec, f.as_slice().unwrap(), y)
}

/// Log-likelihood of one point together with its gradient with respect to
/// `theta`. The gradient is accumulated into `grad` (not zeroed first), which
/// lets batch loops reuse one buffer; pass `weight` to scale the contribution.
pub fn log_likelihood_grad_into(
    spec: &NetworkSpec,
    theta: &Array1<f64>,
    x: ArrayView1<f64>,
    y: TargetRef<'_>,
    weight: f64,
    grad: &mut Array1<f64>,
) -> Result<f64> {
    spec.check_theta(theta)?;
    spec.check_input(x)?;
    if grad.len() != theta.len() {
        return Err(Error::Dimension {
            what: "theta gradient buffer",
            expected: theta.len(),
            actual: grad.len(),
        });
    }
    let t = theta.as_slice().expect("theta is contiguous");

    // Forward pass keeping activations and pre-activations per layer.
    let n_layers = spec.layer_sizes.len() - 1;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    let mut preacts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    acts.push(x.to_vec());
    let mut offset = 0;
    for (l, w) in spec.layer_sizes.windows(2).enumerate() {
        let (s_in, s_out) = (w[0], w[1]);
        let weights = &t[offset..offset + s_in * s_out];
        let bias = &t[offset + s_in * s_out..offset + (s_in + 1) * s_out];
        offset += (s_in + 1) * s_out;
        let a = &acts[l];
        let mut pre = vec![0.0; s_out];
        for i in 0..s_out {
            let row = &weights[i * s_in..(i + 1) * s_in];
            let mut acc = bias[i];
            for (wj, aj) in row.iter().zip(a) {
                acc += wj * aj;
            }
            pre[i] = acc;
        }
        let out = if l < n_layers - 1 {
            pre.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            pre.clone()
        };
        preacts.push(pre);
        acts.push(out);
    }

    let value = likelihood_value(spec, &acts[n_layers], y)?;
    // Reverse pass: delta holds d(logp)/d(pre-activation) of the current layer.
    let mut delta = likelihood_output_grad(spec, &acts[n_layers], y)?;
    let g = grad.as_slice_mut().expect("gradient is contiguous");
    let mut offsets = Vec::with_capacity(n_layers);
    {
        let mut off = 0;
        for w in spec.layer_sizes.windows(2) {
            offsets.push(off);
            off += (w[0] + 1) * w[1];
        }
    }
    for l in (0..n_layers).rev() {
        let (s_in, s_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let off = offsets[l];
        let a = &acts[l];
        for i in 0..s_out {
            let di = delta[i];
            let wrow = off + i * s_in;
            for j in 0..s_in {
                g[wrow + j] += weight * di * a[j];
            }
            g[off + s_in * s_out + i] += weight * di;
        }
        if l > 0 {
            let weights = &t[off..off + s_in * s_out];
            let mut prev = vec![0.0; s_in];
            for (j, p) in prev.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..s_out {
                    acc += weights[i * s_in + j] * delta[i];
                }
                *p = acc * spec.activation.grad(preacts[l - 1][j]);
            }
            delta = prev;
        }
    }
    Ok(value)
}

#[allow(clippy::too_many_arguments)]
fn check_estimator_args(
    spec: &NetworkSpec,
    v: &MeanFieldGaussian,
    z: &MeanFieldGaussian,
    batch: &LabeledDataset,
    weights: Option<&[f64]>,
    n: usize,
    zeta: f64,
    noise: &[Array1<f64>],
) -> Result<()> {
    let t = spec.param_count();
    if v.len() != t {
        return Err(Error::Dimension {
            what: "variational parameters",
            expected: t,
            actual: v.len(),
        });
    }
    if z.len() != t {
        return Err(Error::Dimension {
            what: "global parameters",
            expected: t,
            actual: z.len(),
        });
    }
    batch.validate_for(spec)?;
    if let Some(w) = weights {
        if w.len() != batch.len() {
            return Err(Error::Dimension {
                what: "batch weights",
                expected: batch.len(),
                actual: w.len(),
            });
        }
        if let Some(&bad) = w.iter().find(|&&wj| wj < 0.0 || !wj.is_finite()) {
            return Err(Error::domain(format!("negative batch weight {bad}")));
        }
    }
    if n == 0 {
        return Err(Error::domain("population size n must be at least 1"));
    }
    if !(zeta >= 0.0) {
        return Err(Error::domain(format!("zeta must be nonnegative, got {zeta}")));
    }
    if noise.is_empty() {
        return Err(Error::domain("need at least one Monte-Carlo noise vector"));
    }
    if let Some(bad) = noise.iter().find(|g| g.len() != t) {
        return Err(Error::Dimension {
            what: "noise vector",
            expected: t,
            actual: bad.len(),
        });
    }
    Ok(())
}

/// Stochastic objective estimate
/// `-(n/b)(1/K) sum_k sum_j w_j log p_{theta_k}(D_j) + zeta * KL(v, z)`
/// with `theta_k = mu + softplus(rho) * g_k`. Deterministic given `noise`;
/// `weights = None` means all ones.
#[allow(clippy::too_many_arguments)]
pub fn elbo_estimate(
    spec: &NetworkSpec,
    v: &MeanFieldGaussian,
    z: &MeanFieldGaussian,
    batch: &LabeledDataset,
    weights: Option<&[f64]>,
    n: usize,
    zeta: f64,
    noise: &[Array1<f64>],
) -> Result<f64> {
    check_estimator_args(spec, v, z, batch, weights, n, zeta, noise)?;
    let b = batch.len();
    let k = noise.len();
    let mut data_sum = 0.0;
    for g in noise {
        let theta = reparameterize(v, g)?;
        for j in 0..b {
            let w = weights.map_or(1.0, |w| w[j]);
            if w == 0.0 {
                continue;
            }
            data_sum += w * log_likelihood(spec, &theta, batch.x.row(j), batch.target(j))?;
        }
    }
    let scale = n as f64 / b as f64 / k as f64;
    Ok(-scale * data_sum + zeta * kl_diag_gauss(v, z)?)
}

/// Exact pathwise gradient of [`elbo_estimate`] under the same fixed noise,
/// laid out as `[d/dmu, d/drho]` (length `2T`). Backprop through the softplus
/// scale uses `dsigma/drho = sigmoid(rho)`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_gradient(
    spec: &NetworkSpec,
    v: &MeanFieldGaussian,
    z: &MeanFieldGaussian,
    batch: &LabeledDataset,
    weights: Option<&[f64]>,
    n: usize,
    zeta: f64,
    noise: &[Array1<f64>],
) -> Result<Array1<f64>> {
    check_estimator_args(spec, v, z, batch, weights, n, zeta, noise)?;
    let t = spec.param_count();
    let b = batch.len();
    let k = noise.len();
    let mut grad_mu = Array1::<f64>::zeros(t);
    let mut grad_rho = Array1::<f64>::zeros(t);
    let mut gtheta = Array1::<f64>::zeros(t);
    for g in noise {
        let theta = reparameterize(v, g)?;
        gtheta.fill(0.0);
        for j in 0..b {
            let w = weights.map_or(1.0, |w| w[j]);
            if w == 0.0 {
                continue;
            }
            log_likelihood_grad_into(spec, &theta, batch.x.row(j), batch.target(j), w, &mut gtheta)?;
        }
        // theta = mu + softplus(rho) * g, so d(theta)/d(mu) = 1 and
        // d(theta)/d(rho) = g * sigmoid(rho).
        for m in 0..t {
            grad_mu[m] += gtheta[m];
            grad_rho[m] += gtheta[m] * g[m] * sigmoid(v.rho[m]);
        }
    }
    let scale = -(n as f64) / b as f64 / k as f64;
    grad_mu.mapv_inplace(|x| x * scale);
    grad_rho.mapv_inplace(|x| x * scale);

    if zeta > 0.0 {
        for m in 0..t {
            let sq = softplus(v.rho[m]);
            let sz = softplus(z.rho[m]);
            if sq < crate::variational::SIGMA_FLOOR || sz < crate::variational::SIGMA_FLOOR {
                return Err(Error::domain(format!(
                    "elbo_gradient: sigma underflow at index {m}"
                )));
            }
            let dm = v.mu[m] - z.mu[m];
            grad_mu[m] += zeta * dm / (sz * sz);
            grad_rho[m] += zeta * (-1.0 / sq + sq / (sz * sz)) * sigmoid(v.rho[m]);
        }
    }

    let mut out = Array1::<f64>::zeros(2 * t);
    out.slice_mut(ndarray::s![..t]).assign(&grad_mu);
    out.slice_mut(ndarray::s![t..]).assign(&grad_rho);
    Ok(out)
}
