//! Executable forms of the rate and drift quantities used to reason about
//! training on a size-`n_k` coreset instead of all `n` points: estimation
//! rates `r_n` and `eps_n^2`, the Hellinger-style generalization distance,
//! the drift bound comparing coreset and full-data training, and the
//! minimax-rate envelopes.
//!
//! The undetermined constants (`c`, `c_prime`, ...) are configuration inputs
//! defaulting to 1; every useful check here is a sign, monotonicity, or ratio
//! statement that does not depend on them.

use ndarray::{Array1, Array2, ArrayView1};

use crate::bnn::{forward, NetworkSpec};
use crate::error::{Error, Result};

/// Architecture and constant inputs for the rate functions.
#[derive(Debug, Clone, PartialEq)]
pub struct RateParams {
    /// Full client sample size.
    pub n: usize,
    /// Coreset sample size.
    pub n_k: usize,
    /// Hidden-layer count `L`.
    pub layers: usize,
    /// Total parameter count `T`.
    pub param_count: usize,
    /// Network width `M`.
    pub width: usize,
    /// Input dimension `s_0`.
    pub input_dim: usize,
    /// Log exponent in `eps_n^2`; must exceed 1. Note that the drift gap
    /// `eps^2(n) > eps^2(n_k)` only holds while `ln(n) <= 2 * delta`, so
    /// large-`n` grids need a correspondingly large `delta`.
    pub delta: f64,
    /// Log exponent in the minimax upper envelope.
    pub delta_prime: f64,
    /// Holder smoothness of the regression function.
    pub beta_smooth: f64,
    /// Intrinsic input dimension in the minimax rate.
    pub d_intrinsic: usize,
    pub sigma_eps: f64,
    /// Sup-norm bound on the regression functions.
    pub f_bound: f64,
    pub zeta: f64,
    pub c: f64,
    pub c_prime: f64,
    pub c_double_prime: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for RateParams {
    fn default() -> Self {
        Self {
            n: 1000,
            n_k: 500,
            layers: 2,
            param_count: 100,
            width: 50,
            input_dim: 10,
            delta: 1.5,
            delta_prime: 2.0,
            beta_smooth: 2.0,
            d_intrinsic: 10,
            sigma_eps: 1.0,
            f_bound: 1.0,
            zeta: 10.0,
            c: 1.0,
            c_prime: 1.0,
            c_double_prime: 1.0,
            c2: 1.0,
            c3: 1.0,
        }
    }
}

impl RateParams {
    fn validate_arch(&self) -> Result<()> {
        if self.param_count == 0 {
            return Err(Error::domain("param_count must be positive"));
        }
        if self.width < 2 {
            return Err(Error::domain("width must be at least 2"));
        }
        if self.input_dim == 0 {
            return Err(Error::domain("input_dim must be positive"));
        }
        if !(self.delta > 1.0) {
            return Err(Error::domain(format!(
                "delta must exceed 1, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Variational estimation rate
/// `r(m) = ((L+1) T / m) ln M + (T / m) ln(s0 sqrt(m / T))`.
pub fn r_n(p: &RateParams, m: usize) -> Result<f64> {
    p.validate_arch()?;
    if m < 2 {
        return Err(Error::domain(format!("sample count m={m} must be at least 2")));
    }
    let (t, m_f) = (p.param_count as f64, m as f64);
    let main = ((p.layers as f64 + 1.0) * t / m_f) * (p.width as f64).ln();
    let tail = (t / m_f) * (p.input_dim as f64 * (m_f / t).sqrt()).ln();
    Ok(main + tail)
}

/// Squared contraction rate `eps^2(m) = r(m) * ln(m)^{2 delta}`.
pub fn epsilon_sq(p: &RateParams, m: usize) -> Result<f64> {
    Ok(r_n(p, m)? * (m as f64).ln().powf(2.0 * p.delta))
}

/// The constant linking squared residual loss to the Hellinger-style
/// distance: `(1 - exp(-4 F^2 / (8 sigma_eps^2))) / (4 F^2)`.
pub fn c_f(f_bound: f64, sigma_eps: f64) -> Result<f64> {
    if !(f_bound > 0.0) {
        return Err(Error::domain(format!("F must be positive, got {f_bound}")));
    }
    if !(sigma_eps > 0.0) {
        return Err(Error::domain(format!(
            "sigma_eps must be positive, got {sigma_eps}"
        )));
    }
    let f2 = 4.0 * f_bound * f_bound;
    Ok((1.0 - (-f2 / (8.0 * sigma_eps * sigma_eps)).exp()) / f2)
}

/// Squared Hellinger-style distance between the network under `theta` and a
/// reference function, averaged over the given inputs:
/// `mean_x [ 1 - exp(-||f_theta(x) - f_true(x)||^2 / (8 sigma_eps^2)) ]`.
/// Always in `[0, 1]` and symmetric in the two functions.
pub fn hellinger_sq(
    spec: &NetworkSpec,
    theta: &Array1<f64>,
    f_true: &dyn Fn(ArrayView1<f64>) -> Array1<f64>,
    x_samples: &Array2<f64>,
    sigma_eps: f64,
) -> Result<f64> {
    if !(sigma_eps > 0.0) {
        return Err(Error::domain(format!(
            "sigma_eps must be positive, got {sigma_eps}"
        )));
    }
    if x_samples.nrows() == 0 {
        return Err(Error::domain("hellinger_sq needs at least one input sample"));
    }
    let denom = 8.0 * sigma_eps * sigma_eps;
    let mut total = 0.0;
    for row in x_samples.rows() {
        let fx = forward(spec, theta, row)?;
        let truth = f_true(row);
        if truth.len() != fx.len() {
            return Err(Error::Dimension {
                what: "reference function output",
                expected: fx.len(),
                actual: truth.len(),
            });
        }
        let sq: f64 = fx
            .iter()
            .zip(truth.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total += 1.0 - (-sq / denom).exp();
    }
    Ok(total / x_samples.nrows() as f64)
}

/// Outcome of the drift evaluation comparing full-data and coreset training.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    /// Whether `eps^2(n) > eps^2(n_k)`.
    pub type1_pos: bool,
    /// Whether `n r(n) > n_k r(n_k)`.
    pub type2_pos: bool,
    /// `c (eps^2(n) - eps^2(n_k)) + zeta c' (n r(n) - n_k r(n_k))
    ///  + (c''/N) sum_i (n xi_n - n_k xi_nk)`.
    pub drift_value: f64,
}

/// Evaluates the drift bound. `xi` holds per-client pairs
/// `(xi at n, xi at n_k)` of externally estimated approximation errors; an
/// empty slice excludes that term.
pub fn drift_check(p: &RateParams, xi: &[(f64, f64)]) -> Result<DriftReport> {
    if p.n_k >= p.n {
        return Err(Error::domain(format!(
            "need n_k < n, got n_k={} n={}",
            p.n_k, p.n
        )));
    }
    if p.n_k < 2 {
        return Err(Error::domain("n_k must be at least 2"));
    }
    let eps_n = epsilon_sq(p, p.n)?;
    let eps_nk = epsilon_sq(p, p.n_k)?;
    let nr = p.n as f64 * r_n(p, p.n)?;
    let nkr = p.n_k as f64 * r_n(p, p.n_k)?;
    let approx = if xi.is_empty() {
        0.0
    } else {
        let sum: f64 = xi
            .iter()
            .map(|&(xn, xnk)| p.n as f64 * xn - p.n_k as f64 * xnk)
            .sum();
        p.c_double_prime / xi.len() as f64 * sum
    };
    Ok(DriftReport {
        type1_pos: eps_n > eps_nk,
        type2_pos: nr > nkr,
        drift_value: p.c * (eps_n - eps_nk) + p.zeta * p.c_prime * (nr - nkr) + approx,
    })
}

/// Minimax envelope at sample size `m`:
/// lower `c3 m^{-2 beta / (2 beta + d)}`, upper the same power times
/// `(ln m)^{2 delta_prime}` and `c2`.
pub fn minimax_envelope(p: &RateParams, m: usize) -> Result<(f64, f64)> {
    if m < 2 {
        return Err(Error::domain(format!("sample count m={m} must be at least 2")));
    }
    if !(p.beta_smooth > 0.0) {
        return Err(Error::domain("beta_smooth must be positive"));
    }
    if p.d_intrinsic == 0 {
        return Err(Error::domain("d_intrinsic must be positive"));
    }
    let expo = -2.0 * p.beta_smooth / (2.0 * p.beta_smooth + p.d_intrinsic as f64);
    let power = (m as f64).powf(expo);
    let lower = p.c3 * power;
    let upper = p.c2 * power * (m as f64).ln().powf(2.0 * p.delta_prime);
    Ok((lower, upper))
}
