//! Mean-field Gaussian distributions over flattened parameter vectors.
//!
//! The family is a product of independent Gaussians, one per parameter,
//! with mean `mu` and standard deviation `softplus(rho)`. The softplus link
//! keeps the scale positive while leaving `rho` free for plain gradient steps.

use ndarray::Array1;

use crate::error::{Error, Result};

/// Smallest standard deviation accepted by the KL and density routines.
/// Anything below this indicates a diverged `rho`, which is reported as an
/// error instead of being silently clamped.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Numerically stable softplus, `ln(1 + e^x)`.
///
/// Branches on the sign so that neither exponent overflows: for large `x` the
/// result approaches `x`, for very negative `x` it approaches `e^x`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Diagonal Gaussian over `T` parameters with std dev `softplus(rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldGaussian {
    pub mu: Array1<f64>,
    pub rho: Array1<f64>,
}

impl MeanFieldGaussian {
    pub fn new(mu: Array1<f64>, rho: Array1<f64>) -> Result<Self> {
        if mu.len() != rho.len() {
            return Err(Error::Dimension {
                what: "MeanFieldGaussian mu/rho",
                expected: mu.len(),
                actual: rho.len(),
            });
        }
        if mu.is_empty() {
            return Err(Error::domain("MeanFieldGaussian needs at least one parameter"));
        }
        if mu.iter().chain(rho.iter()).any(|x| !x.is_finite()) {
            return Err(Error::domain("MeanFieldGaussian parameters must be finite"));
        }
        Ok(Self { mu, rho })
    }

    /// Number of parameters `T`.
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Elementwise standard deviations `softplus(rho)`.
    pub fn sigma(&self) -> Array1<f64> {
        self.rho.mapv(softplus)
    }

    /// One SGD step: subtracts `eta` times a length-`2T` gradient laid out as
    /// `[d/dmu, d/drho]`.
    pub fn step(&mut self, grad: &Array1<f64>, eta: f64) -> Result<()> {
        let t = self.len();
        if grad.len() != 2 * t {
            return Err(Error::Dimension {
                what: "variational gradient",
                expected: 2 * t,
                actual: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) || !eta.is_finite() {
            return Err(Error::domain("variational step needs finite gradient and rate"));
        }
        for m in 0..t {
            self.mu[m] -= eta * grad[m];
            self.rho[m] -= eta * grad[t + m];
        }
        Ok(())
    }
}

fn check_same_len(q: &MeanFieldGaussian, other_len: usize, what: &'static str) -> Result<()> {
    if q.len() != other_len {
        return Err(Error::Dimension {
            what,
            expected: q.len(),
            actual: other_len,
        });
    }
    Ok(())
}

/// Deterministic reparameterized sample: `theta_m = mu_m + softplus(rho_m) * g_m`.
///
/// The caller owns the noise `g`; passing standard-normal draws makes this a
/// sample from the distribution.
pub fn reparameterize(q: &MeanFieldGaussian, g: &Array1<f64>) -> Result<Array1<f64>> {
    check_same_len(q, g.len(), "reparameterize noise")?;
    let mut theta = Array1::zeros(q.len());
    for m in 0..q.len() {
        theta[m] = q.mu[m] + softplus(q.rho[m]) * g[m];
    }
    Ok(theta)
}

/// Closed-form KL divergence between two diagonal Gaussians:
/// `sum_m [ ln(sz/sq) + (sq^2 + (mq - mz)^2) / (2 sz^2) - 1/2 ]`.
pub fn kl_diag_gauss(q: &MeanFieldGaussian, z: &MeanFieldGaussian) -> Result<f64> {
    check_same_len(q, z.len(), "kl_diag_gauss pair")?;
    let mut total = 0.0;
    for m in 0..q.len() {
        let sq = softplus(q.rho[m]);
        let sz = softplus(z.rho[m]);
        if sq < SIGMA_FLOOR || sz < SIGMA_FLOOR {
            return Err(Error::domain(format!(
                "kl_diag_gauss: sigma underflow at index {m} (sq={sq:e}, sz={sz:e})"
            )));
        }
        let dm = q.mu[m] - z.mu[m];
        total += (sz / sq).ln() + (sq * sq + dm * dm) / (2.0 * sz * sz) - 0.5;
    }
    // Exactly zero for identical parameters; tiny negative values can only
    // come from rounding, so they are truncated rather than returned.
    if q == z {
        return Ok(0.0);
    }
    Ok(total.max(0.0))
}

/// Log density of `theta` under the product Gaussian.
pub fn log_density(q: &MeanFieldGaussian, theta: &Array1<f64>) -> Result<f64> {
    check_same_len(q, theta.len(), "log_density point")?;
    const LN_2PI: f64 = 1.8378770664093453;
    let mut total = 0.0;
    for m in 0..q.len() {
        let s = softplus(q.rho[m]);
        if s < SIGMA_FLOOR {
            return Err(Error::domain(format!(
                "log_density: sigma underflow at index {m} (sigma={s:e})"
            )));
        }
        let zscore = (theta[m] - q.mu[m]) / s;
        total += -0.5 * zscore * zscore - s.ln() - 0.5 * LN_2PI;
    }
    Ok(total)
}
