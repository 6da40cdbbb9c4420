//! Sparse nonnegative coreset weights over a Monte-Carlo log-likelihood
//! embedding, solved by accelerated iterative hard thresholding (A-IHT).
//!
//! The embedding turns each data point `j` into a vector `g_j` of centered,
//! scaled log-likelihoods across `S` parameter snapshots. A weight vector `w`
//! approximates the full-data vector `P = sum_j g_j` through the quadratic
//! objective `||P - Phi w||^2`, minimized subject to `w >= 0` and
//! `||w||_0 <= k`.

use ndarray::{Array1, Array2};

use crate::bnn::{log_likelihood, LabeledDataset, NetworkSpec};
use crate::error::{Error, Result};
use crate::variational::{kl_diag_gauss, MeanFieldGaussian};

/// Monte-Carlo likelihood embedding: `phi` is `S x n` with column `j` holding
/// the centered, `1/sqrt(S)`-scaled log-likelihoods of point `j` across the
/// `S` snapshots; `target` is the column sum `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEmbedding {
    pub phi: Array2<f64>,
    pub target: Array1<f64>,
}

impl LikelihoodEmbedding {
    /// Wraps an existing matrix and target, validating shapes only. Columns
    /// built by [`build_embedding`] are centered by construction; externally
    /// supplied matrices (the standalone solver path) are taken as given.
    pub fn from_parts(phi: Array2<f64>, target: Array1<f64>) -> Result<Self> {
        if target.len() != phi.nrows() {
            return Err(Error::Dimension {
                what: "embedding target",
                expected: phi.nrows(),
                actual: target.len(),
            });
        }
        if phi.ncols() == 0 || phi.nrows() == 0 {
            return Err(Error::domain("embedding must be nonempty"));
        }
        Ok(Self { phi, target })
    }

    /// Monte-Carlo sample count `S`.
    pub fn samples(&self) -> usize {
        self.phi.nrows()
    }

    /// Data size `n`.
    pub fn n(&self) -> usize {
        self.phi.ncols()
    }

    /// Residual `P - Phi w`.
    pub fn residual(&self, w: &Array1<f64>) -> Result<Array1<f64>> {
        if w.len() != self.n() {
            return Err(Error::Dimension {
                what: "weight vector",
                expected: self.n(),
                actual: w.len(),
            });
        }
        Ok(&self.target - &self.phi.dot(w))
    }

    /// Quadratic objective `||P - Phi w||^2`.
    pub fn quadratic(&self, w: &Array1<f64>) -> Result<f64> {
        let r = self.residual(w)?;
        Ok(r.dot(&r))
    }
}

/// Nonnegative weights with at most `k` nonzeros.
#[derive(Debug, Clone, PartialEq)]
pub struct CoresetWeights {
    pub w: Array1<f64>,
    pub k: usize,
}

impl CoresetWeights {
    pub fn new(w: Array1<f64>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("sparsity budget k must be at least 1"));
        }
        if let Some(&bad) = w.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::domain(format!("coreset weight {bad} is invalid")));
        }
        let nnz = w.iter().filter(|&&v| v != 0.0).count();
        if nnz > k {
            return Err(Error::domain(format!(
                "{nnz} nonzero weights exceed the budget k={k}"
            )));
        }
        Ok(Self { w, k })
    }

    /// Unit weights everywhere; the budget equals `n` (full-data mode).
    pub fn ones(n: usize) -> Self {
        Self {
            w: Array1::ones(n),
            k: n,
        }
    }

    /// Unit weights on the given indices, budget equal to the subset size.
    pub fn on_subset(n: usize, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::domain("subset weights need at least one index"));
        }
        let mut w = Array1::zeros(n);
        for &j in idx {
            if j >= n {
                return Err(Error::domain(format!(
                    "subset index {j} out of range for {n} points"
                )));
            }
            w[j] = 1.0;
        }
        CoresetWeights::new(w, idx.len())
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Indices of nonzero weights, ascending.
    pub fn support(&self) -> Vec<usize> {
        self.w
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn nnz(&self) -> usize {
        self.w.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Builds the embedding from `S` parameter snapshots:
/// `phi[s, j] = (l_s(j) - mean_s l_s(j)) / sqrt(S)` where `l_s(j)` is the
/// log-likelihood of point `j` under snapshot `s`; `target = sum_j phi[., j]`.
pub fn build_embedding(
    spec: &NetworkSpec,
    snapshots: &[Array1<f64>],
    data: &LabeledDataset,
) -> Result<LikelihoodEmbedding> {
    if snapshots.is_empty() {
        return Err(Error::domain("need at least one parameter snapshot"));
    }
    if data.is_empty() {
        return Err(Error::domain("cannot embed an empty dataset"));
    }
    data.validate_for(spec)?;
    let s_count = snapshots.len();
    let n = data.len();
    let mut ell = Array2::<f64>::zeros((s_count, n));
    for (s, theta) in snapshots.iter().enumerate() {
        for j in 0..n {
            ell[[s, j]] = log_likelihood(spec, theta, data.x.row(j), data.target(j))?;
        }
    }
    let scale = 1.0 / (s_count as f64).sqrt();
    let mut phi = Array2::<f64>::zeros((s_count, n));
    for j in 0..n {
        let mean = ell.column(j).sum() / s_count as f64;
        for s in 0..s_count {
            phi[[s, j]] = scale * (ell[[s, j]] - mean);
        }
    }
    let target = phi.sum_axis(ndarray::Axis(1));
    LikelihoodEmbedding::from_parts(phi, target)
}

/// Projects onto the set of nonnegative vectors with at most `k` nonzeros:
/// negatives become zero, then the `k` largest survivors are kept (ties to
/// the lowest index). Idempotent.
pub fn project_sparse_nonneg(x: &Array1<f64>, k: usize) -> Result<Array1<f64>> {
    if k == 0 {
        return Err(Error::domain("projection budget k must be at least 1"));
    }
    if k > x.len() {
        return Err(Error::domain(format!(
            "projection budget k={k} exceeds vector length {}",
            x.len()
        )));
    }
    let mut order: Vec<usize> = (0..x.len()).filter(|&j| x[j] > 0.0).collect();
    // Stable sort by descending value; equal values keep ascending index order.
    order.sort_by(|&a, &b| x[b].partial_cmp(&x[a]).unwrap());
    let mut out = Array1::zeros(x.len());
    for &j in order.iter().take(k) {
        out[j] = x[j];
    }
    Ok(out)
}

/// Gradient of `||P - Phi w||^2` with respect to `w`: `-2 Phi^T (P - Phi w)`.
pub fn quadratic_gradient(emb: &LikelihoodEmbedding, w: &Array1<f64>) -> Result<Array1<f64>> {
    let r = emb.residual(w)?;
    Ok(emb.phi.t().dot(&r) * -2.0)
}

/// Optional KL term handled inside the solver. The oracle maps a weight
/// vector to `KL(q_w || q)` by retraining a short-lived variational copy, so
/// each probe is expensive; the solver only calls it when `descend` is set,
/// adding a central finite-difference gradient restricted to the current
/// support. Probes may step slightly below zero on a coordinate.
pub struct KlTerm<'a> {
    pub oracle: &'a dyn Fn(&Array1<f64>) -> f64,
    pub descend: bool,
    /// Relative step for the central differences, scaled per coordinate by
    /// `max(|w_i|, 1)`.
    pub fd_step_rel: f64,
}

pub struct AihtOptions<'a> {
    pub max_iter: usize,
    /// Stop once `||w_{t+1} - w_t||_inf` falls below this.
    pub tol: f64,
    pub kl_term: Option<KlTerm<'a>>,
}

impl Default for AihtOptions<'static> {
    fn default() -> Self {
        Self {
            max_iter: 10,
            tol: 1e-6,
            kl_term: None,
        }
    }
}

/// Per-iteration record of the solver.
#[derive(Debug, Clone)]
pub struct AihtIterate {
    pub iter: usize,
    /// `||P - Phi w||^2` at this iterate.
    pub quadratic: f64,
    /// KL term at this iterate when an oracle descends it, otherwise 0.
    pub kl: f64,
    pub nnz: usize,
    pub min_weight: f64,
    /// `||w_{t+1} - w_t||_inf`.
    pub delta_inf: f64,
}

#[derive(Debug, Clone)]
pub struct AihtResult {
    pub weights: CoresetWeights,
    pub iterates: Vec<AihtIterate>,
    /// Whether the stop tolerance was reached before `max_iter`.
    pub converged: bool,
}

/// Support of the top-`k` magnitudes of `grad` outside `exclude`, ties to the
/// lowest index.
fn top_k_off_support(grad: &Array1<f64>, exclude: &[bool], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.len())
        .filter(|&j| !exclude[j] && grad[j] != 0.0)
        .collect();
    order.sort_by(|&a, &b| grad[b].abs().partial_cmp(&grad[a].abs()).unwrap());
    order.truncate(k);
    order
}

/// Accelerated iterative hard thresholding for
/// `min ||P - Phi w||^2  s.t.  w >= 0, ||w||_0 <= k`.
///
/// Each iteration restricts the gradient to the union of the current support
/// and the top-`k` off-support gradient entries (at most `3k` coordinates),
/// takes an exact line-search step for the quadratic, projects onto the
/// constraint set, and applies momentum with its own exact line search.
/// The returned weights are the best iterate seen, never worse than the empty
/// coreset.
pub fn aiht_solve(emb: &LikelihoodEmbedding, k: usize, opts: &AihtOptions) -> Result<AihtResult> {
    aiht_solve_instrumented(emb, k, opts, |_, _| {})
}

/// [`aiht_solve`] with a hook observing every iterate `w_{t+1}` before the
/// momentum step; used to assert per-iterate invariants in tests.
pub fn aiht_solve_instrumented(
    emb: &LikelihoodEmbedding,
    k: usize,
    opts: &AihtOptions,
    mut hook: impl FnMut(usize, &Array1<f64>),
) -> Result<AihtResult> {
    let n = emb.n();
    if k == 0 || k > n {
        return Err(Error::domain(format!(
            "sparsity budget k={k} must lie in 1..={n}"
        )));
    }
    if opts.max_iter == 0 {
        return Err(Error::domain("max_iter must be at least 1"));
    }

    let objective = |w: &Array1<f64>| -> f64 {
        let quad = emb.quadratic(w).expect("dimensions fixed");
        match &opts.kl_term {
            Some(kl) if kl.descend => quad + (kl.oracle)(w),
            _ => quad,
        }
    };

    let mut z = Array1::<f64>::zeros(n);
    let mut w = Array1::<f64>::zeros(n);
    let mut best_w = w.clone();
    let mut best_obj = objective(&w);
    let mut iterates = Vec::new();
    let mut converged = false;

    for iter in 0..opts.max_iter {
        let mut grad = quadratic_gradient(emb, &z)?;
        if let Some(kl) = &opts.kl_term {
            if kl.descend {
                // Central differences of the KL term on the current support.
                for j in 0..n {
                    if z[j] == 0.0 {
                        continue;
                    }
                    let h = kl.fd_step_rel * z[j].abs().max(1.0);
                    let mut plus = z.clone();
                    plus[j] += h;
                    let mut minus = z.clone();
                    minus[j] -= h;
                    grad[j] += ((kl.oracle)(&plus) - (kl.oracle)(&minus)) / (2.0 * h);
                }
            }
        }

        let in_support: Vec<bool> = z.iter().map(|&v| v != 0.0).collect();
        let mut s_set = top_k_off_support(&grad, &in_support, k);
        s_set.extend((0..n).filter(|&j| in_support[j]));

        let mut grad_s = Array1::<f64>::zeros(n);
        for &j in &s_set {
            grad_s[j] = grad[j];
        }
        let phi_grad_s = emb.phi.dot(&grad_s);
        let denom = phi_grad_s.dot(&phi_grad_s);
        if denom == 0.0 {
            // Degenerate direction: project the current iterate and stop.
            let w_next = project_sparse_nonneg(&z, k)?;
            let quad = emb.quadratic(&w_next)?;
            let obj = objective(&w_next);
            if obj < best_obj {
                best_w = w_next.clone();
            }
            hook(iter, &w_next);
            iterates.push(AihtIterate {
                iter,
                quadratic: quad,
                kl: obj - quad,
                nnz: w_next.iter().filter(|&&v| v != 0.0).count(),
                min_weight: w_next.iter().cloned().fold(f64::INFINITY, f64::min),
                delta_inf: (&w_next - &w)
                    .iter()
                    .map(|d| d.abs())
                    .fold(0.0_f64, f64::max),
            });
            converged = true;
            break;
        }
        let mu = grad_s.dot(&grad_s) / (2.0 * denom);

        let w_next = project_sparse_nonneg(&(&z - &(grad.clone() * mu)), k)?;

        let delta = &w_next - &w;
        let phi_delta = emb.phi.dot(&delta);
        let denom2 = phi_delta.dot(&phi_delta);
        let tau = if denom2 == 0.0 {
            0.0
        } else {
            emb.residual(&w_next)?.dot(&phi_delta) / (2.0 * denom2)
        };
        z = &w_next + &(delta.clone() * tau);

        let quad = emb.quadratic(&w_next)?;
        let obj = objective(&w_next);
        if obj < best_obj {
            best_obj = obj;
            best_w = w_next.clone();
        }
        let delta_inf = delta.iter().map(|d| d.abs()).fold(0.0_f64, f64::max);
        hook(iter, &w_next);
        iterates.push(AihtIterate {
            iter,
            quadratic: quad,
            kl: obj - quad,
            nnz: w_next.iter().filter(|&&v| v != 0.0).count(),
            min_weight: w_next.iter().cloned().fold(f64::INFINITY, f64::min),
            delta_inf,
        });
        w = w_next;
        if delta_inf < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(AihtResult {
        weights: CoresetWeights::new(best_w, k)?,
        iterates,
        converged,
    })
}

/// The two terms of the client objective `KL(q_w || q) + ||P - Phi w||^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub kl: f64,
    pub quadratic: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.kl + self.quadratic
    }
}

/// Combined objective for diagnostics and outer-loop stop decisions; the two
/// terms are kept separate so traces can report them individually.
pub fn combined_objective(
    w: &CoresetWeights,
    q_w: &MeanFieldGaussian,
    q: &MeanFieldGaussian,
    emb: &LikelihoodEmbedding,
) -> Result<ObjectiveParts> {
    Ok(ObjectiveParts {
        kl: kl_diag_gauss(q_w, q)?,
        quadratic: emb.quadratic(&w.w)?,
    })
}
