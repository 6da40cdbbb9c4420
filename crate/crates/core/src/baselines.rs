//! Comparison baselines: submodular subset selection over a similarity
//! kernel, uniform random subsets, and a point-estimate federated averaging
//! loop that can train on any of those subsets.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{log_likelihood_grad_into, LabeledDataset, NetworkSpec, Targets};
use crate::error::{Error, Result};
use crate::federated::{
    build_pool, coreset_size, evaluate_theta, sample_clients, EvalMetrics, PartitionedData,
    ServerConfig,
};
use crate::linalg::{is_psd_within, logdet_spd};
use crate::metrics::MetricsTrace;
use crate::rng::{purpose, stream, stream_seed};

/// Pairwise similarity matrix `l` plus the matching distance matrix `d`,
/// both `n x n`; `l` must be symmetric positive semidefinite and `d`
/// symmetric, nonnegative, and zero on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityKernel {
    pub l: Array2<f64>,
    pub d: Array2<f64>,
}

impl SimilarityKernel {
    pub fn new(l: Array2<f64>, d: Array2<f64>) -> Result<Self> {
        let n = l.nrows();
        if l.ncols() != n {
            return Err(Error::Dimension {
                what: "similarity matrix columns",
                expected: n,
                actual: l.ncols(),
            });
        }
        if d.nrows() != n || d.ncols() != n {
            return Err(Error::Dimension {
                what: "distance matrix size",
                expected: n,
                actual: d.nrows().max(d.ncols()),
            });
        }
        for i in 0..n {
            if d[[i, i]] != 0.0 {
                return Err(Error::domain(format!(
                    "distance matrix has nonzero diagonal entry {} at {i}",
                    d[[i, i]]
                )));
            }
            for j in 0..n {
                if !l[[i, j]].is_finite() || !d[[i, j]].is_finite() {
                    return Err(Error::domain(format!(
                        "non-finite kernel entry at ({i}, {j})"
                    )));
                }
                if d[[i, j]] < 0.0 {
                    return Err(Error::domain(format!(
                        "negative distance {} at ({i}, {j})",
                        d[[i, j]]
                    )));
                }
                if (l[[i, j]] - l[[j, i]]).abs() > 1e-10 {
                    return Err(Error::domain(format!(
                        "similarity matrix is not symmetric at ({i}, {j})"
                    )));
                }
                if (d[[i, j]] - d[[j, i]]).abs() > 1e-10 {
                    return Err(Error::domain(format!(
                        "distance matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if !is_psd_within(&l, 1e-8) {
            return Err(Error::domain(
                "similarity matrix is not positive semidefinite",
            ));
        }
        Ok(Self { l, d })
    }

    /// Gaussian kernel on rows of `x`: `l_ij = exp(-||x_i - x_j||^2 / (2
    /// gamma^2))` with `gamma` the median pairwise distance (1 when all
    /// points coincide), and `d` the Euclidean distances.
    pub fn from_points(x: &Array2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::domain("kernel needs at least one point"));
        }
        let mut d = Array2::<f64>::zeros((n, n));
        let mut upper = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = (&x.row(i) - &x.row(j)).mapv(|v| v * v).sum().sqrt();
                d[[i, j]] = dist;
                d[[j, i]] = dist;
                upper.push(dist);
            }
        }
        let gamma = if upper.is_empty() {
            1.0
        } else {
            upper.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = upper.len() / 2;
            let median = if upper.len() % 2 == 0 {
                0.5 * (upper[mid - 1] + upper[mid])
            } else {
                upper[mid]
            };
            if median > 0.0 {
                median
            } else {
                1.0
            }
        };
        let l = d.mapv(|dist| (-dist * dist / (2.0 * gamma * gamma)).exp());
        Self::new(l, d)
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }
}

fn check_subset(n: usize, subset: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &j in subset {
        if j >= n {
            return Err(Error::domain(format!(
                "subset index {j} out of range for {n} points"
            )));
        }
        if seen[j] {
            return Err(Error::domain(format!("subset repeats index {j}")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// `logdet(L_S)` for the principal submatrix on `subset`; the empty subset
/// scores 0 and a singular submatrix scores negative infinity.
pub fn logdet_value(kern: &SimilarityKernel, subset: &[usize]) -> Result<f64> {
    check_subset(kern.n(), subset)?;
    if subset.is_empty() {
        return Ok(0.0);
    }
    let m = subset.len();
    let sub = Array2::from_shape_fn((m, m), |(a, b)| kern.l[[subset[a], subset[b]]]);
    Ok(logdet_spd(&sub).unwrap_or(f64::NEG_INFINITY))
}

/// Sum of pairwise distances within the subset; empty and singleton subsets
/// score 0.
pub fn disparity_sum(kern: &SimilarityKernel, subset: &[usize]) -> Result<f64> {
    check_subset(kern.n(), subset)?;
    let mut total = 0.0;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            total += kern.d[[i, j]];
        }
    }
    Ok(total)
}

/// Smallest pairwise distance within the subset; undefined below two points.
pub fn disparity_min(kern: &SimilarityKernel, subset: &[usize]) -> Result<f64> {
    check_subset(kern.n(), subset)?;
    if subset.len() < 2 {
        return Err(Error::domain(
            "minimum disparity needs at least two points",
        ));
    }
    let mut best = f64::INFINITY;
    for (a, &i) in subset.iter().enumerate() {
        for &j in &subset[a + 1..] {
            best = best.min(kern.d[[i, j]]);
        }
    }
    Ok(best)
}

/// Set function maximized by [`greedy_maximize`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmodObjective {
    LogDet,
    DisparitySum,
    DisparityMin,
}

impl std::str::FromStr for SubmodObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logdet" => Ok(Self::LogDet),
            "disparity_sum" => Ok(Self::DisparitySum),
            "disparity_min" => Ok(Self::DisparityMin),
            other => Err(Error::domain(format!(
                "unknown objective {other:?}: expected logdet, disparity_sum, or disparity_min"
            ))),
        }
    }
}

impl std::fmt::Display for SubmodObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LogDet => "logdet",
            Self::DisparitySum => "disparity_sum",
            Self::DisparityMin => "disparity_min",
        })
    }
}

pub fn objective_value(
    obj: SubmodObjective,
    kern: &SimilarityKernel,
    subset: &[usize],
) -> Result<f64> {
    match obj {
        SubmodObjective::LogDet => logdet_value(kern, subset),
        SubmodObjective::DisparitySum => disparity_sum(kern, subset),
        SubmodObjective::DisparityMin => disparity_min(kern, subset),
    }
}

/// Greedy maximization to a subset of exactly `k` points, returned sorted.
/// LogDet and sum-disparity grow from the empty set, picking the candidate
/// with the best resulting value (lowest index on ties). Min-disparity needs
/// `k >= 2`; it starts from the farthest pair and then maximizes the minimum
/// distance to the picked set.
pub fn greedy_maximize(
    obj: SubmodObjective,
    kern: &SimilarityKernel,
    k: usize,
) -> Result<Vec<usize>> {
    let n = kern.n();
    if k == 0 || k > n {
        return Err(Error::domain(format!(
            "subset size {k} must lie in 1..={n}"
        )));
    }
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    let mut in_set = vec![false; n];
    if obj == SubmodObjective::DisparityMin {
        if k < 2 {
            return Err(Error::domain(
                "minimum disparity needs a subset of at least two points",
            ));
        }
        let mut best = (0usize, 1usize, f64::NEG_INFINITY);
        for i in 0..n {
            for j in (i + 1)..n {
                if kern.d[[i, j]] > best.2 {
                    best = (i, j, kern.d[[i, j]]);
                }
            }
        }
        picked.extend([best.0, best.1]);
        in_set[best.0] = true;
        in_set[best.1] = true;
    }
    while picked.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|&j| !in_set[j]) {
            picked.push(j);
            let value = objective_value(obj, kern, &picked)?;
            picked.pop();
            let better = match best {
                None => true,
                Some((_, v)) => value > v,
            };
            if better {
                best = Some((j, value));
            }
        }
        let (j, _) = best.expect("k <= n leaves a candidate");
        picked.push(j);
        in_set[j] = true;
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Sorted uniform draw of `k` distinct indices out of `n`.
pub fn random_subset(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::domain(format!(
            "subset size {k} exceeds the {n} points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// How the averaging baseline picks each client's training points before the
/// first round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SubsetSelector {
    All,
    Random { k_fraction: f64 },
    Submodular {
        objective: SubmodObjective,
        k_fraction: f64,
    },
}

fn select_indices(
    selector: &SubsetSelector,
    data: &LabeledDataset,
    client: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = data.len();
    match selector {
        SubsetSelector::All => Ok((0..n).collect()),
        SubsetSelector::Random { k_fraction } => {
            let k = coreset_size(*k_fraction, n)?;
            random_subset(n, k, stream_seed(seed, &[purpose::WEIGHT_INIT, client as u64]))
        }
        SubsetSelector::Submodular {
            objective,
            k_fraction,
        } => {
            let k = coreset_size(*k_fraction, n)?;
            let kern = SimilarityKernel::from_points(&data.x)?;
            greedy_maximize(*objective, &kern, k.max(2).min(n))
        }
    }
}

fn local_sgd(
    id: usize,
    theta_global: &Array1<f64>,
    selection: &[usize],
    data: &LabeledDataset,
    spec: &NetworkSpec,
    cfg: &ServerConfig,
    round: usize,
) -> Result<Array1<f64>> {
    let t = spec.param_count();
    let b = cfg.batch;
    let mut theta = theta_global.clone();
    let mut grad = Array1::<f64>::zeros(t);
    for r in 0..cfg.r_local {
        let mut rng = stream(
            cfg.seed,
            &[purpose::MINIBATCH, id as u64, round as u64, 0, r as u64, 0],
        );
        let batch: Vec<usize> = if selection.len() >= b {
            rand::seq::index::sample(&mut rng, selection.len(), b)
                .into_iter()
                .map(|i| selection[i])
                .collect()
        } else {
            (0..b)
                .map(|_| selection[rand::Rng::random_range(&mut rng, 0..selection.len())])
                .collect()
        };
        grad.fill(0.0);
        for &j in &batch {
            log_likelihood_grad_into(
                spec,
                &theta,
                data.x.row(j),
                data.target(j),
                1.0 / b as f64,
                &mut grad,
            )?;
        }
        theta.scaled_add(cfg.eta1, &grad);
    }
    Ok(theta)
}

fn eval_concat(
    spec: &NetworkSpec,
    theta: &Array1<f64>,
    tests: &[LabeledDataset],
) -> Result<EvalMetrics> {
    let mut nll = 0.0;
    let mut mse = 0.0;
    let mut acc = 0.0;
    let mut total = 0usize;
    let regression = matches!(tests[0].y, Targets::Regression(_));
    for ds in tests {
        let m = evaluate_theta(spec, theta, ds)?;
        let n = ds.len() as f64;
        nll += m.nll * n;
        mse += m.mse.unwrap_or(0.0) * n;
        acc += m.acc.unwrap_or(0.0) * n;
        total += ds.len();
    }
    let n = total.max(1) as f64;
    Ok(EvalMetrics {
        nll: nll / n,
        mse: regression.then_some(mse / n),
        acc: (!regression).then_some(acc / n),
    })
}

fn push_eval(trace: &mut MetricsTrace, round: usize, client_id: i64, prefix: &str, m: EvalMetrics) {
    if let Some(mse) = m.mse {
        trace.push(round, client_id, "test", &format!("{prefix}_mse"), mse);
    }
    if let Some(acc) = m.acc {
        trace.push(round, client_id, "test", &format!("{prefix}_acc"), acc);
    }
    trace.push(round, client_id, "test", &format!("{prefix}_nll"), m.nll);
}

/// Federated averaging over point estimates: every round each client runs
/// `r_local` minibatch ascent steps on its mean log-likelihood starting from
/// the broadcast parameters, and the server averages a sampled subset of the
/// results. The selector fixes each client's training points before round 1.
/// Row layout in the trace matches [`crate::federated::run_federated`].
pub fn fedavg_run(
    cfg: &ServerConfig,
    spec: &NetworkSpec,
    data: &PartitionedData,
    selector: &SubsetSelector,
) -> Result<MetricsTrace> {
    cfg.validate()?;
    data.validate_for(spec)?;
    let n_clients = data.n_clients();
    if cfg.s_subset > n_clients {
        return Err(Error::domain(format!(
            "s_subset {} exceeds the {n_clients} clients",
            cfg.s_subset
        )));
    }
    let pool = build_pool(cfg.threads)?;

    let mut theta_global = spec.init_theta(&mut stream(cfg.seed, &[purpose::INIT]));
    let selections: Vec<Vec<usize>> = (0..n_clients)
        .map(|i| select_indices(selector, &data.train[i], i, cfg.seed))
        .collect::<Result<_>>()?;
    let mut thetas: Vec<Array1<f64>> = vec![theta_global.clone(); n_clients];

    let mut trace = MetricsTrace::default();
    push_eval(
        &mut trace,
        0,
        -1,
        "global",
        eval_concat(spec, &theta_global, &data.test)?,
    );
    for (i, selection) in selections.iter().enumerate() {
        let m = evaluate_theta(spec, &theta_global, &data.test[i])?;
        push_eval(&mut trace, 0, i as i64, "personal", m);
        trace.push(0, i as i64, "diag", "subset_size", selection.len() as f64);
    }

    for round in 0..cfg.t_rounds {
        let start = Instant::now();
        thetas = pool.install(|| {
            (0..n_clients)
                .into_par_iter()
                .map(|i| {
                    local_sgd(
                        i,
                        &theta_global,
                        &selections[i],
                        &data.train[i],
                        spec,
                        cfg,
                        round,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let subset = sample_clients(
            n_clients,
            cfg.s_subset,
            stream_seed(cfg.seed, &[purpose::CLIENT_SUBSET, round as u64]),
        )?;
        let mut mean = Array1::<f64>::zeros(spec.param_count());
        for &i in &subset {
            mean += &thetas[i];
        }
        theta_global = mean / subset.len() as f64;
        trace
            .round_wall_ms
            .push(u64::try_from(start.elapsed().as_millis()).unwrap_or(u64::MAX));

        let r = round + 1;
        push_eval(
            &mut trace,
            r,
            -1,
            "global",
            eval_concat(spec, &theta_global, &data.test)?,
        );
        for (i, theta) in thetas.iter().enumerate() {
            let m = evaluate_theta(spec, theta, &data.test[i])?;
            push_eval(&mut trace, r, i as i64, "personal", m);
        }
    }
    Ok(trace)
}
