//! Federated training loop: per-client personalized variational updates,
//! coreset-weighted localized updates, damped server aggregation, and the
//! round-by-round metric trace.

use std::time::Instant;

use ndarray::Array1;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{
    elbo_gradient, forward, log_likelihood, LabeledDataset, NetworkSpec, Targets, RHO_INIT,
};
use crate::coreset::{
    aiht_solve, build_embedding, combined_objective, AihtOptions, CoresetWeights, KlTerm,
    ObjectiveParts,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsTrace;
use crate::rng::{purpose, standard_normal_vec, stream, stream_seed};
use crate::variational::{kl_diag_gauss, reparameterize, MeanFieldGaussian};

/// Which data each client trains its localized model on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FedMode {
    /// Sparse nonnegative weights refined by the iterative hard-thresholding
    /// solver on a refresh cadence.
    Coreset,
    /// Unit weight on every local point.
    Full,
    /// Unit weight on a random size-`k` subset fixed before the first round.
    RandomSubset,
}

/// Per-client train/test splits, one entry per client.
#[derive(Debug, Clone)]
pub struct PartitionedData {
    pub train: Vec<LabeledDataset>,
    pub test: Vec<LabeledDataset>,
}

impl PartitionedData {
    pub fn new(train: Vec<LabeledDataset>, test: Vec<LabeledDataset>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::domain("need at least one client"));
        }
        if train.len() != test.len() {
            return Err(Error::Dimension {
                what: "test split count",
                expected: train.len(),
                actual: test.len(),
            });
        }
        Ok(Self { train, test })
    }

    pub fn n_clients(&self) -> usize {
        self.train.len()
    }

    pub fn validate_for(&self, spec: &NetworkSpec) -> Result<()> {
        for ds in self.train.iter().chain(self.test.iter()) {
            ds.validate_for(spec)?;
        }
        Ok(())
    }
}

/// Runtime knobs for [`run_federated`] and the point-estimate baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    /// Global aggregation rounds.
    pub t_rounds: usize,
    /// Local update rounds per client per global round.
    pub r_local: usize,
    /// Clients aggregated per round.
    pub s_subset: usize,
    /// Server damping: `v <- (1 - beta) v + (beta / S) sum v_i`.
    pub beta: f64,
    /// Minibatch size.
    pub batch: usize,
    /// Monte Carlo samples per objective estimate.
    pub mc_samples: usize,
    /// Step size for the personal update.
    pub eta1: f64,
    /// Step size for the localized update.
    pub eta2: f64,
    /// KL weight in the client objectives.
    pub zeta: f64,
    /// Coreset size as a fraction of the client's points.
    pub k_fraction: f64,
    /// Posterior draws used to build the likelihood embedding.
    pub embed_samples: usize,
    /// Recompute coreset weights every this many rounds.
    pub refresh_every: usize,
    /// Alternations between local training and weight refinement within one
    /// refresh round.
    pub coreset_outer_loops: usize,
    pub aiht_max_iter: usize,
    pub aiht_tol: f64,
    /// Let the solver descend the KL term through a retrain oracle instead of
    /// only monitoring the combined objective between outer loops.
    pub aiht_descend_kl: bool,
    /// Worker threads; 0 means the `CORESET_FED_THREADS` variable if set,
    /// otherwise all available cores.
    pub threads: usize,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            t_rounds: 50,
            r_local: 20,
            s_subset: 3,
            beta: 1.0,
            batch: 100,
            mc_samples: 10,
            eta1: 0.001,
            eta2: 0.001,
            zeta: 10.0,
            k_fraction: 0.5,
            embed_samples: 128,
            refresh_every: 1,
            coreset_outer_loops: 3,
            aiht_max_iter: 10,
            aiht_tol: 1e-6,
            aiht_descend_kl: false,
            threads: 0,
            seed: 0,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.s_subset == 0 {
            problems.push("s_subset must be at least 1".to_string());
        }
        if self.batch == 0 {
            problems.push("batch must be at least 1".to_string());
        }
        if self.mc_samples == 0 {
            problems.push("mc_samples must be at least 1".to_string());
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            problems.push(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !(self.eta1 > 0.0 && self.eta1.is_finite()) {
            problems.push(format!("eta1 must be positive, got {}", self.eta1));
        }
        if !(self.eta2 > 0.0 && self.eta2.is_finite()) {
            problems.push(format!("eta2 must be positive, got {}", self.eta2));
        }
        if !(self.zeta >= 0.0 && self.zeta.is_finite()) {
            problems.push(format!("zeta must be nonnegative, got {}", self.zeta));
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            problems.push(format!(
                "k_fraction must lie in (0, 1], got {}",
                self.k_fraction
            ));
        }
        if self.embed_samples == 0 {
            problems.push("embed_samples must be at least 1".to_string());
        }
        if self.refresh_every == 0 {
            problems.push("refresh_every must be at least 1".to_string());
        }
        if self.coreset_outer_loops == 0 {
            problems.push("coreset_outer_loops must be at least 1".to_string());
        }
        if self.aiht_max_iter == 0 {
            problems.push("aiht_max_iter must be at least 1".to_string());
        }
        if !(self.aiht_tol > 0.0) {
            problems.push(format!(
                "aiht_tol must be positive, got {}",
                self.aiht_tol
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// One client's persistent state across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: LabeledDataset,
    pub weights: CoresetWeights,
    /// Personal posterior, trained every round and never aggregated.
    pub v_personal: MeanFieldGaussian,
}

/// Rounds `k_fraction * n` up to the nearest point count, at least 1.
pub fn coreset_size(k_fraction: f64, n: usize) -> Result<usize> {
    if !(k_fraction > 0.0 && k_fraction <= 1.0) {
        return Err(Error::domain(format!(
            "k_fraction must lie in (0, 1], got {k_fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::domain("cannot size a coreset of an empty dataset"));
    }
    Ok(((k_fraction * n as f64).ceil() as usize).clamp(1, n))
}

/// Sorted draw of `s_subset` distinct client ids out of `n_clients`.
pub fn sample_clients(n_clients: usize, s_subset: usize, seed: u64) -> Result<Vec<usize>> {
    if s_subset == 0 || s_subset > n_clients {
        return Err(Error::domain(format!(
            "subset size {s_subset} must lie in 1..={n_clients}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = rand::seq::index::sample(&mut rng, n_clients, s_subset).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// A batch over the coreset support together with the per-point weights the
/// objective estimator should apply.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Builds the batch for one weighted SGD step. When the support fits in `b`
/// the whole support is returned once with its own weights (the exact-fit
/// case: the weighted loss is computed in full, no sampling). Otherwise `b`
/// points are drawn independently proportional to `w` and credited the mean
/// weight `total/n_k`, the importance weight that keeps the estimator (with
/// its `n_k/b` prefactor) unbiased for `sum_j w_j l_j`. The draws must be
/// independent for that to hold exactly; a without-replacement design skews
/// the inclusion probabilities away from proportionality. Attaching `w_j`
/// itself on top of proportional sampling would count the weights twice and
/// tilt the batch toward heavy points.
pub fn weighted_minibatch(
    data: &LabeledDataset,
    w: &CoresetWeights,
    b: usize,
    seed: u64,
) -> Result<WeightedBatch> {
    if b == 0 {
        return Err(Error::domain("minibatch size must be at least 1"));
    }
    if w.len() != data.len() {
        return Err(Error::Dimension {
            what: "weight vector length",
            expected: data.len(),
            actual: w.len(),
        });
    }
    let support = w.support();
    if support.is_empty() {
        return Err(Error::domain("cannot sample from all-zero weights"));
    }
    let n_k = support.len();
    if n_k <= b {
        let weights = support.iter().map(|&j| w.w[j]).collect();
        return Ok(WeightedBatch { indices: support, weights });
    }
    let total: f64 = support.iter().map(|&j| w.w[j]).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(support.iter().map(|&j| w.w[j]))
        .map_err(|e| Error::domain(format!("weighted sampling failed: {e}")))?;
    let indices: Vec<usize> = (0..b).map(|_| support[dist.sample(&mut rng)]).collect();
    let weights = vec![total / n_k as f64; b];
    Ok(WeightedBatch { indices, weights })
}

fn draw_noise<R: rand::Rng + ?Sized>(rng: &mut R, t: usize, k: usize) -> Vec<Array1<f64>> {
    (0..k).map(|_| standard_normal_vec(rng, t)).collect()
}

/// One step of descent on the estimated objective for `v` given anchor `z`.
#[allow(clippy::too_many_arguments)]
fn elbo_step(
    spec: &NetworkSpec,
    v: &mut MeanFieldGaussian,
    z: &MeanFieldGaussian,
    data: &LabeledDataset,
    batch: &WeightedBatch,
    n: usize,
    zeta: f64,
    eta: f64,
    noise: &[Array1<f64>],
) -> Result<()> {
    let selected = data.select(&batch.indices)?;
    let grad = elbo_gradient(
        spec,
        v,
        z,
        &selected,
        Some(&batch.weights),
        n,
        zeta,
        noise,
    )?;
    v.step(&grad, eta)
}

/// Runs `r_local` local rounds: each round takes one personal step (uniform
/// minibatch, anchored to the global posterior) and one localized step
/// (coreset-weighted minibatch on a fresh copy of the global posterior). The
/// personal posterior mutates in place; the localized posterior is returned
/// for aggregation.
pub fn client_update(
    client: &mut ClientState,
    v_global: &MeanFieldGaussian,
    spec: &NetworkSpec,
    cfg: &ServerConfig,
    round: usize,
    outer: usize,
) -> Result<MeanFieldGaussian> {
    let t = spec.param_count();
    let n = client.data.len();
    let id = client.id as u64;
    let uniform = CoresetWeights::ones(n);
    let nnz = client.weights.nnz();
    if nnz == 0 {
        return Err(Error::domain(format!(
            "client {id} has all-zero coreset weights"
        )));
    }
    let mut v_localized = v_global.clone();
    for r in 0..cfg.r_local {
        let tags = |purpose_tag: u64, copy: u64| {
            [purpose_tag, id, round as u64, outer as u64, r as u64, copy]
        };
        let mb = weighted_minibatch(
            &client.data,
            &uniform,
            cfg.batch,
            stream_seed(cfg.seed, &tags(purpose::MINIBATCH, 0)),
        )?;
        let noise = draw_noise(
            &mut stream(cfg.seed, &tags(purpose::ELBO_NOISE, 0)),
            t,
            cfg.mc_samples,
        );
        elbo_step(
            spec,
            &mut client.v_personal,
            v_global,
            &client.data,
            &mb,
            n,
            cfg.zeta,
            cfg.eta1,
            &noise,
        )?;

        let mb = weighted_minibatch(
            &client.data,
            &client.weights,
            cfg.batch,
            stream_seed(cfg.seed, &tags(purpose::MINIBATCH, 1)),
        )?;
        let noise = draw_noise(
            &mut stream(cfg.seed, &tags(purpose::ELBO_NOISE, 1)),
            t,
            cfg.mc_samples,
        );
        elbo_step(
            spec,
            &mut v_localized,
            v_global,
            &client.data,
            &mb,
            nnz,
            cfg.zeta,
            cfg.eta2,
            &noise,
        )?;
    }
    Ok(v_localized)
}

/// Outcome of a coreset refresh round.
#[derive(Debug, Clone)]
pub struct CoresetRoundOutcome {
    pub v_localized: MeanFieldGaussian,
    /// The solver returned an empty support and the previous weights were
    /// kept.
    pub fell_back: bool,
    /// Combined objective before and after each weight refinement.
    pub objective_trace: Vec<(f64, f64)>,
    pub final_parts: ObjectiveParts,
    /// Points entering or leaving the support relative to the round start.
    pub churn: usize,
}

/// Alternates local training with weight refinement: train, embed the
/// posterior, solve for new weights, repeat until the combined objective
/// stops moving or the loop budget runs out. Snapshot noise is drawn once so
/// objective values are comparable across alternations.
pub fn coreset_opt_update(
    client: &mut ClientState,
    v_global: &MeanFieldGaussian,
    spec: &NetworkSpec,
    cfg: &ServerConfig,
    round: usize,
) -> Result<CoresetRoundOutcome> {
    let t = spec.param_count();
    let n = client.data.len();
    let id = client.id as u64;
    let k = coreset_size(cfg.k_fraction, n)?;
    let prev_support = client.weights.support();

    // Deliberately round-independent: reusing the same snapshot noise every
    // refresh means the embedding drifts only with the posterior itself, so
    // successive solves see nearby problems and the support stays put instead
    // of churning on resampled noise.
    let snapshot_noise = draw_noise(
        &mut stream(cfg.seed, &[purpose::EMBED, id]),
        t,
        cfg.embed_samples,
    );
    let retrain_noise = draw_noise(
        &mut stream(cfg.seed, &[purpose::RETRAIN, id]),
        t,
        cfg.mc_samples,
    );

    let mut fell_back = false;
    let mut objective_trace = Vec::new();
    let mut final_parts = None;
    let mut v_localized = v_global.clone();
    let mut last_total = f64::INFINITY;
    for outer in 0..cfg.coreset_outer_loops {
        v_localized = client_update(client, v_global, spec, cfg, round, outer)?;

        let snapshots: Vec<Array1<f64>> = snapshot_noise
            .iter()
            .map(|g| reparameterize(&client.v_personal, g))
            .collect::<Result<_>>()?;
        let emb = build_embedding(spec, &snapshots, &client.data)?;
        let before = combined_objective(&client.weights, &v_localized, &client.v_personal, &emb)?;

        {
            let oracle = |w: &Array1<f64>| -> f64 {
                retrain_kl(
                    w,
                    v_global,
                    &client.v_personal,
                    &client.data,
                    spec,
                    cfg,
                    &retrain_noise,
                )
            };
            let kl_term = cfg.aiht_descend_kl.then_some(KlTerm {
                oracle: &oracle,
                descend: true,
                fd_step_rel: 1e-3,
            });
            let opts = AihtOptions {
                max_iter: cfg.aiht_max_iter,
                tol: cfg.aiht_tol,
                kl_term,
            };
            let solved = aiht_solve(&emb, k, &opts)?;
            if solved.weights.nnz() == 0 {
                fell_back = true;
            } else {
                client.weights = solved.weights;
            }
        }

        let after = combined_objective(&client.weights, &v_localized, &client.v_personal, &emb)?;
        objective_trace.push((before.total(), after.total()));
        final_parts = Some(after);
        if (last_total - after.total()).abs() < cfg.aiht_tol {
            break;
        }
        last_total = after.total();
    }

    let new_support = client.weights.support();
    let churn = symmetric_difference(&prev_support, &new_support);
    Ok(CoresetRoundOutcome {
        v_localized,
        fell_back,
        objective_trace,
        final_parts: final_parts.expect("at least one alternation ran"),
        churn,
    })
}

/// `KL(q_w || q)` after a short retrain of the global posterior on the
/// candidate weights; used as the solver's KL oracle. Negative probe values
/// are clamped to zero before sampling.
fn retrain_kl(
    w: &Array1<f64>,
    v_global: &MeanFieldGaussian,
    q_personal: &MeanFieldGaussian,
    data: &LabeledDataset,
    spec: &NetworkSpec,
    cfg: &ServerConfig,
    noise: &[Array1<f64>],
) -> f64 {
    const RETRAIN_STEPS: usize = 5;
    let clamped = w.mapv(|v| v.max(0.0));
    let support: Vec<usize> = (0..clamped.len()).filter(|&j| clamped[j] > 0.0).collect();
    let mut v = v_global.clone();
    if !support.is_empty() {
        let n_k = support.len();
        let batch = WeightedBatch {
            indices: support.clone(),
            weights: support.iter().map(|&j| clamped[j]).collect(),
        };
        for _ in 0..RETRAIN_STEPS {
            if elbo_step(
                spec, &mut v, v_global, data, &batch, n_k, cfg.zeta, cfg.eta2, noise,
            )
            .is_err()
            {
                return f64::INFINITY;
            }
        }
    }
    kl_diag_gauss(&v, q_personal).unwrap_or(f64::INFINITY)
}

fn symmetric_difference(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                count += 1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                count += 1;
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    count + (a.len() - i) + (b.len() - j)
}

/// Damped average: `v_new = (1 - beta) v + (beta / S) sum_i updates[i]`.
pub fn aggregate(
    v_global: &MeanFieldGaussian,
    updates: &[MeanFieldGaussian],
    beta: f64,
) -> Result<MeanFieldGaussian> {
    if updates.is_empty() {
        return Err(Error::domain("aggregate needs at least one update"));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::domain(format!(
            "beta must lie in (0, 1], got {beta}"
        )));
    }
    let t = v_global.len();
    let mut mu = Array1::<f64>::zeros(t);
    let mut rho = Array1::<f64>::zeros(t);
    for u in updates {
        if u.len() != t {
            return Err(Error::Dimension {
                what: "update parameter count",
                expected: t,
                actual: u.len(),
            });
        }
        mu += &u.mu;
        rho += &u.rho;
    }
    let s = updates.len() as f64;
    mu = &v_global.mu * (1.0 - beta) + mu * (beta / s);
    rho = &v_global.rho * (1.0 - beta) + rho * (beta / s);
    MeanFieldGaussian::new(mu, rho)
}

/// Point-estimate quality of `theta` on a dataset: mean negative
/// log-likelihood always, plus mean squared error (summed over output dims)
/// for regression or accuracy for classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub nll: f64,
    pub mse: Option<f64>,
    pub acc: Option<f64>,
}

#[derive(Default, Clone, Copy)]
struct EvalSums {
    nll: f64,
    sq: f64,
    correct: usize,
    n: usize,
}

impl EvalSums {
    fn add(&mut self, other: EvalSums) {
        self.nll += other.nll;
        self.sq += other.sq;
        self.correct += other.correct;
        self.n += other.n;
    }

    fn finish(self, regression: bool) -> EvalMetrics {
        let n = self.n.max(1) as f64;
        EvalMetrics {
            nll: self.nll / n,
            mse: regression.then_some(self.sq / n),
            acc: (!regression).then_some(self.correct as f64 / n),
        }
    }
}

fn eval_sums(spec: &NetworkSpec, theta: &Array1<f64>, data: &LabeledDataset) -> Result<EvalSums> {
    let mut sums = EvalSums::default();
    for j in 0..data.len() {
        let x = data.x.row(j);
        sums.nll -= log_likelihood(spec, theta, x, data.target(j))?;
        match &data.y {
            Targets::Regression(y) => {
                let f = forward(spec, theta, x)?;
                sums.sq += (&f - &y.row(j)).mapv(|d| d * d).sum();
            }
            Targets::Labels(l) => {
                let f = forward(spec, theta, x)?;
                let arg = f
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                sums.correct += usize::from(arg == l[j]);
            }
        }
    }
    sums.n = data.len();
    Ok(sums)
}

pub fn evaluate_theta(
    spec: &NetworkSpec,
    theta: &Array1<f64>,
    data: &LabeledDataset,
) -> Result<EvalMetrics> {
    let regression = matches!(data.y, Targets::Regression(_));
    Ok(eval_sums(spec, theta, data)?.finish(regression))
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

fn emit_eval(
    trace: &mut MetricsTrace,
    round: usize,
    spec: &NetworkSpec,
    v_global: &MeanFieldGaussian,
    clients: &[ClientState],
    data: &PartitionedData,
) -> Result<()> {
    let regression = matches!(data.test[0].y, Targets::Regression(_));
    let mut global = EvalSums::default();
    for test in &data.test {
        global.add(eval_sums(spec, &v_global.mu, test)?);
    }
    push_eval(trace, round, -1, "global", global.finish(regression));
    for client in clients {
        let m = evaluate_theta(spec, &client.v_personal.mu, &data.test[client.id])?;
        push_eval(trace, round, client.id as i64, "personal", m);
    }
    Ok(())
}

struct RoundOutcome {
    v_localized: MeanFieldGaussian,
    kl_localized_personal: f64,
    coreset: Option<CoresetDiag>,
}

struct CoresetDiag {
    fell_back: bool,
    churn: usize,
    parts: ObjectiveParts,
}

fn round_update(
    client: &mut ClientState,
    v_global: &MeanFieldGaussian,
    spec: &NetworkSpec,
    cfg: &ServerConfig,
    round: usize,
    mode: FedMode,
) -> Result<RoundOutcome> {
    let refresh = mode == FedMode::Coreset && round.is_multiple_of(cfg.refresh_every);
    let (v_localized, coreset) = if refresh {
        let out = coreset_opt_update(client, v_global, spec, cfg, round)?;
        (
            out.v_localized,
            Some(CoresetDiag {
                fell_back: out.fell_back,
                churn: out.churn,
                parts: out.final_parts,
            }),
        )
    } else {
        (client_update(client, v_global, spec, cfg, round, 0)?, None)
    };
    let kl_localized_personal = kl_diag_gauss(&v_localized, &client.v_personal)?;
    Ok(RoundOutcome {
        v_localized,
        kl_localized_personal,
        coreset,
    })
}

pub(crate) fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    let mut n = threads;
    if n == 0 {
        if let Ok(value) = std::env::var("CORESET_FED_THREADS") {
            n = value.parse().map_err(|_| {
                Error::domain(format!(
                    "CORESET_FED_THREADS must be a nonnegative integer, got {value:?}"
                ))
            })?;
        }
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::domain(format!("thread pool construction failed: {e}")))
}

/// Runs the full training loop and returns the metric trace. Rows at round 0
/// evaluate the untouched initialization; rows at round `t >= 1` follow the
/// `t`-th aggregation. Results are reproducible for a fixed seed regardless
/// of thread count.
pub fn run_federated(
    cfg: &ServerConfig,
    spec: &NetworkSpec,
    data: &PartitionedData,
    mode: FedMode,
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

    let v_global_init = spec.init_gaussian(RHO_INIT, &mut stream(cfg.seed, &[purpose::INIT]));
    let mut clients: Vec<ClientState> = (0..n_clients)
        .map(|i| -> Result<ClientState> {
            let n_i = data.train[i].len();
            let weights = match mode {
                FedMode::Full => CoresetWeights::ones(n_i),
                FedMode::Coreset | FedMode::RandomSubset => {
                    let k = coreset_size(cfg.k_fraction, n_i)?;
                    let mut rng = stream(cfg.seed, &[purpose::WEIGHT_INIT, i as u64]);
                    let mut idx = rand::seq::index::sample(&mut rng, n_i, k).into_vec();
                    idx.sort_unstable();
                    CoresetWeights::on_subset(n_i, &idx)?
                }
            };
            Ok(ClientState {
                id: i,
                data: data.train[i].clone(),
                weights,
                v_personal: v_global_init.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let mut v_global = v_global_init;

    let mut trace = MetricsTrace::default();
    emit_eval(&mut trace, 0, spec, &v_global, &clients, data)?;

    for round in 0..cfg.t_rounds {
        let start = Instant::now();
        let outcomes: Vec<RoundOutcome> = pool.install(|| {
            clients
                .par_iter_mut()
                .map(|c| round_update(c, &v_global, spec, cfg, round, mode))
                .collect::<Result<Vec<_>>>()
        })?;

        let subset = sample_clients(
            n_clients,
            cfg.s_subset,
            stream_seed(cfg.seed, &[purpose::CLIENT_SUBSET, round as u64]),
        )?;
        let updates: Vec<MeanFieldGaussian> = subset
            .iter()
            .map(|&i| outcomes[i].v_localized.clone())
            .collect();
        v_global = aggregate(&v_global, &updates, cfg.beta)?;
        trace
            .round_wall_ms
            .push(u64::try_from(start.elapsed().as_millis()).unwrap_or(u64::MAX));

        let r = round + 1;
        emit_eval(&mut trace, r, spec, &v_global, &clients, data)?;
        for (client, outcome) in clients.iter().zip(&outcomes) {
            let id = client.id as i64;
            trace.push(r, id, "diag", "kl_localized_personal", outcome.kl_localized_personal);
            trace.push(r, id, "diag", "coreset_nnz", client.weights.nnz() as f64);
            if let Some(diag) = &outcome.coreset {
                trace.push(r, id, "diag", "coreset_churn", diag.churn as f64);
                trace.push(r, id, "diag", "coreset_fallback", f64::from(diag.fell_back));
                trace.push(r, id, "diag", "coreset_quadratic", diag.parts.quadratic);
                trace.push(r, id, "diag", "coreset_kl", diag.parts.kl);
            }
        }
    }
    Ok(trace)
}
