//! Experiment configuration: a small sectioned `key = value` format with
//! `#` comments, strict key checking, and defaults matching the reference
//! experiments.

use serde::{Deserialize, Serialize};

use crate::baselines::SubmodObjective;
use crate::bnn::{Activation, Likelihood, NetworkSpec};
use crate::data::RegressionFn;
use crate::error::{Error, Result};
use crate::federated::{FedMode, ServerConfig};

/// Everything a run can be asked to do, across both training loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Coreset,
    Full,
    RandomSubset,
    FedAvg,
    Submodular(SubmodObjective),
}

impl Mode {
    /// The variational loop handles these; the rest go through the averaging
    /// baseline.
    pub fn fed_mode(&self) -> Option<FedMode> {
        match self {
            Mode::Coreset => Some(FedMode::Coreset),
            Mode::Full => Some(FedMode::Full),
            Mode::RandomSubset => Some(FedMode::RandomSubset),
            Mode::FedAvg | Mode::Submodular(_) => None,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coreset" => Ok(Mode::Coreset),
            "full" => Ok(Mode::Full),
            "random_subset" => Ok(Mode::RandomSubset),
            "fedavg" => Ok(Mode::FedAvg),
            other => match other.strip_prefix("submodular:") {
                Some(obj) => Ok(Mode::Submodular(obj.parse()?)),
                None => Err(Error::domain(format!(
                    "unknown mode {other:?}: expected coreset, full, random_subset, \
                     fedavg, or submodular:<objective>"
                ))),
            },
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Coreset => f.write_str("coreset"),
            Mode::Full => f.write_str("full"),
            Mode::RandomSubset => f.write_str("random_subset"),
            Mode::FedAvg => f.write_str("fedavg"),
            Mode::Submodular(obj) => write!(f, "submodular:{obj}"),
        }
    }
}

/// Where the training and test data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetConfig {
    Synthetic {
        n_per_client: usize,
        input_dim: usize,
        noise_sigma: f64,
        f: RegressionFn,
        /// Quantile bins on the target used as labels for the non-iid split.
        noniid_bins: usize,
        test_fraction: f64,
        classes_per_client: usize,
    },
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        /// Keep only the first this many training points (0 = all).
        limit: usize,
        /// Random-projection dimension for the flattened pixels (0 = keep
        /// them as-is).
        embed_dim: usize,
        classes_per_client: usize,
    },
}

impl DatasetConfig {
    pub fn classes_per_client(&self) -> usize {
        match self {
            DatasetConfig::Synthetic {
                classes_per_client, ..
            }
            | DatasetConfig::Idx {
                classes_per_client, ..
            } => *classes_per_client,
        }
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            n_per_client: 120,
            input_dim: 2,
            noise_sigma: 0.1,
            f: RegressionFn::Sin,
            noniid_bins: 6,
            test_fraction: 0.2,
            classes_per_client: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    Gaussian,
    Categorical,
}

impl std::str::FromStr for LikelihoodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "categorical" => Ok(Self::Categorical),
            other => Err(Error::domain(format!(
                "unknown likelihood {other:?}: expected gaussian or categorical"
            ))),
        }
    }
}

/// Network architecture; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: LikelihoodKind,
    pub sigma_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            activation: Activation::Tanh,
            likelihood: LikelihoodKind::Gaussian,
            // Likelihood scale, not the data noise. Smaller values sharpen the
            // likelihood and scale ELBO gradients by 1/sigma^2, and the KL
            // anchor stiffens every round as aggregation feeds precision back
            // into the global posterior; 1.0 keeps the stiffest coordinate
            // inside the stable region for a full 50-round run at the default
            // learning rate and client size.
            sigma_eps: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn build_spec(&self, input_dim: usize, output_dim: usize) -> Result<NetworkSpec> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(output_dim);
        let likelihood = match self.likelihood {
            LikelihoodKind::Gaussian => Likelihood::GaussianRegression {
                sigma_eps: self.sigma_eps,
            },
            LikelihoodKind::Categorical => Likelihood::Categorical,
        };
        NetworkSpec::new(sizes, self.activation, likelihood)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Track the combined objective between alternations only.
    Monitor,
    /// Also descend the KL term inside the solver via the retrain oracle.
    Descend,
}

impl std::str::FromStr for KlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monitor" => Ok(Self::Monitor),
            "descend" => Ok(Self::Descend),
            other => Err(Error::domain(format!(
                "unknown kl_mode {other:?}: expected monitor or descend"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AihtConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub kl_mode: KlMode,
}

impl Default for AihtConfig {
    fn default() -> Self {
        Self {
            max_iter: 10,
            tol: 1e-6,
            kl_mode: KlMode::Monitor,
        }
    }
}

/// Full experiment description, assembled from a config file plus command
/// line overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub local_rounds: usize,
    pub clients: usize,
    pub subset: usize,
    pub beta: f64,
    pub batch: usize,
    pub mc_samples: usize,
    pub zeta: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub k_fraction: f64,
    pub refresh_every: usize,
    pub embed_samples: usize,
    pub coreset_outer_loops: usize,
    pub threads: usize,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub aiht: AihtConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_rounds: 20,
            clients: 3,
            subset: 3,
            beta: 1.0,
            batch: 100,
            mc_samples: 10,
            zeta: 10.0,
            eta1: 0.001,
            eta2: 0.001,
            k_fraction: 0.5,
            refresh_every: 1,
            embed_samples: 128,
            coreset_outer_loops: 3,
            threads: 0,
            seed: 0,
            dataset: DatasetConfig::default(),
            network: NetworkConfig::default(),
            aiht: AihtConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_server_config(&self) -> ServerConfig {
        ServerConfig {
            t_rounds: self.rounds,
            r_local: self.local_rounds,
            s_subset: self.subset,
            beta: self.beta,
            batch: self.batch,
            mc_samples: self.mc_samples,
            eta1: self.eta1,
            eta2: self.eta2,
            zeta: self.zeta,
            k_fraction: self.k_fraction,
            embed_samples: self.embed_samples,
            refresh_every: self.refresh_every,
            coreset_outer_loops: self.coreset_outer_loops,
            aiht_max_iter: self.aiht.max_iter,
            aiht_tol: self.aiht.tol,
            aiht_descend_kl: self.aiht.kl_mode == KlMode::Descend,
            threads: self.threads,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(p)) = self.to_server_config().validate() {
            problems.extend(p);
        }
        if self.clients == 0 {
            problems.push("clients must be at least 1".to_string());
        }
        if self.subset > self.clients {
            problems.push(format!(
                "subset {} exceeds the {} clients",
                self.subset, self.clients
            ));
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                n_per_client,
                input_dim,
                noise_sigma,
                f,
                noniid_bins,
                test_fraction,
                classes_per_client,
            } => {
                if *n_per_client < 2 {
                    problems.push("n_per_client must be at least 2".to_string());
                }
                if *input_dim == 0 {
                    problems.push("input_dim must be at least 1".to_string());
                }
                if !(*noise_sigma >= 0.0) {
                    problems.push(format!("noise_sigma must be nonnegative, got {noise_sigma}"));
                }
                if let RegressionFn::Poly { coeffs } = f {
                    if coeffs.is_empty() {
                        problems.push("polynomial needs at least one coefficient".to_string());
                    }
                }
                if *noniid_bins == 0 {
                    problems.push("noniid_bins must be at least 1".to_string());
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    problems.push(format!(
                        "test_fraction must lie in (0, 1), got {test_fraction}"
                    ));
                }
                if *classes_per_client == 0 {
                    problems.push("classes_per_client must be at least 1".to_string());
                }
                if *classes_per_client > *noniid_bins {
                    problems.push(format!(
                        "classes_per_client {classes_per_client} exceeds noniid_bins {noniid_bins}"
                    ));
                }
            }
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes_per_client,
                ..
            } => {
                for (name, path) in [
                    ("train_images", train_images),
                    ("train_labels", train_labels),
                    ("test_images", test_images),
                    ("test_labels", test_labels),
                ] {
                    if path.is_empty() {
                        problems.push(format!("{name} path must be set"));
                    }
                }
                if *classes_per_client == 0 {
                    problems.push("classes_per_client must be at least 1".to_string());
                }
            }
        }
        if !(self.network.sigma_eps > 0.0) {
            problems.push(format!(
                "sigma_eps must be positive, got {}",
                self.network.sigma_eps
            ));
        }
        match (&self.dataset, self.network.likelihood) {
            (DatasetConfig::Synthetic { .. }, LikelihoodKind::Categorical) => {
                problems.push("synthetic data needs the gaussian likelihood".to_string())
            }
            (DatasetConfig::Idx { .. }, LikelihoodKind::Gaussian) => {
                problems.push("idx data needs the categorical likelihood".to_string())
            }
            _ => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Parses the sectioned `key = value` text format and validates the
    /// result. Unknown sections or keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut problems = Vec::new();
        let mut section = String::from("experiment");
        let mut dataset_kind: Option<String> = None;
        let mut dataset_keys: Vec<(String, String, usize)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                match name {
                    "experiment" | "dataset" | "network" | "aiht" => section = name.to_string(),
                    other => problems.push(format!(
                        "line {}: unknown section [{other}]",
                        lineno + 1
                    )),
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                ));
                continue;
            };
            let key = key.trim();
            let value = value.trim();
            match section.as_str() {
                "experiment" => apply_experiment(&mut cfg, key, value, lineno + 1, &mut problems),
                "network" => apply_network(&mut cfg.network, key, value, lineno + 1, &mut problems),
                "aiht" => apply_aiht(&mut cfg.aiht, key, value, lineno + 1, &mut problems),
                "dataset" => {
                    if key == "kind" {
                        dataset_kind = Some(value.to_string());
                    } else {
                        dataset_keys.push((key.to_string(), value.to_string(), lineno + 1));
                    }
                }
                _ => unreachable!("section names are filtered above"),
            }
        }

        build_dataset(&mut cfg, dataset_kind, &dataset_keys, &mut problems);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn echo(&self, mode: Mode, out_dir: &std::path::Path) -> serde_json::Value {
        serde_json::json!({
            "mode": mode.to_string(),
            "out": out_dir.display().to_string(),
            "config": self,
        })
    }
}

fn parse_into<T: std::str::FromStr>(
    slot: &mut T,
    key: &str,
    value: &str,
    lineno: usize,
    problems: &mut Vec<String>,
) where
    T::Err: std::fmt::Display,
{
    match value.parse::<T>() {
        Ok(v) => *slot = v,
        Err(e) => problems.push(format!("line {lineno}: bad value for {key}: {e}")),
    }
}

fn apply_experiment(
    cfg: &mut ExperimentConfig,
    key: &str,
    value: &str,
    lineno: usize,
    problems: &mut Vec<String>,
) {
    match key {
        "rounds" => parse_into(&mut cfg.rounds, key, value, lineno, problems),
        "local_rounds" => parse_into(&mut cfg.local_rounds, key, value, lineno, problems),
        "clients" => parse_into(&mut cfg.clients, key, value, lineno, problems),
        "subset" => parse_into(&mut cfg.subset, key, value, lineno, problems),
        "beta" => parse_into(&mut cfg.beta, key, value, lineno, problems),
        "batch" => parse_into(&mut cfg.batch, key, value, lineno, problems),
        "mc_samples" => parse_into(&mut cfg.mc_samples, key, value, lineno, problems),
        "zeta" => parse_into(&mut cfg.zeta, key, value, lineno, problems),
        "eta1" => parse_into(&mut cfg.eta1, key, value, lineno, problems),
        "eta2" => parse_into(&mut cfg.eta2, key, value, lineno, problems),
        "k_fraction" => parse_into(&mut cfg.k_fraction, key, value, lineno, problems),
        "refresh_every" => parse_into(&mut cfg.refresh_every, key, value, lineno, problems),
        "embed_samples" => parse_into(&mut cfg.embed_samples, key, value, lineno, problems),
        "coreset_outer_loops" => {
            parse_into(&mut cfg.coreset_outer_loops, key, value, lineno, problems)
        }
        "threads" => parse_into(&mut cfg.threads, key, value, lineno, problems),
        "seed" => parse_into(&mut cfg.seed, key, value, lineno, problems),
        other => problems.push(format!(
            "line {lineno}: unknown key {other:?} in [experiment]"
        )),
    }
}

fn apply_network(
    net: &mut NetworkConfig,
    key: &str,
    value: &str,
    lineno: usize,
    problems: &mut Vec<String>,
) {
    match key {
        "hidden" => match parse_usize_list(value) {
            Ok(sizes) => net.hidden = sizes,
            Err(e) => problems.push(format!("line {lineno}: bad value for hidden: {e}")),
        },
        "activation" => parse_into(&mut net.activation, key, value, lineno, problems),
        "likelihood" => parse_into(&mut net.likelihood, key, value, lineno, problems),
        "sigma_eps" => parse_into(&mut net.sigma_eps, key, value, lineno, problems),
        other => problems.push(format!("line {lineno}: unknown key {other:?} in [network]")),
    }
}

fn apply_aiht(
    aiht: &mut AihtConfig,
    key: &str,
    value: &str,
    lineno: usize,
    problems: &mut Vec<String>,
) {
    match key {
        "max_iter" => parse_into(&mut aiht.max_iter, key, value, lineno, problems),
        "tol" => parse_into(&mut aiht.tol, key, value, lineno, problems),
        "kl_mode" => parse_into(&mut aiht.kl_mode, key, value, lineno, problems),
        other => problems.push(format!("line {lineno}: unknown key {other:?} in [aiht]")),
    }
}

fn parse_usize_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|e| format!("{:?}: {e}", part.trim()))
        })
        .collect()
}

/// Regression function syntax: `sin`, `poly:c0,c1,...`, or
/// `planted:h1-h2-...[:seed]`.
fn parse_regression_fn(value: &str) -> std::result::Result<RegressionFn, String> {
    if value == "sin" {
        return Ok(RegressionFn::Sin);
    }
    if let Some(rest) = value.strip_prefix("poly:") {
        let coeffs: std::result::Result<Vec<f64>, String> = rest
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
            .collect();
        return Ok(RegressionFn::Poly { coeffs: coeffs? });
    }
    if let Some(rest) = value.strip_prefix("planted:") {
        let (sizes, seed) = match rest.split_once(':') {
            Some((sizes, seed)) => (
                sizes,
                seed.parse::<u64>().map_err(|e| format!("{seed:?}: {e}"))?,
            ),
            None => (rest, 0),
        };
        let hidden: std::result::Result<Vec<usize>, String> = sizes
            .split('-')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
            .collect();
        return Ok(RegressionFn::PlantedMlp {
            hidden: hidden?,
            seed,
        });
    }
    Err(format!(
        "{value:?}: expected sin, poly:<coeffs>, or planted:<sizes>[:seed]"
    ))
}

fn build_dataset(
    cfg: &mut ExperimentConfig,
    kind: Option<String>,
    keys: &[(String, String, usize)],
    problems: &mut Vec<String>,
) {
    let kind = kind.unwrap_or_else(|| "synthetic".to_string());
    match kind.as_str() {
        "synthetic" => {
            let mut ds = DatasetConfig::default();
            let DatasetConfig::Synthetic {
                n_per_client,
                input_dim,
                noise_sigma,
                f,
                noniid_bins,
                test_fraction,
                classes_per_client,
            } = &mut ds
            else {
                unreachable!()
            };
            for (key, value, lineno) in keys {
                match key.as_str() {
                    "n_per_client" => parse_into(n_per_client, key, value, *lineno, problems),
                    "input_dim" => parse_into(input_dim, key, value, *lineno, problems),
                    "noise_sigma" => parse_into(noise_sigma, key, value, *lineno, problems),
                    "f" => match parse_regression_fn(value) {
                        Ok(v) => *f = v,
                        Err(e) => problems.push(format!("line {lineno}: bad value for f: {e}")),
                    },
                    "noniid_bins" => parse_into(noniid_bins, key, value, *lineno, problems),
                    "test_fraction" => parse_into(test_fraction, key, value, *lineno, problems),
                    "classes_per_client" => {
                        parse_into(classes_per_client, key, value, *lineno, problems)
                    }
                    other => problems.push(format!(
                        "line {lineno}: unknown key {other:?} for the synthetic dataset"
                    )),
                }
            }
            cfg.dataset = ds;
        }
        "idx" => {
            let mut ds = DatasetConfig::Idx {
                train_images: String::new(),
                train_labels: String::new(),
                test_images: String::new(),
                test_labels: String::new(),
                limit: 0,
                embed_dim: 0,
                classes_per_client: 2,
            };
            let DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
                embed_dim,
                classes_per_client,
            } = &mut ds
            else {
                unreachable!()
            };
            for (key, value, lineno) in keys {
                match key.as_str() {
                    "train_images" => *train_images = value.clone(),
                    "train_labels" => *train_labels = value.clone(),
                    "test_images" => *test_images = value.clone(),
                    "test_labels" => *test_labels = value.clone(),
                    "limit" => parse_into(limit, key, value, *lineno, problems),
                    "embed_dim" => parse_into(embed_dim, key, value, *lineno, problems),
                    "classes_per_client" => {
                        parse_into(classes_per_client, key, value, *lineno, problems)
                    }
                    other => problems.push(format!(
                        "line {lineno}: unknown key {other:?} for the idx dataset"
                    )),
                }
            }
            cfg.network.likelihood = LikelihoodKind::Categorical;
            cfg.dataset = ds;
        }
        other => problems.push(format!(
            "unknown dataset kind {other:?}: expected synthetic or idx"
        )),
    }
}
