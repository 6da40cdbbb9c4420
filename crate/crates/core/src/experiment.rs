//! Ties configuration to execution: materializes the dataset, builds the
//! network, dispatches to the right training loop, and writes the outputs.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;

use crate::baselines::{fedavg_run, SubsetSelector};
use crate::bnn::{LabeledDataset, NetworkSpec, Targets};
use crate::config::{DatasetConfig, ExperimentConfig, Mode};
use crate::data::{embed_vectors, parse_idx, partition_noniid, quantile_bins, synth_regression, IdxData};
use crate::error::{Error, Result};
use crate::federated::{run_federated, PartitionedData};
use crate::metrics::{emit_metrics, MetricsTrace};
use crate::rng::{purpose, stream};

fn split_train_test(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
    client: usize,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::domain(format!(
            "client {client} has {n} points, too few to hold out a test split"
        )));
    }
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[purpose::DATA, 5, client as u64]));
    let test = ds.select(&order[..n_test])?;
    let train = ds.select(&order[n_test..])?;
    Ok((train, test))
}

fn build_synthetic(cfg: &ExperimentConfig) -> Result<(PartitionedData, usize, usize)> {
    let DatasetConfig::Synthetic {
        n_per_client,
        input_dim,
        noise_sigma,
        f,
        noniid_bins,
        test_fraction,
        classes_per_client,
    } = &cfg.dataset
    else {
        unreachable!("caller checked the dataset kind");
    };
    let n_total = cfg.clients * n_per_client;
    let pooled = synth_regression(f, n_total, *input_dim, *noise_sigma, cfg.seed)?;
    let labels = quantile_bins(&pooled, *noniid_bins)?;
    let plan = partition_noniid(&labels, cfg.clients, *classes_per_client, cfg.seed)?;
    let mut train = Vec::with_capacity(cfg.clients);
    let mut test = Vec::with_capacity(cfg.clients);
    for (i, idx) in plan.assignments.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::domain(format!(
                "client {i} received no data; use fewer clients or bins"
            )));
        }
        let ds = pooled.select(idx)?;
        let (tr, te) = split_train_test(&ds, *test_fraction, cfg.seed, i)?;
        train.push(tr);
        test.push(te);
    }
    let out_dim = match &pooled.y {
        Targets::Regression(y) => y.ncols(),
        Targets::Labels(_) => unreachable!("synthetic targets are regression"),
    };
    Ok((PartitionedData::new(train, test)?, *input_dim, out_dim))
}

fn load_idx_pair(images: &str, labels: &str, limit: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let img_bytes =
        std::fs::read(images).map_err(|e| Error::io(images.to_string(), e))?;
    let lab_bytes =
        std::fs::read(labels).map_err(|e| Error::io(labels.to_string(), e))?;
    let IdxData::Images { pixels } = parse_idx(&img_bytes)? else {
        return Err(Error::domain(format!("{images} does not hold image data")));
    };
    let IdxData::Labels { labels: raw } = parse_idx(&lab_bytes)? else {
        return Err(Error::domain(format!("{labels} does not hold label data")));
    };
    let n = pixels.shape()[0];
    if raw.len() != n {
        return Err(Error::Dimension {
            what: "label count",
            expected: n,
            actual: raw.len(),
        });
    }
    let keep = if limit > 0 { n.min(limit) } else { n };
    let (rows, cols) = (pixels.shape()[1], pixels.shape()[2]);
    let flat = Array2::from_shape_fn((keep, rows * cols), |(i, p)| {
        pixels[[i, p / cols, p % cols]]
    });
    let labels: Vec<usize> = raw[..keep].iter().map(|&l| l as usize).collect();
    Ok((flat, labels))
}

fn build_idx(cfg: &ExperimentConfig) -> Result<(PartitionedData, usize, usize)> {
    let DatasetConfig::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
        limit,
        embed_dim,
        classes_per_client,
    } = &cfg.dataset
    else {
        unreachable!("caller checked the dataset kind");
    };
    let (mut train_x, train_y) = load_idx_pair(train_images, train_labels, *limit)?;
    let (mut test_x, test_y) = load_idx_pair(test_images, test_labels, *limit)?;
    if *embed_dim > 0 {
        train_x = embed_vectors(&train_x, *embed_dim, cfg.seed, false)?;
        test_x = embed_vectors(&test_x, *embed_dim, cfg.seed, false)?;
    }
    let input_dim = train_x.ncols();
    let n_classes = train_y
        .iter()
        .chain(test_y.iter())
        .max()
        .map_or(0, |&m| m + 1);
    if n_classes < 2 {
        return Err(Error::domain("classification needs at least two classes"));
    }

    let plan = partition_noniid(&train_y, cfg.clients, *classes_per_client, cfg.seed)?;
    let mut train = Vec::with_capacity(cfg.clients);
    let mut label_sets: Vec<Vec<bool>> = Vec::with_capacity(cfg.clients);
    for (i, idx) in plan.assignments.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::domain(format!(
                "client {i} received no data; use fewer clients or more points"
            )));
        }
        let x = Array2::from_shape_fn((idx.len(), input_dim), |(r, c)| train_x[[idx[r], c]]);
        let y: Vec<usize> = idx.iter().map(|&j| train_y[j]).collect();
        let mut held = vec![false; n_classes];
        for &l in &y {
            held[l] = true;
        }
        label_sets.push(held);
        train.push(LabeledDataset::new(x, Targets::Labels(y))?);
    }

    // Deal each test point to a client holding its label, rotating among the
    // matches; points with an unseen label rotate over everyone.
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); cfg.clients];
    let mut counters = vec![0usize; n_classes];
    for (j, &l) in test_y.iter().enumerate() {
        let matching: Vec<usize> = (0..cfg.clients).filter(|&c| label_sets[c][l]).collect();
        let c = if matching.is_empty() {
            j % cfg.clients
        } else {
            let c = matching[counters[l] % matching.len()];
            counters[l] += 1;
            c
        };
        assigned[c].push(j);
    }
    if let Some(i) = assigned.iter().position(|a| a.is_empty()) {
        return Err(Error::domain(format!(
            "client {i} received no test points; provide more test data"
        )));
    }
    let mut test = Vec::with_capacity(cfg.clients);
    for idx in &assigned {
        let x = Array2::from_shape_fn((idx.len(), input_dim), |(r, c)| test_x[[idx[r], c]]);
        let y: Vec<usize> = idx.iter().map(|&j| test_y[j]).collect();
        test.push(LabeledDataset::new(x, Targets::Labels(y))?);
    }
    Ok((PartitionedData::new(train, test)?, input_dim, n_classes))
}

/// Materializes the configured dataset and the network sized to it.
pub fn build_data(cfg: &ExperimentConfig) -> Result<(PartitionedData, NetworkSpec)> {
    let (data, input_dim, output_dim) = match &cfg.dataset {
        DatasetConfig::Synthetic { .. } => build_synthetic(cfg)?,
        DatasetConfig::Idx { .. } => build_idx(cfg)?,
    };
    let spec = cfg.network.build_spec(input_dim, output_dim)?;
    data.validate_for(&spec)?;
    Ok((data, spec))
}

/// Runs one experiment end to end and writes `metrics.csv` and
/// `summary.json` under `out_dir`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    mode: Mode,
    out_dir: &Path,
) -> Result<MetricsTrace> {
    cfg.validate()?;
    let (data, spec) = build_data(cfg)?;
    let server = cfg.to_server_config();
    let trace = match mode.fed_mode() {
        Some(fed_mode) => run_federated(&server, &spec, &data, fed_mode)?,
        None => {
            let selector = match mode {
                Mode::FedAvg => SubsetSelector::All,
                Mode::Submodular(objective) => SubsetSelector::Submodular {
                    objective,
                    k_fraction: cfg.k_fraction,
                },
                _ => unreachable!("variational modes are dispatched above"),
            };
            fedavg_run(&server, &spec, &data, &selector)?
        }
    };
    emit_metrics(&trace, out_dir, cfg.echo(mode, out_dir))?;
    Ok(trace)
}

/// Mean vector of each client's training inputs, a cheap summary used by the
/// data generation command to sanity-print partitions.
pub fn client_input_means(data: &PartitionedData) -> Vec<Array1<f64>> {
    data.train
        .iter()
        .map(|ds| {
            let n = ds.len() as f64;
            ds.x.sum_axis(ndarray::Axis(0)) / n
        })
        .collect()
}
