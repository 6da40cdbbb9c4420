//! Dataset plumbing: synthetic regression generation, label-sharded non-iid
//! partitioning, the IDX binary image/label format, random-projection
//! embeddings, and CSV export.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bnn::{forward, Activation, LabeledDataset, Likelihood, NetworkSpec, Targets};
use crate::error::{Error, Result};
use crate::rng::{purpose, standard_normal_vec, stream};

/// Ground-truth function family for synthetic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegressionFn {
    /// `sin(2 pi x_0) * x_1` for two or more input dims, `sin(2 pi x_0)` for one.
    Sin,
    /// Polynomial in the first coordinate: `sum_p coeffs[p] * x_0^p`.
    Poly { coeffs: Vec<f64> },
    /// A fixed randomly initialized tanh teacher network.
    PlantedMlp { hidden: Vec<usize>, seed: u64 },
}

struct Teacher {
    spec: NetworkSpec,
    theta: Array1<f64>,
}

fn build_teacher(hidden: &[usize], seed: u64, s0: usize) -> Result<Teacher> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(s0);
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    let spec = NetworkSpec::new(
        sizes,
        Activation::Tanh,
        Likelihood::GaussianRegression { sigma_eps: 1.0 },
    )?;
    let mut rng = stream(seed, &[purpose::DATA, 1]);
    let theta = spec.init_theta(&mut rng);
    Ok(Teacher { spec, theta })
}

/// Boxed ground-truth map from an input row to the target vector.
pub type TruthFn = Box<dyn Fn(ArrayView1<f64>) -> Array1<f64> + Send + Sync>;

/// The ground-truth map as a callable, plus its output dimension.
pub fn regression_truth(f: &RegressionFn, s0: usize) -> Result<(usize, TruthFn)> {
    if s0 == 0 {
        return Err(Error::domain("input dimension must be positive"));
    }
    match f {
        RegressionFn::Sin => Ok((
            1,
            Box::new(move |x: ArrayView1<f64>| {
                let v = (2.0 * std::f64::consts::PI * x[0]).sin();
                Array1::from_elem(1, if x.len() >= 2 { v * x[1] } else { v })
            }),
        )),
        RegressionFn::Poly { coeffs } => {
            if coeffs.is_empty() {
                return Err(Error::domain("polynomial needs at least one coefficient"));
            }
            let c = coeffs.clone();
            Ok((
                1,
                Box::new(move |x: ArrayView1<f64>| {
                    let mut acc = 0.0;
                    let mut pow = 1.0;
                    for &cp in &c {
                        acc += cp * pow;
                        pow *= x[0];
                    }
                    Array1::from_elem(1, acc)
                }),
            ))
        }
        RegressionFn::PlantedMlp { hidden, seed } => {
            let teacher = build_teacher(hidden, *seed, s0)?;
            Ok((
                1,
                Box::new(move |x: ArrayView1<f64>| {
                    forward(&teacher.spec, &teacher.theta, x).expect("teacher dims fixed")
                }),
            ))
        }
    }
}

/// Draws `x ~ uniform[-1, 1]^{s0}` and `y = f(x) + eps`,
/// `eps ~ N(0, sigma_eps^2)`. Deterministic given the seed.
pub fn synth_regression(
    f: &RegressionFn,
    n: usize,
    s0: usize,
    sigma_eps: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    if sigma_eps < 0.0 {
        return Err(Error::domain(format!(
            "noise scale must be nonnegative, got {sigma_eps}"
        )));
    }
    let (out_dim, truth) = regression_truth(f, s0)?;
    let mut rng = stream(seed, &[purpose::DATA, 0]);
    let mut x = Array2::<f64>::zeros((n, s0));
    for mut row in x.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
    }
    let mut y = Array2::<f64>::zeros((n, out_dim));
    for j in 0..n {
        let fx = truth(x.row(j));
        for d in 0..out_dim {
            y[[j, d]] = fx[d] + sigma_eps * standard_normal_vec(&mut rng, 1)[0];
        }
    }
    LabeledDataset::new(x, Targets::Regression(y))
}

/// Disjoint per-client index assignment where every client sees exactly
/// `classes_per_client` distinct labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub assignments: Vec<Vec<usize>>,
    pub classes_per_client: usize,
    pub seed: u64,
}

/// Label-sharded non-iid partition. Each present label is split into shards
/// (proportionally to its frequency, at least one and at most `n_clients`
/// shards per label, `n_clients * classes_per_client` shards in total), and
/// every client receives `classes_per_client` shards of distinct labels.
pub fn partition_noniid(
    labels: &[usize],
    n_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if labels.is_empty() {
        return Err(Error::domain("cannot partition an empty dataset"));
    }
    if n_clients == 0 || classes_per_client == 0 {
        return Err(Error::domain(
            "n_clients and classes_per_client must be positive",
        ));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let d = distinct.len();
    if classes_per_client > d {
        return Err(Error::domain(format!(
            "classes_per_client={classes_per_client} exceeds the {d} distinct labels"
        )));
    }
    let total_shards = n_clients * classes_per_client;
    if total_shards < d {
        return Err(Error::domain(format!(
            "{total_shards} shards cannot cover {d} distinct labels"
        )));
    }

    // Proportional shard counts per label by largest remainder. Each label
    // needs at least one shard (coverage) and can fill at most
    // min(n_clients, its point count) shards: more than n_clients would force
    // a client to hold the label twice, and more than the point count would
    // leave a shard empty and a client short a label.
    let counts: Vec<usize> = distinct
        .iter()
        .map(|&l| labels.iter().filter(|&&x| x == l).count())
        .collect();
    let cap: Vec<usize> = counts.iter().map(|&c| c.min(n_clients)).collect();
    if cap.iter().sum::<usize>() < total_shards {
        return Err(Error::domain(format!(
            "cannot fill {total_shards} shards: the {d} labels can supply at most {} nonempty \
             shards without repeating a label within a client",
            cap.iter().sum::<usize>()
        )));
    }
    let total = labels.len() as f64;
    let quota: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / total * total_shards as f64)
        .collect();
    let mut shards: Vec<usize> = quota
        .iter()
        .enumerate()
        .map(|(i, &q)| (q.floor() as usize).clamp(1, cap[i]))
        .collect();
    let mut assigned: usize = shards.iter().sum();
    // Distribute remaining shards by descending fractional remainder, then by
    // label order; respect the per-label cap.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let fa = quota[a] - quota[a].floor();
        let fb = quota[b] - quota[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    while assigned < total_shards {
        let before = assigned;
        for &i in &order {
            if assigned == total_shards {
                break;
            }
            if shards[i] < cap[i] {
                shards[i] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            return Err(Error::domain(
                "shard allocation stalled despite sufficient label capacity",
            ));
        }
    }
    while assigned > total_shards {
        // Possible when the at-least-1 floors overshoot; trim the largest piles.
        let i = (0..d).max_by_key(|&i| shards[i]).unwrap();
        if shards[i] <= 1 {
            return Err(Error::domain("shard allocation cannot be reduced further"));
        }
        shards[i] -= 1;
        assigned -= 1;
    }

    // Split each label's (shuffled) indices into its shards.
    let mut rng = stream(seed, &[purpose::DATA, 2]);
    let mut piles: Vec<Vec<Vec<usize>>> = Vec::with_capacity(d);
    for (i, &l) in distinct.iter().enumerate() {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == l).collect();
        idx.shuffle(&mut rng);
        let s = shards[i];
        let base = idx.len() / s;
        let extra = idx.len() % s;
        let mut chunks = Vec::with_capacity(s);
        let mut at = 0;
        for c in 0..s {
            let take = base + usize::from(c < extra);
            chunks.push(idx[at..at + take].to_vec());
            at += take;
        }
        piles.push(chunks);
    }

    // Deal shards column-wise: lay the shards out label by label (labels in a
    // shuffled order) and hand position p to client p mod n_clients. A label
    // occupies at most n_clients consecutive positions, and no client owns two
    // positions inside any n_clients-long window, so every client ends up with
    // classes_per_client shards of distinct labels. A pick-by-pick greedy can
    // paint itself into a corner here; this deal cannot.
    let mut label_order: Vec<usize> = (0..d).collect();
    label_order.shuffle(&mut rng);
    let mut client_ids: Vec<usize> = (0..n_clients).collect();
    client_ids.shuffle(&mut rng);
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let mut pos = 0;
    for &i in &label_order {
        for chunk in &piles[i] {
            assignments[client_ids[pos % n_clients]].extend(chunk);
            pos += 1;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan {
        assignments,
        classes_per_client,
        seed,
    })
}

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Parsed IDX payload.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `n x rows x cols`, pixel bytes scaled to `[0, 1]`.
    Images { pixels: Array3<f64> },
    Labels { labels: Vec<u8> },
}

impl IdxData {
    pub fn len(&self) -> usize {
        match self {
            IdxData::Images { pixels } => pixels.shape()[0],
            IdxData::Labels { labels } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let slice = bytes.get(offset..offset + 4).ok_or(Error::Parse {
        offset,
        message: format!(
            "expected 4 header bytes, only {} available",
            bytes.len().saturating_sub(offset)
        ),
    })?;
    Ok(u32::from_be_bytes(slice.try_into().unwrap()))
}

/// Parses an IDX byte stream: big-endian magic (2 zero bytes, type code,
/// dimension count), big-endian u32 dimensions, then the payload. Supports
/// unsigned-byte images (magic 0x00000803) and labels (magic 0x00000801);
/// byte counts are validated exactly.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: "empty input".into(),
        });
    }
    let magic = read_be_u32(bytes, 0)?;
    match magic {
        IDX_MAGIC_IMAGES => {
            let n = read_be_u32(bytes, 4)? as usize;
            let rows = read_be_u32(bytes, 8)? as usize;
            let cols = read_be_u32(bytes, 12)? as usize;
            let expected = 16 + n * rows * cols;
            if bytes.len() != expected {
                return Err(Error::Parse {
                    offset: bytes.len().min(expected),
                    message: format!(
                        "image payload size mismatch: expected {expected} bytes total, got {}",
                        bytes.len()
                    ),
                });
            }
            let pixels = Array3::from_shape_fn((n, rows, cols), |(i, r, c)| {
                bytes[16 + (i * rows + r) * cols + c] as f64 / 255.0
            });
            Ok(IdxData::Images { pixels })
        }
        IDX_MAGIC_LABELS => {
            let n = read_be_u32(bytes, 4)? as usize;
            let expected = 8 + n;
            if bytes.len() != expected {
                return Err(Error::Parse {
                    offset: bytes.len().min(expected),
                    message: format!(
                        "label payload size mismatch: expected {expected} bytes total, got {}",
                        bytes.len()
                    ),
                });
            }
            Ok(IdxData::Labels {
                labels: bytes[8..].to_vec(),
            })
        }
        other => {
            // Distinguish a wrong type code (third byte) from a wrong shape.
            let message = if other >> 16 != 0 {
                format!("bad magic 0x{other:08x}: first two bytes must be zero")
            } else {
                format!("unsupported magic 0x{other:08x}: expected 0x00000803 (images) or 0x00000801 (labels)")
            };
            Err(Error::Parse { offset: 0, message })
        }
    }
}

/// Inverse of [`parse_idx`], for fixtures and round-trip tests.
pub fn serialize_idx(data: &IdxData) -> Vec<u8> {
    match data {
        IdxData::Images { pixels } => {
            let (n, rows, cols) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
            let mut out = Vec::with_capacity(16 + n * rows * cols);
            out.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
            out.extend_from_slice(&(n as u32).to_be_bytes());
            out.extend_from_slice(&(rows as u32).to_be_bytes());
            out.extend_from_slice(&(cols as u32).to_be_bytes());
            for i in 0..n {
                for r in 0..rows {
                    for c in 0..cols {
                        out.push((pixels[[i, r, c]] * 255.0).round() as u8);
                    }
                }
            }
            out
        }
        IdxData::Labels { labels } => {
            let mut out = Vec::with_capacity(8 + labels.len());
            out.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
            out
        }
    }
}

/// Fixed random Gaussian projection to `out_dim` columns, entries scaled by
/// `1/sqrt(out_dim)`; approximately distance-preserving. With `identity` set
/// (and `out_dim == D`) the input passes through unchanged.
pub fn embed_vectors(
    x: &Array2<f64>,
    out_dim: usize,
    seed: u64,
    identity: bool,
) -> Result<Array2<f64>> {
    let d = x.ncols();
    if out_dim == 0 || out_dim > d {
        return Err(Error::domain(format!(
            "projection dimension {out_dim} must lie in 1..={d}"
        )));
    }
    if identity {
        if out_dim != d {
            return Err(Error::domain(format!(
                "identity embedding needs out_dim == {d}, got {out_dim}"
            )));
        }
        return Ok(x.clone());
    }
    let mut rng = stream(seed, &[purpose::DATA, 3]);
    let scale = 1.0 / (out_dim as f64).sqrt();
    let proj = Array2::from_shape_fn((d, out_dim), |_| {
        scale * standard_normal_vec(&mut rng, 1)[0]
    });
    Ok(x.dot(&proj))
}

/// Writes a dataset as CSV with header `x_0..x_{s0-1}` followed by
/// `y_0..` (regression) or `label` (classification).
pub fn export_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let s0 = ds.x.ncols();
    let mut header: Vec<String> = (0..s0).map(|i| format!("x_{i}")).collect();
    match &ds.y {
        Targets::Regression(y) => header.extend((0..y.ncols()).map(|i| format!("y_{i}"))),
        Targets::Labels(_) => header.push("label".into()),
    }
    let write = |out: &mut std::io::BufWriter<std::fs::File>, line: &str| {
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    write(&mut out, &header.join(","))?;
    for j in 0..ds.len() {
        let mut fields: Vec<String> = ds.x.row(j).iter().map(|v| v.to_string()).collect();
        match &ds.y {
            Targets::Regression(y) => fields.extend(y.row(j).iter().map(|v| v.to_string())),
            Targets::Labels(l) => fields.push(l[j].to_string()),
        }
        write(&mut out, &fields.join(","))?;
    }
    out.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Quantile-bin labels for regression targets, used to induce non-iid client
/// splits on synthetic data: bin `b` holds points whose first target value
/// falls in the `b`-th of `bins` equal-rank slices.
pub fn quantile_bins(ds: &LabeledDataset, bins: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::domain("need at least one bin"));
    }
    let y = match &ds.y {
        Targets::Regression(y) => y,
        Targets::Labels(_) => {
            return Err(Error::domain("quantile bins apply to regression targets"))
        }
    };
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[[a, 0]].partial_cmp(&y[[b, 0]]).unwrap().then(a.cmp(&b)));
    let mut labels = vec![0usize; n];
    for (rank, &j) in order.iter().enumerate() {
        labels[j] = (rank * bins / n).min(bins - 1);
    }
    Ok(labels)
}

/// Uniformly seeded random draw in `[-1, 1]^{s0}` rows, used by the theory
/// checks for input averaging.
pub fn uniform_inputs(n: usize, s0: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, &[purpose::DATA, 4]);
    Array2::from_shape_fn((n, s0), |_| rng.random_range(-1.0..=1.0))
}
