//! Command line front end: dataset generation, the two training loops, a
//! standalone coreset solver, and the generalization-rate table.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use coreset_fed::config::{ExperimentConfig, Mode};
use coreset_fed::coreset::{aiht_solve, AihtOptions, LikelihoodEmbedding};
use coreset_fed::data::export_csv;
use coreset_fed::experiment::{build_data, run_experiment};
use coreset_fed::federated::coreset_size;
use coreset_fed::theory::{drift_check, epsilon_sq, minimax_envelope, r_n, RateParams};

#[derive(Parser)]
#[command(
    name = "coreset-fed",
    version,
    about = "Federated mean-field Gaussian networks on sparse weighted coresets"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Materialize the configured dataset and write per-client CSV splits.
    DataGen(CommonArgs),
    /// Run the variational federated loop.
    FedRun(RunArgs),
    /// Run the point-estimate averaging baseline.
    BaselineRun(RunArgs),
    /// Solve one sparse nonnegative least-squares instance from CSV inputs.
    CoresetSolve(SolveArgs),
    /// Tabulate generalization rates and the coreset size gap.
    TheoryCheck(TheoryArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config round count.
    #[arg(long)]
    rounds: Option<usize>,
    /// Overrides the config coreset size fraction.
    #[arg(long)]
    k_fraction: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl CommonArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::parse_file(path)
                .with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(rounds) = self.rounds {
            cfg.rounds = rounds;
        }
        if let Some(k) = self.k_fraction {
            cfg.k_fraction = k;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// fed-run: coreset, full, or random_subset.
    /// baseline-run: fedavg or submodular:<objective>.
    #[arg(long)]
    mode: String,
}

#[derive(Args)]
struct SolveArgs {
    /// CSV holding the embedding matrix, one row per embedding dimension,
    /// one column per data point. A non-numeric first row is skipped.
    #[arg(long)]
    phi: PathBuf,
    /// CSV holding the target vector, one value per row; defaults to the
    /// row sums of the embedding matrix.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Exact sparsity budget; wins over --k-fraction.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    k_fraction: f64,
    #[arg(long, default_value_t = 10)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    /// Output directory for weights.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// Pooled sample count for the drift comparison.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Single-client sample count for the drift comparison.
    #[arg(long, default_value_t = 500)]
    n_k: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 100)]
    param_count: usize,
    #[arg(long, default_value_t = 50)]
    width: usize,
    #[arg(long, default_value_t = 10)]
    input_dim: usize,
    #[arg(long, default_value_t = 1.5)]
    delta: f64,
    #[arg(long, default_value_t = 2.0)]
    delta_prime: f64,
    #[arg(long, default_value_t = 2.0)]
    beta_smooth: f64,
    #[arg(long, default_value_t = 10)]
    d_intrinsic: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_eps: f64,
    #[arg(long, default_value_t = 1.0)]
    f_bound: f64,
    #[arg(long, default_value_t = 10.0)]
    zeta: f64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 1.0)]
    c_prime: f64,
    #[arg(long, default_value_t = 1.0)]
    c_double_prime: f64,
    #[arg(long, default_value_t = 1.0)]
    c2: f64,
    #[arg(long, default_value_t = 1.0)]
    c3: f64,
    #[arg(long, default_value_t = 100)]
    grid_min: usize,
    #[arg(long, default_value_t = 1_000_000)]
    grid_max: usize,
    #[arg(long, default_value_t = 9)]
    grid_points: usize,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::DataGen(args) => data_gen(&args),
        Cmd::FedRun(args) => train(&args, &["coreset", "full", "random_subset"]),
        Cmd::BaselineRun(args) => train(&args, &["fedavg", "submodular"]),
        Cmd::CoresetSolve(args) => coreset_solve(&args),
        Cmd::TheoryCheck(args) => theory_check(&args),
    }
}

fn data_gen(args: &CommonArgs) -> anyhow::Result<()> {
    let cfg = args.load()?;
    cfg.validate()?;
    let (data, _spec) = build_data(&cfg)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    for (i, (train, test)) in data.train.iter().zip(&data.test).enumerate() {
        let train_path = args.out.join(format!("client_{i}_train.csv"));
        let test_path = args.out.join(format!("client_{i}_test.csv"));
        export_csv(train, &train_path)?;
        export_csv(test, &test_path)?;
        println!(
            "client {i}: {} train points, {} test points",
            train.len(),
            test.len()
        );
    }
    println!("wrote {} client splits under {}", data.n_clients(), args.out.display());
    Ok(())
}

fn train(args: &RunArgs, allowed: &[&str]) -> anyhow::Result<()> {
    let mode: Mode = args.mode.parse()?;
    let family = match mode {
        Mode::Coreset => "coreset",
        Mode::Full => "full",
        Mode::RandomSubset => "random_subset",
        Mode::FedAvg => "fedavg",
        Mode::Submodular(_) => "submodular",
    };
    if !allowed.contains(&family) {
        bail!(
            "mode {} belongs to the other subcommand; this one accepts {}",
            args.mode,
            allowed.join(", ")
        );
    }
    let cfg = args.common.load()?;
    let trace = run_experiment(&cfg, mode, &args.common.out)?;
    println!(
        "wrote {} metric rows to {}",
        trace.rows.len(),
        args.common.out.join("metrics.csv").display()
    );
    for (key, value) in trace.final_metrics() {
        if key.starts_with("test/global") {
            println!("final {key} = {value:.6}");
        }
    }
    Ok(())
}

fn read_matrix_csv(path: &Path) -> anyhow::Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: Result<Vec<f64>, _> = record.iter().map(|f| f.trim().parse()).collect();
        match parsed {
            Ok(values) => rows.push(values),
            Err(e) => {
                if lineno == 0 {
                    continue;
                }
                bail!("{}: line {}: {e}", path.display(), lineno + 1);
            }
        }
    }
    if rows.is_empty() {
        bail!("{}: no numeric rows", path.display());
    }
    let cols = rows[0].len();
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        bail!(
            "{}: row {} has {} fields, expected {cols}",
            path.display(),
            bad + 1,
            rows[bad].len()
        );
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let nrows = flat.len() / cols;
    Ok(Array2::from_shape_vec((nrows, cols), flat)?)
}

fn coreset_solve(args: &SolveArgs) -> anyhow::Result<()> {
    let phi = read_matrix_csv(&args.phi)?;
    let target = match &args.target {
        Some(path) => {
            let m = read_matrix_csv(path)?;
            if m.ncols() != 1 {
                bail!(
                    "{}: target must be a single column, got {}",
                    path.display(),
                    m.ncols()
                );
            }
            m.column(0).to_owned()
        }
        None => phi.sum_axis(ndarray::Axis(1)),
    };
    let n = phi.ncols();
    let k = match args.k {
        Some(k) => k,
        None => coreset_size(args.k_fraction, n)?,
    };
    let emb = LikelihoodEmbedding::from_parts(phi, target)?;
    let opts = AihtOptions {
        max_iter: args.max_iter,
        tol: args.tol,
        kl_term: None,
    };
    let result = aiht_solve(&emb, k, &opts)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join("weights.csv");
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(file, "index,weight")?;
    for (j, w) in result.weights.w.iter().enumerate() {
        writeln!(file, "{j},{w}")?;
    }
    file.flush()?;

    let quadratic = emb.quadratic(&result.weights.w)?;
    println!(
        "k={k} nnz={} quadratic={quadratic:.6e} iterations={} converged={}",
        result.weights.nnz(),
        result.iterates.len(),
        result.converged
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn theory_check(args: &TheoryArgs) -> anyhow::Result<()> {
    let p = RateParams {
        n: args.n,
        n_k: args.n_k,
        layers: args.layers,
        param_count: args.param_count,
        width: args.width,
        input_dim: args.input_dim,
        delta: args.delta,
        delta_prime: args.delta_prime,
        beta_smooth: args.beta_smooth,
        d_intrinsic: args.d_intrinsic,
        sigma_eps: args.sigma_eps,
        f_bound: args.f_bound,
        zeta: args.zeta,
        c: args.c,
        c_prime: args.c_prime,
        c_double_prime: args.c_double_prime,
        c2: args.c2,
        c3: args.c3,
    };
    if args.grid_points < 2 || args.grid_min < 2 || args.grid_max <= args.grid_min {
        bail!("grid needs at least two points and 2 <= grid_min < grid_max");
    }

    let mut table = String::from("m,rate,eps_sq,minimax_lower,minimax_upper\n");
    let (lo, hi) = ((args.grid_min as f64).ln(), (args.grid_max as f64).ln());
    for i in 0..args.grid_points {
        let frac = i as f64 / (args.grid_points - 1) as f64;
        let m = (lo + frac * (hi - lo)).exp().round() as usize;
        let rate = r_n(&p, m)?;
        let eps = epsilon_sq(&p, m)?;
        let (lower, upper) = minimax_envelope(&p, m)?;
        table.push_str(&format!("{m},{rate},{eps},{lower},{upper}\n"));
    }
    match &args.out {
        Some(path) => {
            std::fs::write(path, &table)
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{table}"),
    }

    let report = drift_check(&p, &[])?;
    println!(
        "drift(n={}, n_k={}): type1={} type2={} value={:.6e}",
        p.n, p.n_k, report.type1_pos, report.type2_pos, report.drift_value
    );
    Ok(())
}
