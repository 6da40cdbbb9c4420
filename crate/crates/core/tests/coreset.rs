use approx::{assert_abs_diff_eq, assert_relative_eq};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use coreset_fed::bnn::{Activation, LabeledDataset, Likelihood, NetworkSpec, Targets};
use coreset_fed::coreset::{
    aiht_solve, aiht_solve_instrumented, build_embedding, combined_objective,
    project_sparse_nonneg, quadratic_gradient, AihtOptions, CoresetWeights, LikelihoodEmbedding,
};
use coreset_fed::variational::MeanFieldGaussian;

fn random_embedding(s: usize, n: usize, seed: u64) -> LikelihoodEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = Array2::from_shape_fn((s, n), |_| rng.random_range(-1.0..1.0));
    let target = phi.sum_axis(ndarray::Axis(1));
    LikelihoodEmbedding::from_parts(phi, target).unwrap()
}

/// Exact minimum of `||P - Phi w||^2` over nonnegative `w` with at most two
/// nonzeros, by enumerating supports and solving each restricted problem.
fn brute_force_k2(emb: &LikelihoodEmbedding) -> f64 {
    let n = emb.n();
    let p = &emb.target;
    let mut best = p.dot(p);
    let col = |j: usize| emb.phi.column(j);
    // Singles: w_j = max(0, <phi_j, P> / ||phi_j||^2).
    let single = |j: usize| -> f64 {
        let g = col(j).dot(p);
        let h = col(j).dot(&col(j));
        if h == 0.0 {
            return f64::INFINITY;
        }
        let w = (g / h).max(0.0);
        let r = p - &(&col(j) * w);
        r.dot(&r)
    };
    for j in 0..n {
        best = best.min(single(j));
    }
    // Pairs: solve the 2x2 normal equations; if a coordinate goes negative the
    // optimum sits on a face, already covered by the singles.
    for a in 0..n {
        for b in (a + 1)..n {
            let (ca, cb) = (col(a), col(b));
            let (gaa, gab, gbb) = (ca.dot(&ca), ca.dot(&cb), cb.dot(&cb));
            let (pa, pb) = (ca.dot(p), cb.dot(p));
            let det = gaa * gbb - gab * gab;
            if det.abs() < 1e-12 {
                continue;
            }
            let wa = (gbb * pa - gab * pb) / det;
            let wb = (gaa * pb - gab * pa) / det;
            if wa >= 0.0 && wb >= 0.0 {
                let r = p - &(&ca * wa) - &(&cb * wb);
                best = best.min(r.dot(&r));
            }
        }
    }
    best
}

#[test]
fn embedding_validates_shapes() {
    let phi = Array2::<f64>::zeros((3, 4));
    assert!(LikelihoodEmbedding::from_parts(phi.clone(), Array1::zeros(2)).is_err());
    assert!(LikelihoodEmbedding::from_parts(Array2::zeros((0, 4)), Array1::zeros(0)).is_err());
    let emb = LikelihoodEmbedding::from_parts(phi, Array1::zeros(3)).unwrap();
    assert_eq!(emb.samples(), 3);
    assert_eq!(emb.n(), 4);
    assert!(emb.residual(&Array1::zeros(2)).is_err());
}

#[test]
fn residual_and_quadratic_match_hand_case() {
    let phi = array![[1.0, 0.0], [0.0, 2.0]];
    let target = array![3.0, 4.0];
    let emb = LikelihoodEmbedding::from_parts(phi, target).unwrap();
    let w = array![1.0, 1.0];
    let r = emb.residual(&w).unwrap();
    assert_abs_diff_eq!(r[0], 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(r[1], 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(emb.quadratic(&w).unwrap(), 8.0, epsilon = 1e-15);
}

#[test]
fn coreset_weights_validate() {
    assert!(CoresetWeights::new(array![1.0], 0).is_err());
    assert!(CoresetWeights::new(array![-0.1], 1).is_err());
    assert!(CoresetWeights::new(array![f64::NAN], 1).is_err());
    assert!(CoresetWeights::new(array![1.0, 2.0], 1).is_err());
    let w = CoresetWeights::new(array![0.0, 2.0, 0.0, 1.0], 2).unwrap();
    assert_eq!(w.support(), vec![1, 3]);
    assert_eq!(w.nnz(), 2);
    assert_eq!(w.len(), 4);

    let ones = CoresetWeights::ones(3);
    assert_eq!(ones.nnz(), 3);
    assert_eq!(ones.k, 3);

    assert!(CoresetWeights::on_subset(4, &[]).is_err());
    assert!(CoresetWeights::on_subset(4, &[4]).is_err());
    let sub = CoresetWeights::on_subset(4, &[0, 2]).unwrap();
    assert_eq!(sub.support(), vec![0, 2]);
}

#[test]
fn build_embedding_centers_and_scales_columns() {
    let spec = NetworkSpec::new(
        vec![1, 1],
        Activation::Relu,
        Likelihood::GaussianRegression { sigma_eps: 1.0 },
    )
    .unwrap();
    let x = array![[0.5], [-1.0], [2.0]];
    let y = array![[1.0], [0.0], [1.5]];
    let data = LabeledDataset::new(x, Targets::Regression(y)).unwrap();
    let snapshots = vec![array![1.0, 0.0], array![0.5, 0.5], array![-1.0, 1.0]];
    let emb = build_embedding(&spec, &snapshots, &data).unwrap();
    assert_eq!(emb.samples(), 3);
    assert_eq!(emb.n(), 3);
    // Each column is centered across snapshots.
    for j in 0..3 {
        assert_abs_diff_eq!(emb.phi.column(j).sum(), 0.0, epsilon = 1e-12);
    }
    // Spot-check one entry against the direct definition.
    let ll = |theta: &Array1<f64>, j: usize| -> f64 {
        let pred = theta[0] * data.x[[j, 0]] + theta[1];
        let r: f64 = pred - match &data.y {
            Targets::Regression(y) => y[[j, 0]],
            _ => unreachable!(),
        };
        -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * r * r
    };
    let mean0: f64 = snapshots.iter().map(|t| ll(t, 0)).sum::<f64>() / 3.0;
    let expect = (ll(&snapshots[0], 0) - mean0) / 3.0_f64.sqrt();
    assert_relative_eq!(emb.phi[[0, 0]], expect, max_relative = 1e-12);
    // Target is the column sum.
    let sums = emb.phi.sum_axis(ndarray::Axis(1));
    for s in 0..3 {
        assert_relative_eq!(emb.target[s], sums[s], max_relative = 1e-12);
    }
}

#[test]
fn projection_zeroes_negatives_and_keeps_k_largest() {
    let x = array![-1.0, 3.0, 0.5, 2.0, -0.1, 2.0];
    let p = project_sparse_nonneg(&x, 2).unwrap();
    assert_eq!(p, array![0.0, 3.0, 0.0, 2.0, 0.0, 0.0]);
    // Tie between indices 3 and 5 resolves to the lower index.
    let p3 = project_sparse_nonneg(&x, 3).unwrap();
    assert_eq!(p3, array![0.0, 3.0, 0.0, 2.0, 0.0, 2.0]);
    assert!(project_sparse_nonneg(&x, 0).is_err());
    assert!(project_sparse_nonneg(&x, 7).is_err());
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_feasible(
        vals in prop::collection::vec(-5.0f64..5.0, 1..12),
        k in 1usize..6,
    ) {
        let x = Array1::from_vec(vals);
        let k = k.min(x.len());
        let p = project_sparse_nonneg(&x, k).unwrap();
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!(p.iter().filter(|&&v| v != 0.0).count() <= k);
        let pp = project_sparse_nonneg(&p, k).unwrap();
        prop_assert_eq!(p, pp);
    }
}

#[test]
fn quadratic_gradient_matches_finite_differences() {
    let emb = random_embedding(6, 9, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let w = Array1::from_shape_fn(9, |_| rng.random_range(0.0..2.0));
        let grad = quadratic_gradient(&emb, &w).unwrap();
        let h = 1e-6;
        for j in 0..9 {
            let mut plus = w.clone();
            plus[j] += h;
            let mut minus = w.clone();
            minus[j] -= h;
            let fd =
                (emb.quadratic(&plus).unwrap() - emb.quadratic(&minus).unwrap()) / (2.0 * h);
            assert_relative_eq!(grad[j], fd, max_relative = 1e-6, epsilon = 1e-9);
        }
    }
}

#[test]
fn aiht_rejects_bad_budgets() {
    let emb = random_embedding(4, 6, 0);
    assert!(aiht_solve(&emb, 0, &AihtOptions::default()).is_err());
    assert!(aiht_solve(&emb, 7, &AihtOptions::default()).is_err());
    let opts = AihtOptions {
        max_iter: 0,
        ..AihtOptions::default()
    };
    assert!(aiht_solve(&emb, 2, &opts).is_err());
}

#[test]
fn aiht_iterates_stay_feasible() {
    let emb = random_embedding(10, 25, 7);
    for k in [1usize, 3, 8] {
        let opts = AihtOptions {
            max_iter: 25,
            ..AihtOptions::default()
        };
        aiht_solve_instrumented(&emb, k, &opts, |_, w| {
            assert!(w.iter().all(|&v| v >= 0.0), "negative weight at k={k}");
            assert!(
                w.iter().filter(|&&v| v != 0.0).count() <= k,
                "support exceeds k={k}"
            );
        })
        .unwrap();
    }
}

#[test]
fn aiht_never_returns_worse_than_empty() {
    for seed in 0..20 {
        let emb = random_embedding(8, 15, seed);
        let out = aiht_solve(&emb, 4, &AihtOptions::default()).unwrap();
        let empty = emb.target.dot(&emb.target);
        assert!(
            emb.quadratic(&out.weights.w).unwrap() <= empty + 1e-12,
            "seed {seed}: worse than the empty coreset"
        );
    }
}

#[test]
fn aiht_tracks_brute_force_on_small_instances() {
    // Enumerating every support of size <= 2 gives the exact optimum, so the
    // solver can never beat it; that direction checks the oracle and the
    // solver against each other. The other direction is a characterization:
    // a coordinate only enters the support when its stepped gradient value
    // exceeds an incumbent weight, so the iteration can converge inside a
    // suboptimal first support. On these twelve instances it currently lands
    // within 5% of the optimum on five; an improvement may raise that count,
    // but a drop is a regression.
    let mut hits = 0;
    for seed in 0..12 {
        let emb = random_embedding(6, 8, 100 + seed);
        let opts = AihtOptions {
            max_iter: 50,
            ..AihtOptions::default()
        };
        let out = aiht_solve(&emb, 2, &opts).unwrap();
        let got = emb.quadratic(&out.weights.w).unwrap();
        let best = brute_force_k2(&emb);
        assert!(
            got >= best - 1e-9,
            "seed {seed}: solver {got:.6} beat the exhaustive optimum {best:.6}"
        );
        if got <= best * 1.05 + 1e-9 {
            hits += 1;
        }
    }
    assert!(hits >= 5, "support exploration regressed: {hits}/12 within 5%");
}

#[test]
fn aiht_recovers_planted_sparse_weights() {
    // P is exactly representable by a 5-sparse nonnegative vector; with a
    // well-conditioned random Phi the solver should find that support.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (s, n, k) = (30usize, 50usize, 5usize);
    let phi = Array2::from_shape_fn((s, n), |_| rng.random_range(-1.0..1.0));
    let mut w_star = Array1::<f64>::zeros(n);
    let support = [4usize, 11, 23, 37, 46];
    for &j in &support {
        w_star[j] = rng.random_range(0.5..2.0);
    }
    let target = phi.dot(&w_star);
    let emb = LikelihoodEmbedding::from_parts(phi, target).unwrap();
    let opts = AihtOptions {
        max_iter: 100,
        ..AihtOptions::default()
    };
    let out = aiht_solve(&emb, k, &opts).unwrap();
    let found = out.weights.support();
    let overlap = found.iter().filter(|j| support.contains(j)).count();
    assert!(
        overlap >= 4,
        "recovered {overlap}/5 of the planted support: {found:?}"
    );
    assert!(emb.quadratic(&out.weights.w).unwrap() < 1e-6);
}

#[test]
fn aiht_reports_convergence_and_monotone_best() {
    let emb = random_embedding(12, 20, 9);
    let opts = AihtOptions {
        max_iter: 200,
        ..AihtOptions::default()
    };
    let out = aiht_solve(&emb, 6, &opts).unwrap();
    assert!(out.converged, "expected convergence within 200 iterations");
    let returned = emb.quadratic(&out.weights.w).unwrap();
    let min_seen = out
        .iterates
        .iter()
        .map(|it| it.quadratic)
        .fold(f64::INFINITY, f64::min);
    assert!(returned <= min_seen + 1e-12, "returned iterate is not the best seen");
    assert!(out.iterates.iter().all(|it| it.nnz <= 6));
    assert!(out.iterates.iter().all(|it| it.min_weight >= 0.0));
}

#[test]
fn combined_objective_sums_kl_and_quadratic() {
    let emb = random_embedding(4, 5, 13);
    let w = CoresetWeights::new(array![1.0, 0.0, 0.5, 0.0, 0.0], 2).unwrap();
    let q = MeanFieldGaussian::new(Array1::zeros(3), Array1::zeros(3)).unwrap();
    let q_w = MeanFieldGaussian::new(array![0.3, -0.2, 0.1], Array1::zeros(3)).unwrap();
    let parts = combined_objective(&w, &q_w, &q, &emb).unwrap();
    assert!(parts.kl > 0.0);
    assert_relative_eq!(
        parts.quadratic,
        emb.quadratic(&w.w).unwrap(),
        max_relative = 1e-15
    );
    assert_relative_eq!(parts.total(), parts.kl + parts.quadratic, max_relative = 1e-15);
}
