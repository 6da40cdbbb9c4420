use approx::{assert_abs_diff_eq, assert_relative_eq};
use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coreset_fed::bnn::{
    elbo_estimate, elbo_gradient, forward, log_likelihood, log_likelihood_grad_into, Activation,
    LabeledDataset, Likelihood, NetworkSpec, Targets, RHO_INIT,
};
use coreset_fed::rng::{standard_normal_vec, stream};
use coreset_fed::variational::{kl_diag_gauss, reparameterize, softplus, MeanFieldGaussian};

fn regression_spec(sizes: Vec<usize>, activation: Activation) -> NetworkSpec {
    NetworkSpec::new(sizes, activation, Likelihood::GaussianRegression { sigma_eps: 0.7 }).unwrap()
}

fn small_dataset(spec: &NetworkSpec, n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((n, spec.input_dim()), |_| {
        standard_normal_vec(&mut rng, 1)[0]
    });
    let y = Array2::from_shape_fn((n, spec.output_dim()), |_| {
        standard_normal_vec(&mut rng, 1)[0]
    });
    LabeledDataset::new(x, Targets::Regression(y)).unwrap()
}

fn label_dataset(spec: &NetworkSpec, n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = spec.output_dim();
    let x = Array2::from_shape_fn((n, spec.input_dim()), |_| {
        standard_normal_vec(&mut rng, 1)[0]
    });
    let y: Vec<usize> = (0..n).map(|j| j % classes).collect();
    LabeledDataset::new(x, Targets::Labels(y)).unwrap()
}

#[test]
fn param_count_matches_hand_count() {
    // (2+1)*4 weights+biases into the hidden layer, (4+1)*3 into the output.
    let spec = regression_spec(vec![2, 4, 3], Activation::Relu);
    assert_eq!(spec.param_count(), 12 + 15);
    // Affine map with no hidden layer.
    let affine = regression_spec(vec![3, 2], Activation::Relu);
    assert_eq!(affine.param_count(), 8);
    assert_eq!(affine.hidden_layers(), 0);
}

#[test]
fn forward_matches_affine_example() {
    // Single affine layer: f = W x + b with W = [[1, 2]], b = [0.5].
    let spec = regression_spec(vec![2, 1], Activation::Relu);
    let theta = array![1.0, 2.0, 0.5];
    let f = forward(&spec, &theta, array![3.0, -1.0].view()).unwrap();
    assert_abs_diff_eq!(f[0], 1.0 * 3.0 + 2.0 * -1.0 + 0.5, epsilon = 1e-14);
}

#[test]
fn forward_matches_hand_relu_network() {
    // 1-2-1 relu network, parameters laid out layer by layer, each layer all
    // weights (input-major) then all biases.
    let spec = regression_spec(vec![1, 2, 1], Activation::Relu);
    let theta = array![
        2.0, -3.0, // weights into hidden
        0.5, 1.0, // hidden biases
        1.0, -1.0, // weights into output
        0.25 // output bias
    ];
    let x: f64 = 1.5;
    let h0 = (2.0 * x + 0.5).max(0.0);
    let h1 = (-3.0 * x + 1.0).max(0.0);
    let expected = h0 - h1 + 0.25;
    let f = forward(&spec, &theta, array![x].view()).unwrap();
    assert_abs_diff_eq!(f[0], expected, epsilon = 1e-14);
}

#[test]
fn gaussian_log_likelihood_matches_formula() {
    let spec = regression_spec(vec![2, 1], Activation::Tanh);
    let theta = array![0.3, -0.2, 0.1];
    let x = array![1.0, 2.0];
    let y = array![[0.7]];
    let ds = LabeledDataset::new(
        Array2::from_shape_vec((1, 2), x.to_vec()).unwrap(),
        Targets::Regression(y),
    )
    .unwrap();
    let f = forward(&spec, &theta, x.view()).unwrap();
    let sigma: f64 = 0.7;
    let expected = -0.5 * ((0.7 - f[0]) / sigma).powi(2)
        - 0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let got = log_likelihood(&spec, &theta, ds.x.row(0), ds.target(0)).unwrap();
    assert_relative_eq!(got, expected, max_relative = 1e-12);
}

#[test]
fn categorical_log_likelihood_matches_log_softmax() {
    let spec = NetworkSpec::new(vec![2, 3], Activation::Relu, Likelihood::Categorical).unwrap();
    let theta = array![0.5, -1.0, 0.2, 0.3, 1.0, -0.7, 0.1, 0.0, -0.2];
    let ds = label_dataset(&spec, 3, 11);
    for j in 0..3 {
        let f = forward(&spec, &theta, ds.x.row(j)).unwrap();
        let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let label = match ds.target(j) {
            coreset_fed::bnn::TargetRef::Label(l) => l,
            _ => unreachable!(),
        };
        let expected = f[label] - lse;
        let got = log_likelihood(&spec, &theta, ds.x.row(j), ds.target(j)).unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-12);
    }
}

/// Central finite differences of `log_likelihood` in `theta`.
fn fd_loglik_grad(
    spec: &NetworkSpec,
    theta: &Array1<f64>,
    ds: &LabeledDataset,
    j: usize,
    h: f64,
) -> Array1<f64> {
    let mut grad = Array1::zeros(theta.len());
    for m in 0..theta.len() {
        let mut plus = theta.clone();
        plus[m] += h;
        let mut minus = theta.clone();
        minus[m] -= h;
        let fp = log_likelihood(spec, &plus, ds.x.row(j), ds.target(j)).unwrap();
        let fm = log_likelihood(spec, &minus, ds.x.row(j), ds.target(j)).unwrap();
        grad[m] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[test]
fn loglik_gradient_matches_finite_differences_regression() {
    // tanh keeps the map smooth so central differences converge cleanly.
    let spec = regression_spec(vec![2, 3, 2], Activation::Tanh);
    let mut rng = stream(5, &[99]);
    let theta = spec.init_theta(&mut rng);
    let ds = small_dataset(&spec, 4, 21);
    for j in 0..ds.len() {
        let mut grad = Array1::zeros(spec.param_count());
        log_likelihood_grad_into(&spec, &theta, ds.x.row(j), ds.target(j), 1.0, &mut grad)
            .unwrap();
        let fd = fd_loglik_grad(&spec, &theta, &ds, j, 1e-5);
        for m in 0..grad.len() {
            assert_abs_diff_eq!(grad[m], fd[m], epsilon = 1e-6);
        }
    }
}

#[test]
fn loglik_gradient_matches_finite_differences_classification() {
    let spec = NetworkSpec::new(
        vec![3, 4, 3],
        Activation::Sigmoid,
        Likelihood::Categorical,
    )
    .unwrap();
    let mut rng = stream(6, &[100]);
    let theta = spec.init_theta(&mut rng);
    let ds = label_dataset(&spec, 3, 22);
    for j in 0..ds.len() {
        let mut grad = Array1::zeros(spec.param_count());
        log_likelihood_grad_into(&spec, &theta, ds.x.row(j), ds.target(j), 1.0, &mut grad)
            .unwrap();
        let fd = fd_loglik_grad(&spec, &theta, &ds, j, 1e-5);
        for m in 0..grad.len() {
            assert_abs_diff_eq!(grad[m], fd[m], epsilon = 1e-6);
        }
    }
}

#[test]
fn loglik_grad_accumulates_with_weight() {
    let spec = regression_spec(vec![2, 2], Activation::Relu);
    let theta = array![0.1, 0.2, -0.3, 0.4, 0.0, 0.5];
    let ds = small_dataset(&spec, 2, 3);
    let mut acc = Array1::zeros(spec.param_count());
    log_likelihood_grad_into(&spec, &theta, ds.x.row(0), ds.target(0), 2.0, &mut acc).unwrap();
    log_likelihood_grad_into(&spec, &theta, ds.x.row(1), ds.target(1), 0.5, &mut acc).unwrap();
    let mut g0 = Array1::zeros(spec.param_count());
    log_likelihood_grad_into(&spec, &theta, ds.x.row(0), ds.target(0), 1.0, &mut g0).unwrap();
    let mut g1 = Array1::zeros(spec.param_count());
    log_likelihood_grad_into(&spec, &theta, ds.x.row(1), ds.target(1), 1.0, &mut g1).unwrap();
    for m in 0..acc.len() {
        assert_relative_eq!(acc[m], 2.0 * g0[m] + 0.5 * g1[m], max_relative = 1e-12);
    }
}

fn test_gaussians(t: usize, seed: u64) -> (MeanFieldGaussian, MeanFieldGaussian) {
    let mut rng = stream(seed, &[7]);
    let v = MeanFieldGaussian::new(
        standard_normal_vec(&mut rng, t) * 0.3,
        standard_normal_vec(&mut rng, t) * 0.5 - 2.0,
    )
    .unwrap();
    let z = MeanFieldGaussian::new(
        standard_normal_vec(&mut rng, t) * 0.3,
        standard_normal_vec(&mut rng, t) * 0.5 - 2.0,
    )
    .unwrap();
    (v, z)
}

#[test]
fn elbo_estimate_matches_manual_recomputation() {
    let spec = regression_spec(vec![2, 3, 1], Activation::Tanh);
    let t = spec.param_count();
    let ds = small_dataset(&spec, 5, 31);
    let (v, z) = test_gaussians(t, 41);
    let mut rng = stream(51, &[1]);
    let noise: Vec<Array1<f64>> = (0..3).map(|_| standard_normal_vec(&mut rng, t)).collect();
    let weights = [1.0, 0.0, 2.0, 0.5, 1.5];
    let n = 40;
    let zeta = 3.0;

    let got = elbo_estimate(&spec, &v, &z, &ds, Some(&weights), n, zeta, &noise).unwrap();

    let mut data_sum = 0.0;
    for g in &noise {
        let theta = reparameterize(&v, g).unwrap();
        for j in 0..ds.len() {
            data_sum +=
                weights[j] * log_likelihood(&spec, &theta, ds.x.row(j), ds.target(j)).unwrap();
        }
    }
    let expected = -(n as f64 / ds.len() as f64 / noise.len() as f64) * data_sum
        + zeta * kl_diag_gauss(&v, &z).unwrap();
    assert_relative_eq!(got, expected, max_relative = 1e-12);
}

#[test]
fn elbo_estimate_is_deterministic_given_noise() {
    let spec = regression_spec(vec![2, 3, 1], Activation::Relu);
    let t = spec.param_count();
    let ds = small_dataset(&spec, 4, 32);
    let (v, z) = test_gaussians(t, 42);
    let mut rng = stream(52, &[1]);
    let noise: Vec<Array1<f64>> = (0..2).map(|_| standard_normal_vec(&mut rng, t)).collect();
    let a = elbo_estimate(&spec, &v, &z, &ds, None, 10, 1.0, &noise).unwrap();
    let b = elbo_estimate(&spec, &v, &z, &ds, None, 10, 1.0, &noise).unwrap();
    assert_eq!(a, b);
}

/// Central finite differences of `elbo_estimate` in `(mu, rho)` under fixed
/// noise, the independent oracle for the pathwise gradient.
fn fd_elbo_grad(
    spec: &NetworkSpec,
    v: &MeanFieldGaussian,
    z: &MeanFieldGaussian,
    ds: &LabeledDataset,
    weights: Option<&[f64]>,
    n: usize,
    zeta: f64,
    noise: &[Array1<f64>],
    h: f64,
) -> Array1<f64> {
    let t = v.len();
    let mut grad = Array1::zeros(2 * t);
    for m in 0..t {
        let mut plus = v.clone();
        plus.mu[m] += h;
        let mut minus = v.clone();
        minus.mu[m] -= h;
        let fp = elbo_estimate(spec, &plus, z, ds, weights, n, zeta, noise).unwrap();
        let fm = elbo_estimate(spec, &minus, z, ds, weights, n, zeta, noise).unwrap();
        grad[m] = (fp - fm) / (2.0 * h);
    }
    for m in 0..t {
        let mut plus = v.clone();
        plus.rho[m] += h;
        let mut minus = v.clone();
        minus.rho[m] -= h;
        let fp = elbo_estimate(spec, &plus, z, ds, weights, n, zeta, noise).unwrap();
        let fm = elbo_estimate(spec, &minus, z, ds, weights, n, zeta, noise).unwrap();
        grad[t + m] = (fp - fm) / (2.0 * h);
    }
    grad
}

#[test]
fn elbo_gradient_matches_finite_differences_regression() {
    let spec = regression_spec(vec![2, 3, 1], Activation::Tanh);
    let t = spec.param_count();
    let ds = small_dataset(&spec, 4, 33);
    let (v, z) = test_gaussians(t, 43);
    let mut rng = stream(53, &[1]);
    let noise: Vec<Array1<f64>> = (0..3).map(|_| standard_normal_vec(&mut rng, t)).collect();
    let weights = [0.5, 2.0, 0.0, 1.0];

    let grad = elbo_gradient(&spec, &v, &z, &ds, Some(&weights), 12, 2.5, &noise).unwrap();
    let fd = fd_elbo_grad(&spec, &v, &z, &ds, Some(&weights), 12, 2.5, &noise, 1e-6);
    for m in 0..grad.len() {
        assert_relative_eq!(grad[m], fd[m], max_relative = 1e-4, epsilon = 1e-7);
    }
}

#[test]
fn elbo_gradient_matches_finite_differences_classification() {
    let spec =
        NetworkSpec::new(vec![2, 4, 3], Activation::Tanh, Likelihood::Categorical).unwrap();
    let t = spec.param_count();
    let ds = label_dataset(&spec, 4, 34);
    let (v, z) = test_gaussians(t, 44);
    let mut rng = stream(54, &[1]);
    let noise: Vec<Array1<f64>> = (0..2).map(|_| standard_normal_vec(&mut rng, t)).collect();

    let grad = elbo_gradient(&spec, &v, &z, &ds, None, 9, 1.5, &noise).unwrap();
    let fd = fd_elbo_grad(&spec, &v, &z, &ds, None, 9, 1.5, &noise, 1e-6);
    for m in 0..grad.len() {
        assert_relative_eq!(grad[m], fd[m], max_relative = 1e-4, epsilon = 1e-7);
    }
}

#[test]
fn elbo_gradient_zero_zeta_ignores_anchor() {
    let spec = regression_spec(vec![1, 2, 1], Activation::Relu);
    let t = spec.param_count();
    let ds = small_dataset(&spec, 3, 35);
    let (v, z1) = test_gaussians(t, 45);
    let (_, z2) = test_gaussians(t, 46);
    let mut rng = stream(55, &[1]);
    let noise: Vec<Array1<f64>> = (0..2).map(|_| standard_normal_vec(&mut rng, t)).collect();
    let a = elbo_gradient(&spec, &v, &z1, &ds, None, 3, 0.0, &noise).unwrap();
    let b = elbo_gradient(&spec, &v, &z2, &ds, None, 3, 0.0, &noise).unwrap();
    assert_eq!(a, b);
}

#[test]
fn init_theta_respects_fan_in_bounds() {
    // Hidden layers draw from the widened 3/sqrt(fan_in) box, the output
    // layer from the plain 1/sqrt(fan_in) box.
    let spec = regression_spec(vec![4, 9, 1], Activation::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let theta = spec.init_theta(&mut rng);
        let first_bound = 3.0 / (4.0_f64).sqrt();
        let second_bound = 1.0 / (9.0_f64).sqrt();
        let mut first_max: f64 = 0.0;
        for m in 0..(4 + 1) * 9 {
            assert!(theta[m].abs() <= first_bound);
            first_max = first_max.max(theta[m].abs());
        }
        for m in (4 + 1) * 9..theta.len() {
            assert!(theta[m].abs() <= second_bound);
        }
        // The hidden layer actually uses the wide box rather than fitting
        // inside the narrow one.
        assert!(first_max > 1.0 / (4.0_f64).sqrt());
    }
}

#[test]
fn init_gaussian_sets_constant_rho() {
    let spec = regression_spec(vec![3, 2], Activation::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = spec.init_gaussian(RHO_INIT, &mut rng);
    assert!(v.rho.iter().all(|&r| r == RHO_INIT));
    // Initial sigma = softplus(-0.4), hand-evaluated.
    assert_relative_eq!(
        softplus(RHO_INIT),
        0.513015252399952,
        max_relative = 1e-14
    );
}

#[test]
fn activation_grads_match_finite_differences() {
    let h = 1e-6;
    for act in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        for x in [-2.0, -0.5, 0.3, 1.7] {
            let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(act.grad(x), fd, epsilon = 1e-6);
        }
    }
}

#[test]
fn select_checks_bounds_and_allows_duplicates() {
    let spec = regression_spec(vec![2, 1], Activation::Relu);
    let ds = small_dataset(&spec, 3, 36);
    assert!(ds.select(&[0, 2, 2]).is_ok());
    assert!(ds.select(&[3]).is_err());
    assert!(ds.select(&[]).is_err());
    let sub = ds.select(&[2, 0]).unwrap();
    assert_eq!(sub.len(), 2);
    assert_eq!(sub.x.row(0), ds.x.row(2));
}

#[test]
fn validate_for_rejects_mismatched_shapes() {
    let spec = regression_spec(vec![2, 1], Activation::Relu);
    let wrong_input = LabeledDataset::new(
        Array2::zeros((2, 3)),
        Targets::Regression(Array2::zeros((2, 1))),
    )
    .unwrap();
    assert!(wrong_input.validate_for(&spec).is_err());
    let wrong_output = LabeledDataset::new(
        Array2::zeros((2, 2)),
        Targets::Regression(Array2::zeros((2, 2))),
    )
    .unwrap();
    assert!(wrong_output.validate_for(&spec).is_err());
    let class_spec =
        NetworkSpec::new(vec![2, 3], Activation::Relu, Likelihood::Categorical).unwrap();
    let bad_label =
        LabeledDataset::new(Array2::zeros((2, 2)), Targets::Labels(vec![0, 3])).unwrap();
    assert!(bad_label.validate_for(&class_spec).is_err());
}

#[test]
fn estimator_rejects_bad_arguments() {
    let spec = regression_spec(vec![2, 1], Activation::Relu);
    let t = spec.param_count();
    let ds = small_dataset(&spec, 2, 37);
    let (v, z) = test_gaussians(t, 47);
    let mut rng = stream(57, &[1]);
    let noise: Vec<Array1<f64>> = (0..1).map(|_| standard_normal_vec(&mut rng, t)).collect();
    assert!(elbo_estimate(&spec, &v, &z, &ds, None, 0, 1.0, &noise).is_err());
    assert!(elbo_estimate(&spec, &v, &z, &ds, None, 2, -1.0, &noise).is_err());
    assert!(elbo_estimate(&spec, &v, &z, &ds, None, 2, 1.0, &[]).is_err());
    assert!(elbo_estimate(&spec, &v, &z, &ds, Some(&[1.0]), 2, 1.0, &noise).is_err());
    assert!(elbo_estimate(&spec, &v, &z, &ds, Some(&[1.0, -0.1]), 2, 1.0, &noise).is_err());
}
