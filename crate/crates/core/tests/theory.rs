use approx::assert_relative_eq;
use ndarray::{array, Array1, Array2, ArrayView1};
use proptest::prelude::*;

use coreset_fed::bnn::{Activation, Likelihood, NetworkSpec};
use coreset_fed::theory::{
    c_f, drift_check, epsilon_sq, hellinger_sq, minimax_envelope, r_n, RateParams,
};

#[test]
fn r_n_matches_hand_formula() {
    // Defaults: L=2, T=100, M=50, s0=10. At m=200 the two terms are
    // (3*100/200) ln 50 and (100/200) ln(10 sqrt(2)).
    let p = RateParams::default();
    assert_relative_eq!(
        r_n(&p, 200).unwrap(),
        7.192613849779228,
        max_relative = 1e-14
    );
}

#[test]
fn epsilon_sq_scales_r_n_by_log_power() {
    let p = RateParams::default();
    assert_relative_eq!(
        epsilon_sq(&p, 200).unwrap(),
        1069.7952154407658,
        max_relative = 1e-13
    );
    assert_relative_eq!(
        epsilon_sq(&p, 200).unwrap(),
        r_n(&p, 200).unwrap() * (200.0_f64).ln().powf(3.0),
        max_relative = 1e-15
    );
}

#[test]
fn r_n_rejects_tiny_m_and_bad_arch() {
    let p = RateParams::default();
    assert!(r_n(&p, 1).is_err());
    assert!(r_n(&p, 0).is_err());
    let narrow = RateParams {
        width: 1,
        ..RateParams::default()
    };
    assert!(r_n(&narrow, 100).is_err());
    let flat = RateParams {
        delta: 1.0,
        ..RateParams::default()
    };
    assert!(epsilon_sq(&flat, 100).is_err());
    let empty = RateParams {
        param_count: 0,
        ..RateParams::default()
    };
    assert!(r_n(&empty, 100).is_err());
}

#[test]
fn epsilon_sq_direction_depends_on_delta() {
    // eps^2(m) = (T/m)(G + ln sqrt(m)) ln(m)^{2 delta} with G collecting the
    // m-free terms; the derivative is positive only while ln m stays below
    // roughly 2 delta. At the default delta=1.5 the sequence is already
    // decreasing by m=500, at delta=7 it is still increasing.
    let low = RateParams::default();
    assert!(epsilon_sq(&low, 1000).unwrap() < epsilon_sq(&low, 500).unwrap());
    let high = RateParams {
        delta: 7.0,
        ..RateParams::default()
    };
    assert!(epsilon_sq(&high, 1000).unwrap() > epsilon_sq(&high, 500).unwrap());
}

#[test]
fn drift_check_flags_on_default_sizes() {
    // n=1000, n_k=500, delta=1.5: the sample-rate term n r(n) grows with n
    // (the gap is exactly T/2 ln(n/n_k)), while eps^2 is decreasing there, so
    // only type2 comes out positive.
    let p = RateParams::default();
    let report = drift_check(&p, &[]).unwrap();
    assert!(report.type2_pos);
    assert!(!report.type1_pos);
    let nr_gap = 1000.0 * r_n(&p, 1000).unwrap() - 500.0 * r_n(&p, 500).unwrap();
    assert_relative_eq!(
        nr_gap,
        100.0 / 2.0 * (1000.0_f64 / 500.0).ln(),
        max_relative = 1e-12
    );
}

#[test]
fn drift_check_type1_positive_in_small_n_regime() {
    let p = RateParams {
        n: 100,
        n_k: 50,
        delta: 3.0,
        ..RateParams::default()
    };
    let report = drift_check(&p, &[]).unwrap();
    assert!(report.type1_pos);
    assert!(report.type2_pos);
}

#[test]
fn drift_value_composes_the_three_terms() {
    // With zeta = c = c' = 1 and no xi term the value is the sum of the two
    // gaps; a xi slice adds (c''/N) sum_i (n xi_n - n_k xi_nk).
    let p = RateParams {
        zeta: 1.0,
        ..RateParams::default()
    };
    let eps_gap = epsilon_sq(&p, 1000).unwrap() - epsilon_sq(&p, 500).unwrap();
    let nr_gap = 1000.0 * r_n(&p, 1000).unwrap() - 500.0 * r_n(&p, 500).unwrap();
    let bare = drift_check(&p, &[]).unwrap();
    assert_relative_eq!(bare.drift_value, eps_gap + nr_gap, max_relative = 1e-12);

    let with_xi = RateParams {
        c_double_prime: 2.0,
        ..p.clone()
    };
    let xi = [(0.01, 0.02), (0.03, 0.01)];
    let approx = 2.0 / 2.0
        * ((1000.0 * 0.01 - 500.0 * 0.02) + (1000.0 * 0.03 - 500.0 * 0.01));
    let report = drift_check(&with_xi, &xi).unwrap();
    assert_relative_eq!(
        report.drift_value,
        eps_gap + nr_gap + approx,
        max_relative = 1e-12
    );
}

#[test]
fn drift_check_rejects_bad_sizes() {
    let equal = RateParams {
        n: 500,
        n_k: 500,
        ..RateParams::default()
    };
    assert!(drift_check(&equal, &[]).is_err());
    let inverted = RateParams {
        n: 100,
        n_k: 200,
        ..RateParams::default()
    };
    assert!(drift_check(&inverted, &[]).is_err());
    let tiny = RateParams {
        n: 10,
        n_k: 1,
        ..RateParams::default()
    };
    assert!(drift_check(&tiny, &[]).is_err());
}

#[test]
fn c_f_matches_hand_values_and_stays_below_cap() {
    assert_relative_eq!(c_f(1.0, 1.0).unwrap(), 0.09836733507184164, max_relative = 1e-14);
    assert_relative_eq!(c_f(2.0, 0.5).unwrap(), 0.06247903358575609, max_relative = 1e-14);
    // 0 < c_f < 1/(4 F^2), approaching the cap as sigma shrinks.
    for &(f, s) in &[(0.5, 0.1), (1.0, 2.0), (3.0, 0.7)] {
        let v = c_f(f, s).unwrap();
        assert!(v > 0.0 && v < 1.0 / (4.0 * f * f));
    }
    assert!(c_f(1.0, 0.01).unwrap() > 0.99 / 4.0);
    assert!(c_f(0.0, 1.0).is_err());
    assert!(c_f(1.0, 0.0).is_err());
    assert!(c_f(-1.0, 1.0).is_err());
}

#[test]
fn hellinger_sq_matches_hand_case_and_bounds() {
    // All-zero affine network outputs 0, so each sample contributes
    // 1 - exp(-f_true(x)^2 / (8 sigma^2)).
    let spec = NetworkSpec::new(
        vec![2, 1],
        Activation::Relu,
        Likelihood::GaussianRegression { sigma_eps: 0.5 },
    )
    .unwrap();
    let theta = Array1::zeros(spec.param_count());
    let f_true = |x: ArrayView1<f64>| array![x[0] + x[1]];
    let xs = array![[0.3, 0.4], [1.0, -1.0]];
    let got = hellinger_sq(&spec, &theta, &f_true, &xs, 0.5).unwrap();
    assert_relative_eq!(got, 0.10864773087906593, max_relative = 1e-14);

    // Zero distance when the reference equals the network output.
    let zero_fn = |_: ArrayView1<f64>| array![0.0];
    assert_relative_eq!(
        hellinger_sq(&spec, &theta, &zero_fn, &xs, 0.5).unwrap(),
        0.0,
        epsilon = 1e-15
    );

    assert!(hellinger_sq(&spec, &theta, &f_true, &Array2::zeros((0, 2)), 0.5).is_err());
    assert!(hellinger_sq(&spec, &theta, &f_true, &xs, 0.0).is_err());
    let wrong_len = |_: ArrayView1<f64>| array![0.0, 0.0];
    assert!(hellinger_sq(&spec, &theta, &wrong_len, &xs, 0.5).is_err());
}

#[test]
fn minimax_envelope_matches_hand_values() {
    // beta=2, d=10: exponent -4/14; at m=100 the upper picks up (ln 100)^4.
    let p = RateParams::default();
    let (lower, upper) = minimax_envelope(&p, 100).unwrap();
    assert_relative_eq!(lower, 0.2682695795279726, max_relative = 1e-14);
    assert_relative_eq!(upper, 120.65745650636808, max_relative = 1e-13);
    assert!(minimax_envelope(&p, 1).is_err());
    let flat = RateParams {
        beta_smooth: 0.0,
        ..RateParams::default()
    };
    assert!(minimax_envelope(&flat, 100).is_err());
    let nodim = RateParams {
        d_intrinsic: 0,
        ..RateParams::default()
    };
    assert!(minimax_envelope(&nodim, 100).is_err());
}

proptest! {
    #[test]
    fn minimax_lower_is_strictly_decreasing(m1 in 2usize..500_000, gap in 1usize..500_000) {
        let p = RateParams::default();
        let m2 = m1 + gap;
        let (l1, u1) = minimax_envelope(&p, m1).unwrap();
        let (l2, _) = minimax_envelope(&p, m2).unwrap();
        prop_assert!(l2 < l1);
        prop_assert!(u1 > l1);
    }

    #[test]
    fn rates_stay_positive_on_default_arch(m in 2usize..1_000_000) {
        let p = RateParams::default();
        prop_assert!(r_n(&p, m).unwrap() > 0.0);
        prop_assert!(epsilon_sq(&p, m).unwrap() > 0.0);
    }
}
