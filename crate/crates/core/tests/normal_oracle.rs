use gradsparse::normal::inverse_normal_cdf;
use gradsparse::prune::determine_threshold;
use statrs::function::erf::erfc;

/// Lower-tail CDF without cancellation: `Phi(x) = erfc(-x / sqrt 2) / 2`.
fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Bisection on the CDF; the upper half uses symmetry so `1 - p` is exact.
fn quantile_by_bisection(p: f64) -> f64 {
    if p > 0.5 {
        return -quantile_by_bisection(1.0 - p);
    }
    let (mut lo, mut hi) = (-40.0_f64, 0.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn rational_approximation_within_1e8_of_bisection() {
    let mut ps = vec![1e-10, 1e-8, 1e-6, 1e-4, 0.001, 0.01, 0.025, 0.05];
    ps.extend((1..100).map(|i| i as f64 / 100.0));
    ps.extend([0.95, 0.975, 0.995, 0.999, 1.0 - 1e-6, 1.0 - 1e-9]);
    let mut worst: f64 = 0.0;
    for p in ps {
        let err = (inverse_normal_cdf(p) - quantile_by_bisection(p)).abs();
        worst = worst.max(err);
        assert!(err <= 1e-8, "p = {p}: error {err}");
    }
    assert!(worst < 1e-8);
}

#[test]
fn threshold_for_p_09_matches_quantile_oracle() {
    let tau = determine_threshold(1.0, 0.9).unwrap();
    let oracle = quantile_by_bisection(0.95);
    assert!((tau - oracle).abs() < 1e-9);
    assert!((tau - 1.6449).abs() < 1e-4);
}
