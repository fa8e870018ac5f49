//! Extrapolated homogeneous Green values and envelope probes. These lean on
//! large constrained solves, so they are grouped here rather than in the
//! module tests.

use brwre::environment::Environment;
use brwre::kernel::{green_constrained, homogeneous_green_oracle};
use brwre::report::linear_fit;

/// Expected visits of the simple walk to the origin in d = 3.
const GREEN_D3_ORIGIN: f64 = 1.516_386_059_151_978;

#[test]
fn d3_origin_value_matches_simple_walk_constant() {
    let o = homogeneous_green_oracle(3, &[0, 0, 0], &[0, 0, 0], 3e-5, 64).unwrap();
    assert!(o.converged, "ladder {:?} delta {:.3e}", o.ladder, o.achieved_delta);
    assert!(
        (o.value - GREEN_D3_ORIGIN).abs() <= 5e-6,
        "oracle {} vs {} (delta {:.3e})",
        o.value,
        GREEN_D3_ORIGIN,
        o.achieved_delta
    );
}

#[test]
fn d3_distance_envelope_ratio_is_flat() {
    // g(0,x)·|x| varies by less than 10% over |x| ∈ {4, 6, 8}.
    let mut compensated = Vec::new();
    for x in [4i64, 6, 8] {
        let o = homogeneous_green_oracle(3, &[0, 0, 0], &[x, 0, 0], 1e-3, 48).unwrap();
        compensated.push(o.value * x as f64);
    }
    let max = compensated.iter().cloned().fold(f64::MIN, f64::max);
    let min = compensated.iter().cloned().fold(f64::MAX, f64::min);
    assert!(max / min < 1.1, "compensated values {compensated:?}");
}

#[test]
fn constrained_lower_bound_probe_reports_fitted_constant() {
    // Probe of the constrained-box lower bound g^{Kn}(0,x) ≥ c·|x|^{2−d}
    // for K ∈ {2, 4}: the fitted constant is the largest c for which the
    // bound holds on |x| ∈ [n/2, n], i.e. min g·|x|. It is reported, not
    // asserted against a fixed value; it must be positive and grow with K
    // (a larger box only adds paths). The log-log slope is informational.
    let n = 8i64;
    let mut fitted = Vec::new();
    for k_factor in [2i64, 4] {
        let m = k_factor * n;
        let env = Environment::homogeneous(3, m).unwrap();
        let col = green_constrained(&env, m, &[0, 0, 0]).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut c_fit = f64::INFINITY;
        for x in (n / 2)..=n {
            let g = col.value_at(&[x, 0, 0]).unwrap();
            c_fit = c_fit.min(g * x as f64);
            xs.push((x as f64).ln());
            ys.push(g.ln());
        }
        let fit = linear_fit(&xs, &ys);
        println!(
            "envelope probe K={k_factor}: fitted c = {c_fit:.4}, log-log slope = {:.3}",
            fit.slope
        );
        assert!(c_fit > 0.0, "lower-bound constant must be positive");
        fitted.push(c_fit);
    }
    assert!(fitted[1] >= fitted[0], "the constant cannot shrink as the box grows: {fitted:?}");
}
