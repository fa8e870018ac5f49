//! Independent oracle for the constrained heat kernel on homogeneous and
//! constant-trap environments.
//!
//! For the walk that picks an axis uniformly (and possibly idles with a
//! constant self-loop probability), the box constraint factorizes over
//! axes: conditioning on how many steps each axis receives turns
//! `P^m_n(0,0)` into a binomial convolution of one-dimensional killed
//! kernels, all computable by elementary dynamic programming. This route
//! never touches the operator code it checks.

use brwre::environment::{DistributionSpec, EnvSpec, Environment};
use brwre::kernel::HeatKernel;

/// `A[j]` = probability that a 1D ±1 walk from 0 makes `j` steps without
/// leaving `[-m, m]` and ends at 0.
fn one_dimensional_killed_diag(m: i64, n_max: usize) -> Vec<f64> {
    let size = (2 * m + 1) as usize;
    let center = m as usize;
    let mut cur = vec![0.0f64; size];
    cur[center] = 1.0;
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(1.0);
    let mut next = vec![0.0f64; size];
    for _ in 0..n_max {
        for (i, slot) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            if i > 0 {
                acc += 0.5 * cur[i - 1];
            }
            if i + 1 < size {
                acc += 0.5 * cur[i + 1];
            }
            *slot = acc;
        }
        std::mem::swap(&mut cur, &mut next);
        out.push(cur[center]);
    }
    out
}

/// Exact binomial coefficients as f64 (all values here stay below 2^53).
fn binomials(n_max: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0f64; n_max + 1]; n_max + 1];
    for n in 0..=n_max {
        c[n][0] = 1.0;
        for k in 1..=n {
            c[n][k] = c[n - 1][k - 1] + if k <= n - 1 { c[n - 1][k] } else { 0.0 };
        }
    }
    c
}

/// `P^m_n(0,0)` for the d-dimensional axis-uniform walk killed outside the
/// sup-norm box, with an optional constant self-loop probability `lazy`.
fn product_diag(d: usize, m: i64, lazy: f64, n_max: usize) -> Vec<f64> {
    let a = one_dimensional_killed_diag(m, n_max);
    let c = binomials(n_max);
    // T_k(n) = sum over axis-step splittings of n among k axes of
    // multinomial(n) * prod A.
    let mut t = a.clone();
    for _ in 1..d {
        let mut next = vec![0.0f64; n_max + 1];
        for (n, slot) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..=n {
                acc += c[n][j] * a[j] * t[n - j];
            }
            *slot = acc;
        }
        t = next;
    }
    // Moving steps pick an axis uniformly; then mix in the idle steps.
    let dd = d as f64;
    let moving: Vec<f64> = t.iter().enumerate().map(|(n, v)| v / dd.powi(n as i32)).collect();
    let mut out = vec![0.0f64; n_max + 1];
    for (n, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for s in 0..=n {
            // s idle steps among n.
            acc += c[n][s] * lazy.powi(s as i32) * (1.0 - lazy).powi((n - s) as i32) * moving[n - s];
        }
        *slot = acc;
    }
    out
}

fn compare(env: &Environment, m: i64, lazy: f64, pi: f64, n_max: usize, tol: f64) {
    let d = env.d();
    let origin = vec![0i64; d];
    let expected = product_diag(d, m, lazy, n_max);
    let mut hk = HeatKernel::start(env, m, &origin).unwrap();
    for (n, &exp) in expected.iter().enumerate() {
        // The stepper reports the π-normalized kernel.
        let got = hk.value_at(&origin).unwrap() * pi;
        assert!(
            (got - exp).abs() <= tol,
            "n={n}: stepper {got} vs product oracle {exp} (d={d}, m={m}, lazy={lazy})"
        );
        if n < n_max {
            hk.step();
        }
    }
}

#[test]
fn homogeneous_diagonal_matches_product_oracle_d2() {
    let env = Environment::homogeneous(2, 6).unwrap();
    compare(&env, 5, 0.0, 1.0, 40, 1e-13);
}

#[test]
fn homogeneous_diagonal_matches_product_oracle_d3() {
    let env = Environment::homogeneous(3, 5).unwrap();
    compare(&env, 4, 0.0, 1.0, 36, 1e-13);
}

#[test]
fn constant_trap_diagonal_matches_lazy_product_oracle() {
    // rho = 0.3: the walk idles with probability 0.3 each step.
    let env = EnvSpec::traps(DistributionSpec::constant(0.3)).sample(2, 5, 0).unwrap();
    let pi = env.pi(&[0, 0]).unwrap();
    compare(&env, 4, 0.3, pi, 30, 1e-12);
}

#[test]
fn unconstrained_prefix_agrees_with_infinite_lattice() {
    // Until the walk can reach the boundary, the constrained kernel equals
    // the free one: compare two box sizes over the protected horizon.
    let small = Environment::homogeneous(3, 6).unwrap();
    let large = Environment::homogeneous(3, 10).unwrap();
    let origin = [0i64, 0, 0];
    let mut a = HeatKernel::start(&small, 6, &origin).unwrap();
    let mut b = HeatKernel::start(&large, 10, &origin).unwrap();
    for _ in 0..=6 {
        assert_eq!(a.value_at(&origin).unwrap(), b.value_at(&origin).unwrap());
        a.step();
        b.step();
    }
}
