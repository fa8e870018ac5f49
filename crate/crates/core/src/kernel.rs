//! Exact (non–Monte Carlo) computation of constrained heat kernels and
//! Green's functions.
//!
//! For a box `Λ_m` the sub-stochastic transition matrix is
//! `Q[x][y] = p^ω_{x,y} 1{y ∈ Λ_m}`. With `D = diag(π)` and `W` the full
//! weight matrix (self-loops included), the matrix
//! `A = (D − W)|_{Λ_m}` is symmetric positive definite and
//! `g^m(x,·) = A^{-1} e_x` — the Green's function is exactly the inverse of
//! the killed weighted Laplacian, which is why `g^m` is symmetric.

use crate::environment::{EdgeStore, EnvError, Environment, FieldData};
use crate::lattice::{LatticeBox, LatticeError};
use crate::report::FitResult;
use thiserror::Error;

/// Dense solves are used as a cross-check oracle below this many unknowns.
pub const DENSE_LIMIT: usize = 5_000;
/// Relative residual target for iterative solves.
pub const CG_TOL: f64 = 1e-12;
pub const CG_MAX_ITER: usize = 100_000;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("site {site:?} outside the constraint box of radius {m}")]
    OutsideBox { site: Vec<i64>, m: i64 },
    #[error("constraint radius {m} exceeds stored interior radius {interior}")]
    BoxTooLarge { m: i64, interior: i64 },
    #[error("solver failed to converge: relative residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("Green's function is infinite for d <= 2 (got d = {0})")]
    RecurrentDimension(usize),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("problem too large for a dense solve: {0} unknowns")]
    TooLargeForDense(usize),
}

/// Linear indices of an inner centered box inside an outer one.
fn embedding_indices(inner: &LatticeBox, outer: &LatticeBox) -> Vec<u32> {
    let mut map = vec![0u32; inner.len()];
    inner.for_each_site(|i, x| {
        map[i] = outer.index(x).expect("inner box is contained in outer") as u32;
    });
    map
}

/// Box-aligned edge weights: `Const` when every edge carries the same weight.
enum Weights {
    Const(f64),
    PerAxis(Vec<Vec<f64>>),
}

impl Weights {
    #[inline]
    fn get(&self, axis: usize, i: usize) -> f64 {
        match self {
            Weights::Const(c) => *c,
            Weights::PerAxis(w) => w[axis][i],
        }
    }
}

/// The killed walk on `Λ_m`, with everything the solvers and steppers need
/// gathered into box-aligned storage. An optional in-box kill set removes
/// further sites (deep traps); removed rows act as the identity so the
/// operator stays symmetric positive definite.
pub struct ConstrainedOperator<'e> {
    env: &'e Environment,
    box_m: LatticeBox,
    m: i64,
    /// `π(x) − ω_{x,x}` (the diagonal of `A`).
    diag: FieldData,
    /// `π(x)`.
    pi: FieldData,
    /// `ω_{x,x}` (zero when absent).
    self_w: FieldData,
    w: Weights,
    /// Box-aligned removal mask; `None` means every box site is alive.
    dead: Option<Vec<bool>>,
}

impl<'e> ConstrainedOperator<'e> {
    pub fn new(env: &'e Environment, m: i64) -> Result<Self, KernelError> {
        if m > env.interior().radius() {
            return Err(KernelError::BoxTooLarge { m, interior: env.interior().radius() });
        }
        let box_m = LatticeBox::new(env.d(), m)?;
        let to_storage = embedding_indices(&box_m, env.storage());
        let d = env.d();

        let const_self = match env.rho_field() {
            None => Some(0.0),
            Some(FieldData::Constant(r)) => Some(r / (1.0 - r)),
            Some(FieldData::Array(_)) => None,
        };
        let const_edges = match env.edges() {
            EdgeStore::Constant(c) => Some(*c),
            EdgeStore::PerAxis(_) => None,
        };

        let w = match const_edges {
            Some(c) => Weights::Const(c),
            None => {
                let mut per_axis = vec![vec![0.0f64; box_m.len()]; d];
                box_m.for_each_site(|i, x| {
                    for (k, axis) in per_axis.iter_mut().enumerate() {
                        if x[k] < m {
                            axis[i] = env.edge_weight_idx(k, to_storage[i] as usize);
                        }
                    }
                });
                Weights::PerAxis(per_axis)
            }
        };

        let (pi, self_w, diag) = if let (Some(s), Some(_)) = (const_self, const_edges) {
            let pi_c = env.pi_idx(to_storage[0] as usize);
            (FieldData::Constant(pi_c), FieldData::Constant(s), FieldData::Constant(pi_c - s))
        } else {
            let mut pi = vec![0.0f64; box_m.len()];
            let mut self_w = vec![0.0f64; box_m.len()];
            let mut diag = vec![0.0f64; box_m.len()];
            for i in 0..box_m.len() {
                let si = to_storage[i] as usize;
                pi[i] = env.pi_idx(si);
                self_w[i] = env.self_weight_idx(si);
                diag[i] = pi[i] - self_w[i];
            }
            (FieldData::Array(pi), FieldData::Array(self_w), FieldData::Array(diag))
        };

        Ok(ConstrainedOperator { env, box_m, m, diag, pi, self_w, w, dead: None })
    }

    /// Like [`ConstrainedOperator::new`], additionally removing the
    /// deep-trap set `{x : π(x) ≥ threshold·max(|x|², 1)}` from the box.
    pub fn with_trap_killing(
        env: &'e Environment,
        m: i64,
        threshold: f64,
    ) -> Result<Self, KernelError> {
        let mut op = Self::new(env, m)?;
        let mut dead = vec![false; op.len()];
        let mut any = false;
        op.box_m.clone().for_each_site(|i, x| {
            let n2 = crate::lattice::norm_sq(x).max(1) as f64;
            if op.pi.get(i) >= threshold * n2 {
                dead[i] = true;
                any = true;
            }
        });
        if any {
            op.dead = Some(dead);
        }
        Ok(op)
    }

    #[inline]
    pub fn is_alive(&self, i: usize) -> bool {
        self.dead.as_ref().map_or(true, |d| !d[i])
    }

    /// Zeroes the entries of removed sites.
    pub fn mask(&self, v: &mut [f64]) {
        if let Some(dead) = &self.dead {
            for (slot, &gone) in v.iter_mut().zip(dead) {
                if gone {
                    *slot = 0.0;
                }
            }
        }
    }

    pub fn env(&self) -> &Environment {
        self.env
    }

    pub fn box_m(&self) -> &LatticeBox {
        &self.box_m
    }

    pub fn m(&self) -> i64 {
        self.m
    }

    pub fn len(&self) -> usize {
        self.box_m.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn pi_at(&self, i: usize) -> f64 {
        self.pi.get(i)
    }

    /// Diagonal of the killed Laplacian, `π(x) − ω_{x,x}`.
    #[inline]
    pub fn diag_at(&self, i: usize) -> f64 {
        self.diag.get(i)
    }

    /// `y = A v` with `A = (diag(π) − W)` restricted to the alive sites of
    /// `Λ_m`; removed rows act as the identity.
    pub fn apply_laplacian(&self, v: &[f64], out: &mut [f64]) {
        let d = self.box_m.d();
        let m = self.m;
        let strides = self.box_m.strides().to_vec();
        match (&self.dead, &self.w, &self.diag) {
            (None, Weights::Const(c), FieldData::Constant(dg)) => {
                let (c, dg) = (*c, *dg);
                self.box_m.for_each_site(|i, x| {
                    let mut acc = dg * v[i];
                    for k in 0..d {
                        if x[k] > -m {
                            acc -= c * v[i - strides[k]];
                        }
                        if x[k] < m {
                            acc -= c * v[i + strides[k]];
                        }
                    }
                    out[i] = acc;
                });
            }
            (None, _, _) => {
                self.box_m.for_each_site(|i, x| {
                    let mut acc = self.diag.get(i) * v[i];
                    for k in 0..d {
                        if x[k] > -m {
                            acc -= self.w.get(k, i - strides[k]) * v[i - strides[k]];
                        }
                        if x[k] < m {
                            acc -= self.w.get(k, i) * v[i + strides[k]];
                        }
                    }
                    out[i] = acc;
                });
            }
            (Some(dead), _, _) => {
                self.box_m.for_each_site(|i, x| {
                    if dead[i] {
                        out[i] = v[i];
                        return;
                    }
                    let mut acc = self.diag.get(i) * v[i];
                    for k in 0..d {
                        if x[k] > -m {
                            let j = i - strides[k];
                            if !dead[j] {
                                acc -= self.w.get(k, j) * v[j];
                            }
                        }
                        if x[k] < m {
                            let j = i + strides[k];
                            if !dead[j] {
                                acc -= self.w.get(k, i) * v[j];
                            }
                        }
                    }
                    out[i] = acc;
                });
            }
        }
    }

    /// One step of the killed walk acting on an occupation measure:
    /// `μ'(z) = Σ_y μ(y) ω_{y,z} / π(y)` over alive sites `y, z` of `Λ_m`.
    pub fn apply_substochastic(&self, mu: &[f64], out: &mut [f64]) {
        let d = self.box_m.d();
        let m = self.m;
        let strides = self.box_m.strides().to_vec();
        if let Some(dead) = &self.dead {
            self.box_m.for_each_site(|i, x| {
                if dead[i] {
                    out[i] = 0.0;
                    return;
                }
                let mut acc = self.self_w.get(i) / self.pi.get(i) * mu[i];
                for k in 0..d {
                    if x[k] > -m {
                        let j = i - strides[k];
                        if !dead[j] {
                            acc += self.w.get(k, j) / self.pi.get(j) * mu[j];
                        }
                    }
                    if x[k] < m {
                        let j = i + strides[k];
                        if !dead[j] {
                            acc += self.w.get(k, i) / self.pi.get(j) * mu[j];
                        }
                    }
                }
                out[i] = acc;
            });
            return;
        }
        match (&self.w, &self.pi, &self.self_w) {
            (Weights::Const(c), FieldData::Constant(pi), FieldData::Constant(s)) => {
                let np = *c / *pi;
                let sp = *s / *pi;
                self.box_m.for_each_site(|i, x| {
                    let mut acc = sp * mu[i];
                    for k in 0..d {
                        if x[k] > -m {
                            acc += np * mu[i - strides[k]];
                        }
                        if x[k] < m {
                            acc += np * mu[i + strides[k]];
                        }
                    }
                    out[i] = acc;
                });
            }
            _ => {
                self.box_m.for_each_site(|i, x| {
                    let mut acc = self.self_w.get(i) / self.pi.get(i) * mu[i];
                    for k in 0..d {
                        if x[k] > -m {
                            let j = i - strides[k];
                            acc += self.w.get(k, j) / self.pi.get(j) * mu[j];
                        }
                        if x[k] < m {
                            let j = i + strides[k];
                            acc += self.w.get(k, i) / self.pi.get(j) * mu[j];
                        }
                    }
                    out[i] = acc;
                });
            }
        }
    }

    /// Maximum over stored pairs of `|π(x) Q[x][y] − π(y) Q[y][x]|`.
    pub fn reversibility_gap(&self) -> f64 {
        let d = self.box_m.d();
        let m = self.m;
        let strides = self.box_m.strides().to_vec();
        let mut gap: f64 = 0.0;
        self.box_m.for_each_site(|i, x| {
            for k in 0..d {
                if x[k] < m {
                    let j = i + strides[k];
                    let w = self.w.get(k, i);
                    let fwd = self.pi.get(i) * (w / self.pi.get(i));
                    let bwd = self.pi.get(j) * (w / self.pi.get(j));
                    gap = gap.max((fwd - bwd).abs());
                }
            }
        });
        gap
    }

    /// Row sums of `Q`; strictly below 1 exactly at sites with a neighbor
    /// outside the box.
    pub fn row_sums(&self) -> Vec<f64> {
        let d = self.box_m.d();
        let m = self.m;
        let mut out = vec![0.0f64; self.len()];
        self.box_m.for_each_site(|i, x| {
            let mut acc = self.self_w.get(i);
            for k in 0..d {
                if x[k] > -m {
                    acc += self.w.get(k, i - self.box_m.strides()[k]);
                }
                if x[k] < m {
                    acc += self.w.get(k, i);
                }
            }
            out[i] = acc / self.pi.get(i);
        });
        out
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SolveInfo {
    pub method: String,
    pub iterations: usize,
    /// Relative residual `‖A u − b‖₂ / ‖b‖₂`.
    pub residual: f64,
}

/// Preconditioned conjugate gradient over an abstract SPD operator
/// (Jacobi preconditioner supplied as its inverse diagonal).
pub(crate) fn cg_generic(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    inv_diag: &[f64],
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveInfo), KernelError> {
    let n = b.len();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_b == 0.0 {
        return Ok((vec![0.0; n], SolveInfo { method: "cg".into(), iterations: 0, residual: 0.0 }));
    }
    let mut u = vec![0.0f64; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0f64; n];
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();

    for iter in 0..max_iter {
        let res = r.iter().map(|v| v * v).sum::<f64>().sqrt() / norm_b;
        if res <= tol {
            return Ok((u, SolveInfo { method: "cg".into(), iterations: iter, residual: res }));
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let res = r.iter().map(|v| v * v).sum::<f64>().sqrt() / norm_b;
    Err(KernelError::NoConvergence { residual: res, iterations: max_iter })
}

/// Conjugate gradient on the killed Laplacian.
pub fn solve_cg(
    op: &ConstrainedOperator,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveInfo), KernelError> {
    let n = op.len();
    assert_eq!(b.len(), n);
    let inv_diag: Vec<f64> =
        (0..n).map(|i| if op.is_alive(i) { 1.0 / op.diag.get(i) } else { 1.0 }).collect();
    cg_generic(|v, out| op.apply_laplacian(v, out), &inv_diag, b, tol, max_iter)
}

/// Direct dense solve, the cross-check oracle for small boxes.
pub fn solve_dense(op: &ConstrainedOperator, b: &[f64]) -> Result<(Vec<f64>, SolveInfo), KernelError> {
    let n = op.len();
    if n > DENSE_LIMIT {
        return Err(KernelError::TooLargeForDense(n));
    }
    let d = op.box_m.d();
    let m = op.m;
    let strides = op.box_m.strides().to_vec();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    op.box_m.for_each_site(|i, x| {
        if !op.is_alive(i) {
            a[(i, i)] = 1.0;
            return;
        }
        a[(i, i)] = op.diag.get(i);
        for k in 0..d {
            if x[k] < m {
                let j = i + strides[k];
                if op.is_alive(j) {
                    let w = op.w.get(k, i);
                    a[(i, j)] = -w;
                    a[(j, i)] = -w;
                }
            }
        }
    });
    let chol = a
        .clone()
        .cholesky()
        .ok_or(KernelError::NoConvergence { residual: f64::NAN, iterations: 0 })?;
    let rhs = nalgebra::DVector::from_column_slice(b);
    let u = chol.solve(&rhs);
    let residual = {
        let mut au = vec![0.0f64; n];
        op.apply_laplacian(u.as_slice(), &mut au);
        let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        au.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / norm_b
    };
    Ok((u.as_slice().to_vec(), SolveInfo { method: "dense".into(), iterations: 1, residual }))
}

/// One column of the constrained Green's function.
#[derive(Debug, Clone)]
pub struct GreenColumn {
    pub m: i64,
    pub source: Vec<i64>,
    pub box_m: LatticeBox,
    /// `g^m(source, y)` indexed by `box_m`.
    pub values: Vec<f64>,
    pub info: SolveInfo,
}

impl GreenColumn {
    pub fn value_at(&self, y: &[i64]) -> Option<f64> {
        self.box_m.index(y).map(|i| self.values[i])
    }
}

/// Solves `g^m(x, ·)` by conjugate gradient.
pub fn green_constrained(env: &Environment, m: i64, x: &[i64]) -> Result<GreenColumn, KernelError> {
    let op = ConstrainedOperator::new(env, m)?;
    green_column(&op, x)
}

/// Same, reusing an assembled operator. A source inside the operator's kill
/// set yields the all-zero column (the walk is dead before its first step).
pub fn green_column(op: &ConstrainedOperator, x: &[i64]) -> Result<GreenColumn, KernelError> {
    let i = op.box_m.index(x).ok_or(KernelError::OutsideBox { site: x.to_vec(), m: op.m })?;
    let mut b = vec![0.0f64; op.len()];
    b[i] = 1.0;
    op.mask(&mut b);
    let (values, info) = solve_cg(op, &b, CG_TOL, CG_MAX_ITER)?;
    Ok(GreenColumn { m: op.m, source: x.to_vec(), box_m: op.box_m.clone(), values, info })
}

/// Dense-path column, for cross-checks.
pub fn green_column_dense(op: &ConstrainedOperator, x: &[i64]) -> Result<GreenColumn, KernelError> {
    let i = op.box_m.index(x).ok_or(KernelError::OutsideBox { site: x.to_vec(), m: op.m })?;
    let mut b = vec![0.0f64; op.len()];
    b[i] = 1.0;
    op.mask(&mut b);
    let (values, info) = solve_dense(op, &b)?;
    Ok(GreenColumn { m: op.m, source: x.to_vec(), box_m: op.box_m.clone(), values, info })
}

/// `g̃^m(x, ·)` for the walk killed on exiting `Λ_m` or entering the
/// deep-trap set at the given threshold.
pub fn green_constrained_trap_killed(
    env: &Environment,
    m: i64,
    threshold: f64,
    x: &[i64],
) -> Result<GreenColumn, KernelError> {
    let op = ConstrainedOperator::with_trap_killing(env, m, threshold)?;
    green_column(&op, x)
}

/// Several solved columns of `g^m`.
#[derive(Debug, Clone)]
pub struct GreenTable {
    pub m: i64,
    pub columns: Vec<GreenColumn>,
}

impl GreenTable {
    pub fn compute(env: &Environment, m: i64, sources: &[Vec<i64>]) -> Result<Self, KernelError> {
        let op = ConstrainedOperator::new(env, m)?;
        let columns =
            sources.iter().map(|x| green_column(&op, x)).collect::<Result<Vec<_>, _>>()?;
        Ok(GreenTable { m, columns })
    }

    /// Max `|g^m(x_i, x_j) − g^m(x_j, x_i)|` over solved source pairs.
    pub fn max_symmetry_gap(&self) -> f64 {
        let mut gap: f64 = 0.0;
        for a in &self.columns {
            for b in &self.columns {
                if let (Some(ab), Some(ba)) = (a.value_at(&b.source), b.value_at(&a.source)) {
                    gap = gap.max((ab - ba).abs());
                }
            }
        }
        gap
    }

    /// Max `|g_a − g_b|` over all entries of two tables with equal geometry.
    pub fn max_entrywise_gap(&self, other: &GreenTable) -> f64 {
        let mut gap: f64 = 0.0;
        for (a, b) in self.columns.iter().zip(&other.columns) {
            assert_eq!(a.source, b.source, "tables must share sources");
            for (va, vb) in a.values.iter().zip(&b.values) {
                gap = gap.max((va - vb).abs());
            }
        }
        gap
    }
}

/// Iterates the constrained heat kernel
/// `P^m_n(x, y) = P^ω_x(X_n = y, walk stayed in Λ_m) / π(y)`.
pub struct HeatKernel<'e> {
    op: ConstrainedOperator<'e>,
    mu: Vec<f64>,
    scratch: Vec<f64>,
    n: u64,
}

impl<'e> HeatKernel<'e> {
    pub fn start(env: &'e Environment, m: i64, x: &[i64]) -> Result<Self, KernelError> {
        Self::from_operator(ConstrainedOperator::new(env, m)?, x)
    }

    pub fn from_operator(op: ConstrainedOperator<'e>, x: &[i64]) -> Result<Self, KernelError> {
        let i =
            op.box_m.index(x).ok_or(KernelError::OutsideBox { site: x.to_vec(), m: op.m })?;
        let mut mu = vec![0.0f64; op.len()];
        mu[i] = 1.0;
        op.mask(&mut mu);
        let scratch = vec![0.0f64; op.len()];
        Ok(HeatKernel { op, mu, scratch, n: 0 })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn operator(&self) -> &ConstrainedOperator<'e> {
        &self.op
    }

    pub fn step(&mut self) {
        self.op.apply_substochastic(&self.mu, &mut self.scratch);
        std::mem::swap(&mut self.mu, &mut self.scratch);
        self.n += 1;
    }

    /// `P^m_n(x, y)`.
    pub fn value_at(&self, y: &[i64]) -> Option<f64> {
        self.op.box_m.index(y).map(|i| self.mu[i] / self.op.pi_at(i))
    }

    /// The full kernel vector at the current time, `π`-renormalized.
    pub fn values(&self) -> Vec<f64> {
        self.mu.iter().enumerate().map(|(i, v)| v / self.op.pi_at(i)).collect()
    }

    /// Probability that the walk is still alive (and in the box).
    pub fn alive_mass(&self) -> f64 {
        self.mu.iter().sum()
    }
}

/// Collects `[P^m_n(x,·)]_{n ≤ n_max}` as dense vectors. Only sensible for
/// small boxes; heavy callers drive [`HeatKernel`] directly.
pub fn heat_kernel_sequence(
    env: &Environment,
    m: i64,
    x: &[i64],
    n_max: u64,
) -> Result<Vec<Vec<f64>>, KernelError> {
    let mut hk = HeatKernel::start(env, m, x)?;
    let mut out = Vec::with_capacity(n_max as usize + 1);
    out.push(hk.values());
    for _ in 0..n_max {
        hk.step();
        out.push(hk.values());
    }
    Ok(out)
}

/// Partial sums `S_N = Σ_{n ≤ N} (n+1) P^ω_n(0,0)` computed with the largest
/// stored box, plus boundary-contamination diagnostics.
#[derive(Debug, Clone)]
pub struct TransienceSeries {
    /// `P^M_n(0,0)` for `n = 0..=n_max`.
    pub diagonal: Vec<f64>,
    /// `S_N` for `N = 0..=n_max`.
    pub partial_sums: Vec<f64>,
    /// `1 − P(walk alive at n)`: mass lost to the boundary.
    pub escaped_mass: Vec<f64>,
    /// Up to this step the constrained and unconstrained kernels agree
    /// exactly (the walk cannot have reached the boundary).
    pub contamination_free_up_to: u64,
}

impl TransienceSeries {
    /// Log-log slope of the diagonal over even steps `2n ∈ [lo, hi]`.
    pub fn decay_fit(&self, lo: u64, hi: u64) -> FitResult {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut n = if lo % 2 == 0 { lo } else { lo + 1 };
        while n <= hi && (n as usize) < self.diagonal.len() {
            let p = self.diagonal[n as usize];
            if p > 0.0 {
                xs.push((n as f64).ln());
                ys.push(p.ln());
            }
            n += 2;
        }
        let mut fit = crate::report::linear_fit(&xs, &ys);
        fit.model = "log P_n(0,0) vs log n".into();
        fit
    }

    /// Log-log slope of the dyadic increments `S_{2N} − S_N` over the given
    /// block starts.
    pub fn block_growth_fit(&self, block_starts: &[u64]) -> FitResult {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in block_starts {
            let hi = (2 * n) as usize;
            assert!(hi < self.partial_sums.len(), "series too short for block {n}");
            let inc = self.partial_sums[hi] - self.partial_sums[n as usize];
            if inc > 0.0 {
                xs.push((n as f64).ln());
                ys.push(inc.ln());
            }
        }
        let mut fit = crate::report::linear_fit(&xs, &ys);
        fit.model = "log (S_2N - S_N) vs log N".into();
        fit
    }
}

pub fn transience_series(env: &Environment, n_max: u64) -> Result<TransienceSeries, KernelError> {
    let m = env.interior().radius();
    let origin = vec![0i64; env.d()];
    let mut hk = HeatKernel::start(env, m, &origin)?;
    let mut diagonal = Vec::with_capacity(n_max as usize + 1);
    let mut escaped = Vec::with_capacity(n_max as usize + 1);
    diagonal.push(hk.value_at(&origin).unwrap());
    escaped.push(0.0);
    for _ in 0..n_max {
        hk.step();
        diagonal.push(hk.value_at(&origin).unwrap());
        escaped.push(1.0 - hk.alive_mass());
    }
    let mut partial_sums = Vec::with_capacity(diagonal.len());
    let mut acc = 0.0;
    for (n, p) in diagonal.iter().enumerate() {
        acc += (n as f64 + 1.0) * p;
        partial_sums.push(acc);
    }
    Ok(TransienceSeries {
        diagonal,
        partial_sums,
        escaped_mass: escaped,
        contamination_free_up_to: m.max(0) as u64,
    })
}

/// Extrapolated infinite-volume Green's value for the homogeneous
/// environment (neighbor weight `1/(2d)`, `π ≡ 1`).
#[derive(Debug, Clone)]
pub struct OracleValue {
    pub value: f64,
    /// `(m, g^m(x,y))` ladder underlying the extrapolation.
    pub ladder: Vec<(i64, f64)>,
    /// Gap between the last two extrapolants.
    pub achieved_delta: f64,
    pub converged: bool,
}

/// Computes `g(x, y)` for `d ≥ 3` by constrained solves on a doubling ladder
/// of boxes with Richardson extrapolation in `1/m`, stopping when successive
/// extrapolants differ by less than `tol`.
pub fn homogeneous_green_oracle(
    d: usize,
    x: &[i64],
    y: &[i64],
    tol: f64,
    max_radius: i64,
) -> Result<OracleValue, KernelError> {
    if d <= 2 {
        return Err(KernelError::RecurrentDimension(d));
    }
    let spread = crate::lattice::sup_norm(x).max(crate::lattice::sup_norm(y));
    let mut m = (2 * spread).max(4);
    let mut ladder: Vec<(i64, f64)> = Vec::new();
    let mut raw: Vec<f64> = Vec::new();
    let mut best = f64::NAN;
    let mut achieved = f64::INFINITY;
    while m <= max_radius {
        let env = Environment::homogeneous(d, m)?;
        let col = green_constrained(&env, m, x)?;
        let v = col.value_at(y).ok_or(KernelError::OutsideBox { site: y.to_vec(), m })?;
        ladder.push((m, v));
        raw.push(v);
        // Neville-style Richardson table assuming an error expansion in 1/m
        // with the ladder doubling m each rung.
        let mut row = raw.clone();
        for level in 1..row.len() {
            let f = (1u64 << level) as f64;
            for j in (level..row.len()).rev() {
                row[j] = (f * row[j] - row[j - 1]) / (f - 1.0);
            }
        }
        let prev_best = best;
        best = *row.last().unwrap();
        if raw.len() >= 2 {
            achieved = (best - prev_best).abs();
            if achieved < tol {
                return Ok(OracleValue { value: best, ladder, achieved_delta: achieved, converged: true });
            }
        }
        m *= 2;
    }
    Ok(OracleValue { value: best, ladder, achieved_delta: achieved, converged: false })
}
