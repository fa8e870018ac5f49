//! Random environments on lattice boxes.
//!
//! An environment assigns positive weights to nearest-neighbor edges
//! (conductances), a self-loop weight `ρ_x/(1−ρ_x)` to sites (traps), or
//! both (mixed). The quenched walk jumps from `x` to `z` with probability
//! `ω_{x,z}/π_ω(x)` where `π_ω(x) = Σ_z ω_{x,z}`.
//!
//! Environments are sampled on the storage box `Λ_{M+1}` so that transitions
//! from every site of the interior box `Λ_M` are fully defined; the outer
//! shell is absorbing territory only. Sampling is i.i.d. per edge/site and
//! bit-reproducible from `(spec, seed)`.

pub mod format;

use crate::lattice::{norm_sq, sup_norm, LatticeBox, LatticeError};
use crate::rng::splitmix64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trap parameters are capped strictly below 1 to keep `ρ/(1−ρ)` finite.
pub const RHO_CAP: f64 = 1.0 - 1e-9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid distribution spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("site {site:?} outside box of radius {radius}")]
    OutsideBox { site: Vec<i64>, radius: i64 },
    #[error("shift {shift:?} exceeds stored interior radius {radius}")]
    ShiftTooLarge { shift: Vec<i64>, radius: i64 },
    #[error("mean pi must be positive, got {0}")]
    MeanPiNotPositive(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Scalar distribution families for edge weights and trap parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DistributionSpec {
    Constant { c: f64 },
    Uniform { a: f64, b: f64 },
    LogUniform { a: f64, b: f64 },
    /// Value `a` with probability `p`, else `b`.
    TwoPoint { a: f64, b: f64, p: f64 },
}

impl DistributionSpec {
    pub fn constant(c: f64) -> Self {
        DistributionSpec::Constant { c }
    }

    pub fn uniform(a: f64, b: f64) -> Self {
        DistributionSpec::Uniform { a, b }
    }

    pub fn log_uniform(a: f64, b: f64) -> Self {
        DistributionSpec::LogUniform { a, b }
    }

    pub fn two_point(a: f64, b: f64, p: f64) -> Self {
        DistributionSpec::TwoPoint { a, b, p }
    }

    /// Validates parameters for the edge-weight role (strictly positive).
    pub fn validate_edge(&self) -> Result<(), EnvError> {
        let ok = match *self {
            DistributionSpec::Constant { c } => c > 0.0 && c.is_finite(),
            DistributionSpec::Uniform { a, b } => a > 0.0 && b >= a && b.is_finite(),
            DistributionSpec::LogUniform { a, b } => a > 0.0 && b >= a && b.is_finite(),
            DistributionSpec::TwoPoint { a, b, p } => {
                a > 0.0 && b > 0.0 && (0.0..=1.0).contains(&p) && a.is_finite() && b.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(EnvError::InvalidSpec(format!("edge weights must be positive: {self:?}")))
        }
    }

    /// Validates parameters for the trap-parameter role (`ρ ∈ [0, 1−1e−9]`).
    pub fn validate_trap(&self) -> Result<(), EnvError> {
        let in_range = |v: f64| (0.0..=RHO_CAP).contains(&v);
        let ok = match *self {
            DistributionSpec::Constant { c } => in_range(c),
            DistributionSpec::Uniform { a, b } => in_range(a) && in_range(b) && a <= b,
            DistributionSpec::LogUniform { .. } => false,
            DistributionSpec::TwoPoint { a, b, p } => {
                in_range(a) && in_range(b) && (0.0..=1.0).contains(&p)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(EnvError::InvalidSpec(format!(
                "trap parameters must lie in [0, {RHO_CAP}]: {self:?}"
            )))
        }
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, DistributionSpec::Constant { .. })
    }

    /// Analytic mean of the sampled value.
    pub fn mean(&self) -> f64 {
        match *self {
            DistributionSpec::Constant { c } => c,
            DistributionSpec::Uniform { a, b } => 0.5 * (a + b),
            DistributionSpec::LogUniform { a, b } => {
                if a == b {
                    a
                } else {
                    (b - a) / (b / a).ln()
                }
            }
            DistributionSpec::TwoPoint { a, b, p } => p * a + (1.0 - p) * b,
        }
    }

    /// Analytic mean of `(1−ρ)^{-1}` when used as a trap parameter law.
    pub fn mean_inv_one_minus(&self) -> f64 {
        match *self {
            DistributionSpec::Constant { c } => 1.0 / (1.0 - c),
            DistributionSpec::Uniform { a, b } => {
                if a == b {
                    1.0 / (1.0 - a)
                } else {
                    ((1.0 - a) / (1.0 - b)).ln() / (b - a)
                }
            }
            DistributionSpec::LogUniform { .. } => f64::NAN,
            DistributionSpec::TwoPoint { a, b, p } => p / (1.0 - a) + (1.0 - p) / (1.0 - b),
        }
    }

    #[inline]
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            DistributionSpec::Constant { c } => c,
            DistributionSpec::Uniform { a, b } => a + (b - a) * rng.gen::<f64>(),
            DistributionSpec::LogUniform { a, b } => {
                (a.ln() + (b.ln() - a.ln()) * rng.gen::<f64>()).exp()
            }
            DistributionSpec::TwoPoint { a, b, p } => {
                if rng.gen::<f64>() < p {
                    a
                } else {
                    b
                }
            }
        }
    }
}

/// Whether `E[ω^p]` and `E[ω^{−q}]` are finite for this spec. All supported
/// families are bounded away from 0 and ∞, so both always hold; the flags
/// are recorded (not enforced) for moment-sensitive experiments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MomentFlags {
    pub p: f64,
    pub q: f64,
    pub edge_moment_finite: bool,
    pub edge_inverse_moment_finite: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Conductances,
    Traps,
    Mixed,
}

/// A full environment law: kind plus the per-field distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub edge: Option<DistributionSpec>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trap: Option<DistributionSpec>,
}

impl EnvSpec {
    pub fn conductances(edge: DistributionSpec) -> Self {
        EnvSpec { kind: EnvKind::Conductances, edge: Some(edge), trap: None }
    }

    pub fn traps(trap: DistributionSpec) -> Self {
        EnvSpec { kind: EnvKind::Traps, edge: None, trap: Some(trap) }
    }

    pub fn mixed(edge: DistributionSpec, trap: DistributionSpec) -> Self {
        EnvSpec { kind: EnvKind::Mixed, edge: Some(edge), trap: Some(trap) }
    }

    /// The homogeneous reference environment: neighbor weight `1/(2d)`, no
    /// self-loops, so `π ≡ 1`. Represented as traps with `ρ ≡ 0`.
    pub fn homogeneous() -> Self {
        EnvSpec::traps(DistributionSpec::constant(0.0))
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self.kind {
            EnvKind::Conductances => {
                let e = self
                    .edge
                    .as_ref()
                    .ok_or_else(|| EnvError::InvalidSpec("conductances need an edge spec".into()))?;
                e.validate_edge()?;
                if self.trap.is_some() {
                    return Err(EnvError::InvalidSpec(
                        "conductance environments have no trap parameters".into(),
                    ));
                }
            }
            EnvKind::Traps => {
                let t = self
                    .trap
                    .as_ref()
                    .ok_or_else(|| EnvError::InvalidSpec("traps need a trap spec".into()))?;
                t.validate_trap()?;
                if self.edge.is_some() {
                    return Err(EnvError::InvalidSpec(
                        "trap environments fix edge weights at 1/(2d)".into(),
                    ));
                }
            }
            EnvKind::Mixed => {
                self.edge
                    .as_ref()
                    .ok_or_else(|| EnvError::InvalidSpec("mixed needs an edge spec".into()))?
                    .validate_edge()?;
                self.trap
                    .as_ref()
                    .ok_or_else(|| EnvError::InvalidSpec("mixed needs a trap spec".into()))?
                    .validate_trap()?;
            }
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.edge.map_or(true, |e| e.is_deterministic())
            && self.trap.map_or(true, |t| t.is_deterministic())
    }

    /// Analytic `E[π_ω(0)]` for dimension `d`.
    pub fn mean_pi(&self, d: usize) -> f64 {
        let two_d = 2.0 * d as f64;
        match self.kind {
            EnvKind::Conductances => two_d * self.edge.unwrap().mean(),
            EnvKind::Traps => self.trap.unwrap().mean_inv_one_minus(),
            EnvKind::Mixed => {
                (self.trap.unwrap().mean_inv_one_minus() - 1.0) + two_d * self.edge.unwrap().mean()
            }
        }
    }

    pub fn moment_flags(&self, p: f64, q: f64) -> MomentFlags {
        MomentFlags { p, q, edge_moment_finite: true, edge_inverse_moment_finite: true }
    }

    /// Samples an environment with interior box `Λ_M`.
    pub fn sample(&self, d: usize, interior_radius: i64, seed: u64) -> Result<Environment, EnvError> {
        Environment::sample(self.clone(), d, interior_radius, seed)
    }
}

/// A scalar field over the storage box, compressed when constant.
#[derive(Debug, Clone)]
pub enum FieldData {
    Constant(f64),
    Array(Vec<f64>),
}

impl FieldData {
    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        match self {
            FieldData::Constant(c) => *c,
            FieldData::Array(v) => v[idx],
        }
    }
}

/// Edge weights per axis. `Constant` means every edge of every axis carries
/// the same weight (traps, or constant-conductance specs).
#[derive(Debug, Clone)]
pub enum EdgeStore {
    Constant(f64),
    /// `per_axis[k][box_index(x)]` is the weight of the unordered edge
    /// `{x, x+e_k}`; slots with `x_k = B` are unused and hold 0.
    PerAxis(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
pub struct Environment {
    spec: EnvSpec,
    seed: u64,
    /// Interior radius at sampling time, before any shifts.
    base_radius: i64,
    /// Accumulated shift: this environment's weight at `(y, z)` equals the
    /// originally sampled weight at `(y + shift, z + shift)`.
    shift: Vec<i64>,
    interior: LatticeBox,
    storage: LatticeBox,
    edges: EdgeStore,
    rho: Option<FieldData>,
    pi: FieldData,
}

impl Environment {
    pub fn sample(spec: EnvSpec, d: usize, interior_radius: i64, seed: u64) -> Result<Self, EnvError> {
        spec.validate()?;
        let interior = LatticeBox::new(d, interior_radius)?;
        let storage = LatticeBox::new(d, interior_radius + 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x656e_7669_726f_6e5f));

        // Draw order is frozen: per-axis edge arrays in lexicographic site
        // order (skipping sites without a +e_k neighbor), then trap
        // parameters in lexicographic site order. Constant specs consume no
        // randomness.
        let edges = match spec.kind {
            EnvKind::Traps => EdgeStore::Constant(1.0 / (2.0 * d as f64)),
            EnvKind::Conductances | EnvKind::Mixed => {
                let e = spec.edge.unwrap();
                if let DistributionSpec::Constant { c } = e {
                    EdgeStore::Constant(c)
                } else {
                    let b = storage.radius();
                    let mut per_axis = Vec::with_capacity(d);
                    for k in 0..d {
                        let mut arr = vec![0.0f64; storage.len()];
                        storage.for_each_site(|idx, x| {
                            if x[k] < b {
                                arr[idx] = e.draw(&mut rng);
                            }
                        });
                        per_axis.push(arr);
                    }
                    EdgeStore::PerAxis(per_axis)
                }
            }
        };

        let rho = match spec.kind {
            EnvKind::Conductances => None,
            EnvKind::Traps | EnvKind::Mixed => {
                let t = spec.trap.unwrap();
                if let DistributionSpec::Constant { c } = t {
                    Some(FieldData::Constant(c))
                } else {
                    let mut arr = vec![0.0f64; storage.len()];
                    for slot in arr.iter_mut() {
                        *slot = t.draw(&mut rng);
                    }
                    Some(FieldData::Array(arr))
                }
            }
        };

        let mut env = Environment {
            spec,
            seed,
            base_radius: interior_radius,
            shift: vec![0; d],
            interior,
            storage,
            edges,
            rho,
            pi: FieldData::Constant(0.0),
        };
        env.pi = env.compute_pi();
        Ok(env)
    }

    /// The homogeneous reference environment (`π ≡ 1`).
    pub fn homogeneous(d: usize, interior_radius: i64) -> Result<Self, EnvError> {
        EnvSpec::homogeneous().sample(d, interior_radius, 0)
    }

    /// Total site weight, including self-loops. For pure traps this is
    /// computed directly as `(1−ρ_x)^{-1}`.
    fn compute_pi(&self) -> FieldData {
        let d = self.d();
        match (&self.edges, &self.rho) {
            (EdgeStore::Constant(c), None) => FieldData::Constant(2.0 * d as f64 * c),
            (EdgeStore::Constant(_), Some(FieldData::Constant(r))) => {
                if self.spec.kind == EnvKind::Traps {
                    FieldData::Constant(1.0 / (1.0 - r))
                } else {
                    FieldData::Constant(r / (1.0 - r) + 2.0 * d as f64 * self.edge_const())
                }
            }
            _ => {
                let mut arr = vec![0.0f64; self.storage.len()];
                let b = self.storage.radius();
                let strides = self.storage.strides().to_vec();
                if self.spec.kind == EnvKind::Traps {
                    let rho = self.rho.as_ref().unwrap();
                    for (idx, slot) in arr.iter_mut().enumerate() {
                        *slot = 1.0 / (1.0 - rho.get(idx));
                    }
                } else {
                    self.storage.for_each_site(|idx, x| {
                        let mut s = 0.0;
                        for k in 0..d {
                            if x[k] < b {
                                s += self.edge_weight_idx(k, idx);
                            }
                            if x[k] > -b {
                                s += self.edge_weight_idx(k, idx - strides[k]);
                            }
                        }
                        if let Some(rho) = &self.rho {
                            let r = rho.get(idx);
                            s += r / (1.0 - r);
                        }
                        arr[idx] = s;
                    });
                }
                FieldData::Array(arr)
            }
        }
    }

    fn edge_const(&self) -> f64 {
        match self.edges {
            EdgeStore::Constant(c) => c,
            EdgeStore::PerAxis(_) => unreachable!("edge_const on explicit arrays"),
        }
    }

    /// Weight of the edge `{site(idx), site(idx)+e_k}` by storage index.
    #[inline]
    pub fn edge_weight_idx(&self, axis: usize, idx: usize) -> f64 {
        match &self.edges {
            EdgeStore::Constant(c) => *c,
            EdgeStore::PerAxis(a) => a[axis][idx],
        }
    }

    #[inline]
    pub fn self_weight_idx(&self, idx: usize) -> f64 {
        match &self.rho {
            None => 0.0,
            Some(r) => {
                let rho = r.get(idx);
                rho / (1.0 - rho)
            }
        }
    }

    #[inline]
    pub fn rho_idx(&self, idx: usize) -> f64 {
        self.rho.as_ref().map_or(0.0, |r| r.get(idx))
    }

    /// `π_ω` by storage index; valid on the interior box.
    #[inline]
    pub fn pi_idx(&self, idx: usize) -> f64 {
        self.pi.get(idx)
    }

    pub fn d(&self) -> usize {
        self.interior.d()
    }

    /// Interior box `Λ_M`: every site here has a fully defined transition law.
    pub fn interior(&self) -> &LatticeBox {
        &self.interior
    }

    /// Storage box `Λ_{M+1}`.
    pub fn storage(&self) -> &LatticeBox {
        &self.storage
    }

    pub fn kind(&self) -> EnvKind {
        self.spec.kind
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn base_radius(&self) -> i64 {
        self.base_radius
    }

    pub fn shift_offset(&self) -> &[i64] {
        &self.shift
    }

    pub(crate) fn edges(&self) -> &EdgeStore {
        &self.edges
    }

    pub(crate) fn rho_field(&self) -> Option<&FieldData> {
        self.rho.as_ref()
    }

    fn check_interior(&self, x: &[i64]) -> Result<usize, EnvError> {
        if x.len() != self.d() {
            return Err(EnvError::DimensionMismatch { expected: self.d(), got: x.len() });
        }
        if !self.interior.contains(x) {
            return Err(EnvError::OutsideBox { site: x.to_vec(), radius: self.interior.radius() });
        }
        Ok(self.storage.index(x).expect("interior is contained in storage"))
    }

    /// `π_ω(x) = Σ_z ω_{x,z}`, self-loop included.
    pub fn pi(&self, x: &[i64]) -> Result<f64, EnvError> {
        Ok(self.pi_idx(self.check_interior(x)?))
    }

    /// Weight of the unordered pair `(x, y)`: an edge weight for `|x−y| = 1`,
    /// the self-loop weight for `x = y`, zero otherwise. Both endpoints must
    /// lie in the storage box and at least one in the interior.
    pub fn weight(&self, x: &[i64], y: &[i64]) -> Result<f64, EnvError> {
        let (ix, iy) = match (self.storage.index(x), self.storage.index(y)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(EnvError::OutsideBox {
                    site: if self.storage.index(x).is_none() { x.to_vec() } else { y.to_vec() },
                    radius: self.storage.radius(),
                })
            }
        };
        if !self.interior.contains(x) && !self.interior.contains(y) {
            return Err(EnvError::OutsideBox { site: x.to_vec(), radius: self.interior.radius() });
        }
        if ix == iy {
            return Ok(self.self_weight_idx(ix));
        }
        let mut diff_axis = None;
        for k in 0..self.d() {
            match (y[k] - x[k]).abs() {
                0 => {}
                1 if diff_axis.is_none() => diff_axis = Some(k),
                _ => return Ok(0.0),
            }
        }
        match diff_axis {
            Some(k) => {
                let low = if y[k] > x[k] { ix } else { iy };
                Ok(self.edge_weight_idx(k, low))
            }
            None => Ok(0.0),
        }
    }

    /// Quenched transition distribution from `x ∈ Λ_M`. Probabilities sum to
    /// one; the support is the lattice neighbors plus `x` itself exactly when
    /// the self-loop weight is positive.
    pub fn transition_distribution(&self, x: &[i64]) -> Result<Vec<(Vec<i64>, f64)>, EnvError> {
        let idx = self.check_interior(x)?;
        let pi = self.pi_idx(idx);
        let mut out = Vec::with_capacity(2 * self.d() + 1);
        let s = self.self_weight_idx(idx);
        if s > 0.0 {
            out.push((x.to_vec(), s / pi));
        }
        let strides = self.storage.strides();
        for k in 0..self.d() {
            let mut minus = x.to_vec();
            minus[k] -= 1;
            out.push((minus, self.edge_weight_idx(k, idx - strides[k]) / pi));
            let mut plus = x.to_vec();
            plus[k] += 1;
            out.push((plus, self.edge_weight_idx(k, idx) / pi));
        }
        Ok(out)
    }

    /// Point-of-view-of-the-particle weight `π_ω(0)/E[π_ω(0)]`.
    pub fn povp_weight(&self, mean_pi: f64) -> Result<f64, EnvError> {
        if !(mean_pi > 0.0) {
            return Err(EnvError::MeanPiNotPositive(mean_pi));
        }
        let origin = vec![0i64; self.d()];
        Ok(self.pi(&origin)? / mean_pi)
    }

    /// Translated environment: `shift(env, v)` has weight at `(y, z)` equal
    /// to this environment's weight at `(y+v, z+v)`. The box shrinks by the
    /// sup norm of `v`.
    pub fn shift(&self, by: &[i64]) -> Result<Environment, EnvError> {
        if by.len() != self.d() {
            return Err(EnvError::DimensionMismatch { expected: self.d(), got: by.len() });
        }
        let s = sup_norm(by);
        if s > self.interior.radius() {
            return Err(EnvError::ShiftTooLarge { shift: by.to_vec(), radius: self.interior.radius() });
        }
        let new_interior_radius = self.interior.radius() - s;
        let interior = LatticeBox::new(self.d(), new_interior_radius)?;
        let storage = LatticeBox::new(self.d(), new_interior_radius + 1)?;
        let b = storage.radius();

        let remap = |old: &[f64], axis: Option<usize>| -> Vec<f64> {
            let mut arr = vec![0.0f64; storage.len()];
            let mut target = vec![0i64; self.d()];
            storage.for_each_site(|idx, y| {
                if let Some(k) = axis {
                    if y[k] >= b {
                        return;
                    }
                }
                for (t, (c, o)) in target.iter_mut().zip(y.iter().zip(by.iter())) {
                    *t = c + o;
                }
                let src = self.storage.index(&target).expect("shifted site stays stored");
                arr[idx] = old[src];
            });
            arr
        };

        let edges = match &self.edges {
            EdgeStore::Constant(c) => EdgeStore::Constant(*c),
            EdgeStore::PerAxis(per_axis) => EdgeStore::PerAxis(
                (0..self.d()).map(|k| remap(&per_axis[k], Some(k))).collect(),
            ),
        };
        let rho = match &self.rho {
            None => None,
            Some(FieldData::Constant(c)) => Some(FieldData::Constant(*c)),
            Some(FieldData::Array(a)) => Some(FieldData::Array(remap(a, None))),
        };

        let mut total_shift = self.shift.clone();
        for (t, o) in total_shift.iter_mut().zip(by.iter()) {
            *t += o;
        }
        let mut env = Environment {
            spec: self.spec.clone(),
            seed: self.seed,
            base_radius: self.base_radius,
            shift: total_shift,
            interior,
            storage,
            edges,
            rho,
            pi: FieldData::Constant(0.0),
        };
        env.pi = env.compute_pi();
        Ok(env)
    }

    /// Globally rescales all conductances by `factor`. The walk law is
    /// unchanged; `π` and the Green normalization scale accordingly.
    pub fn scaled_conductances(&self, factor: f64) -> Result<Environment, EnvError> {
        if self.spec.kind != EnvKind::Conductances {
            return Err(EnvError::InvalidSpec("scaling is defined for conductance environments".into()));
        }
        if !(factor > 0.0) {
            return Err(EnvError::InvalidSpec(format!("scale factor must be positive: {factor}")));
        }
        let edges = match &self.edges {
            EdgeStore::Constant(c) => EdgeStore::Constant(c * factor),
            EdgeStore::PerAxis(per_axis) => EdgeStore::PerAxis(
                per_axis.iter().map(|a| a.iter().map(|w| w * factor).collect()).collect(),
            ),
        };
        let mut env = Environment { edges, ..self.clone() };
        env.pi = env.compute_pi();
        Ok(env)
    }

    /// Bitwise equality of all stored weight data (provenance ignored).
    pub fn bitwise_eq(&self, other: &Environment) -> bool {
        if self.d() != other.d()
            || self.interior.radius() != other.interior.radius()
            || self.spec.kind != other.spec.kind
        {
            return false;
        }
        let d = self.d();
        let b = self.storage.radius();
        let mut equal = true;
        self.storage.for_each_site(|idx, x| {
            if !equal {
                return;
            }
            for k in 0..d {
                if x[k] < b && self.edge_weight_idx(k, idx).to_bits() != other.edge_weight_idx(k, idx).to_bits() {
                    equal = false;
                    return;
                }
            }
            if self.rho_idx(idx).to_bits() != other.rho_idx(idx).to_bits() {
                equal = false;
            }
        });
        equal
    }

    /// Fraction of `Λ_m` sites in the deep-trap set `{x : π_ω(x) ≥ R·|x|²}`
    /// (with `|0|² := 1`).
    pub fn trap_set_fraction(&self, m: i64, threshold: f64) -> Result<f64, EnvError> {
        if m > self.interior.radius() {
            return Err(EnvError::OutsideBox { site: vec![m; 1], radius: self.interior.radius() });
        }
        let box_m = LatticeBox::new(self.d(), m)?;
        let mut hits = 0usize;
        box_m.for_each_site(|_, x| {
            let idx = self.storage.index(x).unwrap();
            let n2 = norm_sq(x).max(1) as f64;
            if self.pi_idx(idx) >= threshold * n2 {
                hits += 1;
            }
        });
        Ok(hits as f64 / box_m.len() as f64)
    }
}
