//! Lattice boxes `Λ_M = Z^d ∩ [−M, M]^d` and site indexing.
//!
//! Sites are addressed either by coordinates (`&[i64]`) or by a linear index
//! in lexicographic order (first coordinate most significant). All heavy
//! loops elsewhere in the crate run on linear indices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum supported dimension. Box sizes become unaddressable long before
/// this bound matters.
pub const MAX_D: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum LatticeError {
    #[error("dimension {0} out of range 1..={MAX_D}")]
    BadDimension(usize),
    #[error("radius {0} must be >= 0")]
    BadRadius(i64),
    #[error("box with d={d}, radius={radius} exceeds addressable memory")]
    TooLarge { d: usize, radius: i64 },
}

/// The box `Λ_M`, together with its boundary convention
/// `∂Λ_m = Λ_{m+1} ∖ Λ_m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeBox {
    d: usize,
    radius: i64,
    side: i64,
    len: usize,
    #[serde(skip)]
    strides: [usize; MAX_D],
}

impl LatticeBox {
    pub fn new(d: usize, radius: i64) -> Result<Self, LatticeError> {
        if d < 1 || d > MAX_D {
            return Err(LatticeError::BadDimension(d));
        }
        if radius < 0 {
            return Err(LatticeError::BadRadius(radius));
        }
        let side = 2 * radius + 1;
        let mut len: usize = 1;
        for _ in 0..d {
            len = len
                .checked_mul(side as usize)
                .filter(|&n| n < (1 << 46))
                .ok_or(LatticeError::TooLarge { d, radius })?;
        }
        let mut b = LatticeBox { d, radius, side, len, strides: [0; MAX_D] };
        b.fill_strides();
        Ok(b)
    }

    fn fill_strides(&mut self) {
        let mut s = 1usize;
        for k in (0..self.d).rev() {
            self.strides[k] = s;
            s *= self.side as usize;
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> i64 {
        self.radius
    }

    pub fn side(&self) -> i64 {
        self.side
    }

    /// Number of sites, `(2M+1)^d`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Per-axis linear stride (moving by `+e_k` adds `strides()[k]`).
    pub fn strides(&self) -> &[usize] {
        &self.strides[..self.d]
    }

    pub fn contains(&self, x: &[i64]) -> bool {
        x.len() == self.d && x.iter().all(|&c| c.abs() <= self.radius)
    }

    /// Linear index of a site, or `None` if outside the box.
    pub fn index(&self, x: &[i64]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let mut idx = 0usize;
        for (k, &c) in x.iter().enumerate() {
            idx += (c + self.radius) as usize * self.strides[k];
        }
        Some(idx)
    }

    /// Coordinates of a linear index.
    pub fn site(&self, idx: usize) -> Vec<i64> {
        let mut out = vec![0i64; self.d];
        self.write_site(idx, &mut out);
        out
    }

    pub fn write_site(&self, idx: usize, out: &mut [i64]) {
        debug_assert!(idx < self.len);
        let mut rem = idx;
        for k in 0..self.d {
            out[k] = (rem / self.strides[k]) as i64 - self.radius;
            rem %= self.strides[k];
        }
    }

    /// Visits every site in lexicographic order without per-site allocation.
    pub fn for_each_site(&self, mut f: impl FnMut(usize, &[i64])) {
        let mut coords = vec![-self.radius; self.d];
        for idx in 0..self.len {
            f(idx, &coords);
            for k in (0..self.d).rev() {
                if coords[k] < self.radius {
                    coords[k] += 1;
                    break;
                }
                coords[k] = -self.radius;
            }
        }
    }

    /// Lattice neighbors of `x` that stay inside this box.
    pub fn neighbors(&self, x: &[i64]) -> Vec<Vec<i64>> {
        let mut out = Vec::with_capacity(2 * self.d);
        for k in 0..self.d {
            for step in [-1i64, 1] {
                let mut y = x.to_vec();
                y[k] += step;
                if self.contains(&y) {
                    out.push(y);
                }
            }
        }
        out
    }

    /// Restores strides after deserialization.
    pub fn rehydrate(&mut self) {
        self.fill_strides();
    }
}

/// Sup norm, the box membership norm: `x ∈ Λ_m ⟺ sup_norm(x) ≤ m`.
pub fn sup_norm(x: &[i64]) -> i64 {
    x.iter().map(|c| c.abs()).max().unwrap_or(0)
}

/// Squared Euclidean norm, used by the deep-trap kill predicate.
pub fn norm_sq(x: &[i64]) -> i64 {
    x.iter().map(|c| c * c).sum()
}
