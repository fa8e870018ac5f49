//! Critical offspring laws and the tree flavors built from them.
//!
//! Three root laws appear throughout: the plain law `q`, the shifted law
//! `((k+1) q_{k+1})` carried by the finite trees hanging off a spine, and
//! the size-biased law `(k q_k)` governing spine individuals.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LawError {
    #[error("probabilities must be nonnegative and finite")]
    NegativeProbability,
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("offspring mean is {0}; the law must be critical (mean 1)")]
    NotCritical(f64),
    #[error("offspring variance term sigma^2 is zero (degenerate law)")]
    Degenerate,
}

#[derive(Debug, Error, PartialEq)]
#[error("node cap {cap} exceeded while growing a tree")]
pub struct NodeCapExceeded {
    pub cap: u64,
}

/// How a tree's root reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootLaw {
    /// Plain `q` (unconditioned tree).
    Standard,
    /// `((k+1) q_{k+1})`: the root law of a spine-attached finite tree.
    Shifted,
    /// `(k q_k)`: the spine reproduction law.
    SizeBiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Repr {
    Explicit { q: Vec<f64> },
    /// `q_k = 2^{-(k+1)}`.
    GeometricHalf,
}

/// A critical offspring law with its derived quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffspringLaw {
    repr: Repr,
    mean: f64,
    sigma2: f64,
    third_moment: f64,
    #[serde(skip)]
    cum_q: Vec<f64>,
    #[serde(skip)]
    cum_size_biased: Vec<f64>,
    #[serde(skip)]
    cum_shifted: Vec<f64>,
}

impl OffspringLaw {
    /// Builds a law from explicit probabilities `(q_0, …, q_K)`.
    pub fn from_probs(q: &[f64]) -> Result<Self, LawError> {
        if q.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(LawError::NegativeProbability);
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LawError::NotNormalized(total));
        }
        let mean: f64 = q.iter().enumerate().map(|(k, &p)| k as f64 * p).sum();
        if (mean - 1.0).abs() > 1e-9 {
            return Err(LawError::NotCritical(mean));
        }
        let sigma2: f64 = q.iter().enumerate().map(|(k, &p)| (k * k.saturating_sub(1)) as f64 * p).sum();
        if sigma2 <= 0.0 {
            return Err(LawError::Degenerate);
        }
        let third_moment: f64 = q.iter().enumerate().map(|(k, &p)| (k * k * k) as f64 * p).sum();
        let mut law = OffspringLaw {
            repr: Repr::Explicit { q: q.to_vec() },
            mean,
            sigma2,
            third_moment,
            cum_q: Vec::new(),
            cum_size_biased: Vec::new(),
            cum_shifted: Vec::new(),
        };
        law.rebuild_tables();
        Ok(law)
    }

    /// The geometric(1/2) law `q_k = 2^{-(k+1)}`: critical, `σ² = 2`,
    /// third moment 13.
    pub fn geometric_half() -> Self {
        OffspringLaw {
            repr: Repr::GeometricHalf,
            mean: 1.0,
            sigma2: 2.0,
            third_moment: 13.0,
            cum_q: Vec::new(),
            cum_size_biased: Vec::new(),
            cum_shifted: Vec::new(),
        }
    }

    /// Binary branching `q_0 = q_2 = 1/2`.
    pub fn binary() -> Self {
        OffspringLaw::from_probs(&[0.5, 0.0, 0.5]).expect("binary law is valid")
    }

    /// Restores the sampling tables after deserialization.
    pub fn rebuild_tables(&mut self) {
        if let Repr::Explicit { q } = &self.repr {
            let cum = |weights: Vec<f64>| -> Vec<f64> {
                let mut acc = 0.0;
                weights
                    .iter()
                    .map(|w| {
                        acc += w;
                        acc
                    })
                    .collect()
            };
            self.cum_q = cum(q.clone());
            // Mass j of this table is (j+1) q_{j+1}: the shifted law directly,
            // and the size-biased law after adding 1 to the sampled index.
            self.cum_shifted =
                cum(q.iter().enumerate().skip(1).map(|(k, &p)| k as f64 * p).collect());
            self.cum_size_biased = self.cum_shifted.clone();
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `σ² = Σ k(k−1) q_k`.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `Σ k³ q_k`.
    pub fn third_moment(&self) -> f64 {
        self.third_moment
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self.repr, Repr::GeometricHalf)
    }

    /// `q_k`.
    pub fn q(&self, k: usize) -> f64 {
        match &self.repr {
            Repr::Explicit { q } => q.get(k).copied().unwrap_or(0.0),
            Repr::GeometricHalf => 0.5f64.powi(k as i32 + 1),
        }
    }

    /// Size-biased mass `k q_k` (sums to the mean, i.e. to 1).
    pub fn size_biased(&self, k: usize) -> f64 {
        k as f64 * self.q(k)
    }

    /// Shifted mass `(k+1) q_{k+1}`.
    pub fn shifted(&self, k: usize) -> f64 {
        (k + 1) as f64 * self.q(k + 1)
    }

    fn scan(table: &[f64], u: f64) -> u64 {
        let mut k = 0usize;
        while k + 1 < table.len() && u >= table[k] {
            k += 1;
        }
        k as u64
    }

    /// Draws from `q`.
    #[inline]
    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        match &self.repr {
            Repr::Explicit { .. } => Self::scan(&self.cum_q, rng.gen::<f64>()),
            // The position of the leading set bit of a uniform u64 is
            // geometric(1/2), which inverts the closed-form CDF exactly.
            Repr::GeometricHalf => u64::from(rng.next_u64().leading_zeros()),
        }
    }

    /// Draws from the size-biased law `(k q_k)`.
    #[inline]
    pub fn sample_size_biased(&self, rng: &mut impl Rng) -> u64 {
        match &self.repr {
            Repr::Explicit { .. } => Self::scan(&self.cum_size_biased, rng.gen::<f64>()) + 1,
            // Size-biased geometric(1/2) is G + G' + 1 for independent
            // geometric(1/2) variables: P(G+G'=n) = (n+1) 2^{-(n+2)}.
            Repr::GeometricHalf => {
                u64::from(rng.next_u64().leading_zeros()) + u64::from(rng.next_u64().leading_zeros()) + 1
            }
        }
    }

    /// Draws from the shifted law `((k+1) q_{k+1})`.
    #[inline]
    pub fn sample_shifted(&self, rng: &mut impl Rng) -> u64 {
        match &self.repr {
            Repr::Explicit { .. } => Self::scan(&self.cum_shifted, rng.gen::<f64>()),
            Repr::GeometricHalf => {
                u64::from(rng.next_u64().leading_zeros()) + u64::from(rng.next_u64().leading_zeros())
            }
        }
    }

    #[inline]
    pub fn sample_root(&self, root: RootLaw, rng: &mut impl Rng) -> u64 {
        match root {
            RootLaw::Standard => self.sample(rng),
            RootLaw::Shifted => self.sample_shifted(rng),
            RootLaw::SizeBiased => self.sample_size_biased(rng),
        }
    }
}

/// One spine reproduction event: the spine individual has `1 +
/// non_spine_children` children in total and continues along the child at
/// planar slot `spine_slot`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpineStep {
    pub total_children: u64,
    pub spine_slot: u64,
    pub non_spine_children: u64,
}

/// Draws `K` from the size-biased law and a uniform spine slot among the
/// `K` children; the remaining `K−1` children root the attached finite tree,
/// whose root law is therefore the shifted law.
#[inline]
pub fn spine_step(law: &OffspringLaw, rng: &mut impl Rng) -> SpineStep {
    let total = law.sample_size_biased(rng);
    debug_assert!(total >= 1);
    let slot = rng.gen_range(0..total);
    SpineStep { total_children: total, spine_slot: slot, non_spine_children: total - 1 }
}

/// An ordered rooted tree stored flat in breadth-first order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FiniteTree {
    /// Parent index per node; the root stores `u32::MAX`.
    pub parent: Vec<u32>,
    /// Child count per node.
    pub child_count: Vec<u32>,
}

impl FiniteTree {
    pub fn node_count(&self) -> usize {
        self.parent.len()
    }

    pub fn root() -> Self {
        FiniteTree { parent: vec![u32::MAX], child_count: vec![0] }
    }

    /// Structural sanity: single root, acyclic parents (BFS order implies
    /// parent index < child index), consistent child counts.
    pub fn validate(&self) -> bool {
        if self.parent.len() != self.child_count.len() || self.parent.is_empty() {
            return false;
        }
        let mut counted = vec![0u32; self.node_count()];
        for (i, &p) in self.parent.iter().enumerate() {
            if i == 0 {
                if p != u32::MAX {
                    return false;
                }
            } else {
                if p as usize >= i {
                    return false;
                }
                counted[p as usize] += 1;
            }
        }
        counted == self.child_count
    }
}

/// Samples a tree where the root reproduces by `root_law` and every other
/// node by `q`, in breadth-first order. Exceeding `node_cap` is reported so
/// callers can treat the replicate as censored.
pub fn sample_bgw(
    law: &OffspringLaw,
    root_law: RootLaw,
    rng: &mut impl Rng,
    node_cap: u64,
) -> Result<FiniteTree, NodeCapExceeded> {
    assert!(node_cap >= 1, "node cap must allow at least the root");
    let mut parent = vec![u32::MAX];
    let mut child_count = vec![0u32];
    let mut next = 0usize;
    while next < parent.len() {
        let k = if next == 0 { law.sample_root(root_law, rng) } else { law.sample(rng) };
        child_count[next] = k as u32;
        if parent.len() as u64 + k > node_cap {
            return Err(NodeCapExceeded { cap: node_cap });
        }
        for _ in 0..k {
            parent.push(next as u32);
            child_count.push(0);
        }
        next += 1;
    }
    Ok(FiniteTree { parent, child_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::replicate_rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn binary_law_derived_values() {
        let law = OffspringLaw::binary();
        assert_abs_diff_eq!(law.sigma2(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(law.third_moment(), 4.0, epsilon = 1e-15);
        // Shifted law is a point mass at one child: 2 * q_2 = 1 at k = 1.
        assert_abs_diff_eq!(law.shifted(1), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(law.shifted(0), 0.0, epsilon = 1e-15);
        // Size-biased is a point mass at two children.
        assert_abs_diff_eq!(law.size_biased(2), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn geometric_law_derived_values() {
        let law = OffspringLaw::geometric_half();
        // Independent series oracle: partial sums of k(k-1) 2^{-(k+1)} and
        // k^3 2^{-(k+1)} converge well before k = 200.
        let mut sum = 0.0;
        let mut sigma2 = 0.0;
        let mut third = 0.0;
        let mut mean = 0.0;
        for k in 0..200u32 {
            let q = 0.5f64.powi(k as i32 + 1);
            sum += q;
            mean += k as f64 * q;
            sigma2 += (k * k.saturating_sub(1)) as f64 * q;
            third += (k as f64).powi(3) * q;
        }
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mean, law.mean(), epsilon = 1e-12);
        assert_abs_diff_eq!(sigma2, law.sigma2(), epsilon = 1e-12);
        assert_abs_diff_eq!(third, law.third_moment(), epsilon = 1e-12);
    }

    #[test]
    fn derived_laws_are_normalized() {
        for law in [OffspringLaw::binary(), OffspringLaw::geometric_half()] {
            let sb: f64 = (0..200).map(|k| law.size_biased(k)).sum();
            let sh: f64 = (0..200).map(|k| law.shifted(k)).sum();
            assert_abs_diff_eq!(sb, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(sh, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_degenerate_and_noncritical() {
        assert_eq!(OffspringLaw::from_probs(&[0.0, 1.0]), Err(LawError::Degenerate));
        assert!(matches!(
            OffspringLaw::from_probs(&[0.9, 0.05, 0.05]),
            Err(LawError::NotCritical(_))
        ));
        assert!(matches!(OffspringLaw::from_probs(&[0.5, 0.4]), Err(LawError::NotNormalized(_))));
        assert_eq!(OffspringLaw::from_probs(&[-0.1, 1.1]), Err(LawError::NegativeProbability));
    }

    #[test]
    fn binary_shifted_root_always_one_child() {
        let law = OffspringLaw::binary();
        let mut rng = replicate_rng(1, 0, 0);
        for _ in 0..100 {
            let t = sample_bgw(&law, RootLaw::Shifted, &mut rng, 1 << 20).unwrap();
            assert_eq!(t.child_count[0], 1);
            assert!(t.validate());
        }
    }

    #[test]
    fn geometric_single_node_probability_is_half() {
        // The tree has one node iff the root draws zero children.
        let law = OffspringLaw::geometric_half();
        let mut rng = replicate_rng(7, 0, 0);
        let n = 100_000u64;
        let mut singles = 0u64;
        for _ in 0..n {
            match sample_bgw(&law, RootLaw::Standard, &mut rng, 1_000_000) {
                Ok(t) => {
                    if t.node_count() == 1 {
                        singles += 1;
                    }
                }
                Err(_) => {}
            }
        }
        let p = singles as f64 / n as f64;
        let se = (0.5 * 0.5 / n as f64).sqrt();
        assert!((p - 0.5).abs() <= 3.0 * se, "p = {p}");
    }

    #[test]
    fn spine_step_binary_always_two() {
        let law = OffspringLaw::binary();
        let mut rng = replicate_rng(3, 0, 1);
        for _ in 0..200 {
            let s = spine_step(&law, &mut rng);
            assert_eq!(s.total_children, 2);
            assert!(s.spine_slot < 2);
            assert_eq!(s.non_spine_children, 1);
        }
    }

    /// Pearson chi-square statistic against expected probabilities, pooling
    /// the tail into the last bin.
    fn chi_square(observed: &[u64], expected_probs: &[f64], n: u64) -> f64 {
        let mut stat = 0.0;
        for (o, p) in observed.iter().zip(expected_probs.iter()) {
            let e = p * n as f64;
            if e > 0.0 {
                stat += (*o as f64 - e).powi(2) / e;
            }
        }
        stat
    }

    #[test]
    fn spine_step_matches_size_biased_law_chi_square() {
        let law = OffspringLaw::geometric_half();
        let mut rng = replicate_rng(11, 0, 2);
        let n = 100_000u64;
        const BINS: usize = 12;
        let mut counts = [0u64; BINS];
        let mut nonspine = [0u64; BINS];
        for _ in 0..n {
            let s = spine_step(&law, &mut rng);
            counts[(s.total_children as usize).min(BINS - 1)] += 1;
            nonspine[(s.non_spine_children as usize).min(BINS - 1)] += 1;
        }
        let mut probs_sb = [0.0f64; BINS];
        let mut probs_sh = [0.0f64; BINS];
        for k in 0..BINS - 1 {
            probs_sb[k] = law.size_biased(k);
            probs_sh[k] = law.shifted(k);
        }
        probs_sb[BINS - 1] = 1.0 - probs_sb[..BINS - 1].iter().sum::<f64>();
        probs_sh[BINS - 1] = 1.0 - probs_sh[..BINS - 1].iter().sum::<f64>();
        // K lives on {1, 2, ...}: bin 0 is structurally empty for the
        // size-biased law, so 10 free bins remain. chi2_{0.99}(10) = 23.209;
        // the shifted law uses 11 free bins, chi2_{0.99}(11) = 24.725.
        let stat_sb = chi_square(&counts, &probs_sb, n);
        assert!(stat_sb < 23.209, "size-biased chi-square {stat_sb}");
        let stat_sh = chi_square(&nonspine, &probs_sh, n);
        assert!(stat_sh < 24.725, "shifted chi-square {stat_sh}");
    }

    #[test]
    fn offspring_histogram_of_non_root_nodes_matches_q() {
        let law = OffspringLaw::geometric_half();
        let mut rng = replicate_rng(13, 0, 3);
        const BINS: usize = 12;
        let mut counts = [0u64; BINS];
        let mut total_nodes = 0u64;
        while total_nodes < 150_000 {
            if let Ok(t) = sample_bgw(&law, RootLaw::Standard, &mut rng, 1_000_000) {
                for i in 1..t.node_count() {
                    counts[(t.child_count[i] as usize).min(BINS - 1)] += 1;
                    total_nodes += 1;
                }
            }
        }
        let mut probs = [0.0f64; BINS];
        for (k, slot) in probs.iter_mut().enumerate().take(BINS - 1) {
            *slot = law.q(k);
        }
        probs[BINS - 1] = 1.0 - probs[..BINS - 1].iter().sum::<f64>();
        // 11 degrees of freedom: chi2_{0.99}(11) = 24.725.
        let stat = chi_square(&counts, &probs, total_nodes);
        assert!(stat < 24.725, "chi-square {stat}");
    }

    #[test]
    fn censoring_rate_under_one_percent_at_default_cap() {
        // Critical trees exceed 1e7 nodes with probability ~ c * 1e-3.5;
        // the observed censoring rate over 2000 replicates must stay below 1%.
        let law = OffspringLaw::geometric_half();
        let mut rng = replicate_rng(17, 0, 4);
        let n = 2000u64;
        let mut censored = 0u64;
        for _ in 0..n {
            if sample_bgw(&law, RootLaw::Standard, &mut rng, 10_000_000).is_err() {
                censored += 1;
            }
        }
        assert!(censored as f64 / n as f64 <= 0.01, "censored {censored}/{n}");
    }

    #[test]
    fn bfs_layout_is_valid() {
        let law = OffspringLaw::geometric_half();
        let mut rng = replicate_rng(19, 0, 5);
        for _ in 0..200 {
            if let Ok(t) = sample_bgw(&law, RootLaw::Shifted, &mut rng, 100_000) {
                assert!(t.validate());
            }
        }
    }
}
