//! Monte Carlo simulation of the critical snake via its spine decomposition.
//!
//! A realization is generated as: a walk (the spine) started at the origin,
//! and at every spine index a finite tree whose root is the spine node
//! itself — the spine individual draws a size-biased child count `K`, one
//! uniformly chosen child continues the spine, the remaining `K−1` root
//! subtrees in which every node reproduces by `q` (so the attached tree's
//! root effectively carries the shifted law). Particles are killed on
//! leaving the box `Λ_m` (and, optionally, on entering the deep-trap set);
//! a killed particle is removed before being counted and spawns nothing.
//!
//! Several kill rules can be evaluated in one coupled run: every particle
//! carries a bitmask of the rules it is still alive under, which yields
//! exact pathwise monotonicity between nested rules.

use crate::environment::{EdgeStore, EnvError, Environment, FieldData};
use crate::genealogy::{FiniteTree, NodeCapExceeded, OffspringLaw, RootLaw};
use crate::lattice::{sup_norm, MAX_D};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SnakeError {
    #[error("kill box radius {m} exceeds stored interior radius {interior}")]
    KillBoxTooLarge { m: i64, interior: i64 },
    #[error("at least one kill rule is required")]
    NoRules,
    #[error("at most 8 coupled kill rules are supported, got {0}")]
    TooManyRules(usize),
    #[error("site {site:?} outside the kill box of radius {m}")]
    OutsideKillBox { site: Vec<i64>, m: i64 },
    #[error("spine exhausted: re-rooting needs spine length >= 2")]
    SpineExhausted,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tree(#[from] NodeCapExceeded),
}

/// Deep-trap kill set `A = {x : π_ω(x) ≥ R·|x|²}`, with `|0|²` read as 1 so
/// the origin is killed only if `π_ω(0) ≥ R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapKillSet {
    pub threshold: f64,
}

impl TrapKillSet {
    pub fn contains(&self, env: &Environment, x: &[i64]) -> Result<bool, EnvError> {
        let pi = env.pi(x)?;
        let n2 = crate::lattice::norm_sq(x).max(1) as f64;
        Ok(pi >= self.threshold * n2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum KillRule {
    /// Kill on stepping outside `Λ_m`.
    Box { m: i64 },
    /// Kill on stepping outside `Λ_m` or into the deep-trap set.
    BoxAndTraps { m: i64, threshold: f64 },
}

impl KillRule {
    pub fn m(&self) -> i64 {
        match *self {
            KillRule::Box { m } => m,
            KillRule::BoxAndTraps { m, .. } => m,
        }
    }
}

/// The renormalized local time at the origin of one constrained snake.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LocalTimeSample {
    /// `visits / π_ω(0)`.
    pub value: f64,
    /// Raw visit count at the origin (an integer by construction).
    pub visits: u64,
    /// Surviving particles generated (spine nodes included).
    pub particle_count: u64,
    /// Number of spine steps taken before the spine died under this rule.
    pub spine_exit_step: u64,
    pub censored: bool,
}

/// One finite snake (a single tree), counted at a target site.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BranchSample {
    /// Raw visit count at the target (not `π`-renormalized).
    pub visits: u64,
    pub particle_count: u64,
    pub censored: bool,
}

#[derive(Debug, Clone)]
pub struct SnakeOutcome {
    /// One sample per kill rule, in input order.
    pub samples: Vec<LocalTimeSample>,
    /// Spine storage indices while alive under at least one rule; the prefix
    /// of length `samples[r].spine_exit_step` is the spine path under rule `r`.
    pub spine_path: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
struct Walker {
    idx: usize,
    pos: [i16; MAX_D],
    norm2: i64,
}

/// Hot-path view of an environment: one step of the quenched walk.
pub(crate) struct Stepper<'e> {
    env: &'e Environment,
    d: usize,
    strides: [usize; MAX_D],
    edge_const: Option<f64>,
    self_const: Option<f64>,
    pi_const: Option<f64>,
}

impl<'e> Stepper<'e> {
    fn new(env: &'e Environment) -> Self {
        let mut strides = [0usize; MAX_D];
        strides[..env.d()].copy_from_slice(env.storage().strides());
        let edge_const = match env.edges() {
            EdgeStore::Constant(c) => Some(*c),
            EdgeStore::PerAxis(_) => None,
        };
        let self_const = match env.rho_field() {
            None => Some(0.0),
            Some(FieldData::Constant(r)) => Some(r / (1.0 - r)),
            Some(FieldData::Array(_)) => None,
        };
        let pi_const = match (edge_const, self_const) {
            (Some(c), Some(s)) => Some(2.0 * env.d() as f64 * c + s),
            _ => None,
        };
        Stepper { env, d: env.d(), strides, edge_const, self_const, pi_const }
    }

    fn start(&self) -> Walker {
        let origin = vec![0i64; self.d];
        Walker { idx: self.env.storage().index(&origin).unwrap(), pos: [0; MAX_D], norm2: 0 }
    }

    fn walker_at(&self, x: &[i64]) -> Option<Walker> {
        let idx = self.env.storage().index(x)?;
        let mut pos = [0i16; MAX_D];
        for (p, &c) in pos.iter_mut().zip(x.iter()) {
            *p = c as i16;
        }
        Some(Walker { idx, pos, norm2: crate::lattice::norm_sq(x) })
    }

    #[inline]
    fn pi(&self, idx: usize) -> f64 {
        match self.pi_const {
            Some(p) => p,
            None => self.env.pi_idx(idx),
        }
    }

    #[inline]
    fn self_weight(&self, idx: usize) -> f64 {
        match self.self_const {
            Some(s) => s,
            None => self.env.self_weight_idx(idx),
        }
    }

    #[inline]
    fn edge(&self, axis: usize, idx: usize) -> f64 {
        match self.edge_const {
            Some(c) => c,
            None => self.env.edge_weight_idx(axis, idx),
        }
    }

    /// Samples one move of the quenched walk in place. The walker must sit
    /// on an interior-box site (callers kill at the boundary first).
    #[inline]
    fn step<R: Rng>(&self, w: &mut Walker, rng: &mut R) {
        let mut u = rng.gen::<f64>() * self.pi(w.idx);
        let s = self.self_weight(w.idx);
        if u < s {
            return; // self-loop: stay put
        }
        u -= s;
        for k in 0..self.d {
            let w_minus = self.edge(k, w.idx - self.strides[k]);
            if u < w_minus {
                self.apply_move(w, k, -1);
                return;
            }
            u -= w_minus;
            let w_plus = self.edge(k, w.idx);
            if u < w_plus {
                self.apply_move(w, k, 1);
                return;
            }
            u -= w_plus;
        }
        // Floating-point slack: attribute the residual to the last direction.
        self.apply_move(w, self.d - 1, 1);
    }

    #[inline]
    fn apply_move(&self, w: &mut Walker, axis: usize, step: i16) {
        w.norm2 += 2 * i64::from(w.pos[axis]) * i64::from(step) + 1;
        w.pos[axis] += step;
        if step > 0 {
            w.idx += self.strides[axis];
        } else {
            w.idx -= self.strides[axis];
        }
    }

    #[inline]
    fn allowed_mask(&self, rules: &[KillRule], w: &Walker) -> u8 {
        let mut sup: i16 = 0;
        for &c in &w.pos[..self.d] {
            sup = sup.max(c.abs());
        }
        let mut mask = 0u8;
        for (r, rule) in rules.iter().enumerate() {
            let ok = match *rule {
                KillRule::Box { m } => i64::from(sup) <= m,
                KillRule::BoxAndTraps { m, threshold } => {
                    i64::from(sup) <= m && self.pi(w.idx) < threshold * (w.norm2.max(1) as f64)
                }
            };
            if ok {
                mask |= 1 << r;
            }
        }
        mask
    }
}

fn validate_rules(env: &Environment, rules: &[KillRule]) -> Result<(), SnakeError> {
    if rules.is_empty() {
        return Err(SnakeError::NoRules);
    }
    if rules.len() > 8 {
        return Err(SnakeError::TooManyRules(rules.len()));
    }
    for rule in rules {
        if rule.m() > env.interior().radius() {
            return Err(SnakeError::KillBoxTooLarge {
                m: rule.m(),
                interior: env.interior().radius(),
            });
        }
    }
    Ok(())
}

/// A stored node of a developing tree (recording mode only).
#[derive(Debug, Clone, Copy)]
struct NodeRec {
    parent: u32,
    storage_idx: usize,
}

struct Counters {
    n_rules: usize,
    target_idx: usize,
    visits: [u64; 8],
    particles: [u64; 8],
    budget: u64,
    censored: bool,
}

impl Counters {
    fn new(n_rules: usize, target_idx: usize, budget: u64) -> Self {
        Counters { n_rules, target_idx, visits: [0; 8], particles: [0; 8], budget, censored: false }
    }

    /// Counts an alive particle; returns false when the budget is exhausted.
    #[inline]
    fn count(&mut self, idx: usize, mask: u8) -> bool {
        for r in 0..self.n_rules {
            if mask & (1 << r) != 0 {
                self.particles[r] += 1;
                if idx == self.target_idx {
                    self.visits[r] += 1;
                }
            }
        }
        if self.budget == 0 {
            self.censored = true;
            return false;
        }
        self.budget -= 1;
        true
    }
}

/// Develops the descendants of an already-counted root with a given child
/// count, depth-first in planar order. Every child draws its position step
/// first and, if it survives, its own offspring count. Returns false if the
/// particle budget ran out.
///
/// When `record` is given it must already contain the root at index 0;
/// surviving nodes are appended with parent links into that vec.
fn grow_tree<R: Rng>(
    stepper: &Stepper,
    rules: &[KillRule],
    law: &OffspringLaw,
    root: Walker,
    root_mask: u8,
    root_children: u64,
    rng: &mut R,
    counters: &mut Counters,
    mut record: Option<&mut Vec<NodeRec>>,
) -> bool {
    // Stack of (walker, mask, node id, children left to spawn).
    let mut stack: Vec<(Walker, u8, u32, u64)> = vec![(root, root_mask, 0, root_children)];
    while let Some(top) = stack.last_mut() {
        if top.3 == 0 {
            stack.pop();
            continue;
        }
        top.3 -= 1;
        let (parent_w, parent_mask, parent_id) = (top.0, top.1, top.2);
        let mut child = parent_w;
        stepper.step(&mut child, rng);
        let cmask = parent_mask & stepper.allowed_mask(rules, &child);
        if cmask == 0 {
            continue; // killed before being counted; spawns nothing
        }
        if !counters.count(child.idx, cmask) {
            return false;
        }
        let k = law.sample(rng);
        let child_id = match &mut record {
            Some(nodes) => {
                nodes.push(NodeRec { parent: parent_id, storage_idx: child.idx });
                nodes.len() as u32 - 1
            }
            None => 0,
        };
        stack.push((child, cmask, child_id, k));
    }
    true
}

/// Simulates one constrained snake under several coupled kill rules and
/// returns the renormalized local time at the origin for each.
///
/// The random stream is consumed in a frozen order per spine index: the
/// size-biased child count `K`, the uniform spine slot, the `K−1` non-spine
/// subtrees depth-first in planar order (each node: one step draw, then its
/// offspring count), and finally the spine step itself.
pub fn sample_local_time_multi<R: Rng>(
    env: &Environment,
    law: &OffspringLaw,
    rules: &[KillRule],
    rng: &mut R,
    node_cap: u64,
    record_spine: bool,
) -> Result<SnakeOutcome, SnakeError> {
    validate_rules(env, rules)?;
    let stepper = Stepper::new(env);
    let origin = stepper.start();
    let pi0 = stepper.pi(origin.idx);
    let mut counters = Counters::new(rules.len(), origin.idx, node_cap);
    let mut spine_path = if record_spine { Some(Vec::new()) } else { None };
    let mut exit_step = [0u64; 8];
    let mut spine = origin;
    let mut mask = stepper.allowed_mask(rules, &spine);
    let mut step_index = 0u64;

    'spine: while mask != 0 {
        if let Some(path) = &mut spine_path {
            path.push(spine.idx);
        }
        // The spine node is the root of its attached tree.
        if !counters.count(spine.idx, mask) {
            break 'spine;
        }
        let k_total = law.sample_size_biased(rng);
        let _slot = rng.gen_range(0..k_total);
        if !grow_tree(&stepper, rules, law, spine, mask, k_total - 1, rng, &mut counters, None) {
            break 'spine;
        }
        let mut next = spine;
        stepper.step(&mut next, rng);
        let new_mask = mask & stepper.allowed_mask(rules, &next);
        for r in 0..rules.len() {
            if mask & (1 << r) != 0 && new_mask & (1 << r) == 0 {
                exit_step[r] = step_index + 1;
            }
        }
        spine = next;
        mask = new_mask;
        step_index += 1;
    }
    if counters.censored {
        for (r, slot) in exit_step.iter_mut().enumerate().take(rules.len()) {
            if mask & (1 << r) != 0 {
                *slot = step_index;
            }
        }
    }

    let samples = (0..rules.len())
        .map(|r| LocalTimeSample {
            value: counters.visits[r] as f64 / pi0,
            visits: counters.visits[r],
            particle_count: counters.particles[r],
            spine_exit_step: exit_step[r],
            censored: counters.censored,
        })
        .collect();
    Ok(SnakeOutcome { samples, spine_path })
}

/// Local times of the bare spine walk (no branching) at chosen sites,
/// killed on exiting `Λ_m`. The step at which the walk left the box is
/// returned alongside the per-site visit counts.
pub fn spine_local_times<R: Rng>(
    env: &Environment,
    m: i64,
    sites: &[Vec<i64>],
    rng: &mut R,
) -> Result<(Vec<u64>, u64), SnakeError> {
    validate_rules(env, &[KillRule::Box { m }])?;
    let stepper = Stepper::new(env);
    let site_idx: Vec<usize> = sites
        .iter()
        .map(|s| {
            if sup_norm(s) > m {
                return Err(SnakeError::OutsideKillBox { site: s.clone(), m });
            }
            Ok(env.storage().index(s).expect("kill box is stored"))
        })
        .collect::<Result<_, _>>()?;
    let mut counts = vec![0u64; sites.len()];
    let mut w = stepper.start();
    let rules = [KillRule::Box { m }];
    let mut steps = 0u64;
    while stepper.allowed_mask(&rules, &w) != 0 {
        for (c, &idx) in counts.iter_mut().zip(&site_idx) {
            if w.idx == idx {
                *c += 1;
            }
        }
        stepper.step(&mut w, rng);
        steps += 1;
    }
    Ok((counts, steps))
}

/// Single-rule convenience over [`sample_local_time_multi`].
pub fn sample_local_time<R: Rng>(
    env: &Environment,
    law: &OffspringLaw,
    rule: KillRule,
    rng: &mut R,
    node_cap: u64,
) -> Result<LocalTimeSample, SnakeError> {
    Ok(sample_local_time_multi(env, law, &[rule], rng, node_cap, false)?.samples[0])
}

/// One finite snake from `start` with the given root law, counted at
/// `target` (raw visits, no `π` renormalization).
pub fn sample_branch_local_time<R: Rng>(
    env: &Environment,
    law: &OffspringLaw,
    rule: KillRule,
    start: &[i64],
    root_law: RootLaw,
    target: &[i64],
    rng: &mut R,
    node_cap: u64,
) -> Result<BranchSample, SnakeError> {
    validate_rules(env, &[rule])?;
    if sup_norm(start) > rule.m() {
        return Err(SnakeError::OutsideKillBox { site: start.to_vec(), m: rule.m() });
    }
    let stepper = Stepper::new(env);
    let root = stepper
        .walker_at(start)
        .ok_or(SnakeError::OutsideKillBox { site: start.to_vec(), m: rule.m() })?;
    let target_idx = env
        .storage()
        .index(target)
        .ok_or(SnakeError::OutsideKillBox { site: target.to_vec(), m: rule.m() })?;
    let mut counters = Counters::new(1, target_idx, node_cap);
    let mask = stepper.allowed_mask(&[rule], &root);
    if mask != 0 && counters.count(root.idx, mask) {
        let k = law.sample_root(root_law, rng);
        grow_tree(&stepper, &[rule], law, root, mask, k, rng, &mut counters, None);
    }
    Ok(BranchSample {
        visits: counters.visits[0],
        particle_count: counters.particles[0],
        censored: counters.censored,
    })
}

/// Whether a plain critical snake (root law `q`, not conditioned to survive)
/// started at the origin hits `target` before leaving `Λ_{m_bound}`.
pub fn finite_snake_hits<R: Rng>(
    env: &Environment,
    law: &OffspringLaw,
    m_bound: i64,
    target: &[i64],
    rng: &mut R,
    node_cap: u64,
) -> Result<BranchSample, SnakeError> {
    if sup_norm(target) > m_bound {
        return Err(SnakeError::OutsideKillBox { site: target.to_vec(), m: m_bound });
    }
    let origin = vec![0i64; env.d()];
    sample_branch_local_time(
        env,
        law,
        KillRule::Box { m: m_bound },
        &origin,
        RootLaw::Standard,
        target,
        rng,
        node_cap,
    )
}

/// A finite tree with a site label per node (depth-first node order).
#[derive(Debug, Clone)]
pub struct LabelledTree {
    pub tree: FiniteTree,
    pub labels: Vec<Vec<i64>>,
}

/// The explicit image of a snake realization under the spine decomposition:
/// the environment, the spine positions, and one labelled finite tree per
/// spine index (its root label is the spine position).
#[derive(Debug, Clone)]
pub struct SnakeDecomposition {
    pub env: Environment,
    pub kill: KillRule,
    pub spine: Vec<Vec<i64>>,
    /// Chosen spine-continuation slot among the `K` children, per index.
    pub spine_slots: Vec<u32>,
    pub trees: Vec<LabelledTree>,
    pub censored: bool,
}

impl SnakeDecomposition {
    /// Total visits to a site across all surviving nodes.
    pub fn visits(&self, site: &[i64]) -> u64 {
        self.trees
            .iter()
            .flat_map(|t| t.labels.iter())
            .filter(|l| l.as_slice() == site)
            .count() as u64
    }

    /// Drops the first spine vertex and its tree, re-roots at the next spine
    /// vertex and shifts the environment and all labels so the new root sits
    /// at the origin.
    pub fn reroot(self) -> Result<SnakeDecomposition, SnakeError> {
        if self.spine.len() < 2 {
            return Err(SnakeError::SpineExhausted);
        }
        let x1 = self.spine[1].clone();
        let env = self.env.shift(&x1)?;
        let shift = |v: &[i64]| -> Vec<i64> { v.iter().zip(&x1).map(|(a, b)| a - b).collect() };
        let spine: Vec<Vec<i64>> = self.spine[1..].iter().map(|x| shift(x)).collect();
        let trees = self.trees[1..]
            .iter()
            .map(|t| LabelledTree {
                tree: t.tree.clone(),
                labels: t.labels.iter().map(|l| shift(l)).collect(),
            })
            .collect();
        Ok(SnakeDecomposition {
            env,
            kill: self.kill,
            spine,
            spine_slots: self.spine_slots[1..].to_vec(),
            trees,
            censored: self.censored,
        })
    }
}

/// Converts recorded nodes (depth-first, parents before children) into a
/// [`FiniteTree`] plus site labels.
fn labelled_tree(env: &Environment, nodes: &[NodeRec]) -> LabelledTree {
    let mut parent = Vec::with_capacity(nodes.len());
    let mut child_count = vec![0u32; nodes.len()];
    let mut labels = Vec::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        parent.push(n.parent);
        if i > 0 {
            child_count[n.parent as usize] += 1;
        }
        labels.push(env.storage().site(n.storage_idx));
    }
    LabelledTree { tree: FiniteTree { parent, child_count }, labels }
}

/// Samples an explicit decomposition. Consumes the random stream in exactly
/// the same order as [`sample_local_time_multi`], so matched seeds produce
/// matching realizations.
pub fn sample_decomposition<R: Rng>(
    env: &Environment,
    law: &OffspringLaw,
    rule: KillRule,
    rng: &mut R,
    node_cap: u64,
) -> Result<SnakeDecomposition, SnakeError> {
    validate_rules(env, &[rule])?;
    let rules = [rule];
    let stepper = Stepper::new(env);
    let origin = stepper.start();
    let mut counters = Counters::new(1, origin.idx, node_cap);
    let mut spine = origin;
    let mut mask = stepper.allowed_mask(&rules, &spine);
    let mut spine_positions = Vec::new();
    let mut spine_slots = Vec::new();
    let mut trees = Vec::new();

    while mask != 0 {
        spine_positions.push(env.storage().site(spine.idx));
        let root_counted = counters.count(spine.idx, mask);
        let mut nodes: Vec<NodeRec> = vec![NodeRec { parent: u32::MAX, storage_idx: spine.idx }];
        if !root_counted {
            trees.push(labelled_tree(env, &nodes));
            break;
        }
        let k_total = law.sample_size_biased(rng);
        let slot = rng.gen_range(0..k_total);
        spine_slots.push(slot as u32);
        let ok = grow_tree(
            &stepper,
            &rules,
            law,
            spine,
            mask,
            k_total - 1,
            rng,
            &mut counters,
            Some(&mut nodes),
        );
        trees.push(labelled_tree(env, &nodes));
        if !ok {
            break;
        }
        let mut next = spine;
        stepper.step(&mut next, rng);
        mask &= stepper.allowed_mask(&rules, &next);
        spine = next;
    }

    Ok(SnakeDecomposition {
        env: env.clone(),
        kill: rule,
        spine: spine_positions,
        spine_slots,
        trees,
        censored: counters.censored,
    })
}
