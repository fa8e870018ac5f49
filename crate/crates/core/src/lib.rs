//! Simulation and numerical-verification toolkit for critical branching
//! random walks ("snakes") in random environments on `Z^d`.
//!
//! The crate is organized around a pipeline:
//!
//! * [`environment`] — random conductance / trap / mixed environments on
//!   lattice boxes, with quenched transition kernels and site weights.
//! * [`genealogy`] — critical offspring laws and the tree flavors built from
//!   them (plain trees, shifted-root trees, spine steps).
//! * [`kernel`] — exact constrained heat kernels and Green's functions via
//!   operator iteration and linear solves.
//! * [`snake`] — Monte Carlo simulation of the critical snake through its
//!   spine decomposition, with box and trap killing.
//! * [`dirichlet`] — effective conductance and harmonic solves.
//! * [`experiments`] — Monte Carlo harnesses checking moment identities and
//!   scaling laws against the exact solvers.

pub mod dirichlet;
pub mod environment;
pub mod experiments;
pub mod genealogy;
pub mod kernel;
pub mod lattice;
pub mod report;
pub mod rng;
pub mod snake;

pub use environment::{DistributionSpec, EnvKind, EnvSpec, Environment};
pub use genealogy::{FiniteTree, OffspringLaw, RootLaw};
pub use lattice::LatticeBox;
pub use report::ExperimentReport;
pub use snake::{KillRule, LocalTimeSample};
