//! Distributed Dykstra splitting for consensus optimization on graphs.
//!
//! Each node i of an undirected graph owns a convex function f_i on R^m and
//! every edge carries an agreement constraint between its endpoint blocks.
//! The solver minimizes
//!
//! ```text
//!   (1/2) ||x - anchor||^2 + sum_i f_i(x) + sum_edges indicator(agreement)
//! ```
//!
//! over the product space (R^m)^|V| by block-coordinate ascent on the
//! Fenchel dual: every inner step updates one set of dual blocks (an edge
//! projection, an exact prox, or a bundle-style linearization step for
//! nodes treated through subgradients), and the aggregate dual vector is
//! re-spread over the active edges at the start of every cycle, which lets
//! the active edge set change over time without losing progress.
//!
//! The crate ships the solver engine, instance generators with planted
//! optima, schedule builders and validators, rate-fitting and probe
//! analysis, and a CLI (`dykstra gen|run|verify|rates`) around them.

pub mod analysis;
pub mod engine;
pub mod error;
pub mod funcs;
pub mod instances;
pub mod rng;
pub mod schedule;
pub mod stacked;
pub mod topology;

pub use error::{Error, Result};
pub use stacked::StackedVector;
