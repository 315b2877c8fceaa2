//! Monte Carlo laboratory for random walks on trees in a branching random
//! environment at the boundary case.
//!
//! The modules follow the life of a simulation: [`env_model`] fixes the offspring
//! law, [`env_tree`] realises environments lazily, [`walker`] runs the quenched walk,
//! [`quenched_exact`] evaluates closed-form quenched quantities, [`onedim`] handles
//! the one-dimensional walk of the many-to-one lemma, [`limit_constants`] builds the
//! meander constants and [`experiments`] confronts everything with the scaling laws.

pub mod env_model;
pub mod env_tree;
pub mod error;
pub mod experiments;
pub mod limit_constants;
pub mod onedim;
pub mod par;
pub mod quenched_exact;
pub mod rng;
pub mod stats;
pub mod walker;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
