//! Closed-form Pareto-optimal debiasing of vision-language embeddings.
//!
//! The crate builds an attribute subspace from group prototypes, moves each
//! embedding to the minimax-optimal point between keeping its attribute
//! component and removing it, and evaluates the effect with fairness and
//! utility metrics for zero-shot classification, retrieval and generation.
//!
//! Modules, bottom up:
//!
//! - [`geometry`]: embeddings, attribute subspace, orthogonal decomposition
//! - [`prototypes`]: group prototypes as spherical means of prompt variants
//! - [`solver`]: closed-form debiasing, its numeric oracle and bounds
//! - [`metrics`]: equal opportunity, MaxSkew, statistical parity, recall, F1
//! - [`eval`]: zero-shot classification and retrieval drivers, synthetic data
//! - [`io`]: embedding, subspace and report file formats
//! - [`cli`]: the `pareto-debias` command line

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
mod linalg;
pub mod metrics;
pub mod prototypes;
pub mod solver;

pub use error::{Error, Result};
pub use geometry::{
    build_subspace, AttributeSubspace, Decomposition, Embedding, GroupPrototype, Labels, Modality,
};
pub use solver::{DebiasResult, Degeneracy, Solver};

/// Vector helpers shared with integration tests and benchmarks.
pub mod vector {
    pub use crate::linalg::{cosine, dot, norm};
}
