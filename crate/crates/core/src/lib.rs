//! Learning tree tensor network approximations of black-box functions from
//! point evaluations.
//!
//! Each node of a dimension tree gets a principal subspace estimated from
//! boosted weighted least-squares projections on optimally sampled points.
//! Ranks, leaf polynomial degrees and, optionally, the tree itself are
//! adapted to a target tolerance.

pub mod adaptation;
pub mod basis;
pub mod bench;
pub mod boosted;
pub mod error;
pub mod learner;
pub mod network;
pub mod oracle;
pub mod pca;
pub mod quadrature;
pub mod rng;
pub mod sampling;
pub mod space;
pub mod tree;

pub use error::{Error, Result};
