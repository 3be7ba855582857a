//! Spectrum-conditioned one-shot graph generation.
//!
//! A graph is produced in three conditional stages: the smallest non-trivial
//! eigenvalues of the normalized Laplacian, then matching eigenvectors on the
//! Stiefel manifold, then an adjacency matrix refined from the rough Laplacian
//! `U diag(λ) Uᵀ`. Each stage is a generator/discriminator pair trained with a
//! one-sided Lipschitz penalty.
//!
//! The crate also carries everything needed around the models: dense linear
//! algebra, a reverse-mode tape, graph statistics, synthetic corpora and the
//! MMD-based evaluation suite.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod graphs;
pub mod linalg;
pub mod manifold;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
