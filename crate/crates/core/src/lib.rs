//! Singular-value spectrum diagnostics for embedding matrices and the
//! SoftDecay spectrum transform.
//!
//! * [`matrix`]: embedding matrices, one-sided Jacobi SVD, cosine.
//! * [`spectrum`]: SoftDecay, whitening, exponential-decay prior.
//! * [`metrics`]: TokenUni, RBF, explained variance, LSDS, spectrum stats,
//!   cone bound.
//! * [`sim`]: random transformer stack for depth-wise spectrum traces.
//! * [`eval`]: Spearman evaluation of sentence-pair datasets.
//! * [`io`]: EMB1/CSV matrices, JSONL pairs, JSON reports.
//! * [`cli`]: the `spectral-reshape` command line.

pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod sim;
pub mod spectrum;

pub use error::{Error, Result};
pub use matrix::{cosine, reconstruct, svd, EmbeddingMatrix, SvdFactors};
pub use spectrum::{apply_soft_decay, soft_decay_scalar, transform_spectrum, DecayParams};
