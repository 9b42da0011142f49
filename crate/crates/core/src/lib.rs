//! Bayesian metric learning with the Laplace approximation: a small
//! ℓ2-normalized embedding network, contrastive training, diagonal GGN
//! Hessians, post-hoc and online Gaussian weight posteriors, von
//! Mises-Fisher uncertainty and retrieval/uncertainty metrics.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod contrastive;
pub mod error;
pub mod eval;
pub mod harness;
pub mod laplace;
pub mod net;
pub mod vmf;

pub use error::{Error, Result};
