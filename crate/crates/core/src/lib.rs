//! Parseval networks: feed-forward networks whose linear, convolutional and
//! aggregation layers are kept (approximately) 1-Lipschitz during training.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense matrices, operator norms, singular values.
//! - [`netgraph`]: computation graphs with forward evaluation and exact
//!   backpropagation.
//! - [`constraints`]: the orthonormality retraction, simplex projection and
//!   convolution rescaling.
//! - [`attacks`]: fast gradient sign attacks and SNR bookkeeping.
//! - [`lipschitz`]: compositional Lipschitz upper bounds over a graph.
//! - [`diagnostics`]: singular-value histograms and local covariance dimension.
//! - [`trainer`]: momentum SGD with interleaved constraint steps.
//! - [`io`]: dataset loaders, augmentation, config files and checkpoints.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the `*64` aliases
//! below name the double-precision instantiations used by the CLI.

pub mod attacks;
pub mod constraints;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod lipschitz;
pub mod linalg;
pub mod netgraph;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use netgraph::{Batch, Graph, GraphBuilder, NodeId, NodeKind, Params};
pub use scalar::Real;

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Params64 = Params<f64>;
pub type Params32 = Params<f32>;
pub type Batch64 = Batch<f64>;
pub type Batch32 = Batch<f32>;
pub type Dataset64 = io::Dataset<f64>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
