//! Blind compressed sensing over a structured union of subspaces.
//!
//! Signals `x_i = D s_i` live in a union of low-dimensional subspaces, each
//! spanned by one block of columns of an unknown dictionary `D`. Every signal
//! is observed through its own sensing matrix, `y_i = A_i x_i`. This crate
//! learns the block dictionary and the one-block-sparse codes jointly from the
//! `y_i` alone, and ships the surrounding machinery: sensing ensembles, a
//! singular value thresholding completion baseline, checkers for the
//! uniqueness and convergence conditions, patch-based image inpainting and a
//! planted-model experiment harness.

pub mod block_inference;
pub mod completion;
pub mod dict_update;
pub mod error;
pub mod files;
pub mod imaging;
pub mod learner;
pub mod linalg;
pub mod model;
pub mod seeds;
pub mod sensing;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
pub use model::{BlockDictionary, BlockSparseCode, Signal};
pub use sensing::{Measurement, MeasurementSet, SensingMatrix};
