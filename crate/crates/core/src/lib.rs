//! Hierarchical habitat graphs for perfusion imaging.
//!
//! The pipeline turns a 4-D perfusion scan with structural channels into a
//! two-level graph (kinetic habitats over supervoxels), classifies it with a
//! hierarchical message-passing network and maps gradient saliency back to
//! voxels.

// Negated comparisons reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod autograd;
pub mod config;
pub mod error;
pub mod graphs;
pub mod model;
pub mod nifti;
pub mod optim;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod saliency;
pub mod seed;
pub mod signal;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
