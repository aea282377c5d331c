//! Hierarchical graph classifier.

pub mod hgnn;
pub mod layers;

pub use hgnn::{DegreeStats, ForwardVars, GraphTensors, Hgnn, InputDims, Mode, ModelConfig, Standardizer};
