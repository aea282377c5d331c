//! Perfusion curves and their discrete kinetic codes.

pub mod curves;
pub mod vqvae;

pub use curves::{extract_curves, zscore, PerfusionVolume, TimeIntensityCurve, ZScored};
pub use vqvae::{quantize, vq_loss, Codebook, VqVae, VqVaeArch, VqVaeTrainConfig};
