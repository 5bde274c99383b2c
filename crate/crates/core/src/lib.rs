//! Masked dual-editing of multi-object images through inference-time latent
//! optimization in a text-conditioned diffusion model.
//!
//! The crate ships a small trainable denoiser over synthetic shape scenes so
//! every stage (inversion, attention control, losses, guided editing and
//! evaluation) runs end to end on a CPU.

pub mod attention;
pub mod backend;
pub mod error;
pub mod experiments;
pub mod image;
pub mod inversion;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod tokens;
pub mod types;

pub use error::{MdeError, Result};
pub use mde_autograd::{Scalar, Tensor};

use sha2::{Digest, Sha256};

/// Hex SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub type ToyDenoiser32 = backend::ToyDenoiser<f32>;
pub type ToyDenoiser64 = backend::ToyDenoiser<f64>;
pub type LatentGrid32 = types::LatentGrid<f32>;
pub type LatentGrid64 = types::LatentGrid<f64>;
pub type AttentionStack32 = types::AttentionStack<f32>;
pub type AttentionStack64 = types::AttentionStack<f64>;
