//! Latent-diffusion text-to-speech sandbox.
//!
//! The crate implements a complete, CPU-only latent diffusion TTS stack:
//! closed-form diffusion math (scaled cosine schedule, v-parameterization,
//! asymmetric loss weighting), a minimal tape-based reverse-mode autodiff
//! layer, the U-Audio Transformer denoiser (1D U-Net around a transformer
//! backbone with register tokens, dynamic position bias and position-aware
//! cross-attention), DDPM/DDIM samplers with classifier-free guidance and
//! prompt inpainting, and a seeded synthetic latent codec whose exact oracle
//! decoder makes alignment and speaker-similarity claims testable end to end.

pub mod checkpoint;
pub mod cli;
pub mod conditioning;
pub mod diffusion;
pub mod duration;
pub mod params;
pub mod sampler;
pub mod seq;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod training;
pub mod uat;

use thiserror::Error;

/// Crate-wide error type. `User` maps to CLI exit code 1, everything else
/// (invariant violations, corrupt state) maps to exit code 2.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    User(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code classification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::User(_) | Error::Io(_) | Error::Format(_) => 1,
            _ => 2,
        }
    }
}
