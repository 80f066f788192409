//! Binary-CNN local feature descriptors.
//!
//! This crate implements a detect-then-describe feature pipeline built around
//! binary convolutional descriptor networks:
//!
//! - [`tensor`]: dense tensor numerics with analytic backward passes for every
//!   layer the descriptor architectures use, plus the Adam optimizer.
//! - [`binquant`]: binary quantization math and bit-packed XNOR/popcount
//!   convolution kernels.
//! - [`model`]: the descriptor network variants (`hynet_ref`, `didymos`,
//!   `didymos_pm`, `didymos_pm_prime`), end-to-end forward/backward,
//!   checkpointing, packed deployment export, and FLOP/BOP accounting.
//! - [`loss`]: the hybrid triplet loss with in-batch hardest-negative mining,
//!   second-order similarity regularization, and the binary-descriptor
//!   reformulation via the normalized Hamming distance.
//! - [`data`]: synthetic multi-view scene generation, ground-truth patch
//!   correspondence construction, the patch archive format, and batch sampling.
//! - [`detect`]: DoG and FAST keypoint detectors for patch extraction.
//! - [`matcheval`]: descriptor matching, FPR95 / precision / recall / accuracy
//!   metrics, and relative-pose estimation with pose-AUC scoring.
//! - [`cli`]: the `didymos` command-line entry points wiring it all together.
//!
//! The runnable programs under `examples/` walk through each major capability;
//! the thin `didymos` binary exposes the same functionality as subcommands.

pub mod binquant;
pub mod cli;
pub mod data;
pub mod detect;
pub mod loss;
pub mod matcheval;
pub mod model;
pub mod tensor;

mod util;

pub use util::{derive_seed, fnv1a64, Fnv1a};

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A convolution or projection produced an impossible geometry.
    #[error("geometry error in {op}: {detail}")]
    Geometry { op: &'static str, detail: String },

    /// Batch statistics cannot be computed (e.g. batch size < 2).
    #[error("statistics error in {op}: {detail}")]
    Statistics { op: &'static str, detail: String },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Input data violates a precondition (empty set, bad entry, ...).
    #[error("invalid input for {op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    /// A serialized artifact is corrupt, truncated, or of the wrong version.
    #[error("format error in {artifact}: {detail}")]
    Format { artifact: &'static str, detail: String },

    /// Configuration value out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn geometry(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Geometry {
            op,
            detail: detail.into(),
        }
    }

    pub fn statistics(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Statistics {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid_input(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(artifact: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            artifact,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
