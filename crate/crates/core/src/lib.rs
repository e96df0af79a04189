//! Reference-guided face inpainting: a one-stage generator that fills large
//! masked regions under two control signals taken from a reference image — a
//! global identity embedding injected through Half-AdaIN decoder blocks, and
//! per-component texture codes injected through Component-Wise Style
//! Injectors — trained with a three-mode scheme and evaluated with
//! distribution, perceptual, identity-retrieval, and segmentation metrics.
//!
//! All numerics are generic over the scalar type ([`Scalar`]): training runs
//! in `f32` ([`Train`]), gradient verification in `f64` ([`Check`]).

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod graph;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Scalar type used for training and inference.
pub type Train = f32;

/// Scalar type used for gradient checks and numeric oracles.
pub type Check = f64;
