//! Dense-tensor numerical core: n-dimensional `Tensor<T>` over f32/f64, a
//! Wengert-tape reverse-mode autodiff engine, the Adam optimizer, a
//! finite-difference gradient-check harness, and the binary tensor file
//! format shared by features and checkpoints.

pub mod adam;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod par;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{clip_global_norm, AdamParams, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{GradStore, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};

use thiserror::Error;

/// Errors raised by tensor operations and the autodiff tape.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value (NaN or Inf)")]
    NonFinite { op: &'static str },
    #[error("{op}: produced a non-finite gradient (NaN or Inf)")]
    NonFiniteGrad { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("tensor file format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
