//! Dense matrices and reverse-mode gradients for small MLPs.

mod adam;
mod gradcheck;
mod matrix;
mod mlp;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use mlp::{Activation, Dense, Mlp};
pub use tape::{
    frobenius_sq, leaky_relu, relu, sigmoid_bce, softmax_cross_entropy, Gradients, Tape, Var,
};

/// Leaky-ReLU negative slope used wherever the activation is selected by tag.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MathError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("expected {expected} entries, got {actual}")]
    DataLength { expected: usize, actual: usize },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: argument outside the function's domain")]
    Domain { op: &'static str },
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("binary target expected, got {value}")]
    NonBinaryTarget { value: f64 },
    #[error("expected a 1x1 scalar, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("loss is not finite")]
    NonFiniteLoss,
}
