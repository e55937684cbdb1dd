//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a `1×1` loss walks the recording in reverse and
//! returns [`Gradients`] for every variable and parameter leaf. Parameters live
//! in a [`ParamStore`] and are copied onto the tape with [`Tape::param`].

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{gradient_check, param_gradient_check, relative_error, GradCheckReport, InputCheck};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Matrix, Tape, Var};

pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("log: non-positive entry {value} at ({row}, {col})")]
    NonPositiveLog { row: usize, col: usize, value: f64 },
    #[error("l2_row_normalize: row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be 1x1, got {0:?}")]
    NotScalar(Shape),
    #[error("variable does not belong to this tape")]
    ForeignVar,
}
