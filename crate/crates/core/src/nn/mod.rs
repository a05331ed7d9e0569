//! Dense numerics with explicit backward rules.
//!
//! This is not a general autodiff engine. Each primitive exposes a forward
//! function and a matching backward function that maps an upstream gradient to
//! input gradients; composite layers (graph attention, global attention) chain
//! them by hand. [`gradcheck`] verifies every rule against central finite
//! differences.

mod array;
pub mod attention;
pub mod gat;
pub mod gradcheck;
pub mod ops;
mod params;
mod sparse;

pub use array::Matrix;
pub use params::{adam_step, decayed_lr, AdamConfig, Param, ParamStore};
pub use sparse::SparsePattern;

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("parameter {0} has no gradient for this step")]
    MissingGradient(String),
    #[error("gradient applied to frozen parameter {0}")]
    FrozenViolation(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
}

pub type Result<T> = core::result::Result<T, NnError>;

pub(crate) fn check_shape(
    op: &'static str,
    left: (usize, usize),
    right: (usize, usize),
) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch { op, left, right })
    }
}
