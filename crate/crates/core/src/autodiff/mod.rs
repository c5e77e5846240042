//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during a
//! forward pass; [`Tape::backward`] then walks the record in reverse and
//! returns [`Gradients`] for every leaf created with [`Tape::param`].
//! Parameters live outside the tape in a [`ParamSet`] and are re-bound to a
//! fresh tape for every minibatch, after which [`Adam`] applies the update.

mod dropout;
mod optim;
mod params;
mod tape;
mod tensor;

pub use dropout::variational_dropout_mask;
pub use optim::{Adam, AdamConfig};
pub use params::{Checkpoint, CheckpointEntry, ParamSet};
pub use tape::{elu, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not match data length {len}")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
