//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Everything is 64-bit floats. A [`Tape`] is rebuilt for every forward pass
//! (define-by-run), which keeps recurrent unrolls of arbitrary length simple
//! and makes gradients bitwise reproducible: the same tape content always
//! replays in the same order.
//!
//! The building blocks are deliberately few:
//! - [`Tensor`]: flat storage with a shape, used for parameters and gradients.
//! - [`ParamStore`] / [`ParamId`]: named, optionally trainable parameters.
//! - [`Tape`] / [`Var`]: the computation graph and handles into it.
//! - [`DenseNet`] / [`GruCell`]: the two network types used downstream.
//! - [`AdamOpt`]: Adam with global-norm clipping and decoupled weight decay.
//! - [`record`]: a flat, versioned binary format for parameter groups.

mod adam;
mod check;
mod net;
mod params;
pub mod record;
mod tape;
mod tensor;

pub use adam::AdamOpt;
pub use check::{grad_check_dense, grad_check_fn, grad_check_gru};
pub use net::{Activation, DenseNet, GruCell, OutputInit};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Errors surfaced by the autodiff layer.
#[derive(Debug, thiserror::Error)]
pub enum NdError {
    #[error("backward() requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("NaN gradient in parameter group '{0}'")]
    NanGradient(String),
    #[error("record: {0}")]
    Record(#[from] record::RecordError),
}
