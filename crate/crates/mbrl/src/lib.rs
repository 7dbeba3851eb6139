//! Desk-scale unsupervised model-based reinforcement learning.
//!
//! The pieces, bottom to top:
//! - [`worldmodel`]: discrete-latent recurrent state-space model (encoder,
//!   decoder, prior dynamics, posterior, reward heads) trained by ELBO with
//!   KL balancing and free nats.
//! - [`behavior`]: latent actor and critic trained purely in imagination with
//!   lambda-return targets and dynamics-backprop actor updates.
//! - [`planner`]: hybrid MPPI planning seeded by the imagination-trained
//!   actor and scored by the reward head plus critic.
//! - [`explore`]: seven intrinsic reward sources with their normalization and
//!   fine-tuning skill selection.
//! - [`envs`]: two toy continuous-control domains (one dense, one sparse)
//!   plus robustness perturbation wrappers.
//! - [`pipeline`]: the pre-train / snapshot / fine-tune protocol, experiment
//!   grids, persistence, and score normalization.
//! - [`analysis`]: latent-dynamics discrepancy, reward/performance
//!   correlation, and zero-shot MPC evaluation.
//!
//! The `examples/` directory has one runnable example per capability; the
//! `mbrl` binary exposes the same machinery as subcommands.

pub mod analysis;
pub mod behavior;
pub mod config;
pub mod envs;
pub mod explore;
pub mod pipeline;
pub mod planner;
pub mod worldmodel;

// pub use config::RunConfig; // re-enabled once config lands

/// Crate-level error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("NaN in {component} output")]
    NanOutput { component: String },
    #[error("loss diverged: {0}")]
    Diverged(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Grad(#[from] ndgrad::NdError),
    #[error(transparent)]
    Record(#[from] ndgrad::record::RecordError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
