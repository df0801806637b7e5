//! Multi-scale transformer pyramid network (MTPNet) for multivariate
//! time-series forecasting, built on a small reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense row-major tensors and the gradient tape.
//! - [`decompose`]: moving-average seasonal/trend split.
//! - [`embedding`]: dimension-invariant (and ablation) embeddings, patching.
//! - [`transformer`]: attention, encoder and decoder blocks.
//! - [`pyramid`]: the multi-level encoder/decoder pyramid and prediction head.
//! - [`framework`]: seasonal + trend composition into a full forecaster.
//! - [`params`]: parameter store, initialization, checkpoint files.
//! - [`optim`]: L1 loss, Adam, cosine annealing, the training loop.
//! - [`data`]: CSV ingestion, splits, normalization, windowing, synthesis.
//! - [`eval`]: metrics, baselines, ablation and look-back sweep harnesses.
//! - [`config`] / [`cli`]: flat key=value configs and the command-line entry.

pub mod cli;
pub mod config;
pub mod data;
pub mod decompose;
pub mod embedding;
pub mod eval;
pub mod framework;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod tape;
pub mod tensor;
pub mod transformer;

pub use tape::{grad_check, Tape, Var};
pub use tensor::{Tensor, TensorError};

use thiserror::Error;

/// Errors raised while assembling or running the forecasting model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("embedding invoked in {actual} mode, expected {expected}")]
    WrongMode {
        expected: &'static str,
        actual: &'static str,
    },
    #[error("head count {heads} does not divide model width {d_model}")]
    HeadsDivide { heads: usize, d_model: usize },
    #[error("DI kernel must be shaped [c, 1, 3, 1], got {0:?}")]
    BadDiKernel(Vec<usize>),
    #[error("decoder history L={history} exceeds look-back I={lookback}")]
    HistoryTooLong { history: usize, lookback: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
