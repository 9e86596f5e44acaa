//! Contrastive spatial pre-training at desk scale.
//!
//! The crate pre-trains a location encoder against frozen image feature
//! vectors with contrastive objectives, fine-tunes it on few-shot labeled
//! data with a presence-absence loss, and combines the location and image
//! posteriors at inference time.
//!
//! Modules, bottom to top:
//! - [`tensor`]: dense f64 math, reverse-mode differentiation, Adam.
//! - [`encoder`]: sinusoidal positional features plus a dropout-bearing MLP
//!   mapping sphere coordinates to embeddings.
//! - [`dataset`]: synthetic geo-tagged data, file I/O, stratified few-shot
//!   sampling, minibatching.
//! - [`objectives`]: positive/negative pair construction and the NCE, MC,
//!   and MSE pre-training losses.
//! - [`supervised`]: presence-absence fine-tuning, the linear classifier
//!   head, and combined Bayesian inference.
//! - [`cluster`]: Ward-linkage clustering of exported embedding grids.
//! - [`pipeline`]: configuration, checkpoints, reports, and the
//!   pretrain/finetune/evaluate/export orchestration behind the CLI.

pub mod cluster;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod supervised;
pub mod tensor;

pub use error::{Error, Result};
