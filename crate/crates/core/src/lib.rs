//! Location-scale Gaussian VAE for probabilistic time-series forecasting.
//!
//! A patch encoder maps the lookback window to a diagonal Gaussian latent,
//! a linear map evolves past latents into future ones, and a shared decoder
//! emits a per-step mean and scale that are denormalized back to the data
//! scale. Training minimizes Gaussian NLL on both spans plus a KL term.

// `!(x > 0.0)` also rejects NaN, which is the point of those guards.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod revin;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{Dataset, PatchGrid, SeriesWindow, SplitRatios, SyntheticKind, SyntheticSpec};
pub use error::{Error, Result};
pub use metrics::{EvalConfig, EvalResult};
pub use model::{Mode, Model, ModelConfig, ModelParams, PredictiveDistribution, SampleOptions};
pub use objective::{LossBreakdown, LossKind};
pub use revin::InstanceStats;
pub use rng::RngStream;
pub use tensor::Tensor;
pub use training::{AdamConfig, TrainConfig, TrainReport};
