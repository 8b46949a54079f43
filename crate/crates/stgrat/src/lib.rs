//! ST-GRAT: a spatio-temporal graph attention network for road traffic
//! speed forecasting.
//!
//! The crate bundles the full pipeline: road-graph construction with
//! diffusion transition matrices, LINE node embeddings, the
//! encoder-decoder attention model (spatial attention with sentinel
//! vectors, diffusion priors, and direction-split heads; temporal
//! self-attention), training with warmup Adam and scheduled sampling,
//! and an evaluation harness with horizon/time-range slicing and
//! changepoint-based impeded-interval analysis.
//!
//! Start with the runnable programs under `examples/`, or the `stgrat`
//! binary for end-to-end runs from CSV inputs.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
