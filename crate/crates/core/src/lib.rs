//! Next-day physical-activity forecasting from minute-level wearable and
//! app-engagement streams.
//!
//! The crate covers the whole pipeline:
//!
//! - [`ingest`] parses minute streams, aggregates user-days into the 57-dim
//!   engagement and 8-dim activity feature vectors, and applies wear-time
//!   validity filters.
//! - [`dataset`] builds sliding windows, participant-level splits, z-score
//!   normalization, goal labels and engagement-percentile cohorts.
//! - [`autodiff`] is a small reverse-mode engine (dense, LSTM, losses, Adam,
//!   gradient checking) used by every neural forecaster.
//! - [`forecasters`] holds the early/late-fusion and unimodal LSTMs, linear
//!   regression and ARIMA baselines.
//! - [`metrics`] computes MAE/RMSE/NRMSE/accuracy/F1 and runs the experiment
//!   protocols that produce the report tables.
//! - [`synth`] generates calibrated synthetic cohorts.
//! - [`cli`] wires everything into the `stepcast` runner: configs,
//!   checkpoints, report files.
//!
//! Runnable walkthroughs for each capability live under `examples/`.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod forecasters;
pub mod ingest;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
