//! Multi-frequency reconstruction diffusion (MFRD) for short-term load
//! forecasting.
//!
//! The pipeline decomposes each window of a load series with variational
//! mode decomposition, stacks the raw series with its modes, trains a
//! residual-LSTM + Transformer denoiser under a DDPM noising schedule and
//! forecasts by reverse sampling with observed-value replacement.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod harness;
pub mod infer;
pub mod net;
pub mod schedule;
pub mod seed;
pub mod train;
pub mod vmd;

pub use error::{Error, Result};
