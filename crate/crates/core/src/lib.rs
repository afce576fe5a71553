//! Differentiable search of per-block token compression rates for vision
//! transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`autograd`]: dense tensors, a gradient tape and the straight-through
//!   primitive.
//! - [`vit`]: a small pre-norm vision transformer with a compression hook
//!   between attention and MLP in each block.
//! - [`token_ops`]: importance sorting, pruning, merging, uncompression and
//!   physical application of a schedule.
//! - [`ddp`]: the differentiable discrete proxy: candidate rates, learnable
//!   probabilities, token-level probabilities, masks and attention masking.
//! - [`cost`]: analytic FLOPs, the hardware design space and a synthetic
//!   latency/power model.
//! - [`search`]: the rate search loop, hardware co-search, brute-force and
//!   random schedule oracles and fine-tuning.
//! - [`harness`]: datasets, persistence, rendering and reports.

pub mod autograd;
pub mod cost;
pub mod ddp;
pub mod error;
pub mod harness;
pub mod search;
pub mod token_ops;
pub mod vit;

pub use error::{Error, Result};
