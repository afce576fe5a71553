//! A small pre-norm vision transformer.
//!
//! Blocks compute `X̂ = X + Attn(LN(X))`, hand `X̂` to a [`CompressionHook`],
//! then apply `X̂' + MLP(LN(X̂'))`. The taped path here is used for training
//! and rate search; the tape-free path in [`crate::token_ops`] runs the same
//! kernels over physically shrunk token sets.

pub mod checkpoint;
mod config;
mod model;
mod params;

pub use config::ModelConfig;
pub use model::{
    attention, block_forward, classify, cross_entropy, forward_image, mlp, patch_embed, patchify,
    AttentionState, CompressionHook, HookInput, HookOutput, NoCompression, TapeForward,
};
pub use params::{BackboneParams, BlockParams, BoundBlock, BoundHead, BoundParams, HeadParams};
