//! A small vision transformer with prototype heads, written against
//! `ndarray` with an explicit backward pass.
//!
//! The model is generic over [`Scalar`] so that the same code trains in
//! `f32` and is gradient-checked in `f64`.

mod channels;
mod checkpoint;
mod config;
mod layers;
mod params;
mod scalar;
mod vit;

pub use channels::split_channels;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{EncoderConfig, FfnType};
pub use params::{ema_update, init_params, Block, Ffn, Head, LayerNorm, Linear, ModelParams};
pub use scalar::Scalar;
pub use vit::{
    backward, batch_patches, encode, forward, patchify, BatchOutputs, ForwardCache, HeadRows,
    OutputGrads, TokenOutputs,
};
