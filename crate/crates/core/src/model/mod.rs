//! The RETRO encoder–decoder.
//!
//! The decoder is a pre-norm causal transformer; selected layers add a
//! chunked cross-attention (CCA) sublayer over encoded neighbors. Each
//! retrieved `[N, F]` pair is encoded separately by a small transformer
//! whose cross-attention layers read the decoder states of the chunk that
//! retrieved it, captured just before the first CCA sublayer. Every
//! attention carries a learned T5-style bias with one scalar per head per
//! relative offset.

mod config;
mod forward;
mod generate;
mod neighbors;
mod params;

pub use config::{Activation, RetroConfig, StackConfig, PRESETS};
pub use forward::{cca_block, forward, forward_off, forward_on, loss_and_grads, ForwardOutput, Mode};
pub use generate::{generate, Sampling};
pub use neighbors::NeighborBatch;
pub use params::{ModelParams, INIT_STD};
