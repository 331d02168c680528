//! The two-step generator: an encoder, a pointer decoder that predicts a
//! monotone alignment, and a decoder that emits all target words in parallel.

mod autoregressive;
mod checkpoint;
mod config;
mod generator;
mod gumbel;
mod layers;

pub use autoregressive::{ArGenerator, StepOutput};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Activation, AlignmentMode, ModelConfig};
pub use generator::{Encoded, Generator, Source};
pub use gumbel::{gumbel_noise, gumbel_sample};
pub use layers::{block_keys, Ctx, Packing};
pub(crate) use generator::{enc_layer, run_encoder, EncLayer};
pub(crate) use layers::{sinusoid_table, Builder};
