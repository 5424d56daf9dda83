//! Reference forward pass of the network, generic over float width.

mod config;
pub mod layers;
mod params;
mod step;

pub use config::{NetworkConfig, BLOCK_ROWS};
pub use params::{
    BlockMask, BlockSparse, DualFcParams, GruParams, Linear, Matrix, ModelParams,
    ResidualParams, TensorMut, TensorRef, SPARSE_TENSOR,
};
pub use step::{
    conditioning, full_step, head_logits, initial_bins, utterance_windows, Head, StepOutput,
    SynthState,
};
