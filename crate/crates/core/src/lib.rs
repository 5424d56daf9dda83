//! Multiband WaveRNN vocoder with data-driven linear prediction in logit space.
//!
//! The crate is organised bottom-up:
//!
//! * [`codec`] 10-bit mu-law companding and the coarse/fine bit split.
//! * [`dsp`] STFT, mel features, pre-emphasis, PQMF filterbanks and WAV I/O.
//! * [`model`] the network graph (reference forward pass, generic over float width).
//! * [`sampler`] Gumbel-max sampling and the straight-through discretization.
//! * [`loss`] cross-entropy and multi-resolution STFT objectives (with gradients).
//! * [`sparsify`] block magnitude pruning of the large GRU's recurrent matrices.
//! * [`train`] reverse-mode gradients, RAdam and the truncated-BPTT training loop.
//! * [`engine`] the streaming f32 synthesizer, RTF benchmarking and FLOP accounting.
//! * [`modelfile`] / [`featfile`] binary interchange formats.

pub mod codec;
pub mod dsp;
pub mod engine;
pub mod error;
pub mod featfile;
pub mod loss;
pub mod model;
pub mod modelfile;
pub mod real;
pub mod sampler;
pub mod sparsify;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
