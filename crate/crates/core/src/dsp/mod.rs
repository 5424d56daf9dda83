//! Signal processing front end: STFT, mel features, pre-emphasis, PQMF and WAV I/O.

mod emphasis;
mod mel;
mod pqmf;
mod stft;
pub mod wav;

pub use wav::Waveform;

pub use emphasis::{deemphasis, deemphasis_in_place, preemphasis, Deemphasis, PREEMPHASIS_ALPHA};
pub use mel::{log_spectral_distortion, mel_spectrogram, MelConfig, MelFilterbank, MelFrameSeq, LOG_FLOOR, N_MELS};
pub use pqmf::{PqmfBank, PqmfConfig, PqmfSynthesisStream, SubbandTensor};
pub use stft::{Spectrogram, Stft, StftConfig};
