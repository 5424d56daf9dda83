use crate::codec::{mulaw_encode, split_coarse_fine, MuLawSpec};
use crate::dsp::{mel_spectrogram, preemphasis, MelConfig, MelFrameSeq, PqmfBank, Waveform, PREEMPHASIS_ALPHA};
use crate::error::{Error, Result};
use crate::model::{utterance_windows, NetworkConfig};

use super::graph::Segment;

/// Conditioning frames and target bins of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub frames: MelFrameSeq,
    /// Target bins `[step][band]`.
    pub coarse: Vec<Vec<usize>>,
    pub fine: Vec<Vec<usize>>,
}

impl Utterance {
    /// Mel features from the waveform; targets from the mu-law bins of the
    /// PQMF bands of the pre-emphasized waveform. The longer of the two is
    /// trimmed so that `steps = frames × steps_per_frame`.
    pub fn from_waveform(wave: &Waveform, cfg: &NetworkConfig, bank: &PqmfBank) -> Result<Self> {
        if wave.sample_rate != cfg.sample_rate {
            return Err(Error::Config(format!(
                "waveform at {} Hz, model at {} Hz",
                wave.sample_rate, cfg.sample_rate
            )));
        }
        let mel = mel_spectrogram(&wave.samples, &MelConfig::for_sample_rate(wave.sample_rate)?)?;
        Self::from_parts(mel, &wave.samples, cfg, bank)
    }

    pub fn from_parts(mut mel: MelFrameSeq, samples: &[f64], cfg: &NetworkConfig, bank: &PqmfBank) -> Result<Self> {
        if mel.dim != cfg.cond_dim {
            return Err(Error::shape("feature dimension", cfg.cond_dim, mel.dim));
        }
        if bank.bands() != cfg.bands {
            return Err(Error::shape("PQMF bands", cfg.bands, bank.bands()));
        }
        let bands = bank.analyze(&preemphasis(samples, PREEMPHASIS_ALPHA));
        let spf = cfg.steps_per_frame();
        let frames = mel.frames().min(bands.len / spf);
        if frames == 0 {
            return Err(Error::Empty("utterance shorter than one frame"));
        }
        mel.truncate(frames);
        let spec = MuLawSpec::default();
        let mut coarse = Vec::with_capacity(frames * spf);
        let mut fine = Vec::with_capacity(frames * spf);
        for t in 0..frames * spf {
            let (c, f): (Vec<usize>, Vec<usize>) = (0..cfg.bands)
                .map(|m| split_coarse_fine(mulaw_encode(bands.get(m, t), &spec)))
                .unzip();
            coarse.push(c);
            fine.push(f);
        }
        Ok(Self {
            frames: mel,
            coarse,
            fine,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.frames()
    }

    /// Consecutive segments of `seg_frames` frames; a shorter tail is dropped
    /// unless it is the only segment.
    pub fn segments(&self, cfg: &NetworkConfig, seg_frames: usize) -> Result<Vec<Segment>> {
        let frames: Vec<f64> = self.frames.data.iter().map(|&v| v as f64).collect();
        let windows = utterance_windows(cfg, &frames)?;
        let spf = cfg.steps_per_frame();
        let n = self.frame_count();
        let count = (n / seg_frames).max(1);
        Ok((0..count)
            .map(|s| {
                let lo = s * seg_frames;
                let hi = (lo + seg_frames).min(n);
                Segment {
                    windows: windows[lo..hi].to_vec(),
                    coarse: self.coarse[lo * spf..hi * spf].to_vec(),
                    fine: self.fine[lo * spf..hi * spf].to_vec(),
                }
            })
            .collect())
    }
}
