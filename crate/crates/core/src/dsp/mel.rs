use serde::{Deserialize, Serialize};

use super::stft::{Stft, StftConfig};
use crate::error::{Error, Result};

pub const N_MELS: usize = 80;
/// Floor applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sample_rate: u32,
    pub stft: StftConfig,
}

impl MelConfig {
    /// 10 ms shift, 27.5 ms Hann window; FFT 2048 at 24 kHz, 1024 at 16 kHz.
    pub fn for_sample_rate(sample_rate: u32) -> Result<Self> {
        let fft = match sample_rate {
            24_000 => 2048,
            16_000 => 1024,
            sr => {
                return Err(Error::Config(format!(
                    "unsupported sample rate {sr} (expected 16000 or 24000)"
                )))
            }
        };
        let shift = sample_rate as usize / 100;
        let window = sample_rate as usize * 275 / 10_000;
        Ok(Self {
            n_mels: N_MELS,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            sample_rate,
            stft: StftConfig::new(fft, shift, window)?,
        })
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, unit peak, `[n_mels][bins]`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        if cfg.n_mels == 0 || cfg.fmax <= cfg.fmin {
            return Err(Error::Config("bad mel band layout".into()));
        }
        let bins = cfg.stft.bins();
        let (mlo, mhi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.stft.fft_length as f64;
        let mut weights = vec![0.0; cfg.n_mels * bins];
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * bins..(m + 1) * bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (mid - lo);
                let down = (hi - f) / (hi - mid);
                *w = up.min(down).max(0.0);
            }
            // Filters narrower than a bin still get the nearest bin.
            if row.iter().all(|&w| w == 0.0) {
                let k = ((mid / bin_hz).round() as usize).min(bins - 1);
                row[k] = 1.0;
            }
        }
        Ok(Self {
            n_mels: cfg.n_mels,
            bins,
            weights,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.bins..(m + 1) * self.bins]
    }

    pub fn apply(&self, mags: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(mags).map(|(w, a)| w * a).sum();
        }
    }
}

/// Sequence of conditioning frames, row-major `[frame][dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelFrameSeq {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl MelFrameSeq {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::shape("mel frame data", dim, data.len() % dim.max(1)));
        }
        Ok(Self { dim, data })
    }

    pub fn frames(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dim)
    }

    pub fn truncate(&mut self, frames: usize) {
        self.data.truncate(frames * self.dim);
    }
}

/// Log mel magnitude spectrogram, `ln(max(mel, 1e-9))`.
pub fn mel_spectrogram(wave: &[f64], cfg: &MelConfig) -> Result<MelFrameSeq> {
    let stft = Stft::new(cfg.stft)?;
    let fb = MelFilterbank::new(cfg)?;
    mel_with(&stft, &fb, wave)
}

pub(crate) fn mel_with(stft: &Stft, fb: &MelFilterbank, wave: &[f64]) -> Result<MelFrameSeq> {
    let spec = stft.forward(wave)?;
    let mut data = Vec::with_capacity(spec.frames * fb.n_mels);
    let mut mags = vec![0.0; spec.bins];
    let mut mel = vec![0.0; fb.n_mels];
    for f in 0..spec.frames {
        for (m, c) in mags.iter_mut().zip(spec.frame(f)) {
            *m = c.norm();
        }
        fb.apply(&mags, &mut mel);
        data.extend(mel.iter().map(|&v| v.max(LOG_FLOOR).ln() as f32));
    }
    Ok(MelFrameSeq {
        dim: fb.n_mels,
        data,
    })
}

/// Log spectral distortion in dB between two log-mel sequences: per frame the
/// RMS over mel bins of `20 log10(|A| / |B|)`, averaged over frames. The longer
/// input is trimmed to the shorter one.
pub fn log_spectral_distortion(a: &MelFrameSeq, b: &MelFrameSeq) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::shape("mel dimension", a.dim, b.dim));
    }
    let frames = a.frames().min(b.frames());
    if frames == 0 {
        return Err(Error::Empty("no frames to compare"));
    }
    let scale = 20.0 / std::f64::consts::LN_10;
    let total: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let ms = x
                .iter()
                .zip(y)
                .map(|(&p, &q)| (scale * (p as f64 - q as f64)).powi(2))
                .sum::<f64>()
                / a.dim as f64;
            ms.sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}
