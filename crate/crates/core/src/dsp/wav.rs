//! Mono 16-bit PCM WAV files at 16 or 24 kHz.

use std::path::Path;

use crate::error::{Error, Result};

pub const SUPPORTED_RATES: [u32; 2] = [16_000, 24_000];

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub sample_rate: u32,
    /// Normalized to `[-1, 1]`.
    pub samples: Vec<f64>,
}

impl Waveform {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self {
            sample_rate,
            samples,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn check_rate(sample_rate: u32) -> Result<()> {
    if SUPPORTED_RATES.contains(&sample_rate) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "sample rate {sample_rate} not supported (16000 or 24000)"
        )))
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM",
            path.display()
        )));
    }
    check_rate(spec.sample_rate)?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(spec.sample_rate, samples))
}

/// Rounds to 16-bit PCM with saturation.
pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    check_rate(wave.sample_rate)?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = hound::WavWriter::new(std::io::BufWriter::new(file), spec)?;
    for &s in &wave.samples {
        w.write_sample(to_pcm16(s))?;
    }
    w.finalize()?;
    Ok(())
}
