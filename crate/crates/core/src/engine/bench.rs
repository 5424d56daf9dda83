use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::{kernels, EngineModel, Synthesizer};
use crate::dsp::wav::{read_wav, write_wav};
use crate::dsp::{mel_spectrogram, MelConfig, Waveform};
use crate::error::Result;
use crate::sampler::stream_rng;

/// Real-time factor with its breakdown, all times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub sample_rate: u32,
    pub audio_secs: f64,
    pub frames: usize,
    pub total_secs: f64,
    pub io_secs: f64,
    pub features_secs: f64,
    pub network_secs: f64,
    pub pqmf_secs: f64,
    pub rtf: f64,
    pub network_share: f64,
    pub simd: bool,
    pub pinned: bool,
}

/// Restricts the calling thread to the CPU it is running on. Returns whether
/// the affinity was set.
pub fn pin_to_one_core() -> bool {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: plain libc calls on a zeroed, locally owned cpu_set_t.
        unsafe {
            let cpu = libc::sched_getcpu();
            if cpu < 0 {
                return false;
            }
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(cpu as usize, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        false
    }
}

/// Low-passed noise at speech level; only the feature statistics matter.
fn bench_input(sample_rate: u32, seconds: f64, seed: u64) -> Waveform {
    let mut rng = stream_rng(seed);
    let n = (seconds * sample_rate as f64).round() as usize;
    let a = (-2.0 * std::f64::consts::PI * 800.0 / sample_rate as f64).exp();
    let mut s = 0.0;
    let samples = (0..n)
        .map(|_| {
            s = a * s + (1.0 - a) * rng.gen_range(-1.0..1.0);
            2.0 * s
        })
        .collect();
    Waveform::new(sample_rate, samples)
}

struct TempFiles(Vec<PathBuf>);

impl Drop for TempFiles {
    fn drop(&mut self) {
        for p in &self.0 {
            let _ = std::fs::remove_file(p);
        }
    }
}

/// WAV in → features → streaming synthesis → WAV out on one thread.
pub fn bench_rtf(model: &EngineModel, seconds: f64, seed: u64, pin: bool) -> Result<BenchReport> {
    let pinned = pin && pin_to_one_core();
    let sr = model.config().sample_rate;
    let dir = std::env::temp_dir();
    let tag = format!("mwdlp-bench-{}-{seed}", std::process::id());
    let files = TempFiles(vec![dir.join(format!("{tag}-in.wav")), dir.join(format!("{tag}-out.wav"))]);
    write_wav(&files.0[0], &bench_input(sr, seconds, seed))?;
    let mel_cfg = MelConfig::for_sample_rate(sr)?;

    let t0 = Instant::now();
    let wave = read_wav(&files.0[0])?;
    let t1 = Instant::now();
    let mel = mel_spectrogram(&wave.samples, &mel_cfg)?;
    let t2 = Instant::now();
    let mut synth = Synthesizer::new(model, seed);
    let mut out = Vec::with_capacity(mel.frames() * model.config().frame_shift);
    for frame in mel.iter() {
        synth.push_frame(frame)?;
        synth.pull_samples(&mut out);
    }
    synth.flush()?;
    synth.pull_samples(&mut out);
    let t3 = Instant::now();
    write_wav(&files.0[1], &Waveform::new(sr, out.iter().map(|&v| v as f64).collect()))?;
    let t4 = Instant::now();

    let timing = synth.timing();
    let total = (t4 - t0).as_secs_f64();
    let audio = out.len() as f64 / sr as f64;
    Ok(BenchReport {
        sample_rate: sr,
        audio_secs: audio,
        frames: mel.frames(),
        total_secs: total,
        io_secs: ((t1 - t0) + (t4 - t3)).as_secs_f64(),
        features_secs: (t2 - t1).as_secs_f64(),
        network_secs: timing.network.as_secs_f64(),
        pqmf_secs: timing.pqmf.as_secs_f64(),
        rtf: total / audio,
        network_share: timing.network.as_secs_f64() / total,
        simd: kernels::simd_enabled(),
        pinned,
    })
}
