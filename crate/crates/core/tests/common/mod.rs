#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn white_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

/// Two-pole resonator cascade over a pulse train with jittered pitch and a
/// little aspiration noise; a crude vowel.
pub fn vowel(sample_rate: u32, seconds: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let n = (seconds * sr) as usize;
    let mut phase = 0.0;
    let mut src = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = 120.0 + 20.0 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
        phase += f0 / sr;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        src.push(pulse + 0.02 * rng.gen_range(-1.0..1.0));
    }
    let mut y = src;
    for (f, bw) in [(700.0, 110.0), (1220.0, 120.0), (2600.0, 160.0)] {
        let r = (-std::f64::consts::PI * bw / sr).exp();
        let a1 = 2.0 * r * (2.0 * std::f64::consts::PI * f / sr).cos();
        let a2 = -r * r;
        let (mut y1, mut y2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let out = *v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = out;
            *v = out;
        }
    }
    speech_level(&mut y);
    y
}

/// White noise shaped by a first-order lowpass (about -6 dB/octave above 500 Hz).
pub fn speech_shaped_noise(sample_rate: u32, seconds: f64, seed: u64) -> Vec<f64> {
    let mut x = white_noise((seconds * sample_rate as f64) as usize, seed);
    let a = (-2.0 * std::f64::consts::PI * 500.0 / sample_rate as f64).exp();
    let mut s = 0.0;
    for v in x.iter_mut() {
        s = a * s + (1.0 - a) * *v;
        *v = s;
    }
    speech_level(&mut x);
    x
}

fn speech_level(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
}
