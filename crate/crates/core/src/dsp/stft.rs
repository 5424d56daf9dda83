use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Framing parameters of a short-time Fourier transform (Hann window).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StftConfig {
    pub fft_length: usize,
    pub shift_length: usize,
    pub window_length: usize,
}

impl StftConfig {
    pub fn new(fft_length: usize, shift_length: usize, window_length: usize) -> Result<Self> {
        let cfg = Self {
            fft_length,
            shift_length,
            window_length,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loss-style resolution with the window fixed at 2.5 shifts.
    pub fn with_loss_window(fft_length: usize, shift_length: usize) -> Result<Self> {
        Self::new(fft_length, shift_length, (shift_length * 5).div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_length.is_power_of_two() {
            return Err(Error::Config(format!(
                "fft length {} is not a power of two",
                self.fft_length
            )));
        }
        if self.shift_length == 0 || self.window_length == 0 {
            return Err(Error::Config("zero shift or window length".into()));
        }
        if self.window_length > self.fft_length || self.shift_length > self.window_length {
            return Err(Error::Config(format!(
                "need shift <= window <= fft, got {}/{}/{}",
                self.shift_length, self.window_length, self.fft_length
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    /// Reflect padding on each side.
    pub fn pads(&self) -> (usize, usize) {
        let left = self.window_length / 2;
        (left, self.window_length - left)
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        samples / self.shift_length + 1
    }
}

/// Frames of one-sided complex spectra, row-major `[frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn frame(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.bins..(i + 1) * self.bins]
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }
}

/// Planned STFT. Frames are windowed over `window_length` samples and
/// zero-padded (centered) to `fft_length`. The signal is reflect-padded by
/// `window_length / 2` so that `frames = floor(len / shift) + 1`.
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    offset: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

/// Periodic Hann window.
pub(crate) fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

fn reflect_index(p: usize, left: usize, len: usize) -> usize {
    let i = p as isize - left as isize;
    let n = len as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        Ok(Self {
            cfg,
            window: hann(cfg.window_length),
            offset: (cfg.fft_length - cfg.window_length) / 2,
            forward: planner.plan_fft_forward(cfg.fft_length),
            inverse: planner.plan_fft_inverse(cfg.fft_length),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(Error::Empty("stft input"));
        }
        let (l, r) = self.cfg.pads();
        if len <= l.max(r) {
            return Err(Error::Config(format!(
                "signal of {len} samples too short for reflect padding of {}",
                l.max(r)
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Spectrogram> {
        self.check_len(x.len())?;
        let cfg = &self.cfg;
        let (left, _) = cfg.pads();
        let frames = cfg.frame_count(x.len());
        let bins = cfg.bins();
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex64::default(); cfg.fft_length];
        let mut scratch = vec![Complex64::default(); self.forward.get_inplace_scratch_len()];
        for f in 0..frames {
            buf.fill(Complex64::default());
            let start = f * cfg.shift_length;
            for (j, w) in self.window.iter().enumerate() {
                let s = x[reflect_index(start + j, left, x.len())];
                buf[self.offset + j] = Complex64::new(s * w, 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram { frames, bins, data })
    }

    /// Vector-Jacobian product of [`Stft::forward`].
    ///
    /// `grad` holds `dL/dRe X + i dL/dIm X` per frame and bin; the result is
    /// `dL/dx` for a signal of `len` samples.
    pub fn backward(&self, grad: &Spectrogram, len: usize) -> Result<Vec<f64>> {
        self.check_len(len)?;
        let cfg = &self.cfg;
        let (left, _) = cfg.pads();
        if grad.frames != cfg.frame_count(len) || grad.bins != cfg.bins() {
            return Err(Error::shape("stft gradient frames", cfg.frame_count(len), grad.frames));
        }
        let mut dx = vec![0.0; len];
        let mut buf = vec![Complex64::default(); cfg.fft_length];
        let mut scratch = vec![Complex64::default(); self.inverse.get_inplace_scratch_len()];
        for f in 0..grad.frames {
            buf.fill(Complex64::default());
            buf[..grad.bins].copy_from_slice(grad.frame(f));
            // dL/dx[n] = Re(sum_k G_k e^{+2 pi i k n / N}) over the one-sided bins.
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = f * cfg.shift_length;
            for (j, w) in self.window.iter().enumerate() {
                dx[reflect_index(start + j, left, len)] += buf[self.offset + j].re * w;
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft(frame: &[f64], n_fft: usize) -> Vec<Complex64> {
        (0..=n_fft / 2)
            .map(|k| {
                frame
                    .iter()
                    .enumerate()
                    .map(|(n, &v)| {
                        let th = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                        Complex64::new(v * th.cos(), v * th.sin())
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(StftConfig::new(1000, 100, 400).is_err());
        assert!(StftConfig::new(1024, 500, 400).is_err());
        assert!(StftConfig::new(256, 80, 300).is_err());
    }

    #[test]
    fn loss_window_is_two_and_a_half_shifts() {
        let c = StftConfig::with_loss_window(2048, 480).unwrap();
        assert_eq!(c.window_length, 1200);
        let c = StftConfig::with_loss_window(32, 10).unwrap();
        assert_eq!(c.window_length, 25);
    }

    #[test]
    fn zeros_give_zeros() {
        let stft = Stft::new(StftConfig::new(64, 16, 40).unwrap()).unwrap();
        let s = stft.forward(&[0.0; 200]).unwrap();
        assert_eq!(s.frames, 200 / 16 + 1);
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn frame_count_for_odd_window() {
        let cfg = StftConfig::with_loss_window(32, 10).unwrap();
        let stft = Stft::new(cfg).unwrap();
        assert_eq!(stft.forward(&vec![0.1; 95]).unwrap().frames, 10);
    }

    #[test]
    fn sinusoid_matches_direct_dft() {
        let n_fft = 64;
        let cfg = StftConfig::new(n_fft, 16, 48).unwrap();
        let stft = Stft::new(cfg).unwrap();
        let k0 = 5.0;
        let x: Vec<f64> = (0..256)
            .map(|n| (2.0 * PI * k0 * n as f64 / n_fft as f64).sin())
            .collect();
        let spec = stft.forward(&x).unwrap();
        let (left, _) = cfg.pads();
        let w = hann(48);
        for f in [2usize, 5, 9] {
            let mut frame = vec![0.0; n_fft];
            for j in 0..48 {
                frame[8 + j] = x[reflect_index(f * 16 + j, left, x.len())] * w[j];
            }
            let want = naive_dft(&frame, n_fft);
            for (a, b) in spec.frame(f).iter().zip(&want) {
                assert!((a - b).norm() < 1e-10);
            }
            // Energy concentrated at the sinusoid's bin and its Hann leakage.
            let mags: Vec<f64> = spec.frame(f).iter().map(|c| c.norm()).collect();
            let peak = mags
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(peak, 5);
        }
    }

    #[test]
    fn parseval() {
        let cfg = StftConfig::new(128, 32, 128).unwrap();
        let stft = Stft::new(cfg).unwrap();
        let x: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let spec = stft.forward(&x).unwrap();
        let w = hann(128);
        let f = 10;
        let frame_energy: f64 = (0..128).map(|j| (x[f * 32 + j - 64] * w[j]).powi(2)).sum();
        // Full spectrum energy from the one-sided half.
        let s = spec.frame(f);
        let mut spec_energy = s[0].norm_sqr() + s[64].norm_sqr();
        spec_energy += 2.0 * s[1..64].iter().map(|c| c.norm_sqr()).sum::<f64>();
        assert!((frame_energy - spec_energy / 128.0).abs() < 1e-9 * frame_energy);
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let cfg = StftConfig::new(32, 10, 25).unwrap();
        let stft = Stft::new(cfg).unwrap();
        let x: Vec<f64> = (0..97).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.4).collect();
        let spec = stft.forward(&x).unwrap();
        let g: Vec<Complex64> = (0..spec.data.len())
            .map(|i| Complex64::new(((i * 13) % 7) as f64 - 3.0, ((i * 5) % 11) as f64 - 5.0))
            .collect();
        let grad = Spectrogram {
            frames: spec.frames,
            bins: spec.bins,
            data: g.clone(),
        };
        let dx = stft.backward(&grad, x.len()).unwrap();
        // <G, d(Re,Im)X> = <dx, x> by linearity.
        let lhs: f64 = spec
            .data
            .iter()
            .zip(&g)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        let rhs: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn deterministic() {
        let stft = Stft::new(StftConfig::new(256, 64, 160).unwrap()).unwrap();
        let x: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.01).sin()).collect();
        assert_eq!(stft.forward(&x).unwrap(), stft.forward(&x).unwrap());
    }
}
