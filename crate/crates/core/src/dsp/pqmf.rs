//! Pseudo-QMF cosine-modulated filterbank.
//!
//! Prototype: Kaiser-windowed ideal lowpass `sin(wc (n - N/2)) / (pi (n - N/2))`
//! with `wc = pi * cutoff`. Band `k` of `M`:
//!
//! ```text
//! analysis  h_k[n] = 2 p[n] cos((2k+1) pi/(2M) (n - N/2) + (-1)^k pi/4)
//! synthesis g_k[n] = 2 p[n] cos((2k+1) pi/(2M) (n - N/2) - (-1)^k pi/4)
//! ```
//!
//! The opposite phase terms cancel the aliasing between adjacent bands. The
//! prototype is scaled so the analysis→synthesis chain has unity gain at DC.
//! Offline analysis and synthesis use centered filtering (zero net delay); the
//! streaming synthesizer is causal with a delay of `N/2` full-band samples.

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqmfConfig {
    pub bands: usize,
    pub order: usize,
    pub beta: f64,
    /// Prototype cutoff as a fraction of Nyquist.
    pub cutoff: f64,
}

pub const KAISER_BETA: f64 = 43.12126;

impl PqmfConfig {
    pub fn nominal_24k() -> Self {
        Self {
            bands: 6,
            order: 410,
            beta: KAISER_BETA,
            cutoff: 0.1,
        }
    }

    pub fn nominal_16k() -> Self {
        Self {
            bands: 4,
            order: 274,
            beta: KAISER_BETA,
            cutoff: 0.15,
        }
    }

    pub fn for_sample_rate(sample_rate: u32) -> Result<Self> {
        match sample_rate {
            24_000 => Ok(Self::nominal_24k()),
            16_000 => Ok(Self::nominal_16k()),
            sr => Err(Error::Config(format!("no PQMF preset for {sr} Hz"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands < 2 {
            return Err(Error::Config("PQMF needs at least two bands".into()));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(Error::Config(format!(
                "PQMF order {} must be even and positive",
                self.order
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!("bad Kaiser beta {}", self.beta)));
        }
        if !(self.cutoff > 0.0 && self.cutoff < 1.0) {
            return Err(Error::Config(format!("bad cutoff ratio {}", self.cutoff)));
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.order + 1
    }

    /// Delay of the causal synthesis filter, in full-band samples.
    pub fn group_delay(&self) -> usize {
        self.order / 2
    }

    /// Same order and beta with the cutoff moved to the value that makes the
    /// composite analysis/synthesis response flattest (Kaiser-window design of
    /// the prototype): a coarse scan around `0.5 / M` refined by golden section.
    pub fn tuned(&self) -> Result<Self> {
        self.validate()?;
        let nominal = 0.5 / self.bands as f64;
        let eval = |c: f64| {
            let cfg = Self { cutoff: c, ..*self };
            flatness(&cfg)
        };
        let (lo, hi) = (0.6 * nominal, 1.4 * nominal);
        let steps = 80;
        let grid: Vec<f64> = (0..=steps)
            .map(|i| lo + (hi - lo) * i as f64 / steps as f64)
            .collect();
        let mut best = 0;
        let mut best_v = f64::INFINITY;
        for (i, &c) in grid.iter().enumerate() {
            let v = eval(c);
            if v < best_v {
                best_v = v;
                best = i;
            }
        }
        let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(steps)]);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..40 {
            let c1 = b - g * (b - a);
            let c2 = a + g * (b - a);
            if eval(c1) < eval(c2) {
                b = c2;
            } else {
                a = c1;
            }
        }
        Ok(Self {
            cutoff: 0.5 * (a + b),
            ..*self
        })
    }
}

fn bessel_i0(x: f64) -> f64 {
    // Power series; converges for the betas used here (terms peak near k = x/2).
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..500 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(len: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let m = (len - 1) as f64;
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / m - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

fn raw_prototype(cfg: &PqmfConfig) -> Vec<f64> {
    let n = cfg.order;
    let wc = std::f64::consts::PI * cfg.cutoff;
    let win = kaiser(n + 1, cfg.beta);
    let mut h: Vec<f64> = (0..=n)
        .map(|i| {
            let t = i as f64 - n as f64 / 2.0;
            let ideal = if i == n / 2 {
                cfg.cutoff
            } else {
                (wc * t).sin() / (std::f64::consts::PI * t)
            };
            ideal * win[i]
        })
        .collect();
    // Exact linear phase.
    for i in 0..n / 2 {
        h[n - i] = h[i];
    }
    h
}

fn modulate(proto: &[f64], bands: usize, sign: f64) -> Vec<Vec<f64>> {
    let n = (proto.len() - 1) as f64;
    (0..bands)
        .map(|k| {
            let phase = if k % 2 == 0 { 1.0 } else { -1.0 } * sign * std::f64::consts::FRAC_PI_4;
            let w = (2 * k + 1) as f64 * std::f64::consts::PI / (2 * bands) as f64;
            proto
                .iter()
                .enumerate()
                .map(|(i, p)| 2.0 * p * (w * (i as f64 - n / 2.0) + phase).cos())
                .collect()
        })
        .collect()
}

fn composite_magnitude(analysis: &[Vec<f64>], synthesis: &[Vec<f64>], fft_len: usize) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let spectrum = |h: &[f64]| {
        let mut buf = vec![Complex64::default(); fft_len];
        for (b, &v) in buf.iter_mut().zip(h) {
            b.re = v;
        }
        fft.process(&mut buf);
        buf
    };
    let mut total = vec![Complex64::default(); fft_len / 2 + 1];
    for (h, g) in analysis.iter().zip(synthesis) {
        let (hs, gs) = (spectrum(h), spectrum(g));
        for (t, (a, b)) in total.iter_mut().zip(hs.iter().zip(&gs)) {
            *t += a * b;
        }
    }
    total.iter().map(|c| c.norm()).collect()
}

fn flatness(cfg: &PqmfConfig) -> f64 {
    let p = raw_prototype(cfg);
    let a = modulate(&p, cfg.bands, 1.0);
    let s = modulate(&p, cfg.bands, -1.0);
    let fft_len = (4 * cfg.taps()).next_power_of_two().max(1024);
    let mag = composite_magnitude(&a, &s, fft_len);
    let max = mag.iter().cloned().fold(f64::MIN, f64::max);
    let min = mag.iter().cloned().fold(f64::MAX, f64::min);
    let mean = mag.iter().sum::<f64>() / mag.len() as f64;
    (max - min) / mean
}

/// `M` band-rate streams stored band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandTensor {
    pub bands: usize,
    pub len: usize,
    pub data: Vec<f64>,
}

impl SubbandTensor {
    pub fn zeros(bands: usize, len: usize) -> Self {
        Self {
            bands,
            len,
            data: vec![0.0; bands * len],
        }
    }

    pub fn band(&self, m: usize) -> &[f64] {
        &self.data[m * self.len..(m + 1) * self.len]
    }

    pub fn band_mut(&mut self, m: usize) -> &mut [f64] {
        &mut self.data[m * self.len..(m + 1) * self.len]
    }

    #[inline]
    pub fn get(&self, m: usize, t: usize) -> f64 {
        self.data[m * self.len + t]
    }
}

/// Designed analysis/synthesis filters.
#[derive(Debug, Clone)]
pub struct PqmfBank {
    cfg: PqmfConfig,
    prototype: Vec<f64>,
    analysis: Vec<Vec<f64>>,
    synthesis: Vec<Vec<f64>>,
}

impl PqmfBank {
    pub fn design(cfg: &PqmfConfig) -> Result<Self> {
        cfg.validate()?;
        let mut prototype = raw_prototype(cfg);
        let a = modulate(&prototype, cfg.bands, 1.0);
        let s = modulate(&prototype, cfg.bands, -1.0);
        let dc: f64 = a
            .iter()
            .zip(&s)
            .map(|(h, g)| h.iter().sum::<f64>() * g.iter().sum::<f64>())
            .sum();
        if !(dc > 0.0) {
            return Err(Error::Config("degenerate PQMF prototype".into()));
        }
        let scale = dc.sqrt().recip();
        for p in &mut prototype {
            *p *= scale;
        }
        let analysis = modulate(&prototype, cfg.bands, 1.0);
        let synthesis = modulate(&prototype, cfg.bands, -1.0);
        Ok(Self {
            cfg: *cfg,
            prototype,
            analysis,
            synthesis,
        })
    }

    pub fn config(&self) -> &PqmfConfig {
        &self.cfg
    }

    pub fn bands(&self) -> usize {
        self.cfg.bands
    }

    pub fn prototype(&self) -> &[f64] {
        &self.prototype
    }

    pub fn analysis_filter(&self, k: usize) -> &[f64] {
        &self.analysis[k]
    }

    pub fn synthesis_filter(&self, k: usize) -> &[f64] {
        &self.synthesis[k]
    }

    /// `|sum_k G_k(w) H_k(w)|` on `fft_len / 2 + 1` frequencies.
    pub fn composite_response(&self, fft_len: usize) -> Vec<f64> {
        composite_magnitude(&self.analysis, &self.synthesis, fft_len)
    }

    /// Centered filtering then decimation by `M`. The input is zero-padded to a
    /// multiple of `M`, so `len = ceil(T_s / M)`.
    pub fn analyze(&self, wave: &[f64]) -> SubbandTensor {
        let m = self.cfg.bands;
        let half = self.cfg.order / 2;
        let len = wave.len().div_ceil(m);
        let mut out = SubbandTensor::zeros(m, len);
        let n = wave.len() as isize;
        for k in 0..m {
            let h = &self.analysis[k];
            let band = out.band_mut(k);
            for (t, b) in band.iter_mut().enumerate() {
                // y[tM] = sum_j h[j] x[tM + half - j]
                let center = (t * m + half) as isize;
                let j_lo = (center - n + 1).max(0) as usize;
                let j_hi = (center as usize).min(h.len() - 1);
                let mut acc = 0.0;
                for j in j_lo..=j_hi {
                    acc += h[j] * wave[(center - j as isize) as usize];
                }
                *b = acc;
            }
        }
        out
    }

    /// Zero-stuffing by `M`, gain `M`, centered filtering, sum over bands.
    pub fn synthesize(&self, bands: &SubbandTensor) -> Result<Vec<f64>> {
        let m = self.cfg.bands;
        if bands.bands != m {
            return Err(Error::shape("pqmf band count", m, bands.bands));
        }
        let half = self.cfg.order as isize / 2;
        let total = bands.len * m;
        let mut out = vec![0.0; total];
        for k in 0..m {
            let g = &self.synthesis[k];
            for (t, &v) in bands.band(k).iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let v = v * m as f64;
                // out[n] += g[j] u[n + half - j], u nonzero at n + half - j = tM
                let base = (t * m) as isize - half;
                for (j, gj) in g.iter().enumerate() {
                    let n = base + j as isize;
                    if n >= 0 && (n as usize) < total {
                        out[n as usize] += gj * v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`PqmfBank::synthesize`]: maps `dL/d out` to `dL/d bands`.
    pub fn synthesize_adjoint(&self, grad: &[f64]) -> Result<SubbandTensor> {
        let m = self.cfg.bands;
        if grad.len() % m != 0 {
            return Err(Error::shape("pqmf adjoint length", 0, grad.len() % m));
        }
        let half = self.cfg.order as isize / 2;
        let len = grad.len() / m;
        let mut out = SubbandTensor::zeros(m, len);
        for k in 0..m {
            let g = &self.synthesis[k];
            let band = out.band_mut(k);
            for (t, b) in band.iter_mut().enumerate() {
                let base = (t * m) as isize - half;
                let mut acc = 0.0;
                for (j, gj) in g.iter().enumerate() {
                    let n = base + j as isize;
                    if n >= 0 && (n as usize) < grad.len() {
                        acc += gj * grad[n as usize];
                    }
                }
                *b = acc * m as f64;
            }
        }
        Ok(out)
    }

    pub fn synthesis_stream(&self) -> PqmfSynthesisStream {
        PqmfSynthesisStream::new(self)
    }
}

/// Causal polyphase synthesis in `f32`: each call consumes one sample per band
/// and produces `M` full-band samples delayed by `order / 2`.
#[derive(Debug, Clone)]
pub struct PqmfSynthesisStream {
    bands: usize,
    lags: usize,
    // [phase][lag][band]
    poly: Vec<f32>,
    // Mirrored ring of per-lag band vectors; newest at `pos`.
    hist: Vec<f32>,
    pos: usize,
}

impl PqmfSynthesisStream {
    fn new(bank: &PqmfBank) -> Self {
        let m = bank.cfg.bands;
        let taps = bank.cfg.taps();
        let lags = taps.div_ceil(m);
        let mut poly = vec![0.0f32; m * lags * m];
        for p in 0..m {
            for q in 0..lags {
                let j = p + q * m;
                if j >= taps {
                    continue;
                }
                for k in 0..m {
                    poly[(p * lags + q) * m + k] = (bank.synthesis[k][j] * m as f64) as f32;
                }
            }
        }
        Self {
            bands: m,
            lags,
            poly,
            hist: vec![0.0; 2 * lags * m],
            pos: 0,
        }
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn reset(&mut self) {
        self.hist.fill(0.0);
        self.pos = 0;
    }

    pub fn push(&mut self, band_samples: &[f32], out: &mut [f32]) {
        let m = self.bands;
        debug_assert_eq!(band_samples.len(), m);
        debug_assert_eq!(out.len(), m);
        self.pos = (self.pos + self.lags - 1) % self.lags;
        let a = self.pos * m;
        let b = (self.pos + self.lags) * m;
        self.hist[a..a + m].copy_from_slice(band_samples);
        self.hist[b..b + m].copy_from_slice(band_samples);
        let window = &self.hist[a..a + self.lags * m];
        for (p, o) in out.iter_mut().enumerate() {
            let filt = &self.poly[p * self.lags * m..(p + 1) * self.lags * m];
            *o = dot_f32(filt, window);
        }
    }
}

#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for v in acc {
        s += v;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()
    }

    fn snr_db(x: &[f64], y: &[f64], guard: usize) -> f64 {
        let s = &x[guard..x.len() - guard];
        let r = &y[guard..y.len() - guard];
        let sig: f64 = s.iter().map(|v| v * v).sum();
        let err: f64 = s.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum();
        10.0 * (sig / err).log10()
    }

    #[test]
    fn rejects_bad_configs() {
        let ok = PqmfConfig::nominal_16k();
        assert!(PqmfConfig { order: 273, ..ok }.validate().is_err());
        assert!(PqmfConfig { beta: -1.0, ..ok }.validate().is_err());
        assert!(PqmfConfig { cutoff: 1.5, ..ok }.validate().is_err());
        assert!(PqmfConfig { bands: 1, ..ok }.validate().is_err());
        assert!(PqmfBank::design(&PqmfConfig { order: 0, ..ok }).is_err());
    }

    #[test]
    fn prototype_is_symmetric() {
        for cfg in [PqmfConfig::nominal_24k(), PqmfConfig::nominal_16k()] {
            let bank = PqmfBank::design(&cfg).unwrap();
            let h = bank.prototype();
            for n in 0..h.len() {
                assert_eq!(h[n], h[cfg.order - n]);
            }
        }
    }

    #[test]
    fn unity_gain_at_dc() {
        for cfg in [PqmfConfig::nominal_24k(), PqmfConfig::nominal_16k()] {
            let bank = PqmfBank::design(&cfg.tuned().unwrap()).unwrap();
            let r = bank.composite_response(4096);
            assert!((r[0] - 1.0).abs() < 1e-9, "{}", r[0]);
        }
    }

    #[test]
    fn tuned_cutoff_sits_near_half_band() {
        let t = PqmfConfig::nominal_24k().tuned().unwrap();
        assert!((t.cutoff - 0.0889).abs() < 5e-4, "{}", t.cutoff);
        let t = PqmfConfig::nominal_16k().tuned().unwrap();
        assert!((t.cutoff - 0.1333).abs() < 5e-4, "{}", t.cutoff);
    }

    #[test]
    fn zero_in_zero_out() {
        let bank = PqmfBank::design(&PqmfConfig::nominal_16k()).unwrap();
        let b = bank.analyze(&[0.0; 400]);
        assert!(b.data.iter().all(|&v| v == 0.0));
        assert!(bank.synthesize(&b).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subband_length_is_ceil_of_len_over_m() {
        let bank = PqmfBank::design(&PqmfConfig::nominal_24k()).unwrap();
        for n in [600, 601, 605, 606] {
            let b = bank.analyze(&vec![0.1; n]);
            assert_eq!(b.len, n.div_ceil(6));
            assert_eq!(bank.synthesize(&b).unwrap().len(), b.len * 6);
        }
    }

    #[test]
    fn tuned_round_trip_snr() {
        for cfg in [PqmfConfig::nominal_24k(), PqmfConfig::nominal_16k()] {
            let bank = PqmfBank::design(&cfg.tuned().unwrap()).unwrap();
            let x = noise(12_000, 5);
            let y = bank.synthesize(&bank.analyze(&x)).unwrap();
            let snr = snr_db(&x, &y, cfg.taps());
            assert!(snr >= 35.0, "{cfg:?}: {snr:.1} dB");
        }
    }

    #[test]
    fn sinusoid_stays_in_its_band() {
        let cfg = PqmfConfig::nominal_24k().tuned().unwrap();
        let bank = PqmfBank::design(&cfg).unwrap();
        // Band 2 covers 4-6 kHz at 24 kHz.
        let x: Vec<f64> = (0..12_000)
            .map(|n| (2.0 * std::f64::consts::PI * 5000.0 * n as f64 / 24_000.0).sin())
            .collect();
        let b = bank.analyze(&x);
        let energy: Vec<f64> = (0..6)
            .map(|m| b.band(m)[100..1900].iter().map(|v| v * v).sum())
            .collect();
        for m in [0, 1, 3, 4, 5] {
            assert!(10.0 * (energy[2] / energy[m]).log10() >= 20.0, "{energy:?}");
        }
    }

    #[test]
    fn adjoint_matches_synthesis() {
        let bank = PqmfBank::design(&PqmfConfig::nominal_16k()).unwrap();
        let bands = bank.analyze(&noise(800, 1));
        let g = noise(800, 2);
        let y = bank.synthesize(&bands).unwrap();
        let adj = bank.synthesize_adjoint(&g).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = bands.data.iter().zip(&adj.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn streaming_equals_offline_after_delay() {
        let cfg = PqmfConfig::nominal_16k();
        let bank = PqmfBank::design(&cfg).unwrap();
        let bands = bank.analyze(&noise(4000, 9));
        let offline = bank.synthesize(&bands).unwrap();
        let mut stream = bank.synthesis_stream();
        let mut streamed = Vec::new();
        let mut frame = [0.0f32; 4];
        let mut out = [0.0f32; 4];
        for t in 0..bands.len {
            for m in 0..4 {
                frame[m] = bands.get(m, t) as f32;
            }
            stream.push(&frame, &mut out);
            streamed.extend_from_slice(&out);
        }
        let d = cfg.group_delay();
        for n in 0..offline.len() - d - cfg.order {
            assert!((streamed[n + d] as f64 - offline[n]).abs() < 1e-5);
        }
    }
}
