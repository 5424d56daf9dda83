//! 10-bit mu-law companding with a 5/5 coarse/fine bit split.
//!
//! Companded values `c ∈ [-1, 1]` are quantized uniformly into 1024 bins and
//! decoded at bin centers.

use crate::real::Real;

pub const BITS: u32 = 10;
pub const BINS: usize = 1 << BITS;
pub const HEAD_BITS: u32 = 5;
pub const HEAD_BINS: usize = 1 << HEAD_BITS;
const FINE_MASK: usize = HEAD_BINS - 1;

/// Companding parameters. Only the 10-bit, 32×32 layout is used by the network,
/// but the struct keeps the relationships explicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuLawSpec {
    pub bits: u32,
    pub mu: f64,
    pub bins_total: usize,
    pub coarse_bins: usize,
    pub fine_bins: usize,
}

impl Default for MuLawSpec {
    fn default() -> Self {
        Self {
            bits: BITS,
            mu: (BINS - 1) as f64,
            bins_total: BINS,
            coarse_bins: HEAD_BINS,
            fine_bins: HEAD_BINS,
        }
    }
}

impl MuLawSpec {
    pub fn ln_1p_mu(&self) -> f64 {
        self.mu.ln_1p()
    }

    /// Width of bin `index` in the amplitude domain.
    pub fn bin_width(&self, index: usize) -> f64 {
        let n = self.bins_total as f64;
        let lo = 2.0 * index as f64 / n - 1.0;
        let hi = 2.0 * (index + 1) as f64 / n - 1.0;
        self.expand(hi) - self.expand(lo)
    }

    fn compress(&self, x: f64) -> f64 {
        x.signum() * (self.mu * x.abs()).ln_1p() / self.ln_1p_mu()
    }

    fn expand(&self, c: f64) -> f64 {
        c.signum() * ((1.0 + self.mu).powf(c.abs()) - 1.0) / self.mu
    }
}

/// Quantizes an amplitude to a bin index. Inputs outside `[-1, 1]` saturate.
pub fn mulaw_encode(x: f64, spec: &MuLawSpec) -> usize {
    let x = if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
    let c = spec.compress(x);
    let n = spec.bins_total as f64;
    let idx = ((c + 1.0) * 0.5 * n).floor();
    (idx.max(0.0) as usize).min(spec.bins_total - 1)
}

/// Amplitude at the center of bin `index`.
///
/// # Panics
/// If `index` is outside the codebook.
pub fn mulaw_decode(index: usize, spec: &MuLawSpec) -> f64 {
    assert!(
        index < spec.bins_total,
        "mu-law index {index} out of range"
    );
    decode_continuous(index as f64, spec)
}

/// The differentiable inverse companding `f(b)` evaluated at a real-valued bin
/// coordinate (bin centers at integer `b`).
pub fn decode_continuous<F: Real>(b: F, spec: &MuLawSpec) -> F {
    let n = F::c(spec.bins_total as f64);
    let c = F::c(2.0) * (b + F::c(0.5)) / n - F::one();
    let mu = F::c(spec.mu);
    c.signum() * (c.abs() * F::c(spec.ln_1p_mu())).exp_m1() / mu
}

/// Derivative `df/db` of [`decode_continuous`].
pub fn decode_continuous_grad<F: Real>(b: F, spec: &MuLawSpec) -> F {
    let n = F::c(spec.bins_total as f64);
    let c = F::c(2.0) * (b + F::c(0.5)) / n - F::one();
    let mu = F::c(spec.mu);
    let l = F::c(spec.ln_1p_mu());
    // d/dc of sign(c)((1+mu)^|c| - 1)/mu is symmetric in c.
    (c.abs() * l).exp() * l / mu * F::c(2.0) / n
}

#[inline]
pub fn split_coarse_fine(index: usize) -> (usize, usize) {
    debug_assert!(index < BINS);
    (index >> HEAD_BITS, index & FINE_MASK)
}

#[inline]
pub fn merge_coarse_fine(coarse: usize, fine: usize) -> usize {
    debug_assert!(coarse < HEAD_BINS && fine < HEAD_BINS);
    (coarse << HEAD_BITS) | fine
}

/// Full decode table, handy for hot loops.
pub fn decode_table(spec: &MuLawSpec) -> Vec<f32> {
    (0..spec.bins_total)
        .map(|i| mulaw_decode(i, spec) as f32)
        .collect()
}

/// Bin of digital silence.
pub fn silence_bin(spec: &MuLawSpec) -> usize {
    mulaw_encode(0.0, spec)
}
