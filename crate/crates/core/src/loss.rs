//! Cross-entropy and multi-resolution STFT objectives with their gradients.

use num_complex::Complex64;

use crate::dsp::{PqmfBank, Spectrogram, Stft, StftConfig, SubbandTensor};
use crate::error::{Error, Result};
use crate::model::layers::logits_to_probs;

/// Floor inside the log-magnitude term and under the spectral-convergence
/// denominator.
pub const MAG_FLOOR: f64 = 1e-7;

/// Five `(fft, shift)` resolutions; windows are `2.5 × shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct StftLossConfig {
    pub resolutions: Vec<StftConfig>,
}

impl StftLossConfig {
    fn from_pairs(pairs: [(usize, usize); 5]) -> Self {
        Self {
            resolutions: pairs
                .iter()
                .map(|&(f, s)| StftConfig::with_loss_window(f, s).expect("static loss config"))
                .collect(),
        }
    }

    pub fn full_24k() -> Self {
        Self::from_pairs([(2048, 480), (1024, 240), (512, 120), (256, 60), (128, 48)])
    }

    pub fn full_16k() -> Self {
        Self::from_pairs([(1024, 320), (512, 160), (256, 80), (128, 40), (128, 32)])
    }

    pub fn band() -> Self {
        Self::from_pairs([(256, 80), (128, 40), (64, 20), (32, 10), (32, 8)])
    }

    pub fn full_for_rate(sample_rate: u32) -> Result<Self> {
        match sample_rate {
            24_000 => Ok(Self::full_24k()),
            16_000 => Ok(Self::full_16k()),
            sr => Err(Error::Config(format!("no STFT loss table for {sr} Hz"))),
        }
    }

    /// Shortest signal every resolution can analyze.
    pub fn min_len(&self) -> usize {
        self.resolutions
            .iter()
            .map(|c| c.pads().0.max(c.pads().1) + 1)
            .max()
            .unwrap_or(1)
    }
}

/// Mean `-log p[target]` over the `(t, m)` entries of each head, summed over
/// heads. Each slice of `logits` is one 32-bin vector.
pub fn ce_loss(coarse: &[Vec<f64>], fine: &[Vec<f64>], coarse_t: &[usize], fine_t: &[usize]) -> Result<f64> {
    Ok(ce_head(coarse, coarse_t)?.0 + ce_head(fine, fine_t)?.0)
}

/// Mean cross-entropy of one head and its gradient w.r.t. every logit vector.
pub fn ce_head(logits: &[Vec<f64>], targets: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape("cross-entropy targets", logits.len(), targets.len()));
    }
    if logits.is_empty() {
        return Err(Error::Empty("cross-entropy batch"));
    }
    let scale = 1.0 / logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (o, &t) in logits.iter().zip(targets) {
        if t >= o.len() {
            return Err(Error::shape("cross-entropy target bin", o.len(), t));
        }
        let mut p = logits_to_probs(o)?;
        total -= crate::model::layers::log_prob(o, t);
        p[t] -= 1.0;
        p.iter_mut().for_each(|v| *v *= scale);
        grads.push(p);
    }
    Ok((total * scale, grads))
}

/// One resolution of the STFT loss, planned once.
#[derive(Debug)]
pub struct StftLoss {
    stfts: Vec<Stft>,
}

/// Loss value and gradient w.r.t. the predicted signal.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl StftLoss {
    pub fn new(cfg: &StftLossConfig) -> Result<Self> {
        Ok(Self {
            stfts: cfg.resolutions.iter().map(|c| Stft::new(*c)).collect::<Result<_>>()?,
        })
    }

    /// Mean over resolutions of [`stft_loss_pair`].
    pub fn eval(&self, x_hat: &[f64], x: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for st in &self.stfts {
            s += pair(st, x_hat, x, false)?.value;
        }
        Ok(s / self.stfts.len() as f64)
    }

    pub fn eval_grad(&self, x_hat: &[f64], x: &[f64]) -> Result<LossGrad> {
        let n = self.stfts.len() as f64;
        let mut out = LossGrad {
            value: 0.0,
            grad: vec![0.0; x_hat.len()],
        };
        for st in &self.stfts {
            let r = pair(st, x_hat, x, true)?;
            out.value += r.value / n;
            for (g, v) in out.grad.iter_mut().zip(&r.grad) {
                *g += v / n;
            }
        }
        Ok(out)
    }
}

/// Spectral convergence plus mean log-magnitude L1 at one resolution.
pub fn stft_loss_pair(x_hat: &[f64], x: &[f64], cfg: StftConfig) -> Result<f64> {
    Ok(pair(&Stft::new(cfg)?, x_hat, x, false)?.value)
}

/// Same as [`stft_loss_pair`] plus `dL/dx_hat`.
pub fn stft_loss_pair_grad(x_hat: &[f64], x: &[f64], cfg: StftConfig) -> Result<LossGrad> {
    pair(&Stft::new(cfg)?, x_hat, x, true)
}

fn pair(st: &Stft, x_hat: &[f64], x: &[f64], want_grad: bool) -> Result<LossGrad> {
    if x_hat.len() != x.len() {
        return Err(Error::shape("STFT loss signal length", x.len(), x_hat.len()));
    }
    let sh = st.forward(x_hat)?;
    let sx = st.forward(x)?;
    let n = sh.data.len() as f64;
    let (mut diff2, mut ref2, mut lm) = (0.0, 0.0, 0.0);
    let mag_h: Vec<f64> = sh.magnitudes();
    let mag_x: Vec<f64> = sx.magnitudes();
    for (&a, &b) in mag_h.iter().zip(&mag_x) {
        diff2 += (b - a) * (b - a);
        ref2 += b * b;
        lm += (b.max(MAG_FLOOR).ln() - a.max(MAG_FLOOR).ln()).abs();
    }
    let (dn, rn) = (diff2.sqrt(), ref2.sqrt().max(MAG_FLOOR));
    let sc = if dn == 0.0 { 0.0 } else { dn / rn };
    let value = sc + lm / n;
    if !want_grad {
        return Ok(LossGrad { value, grad: Vec::new() });
    }
    let mut g = Spectrogram {
        frames: sh.frames,
        bins: sh.bins,
        data: vec![Complex64::default(); sh.data.len()],
    };
    for (i, gi) in g.data.iter_mut().enumerate() {
        let (a, b) = (mag_h[i], mag_x[i]);
        if a == 0.0 {
            continue;
        }
        let mut d = 0.0;
        if dn > 0.0 {
            d += (a - b) / (dn * rn);
        }
        if a > MAG_FLOOR {
            let e = b.max(MAG_FLOOR).ln() - a.ln();
            if e != 0.0 {
                d -= e.signum() / (n * a);
            }
        }
        *gi = sh.data[i] * (d / a);
    }
    let grad = st.backward(&g, x_hat.len())?;
    Ok(LossGrad { value, grad })
}

/// Band and full-band STFT losses.
#[derive(Debug)]
pub struct MultibandStftLoss {
    band: StftLoss,
    full: StftLoss,
}

/// Loss plus gradient w.r.t. every sampled band signal.
#[derive(Debug, Clone)]
pub struct MultibandGrad {
    pub value: f64,
    pub band_value: f64,
    pub full_value: f64,
    pub grad: SubbandTensor,
}

impl MultibandStftLoss {
    pub fn new(band: &StftLossConfig, full: &StftLossConfig) -> Result<Self> {
        Ok(Self {
            band: StftLoss::new(band)?,
            full: StftLoss::new(full)?,
        })
    }

    pub fn for_sample_rate(sample_rate: u32) -> Result<Self> {
        Self::new(&StftLossConfig::band(), &StftLossConfig::full_for_rate(sample_rate)?)
    }

    /// Mean of the per-band losses plus the full-band loss, where the sampled
    /// full-band signal is the PQMF synthesis of the sampled bands.
    pub fn eval(
        &self,
        bank: &PqmfBank,
        sampled: &SubbandTensor,
        target: &SubbandTensor,
        target_full: &[f64],
    ) -> Result<MultibandGrad> {
        self.run(bank, sampled, target, target_full, false)
    }

    pub fn eval_grad(
        &self,
        bank: &PqmfBank,
        sampled: &SubbandTensor,
        target: &SubbandTensor,
        target_full: &[f64],
    ) -> Result<MultibandGrad> {
        self.run(bank, sampled, target, target_full, true)
    }

    fn run(
        &self,
        bank: &PqmfBank,
        sampled: &SubbandTensor,
        target: &SubbandTensor,
        target_full: &[f64],
        want_grad: bool,
    ) -> Result<MultibandGrad> {
        if sampled.bands != target.bands || sampled.len != target.len {
            return Err(Error::shape("sampled bands", target.len, sampled.len));
        }
        let m = sampled.bands as f64;
        let mut grad = SubbandTensor::zeros(sampled.bands, sampled.len);
        let mut band_value = 0.0;
        for b in 0..sampled.bands {
            if want_grad {
                let r = self.band.eval_grad(sampled.band(b), target.band(b))?;
                band_value += r.value / m;
                for (g, v) in grad.band_mut(b).iter_mut().zip(&r.grad) {
                    *g = v / m;
                }
            } else {
                band_value += self.band.eval(sampled.band(b), target.band(b))? / m;
            }
        }
        let full = bank.synthesize(sampled)?;
        let full_value = if want_grad {
            let r = self.full.eval_grad(&full, target_full)?;
            let back = bank.synthesize_adjoint(&r.grad)?;
            for (g, v) in grad.data.iter_mut().zip(&back.data) {
                *g += v;
            }
            r.value
        } else {
            self.full.eval(&full, target_full)?
        };
        Ok(MultibandGrad {
            value: band_value + full_value,
            band_value,
            full_value,
            grad,
        })
    }
}

/// Weights of the two objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub stft: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, stft: 1.0 }
    }
}

impl LossWeights {
    pub fn new(ce: f64, stft: f64) -> Result<Self> {
        if !(ce >= 0.0 && stft >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got ({ce}, {stft})")));
        }
        Ok(Self { ce, stft })
    }
}

pub fn total_loss(ce: f64, stft: f64, w: LossWeights) -> f64 {
    w.ce * ce + w.stft * stft
}
