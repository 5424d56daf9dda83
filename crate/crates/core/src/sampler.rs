//! Gumbel-max sampling and the straight-through discretization used by the
//! STFT loss.

use rand::{Rng, SeedableRng};

use crate::codec::{decode_continuous, decode_continuous_grad, merge_coarse_fine, MuLawSpec, HEAD_BINS};
use crate::model::layers::logits_to_probs;
use crate::real::Real;
use crate::Result;

/// Seedable counter-based generator used for every stochastic draw.
pub type StreamRng = rand_chacha::ChaCha8Rng;

pub fn stream_rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub const GUMBEL_EPS: f64 = 1e-12;

/// Uniform variates and the Gumbel noise derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraw {
    pub u: Vec<f64>,
}

impl GumbelDraw {
    pub fn new(u: Vec<f64>) -> Self {
        Self {
            u: u.into_iter().map(|v| v.clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS)).collect(),
        }
    }

    pub fn sample(rng: &mut impl Rng, bins: usize) -> Self {
        Self::new((0..bins).map(|_| rng.gen::<f64>()).collect())
    }

    #[inline]
    pub fn noise(&self, b: usize) -> f64 {
        -(-self.u[b].ln()).ln()
    }
}

/// `o - log(-log(u))`
pub fn gumbel_logits<F: Real>(o: &[F], draw: &GumbelDraw) -> Vec<F> {
    debug_assert_eq!(o.len(), draw.u.len());
    o.iter()
        .enumerate()
        .map(|(b, &v)| v + F::c(draw.noise(b)))
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Real>(x: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate().skip(1) {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-max draw from `softmax(o)`.
pub fn sample_bin<F: Real>(o: &[F], rng: &mut impl Rng) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (b, v) in o.iter().enumerate() {
        let u: f64 = rng.gen::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
        let g = v.f64() - (-u.ln()).ln();
        if g > best_v {
            best_v = g;
            best = b;
        }
    }
    best
}

/// Per-head relaxation state: the sampled bin and the Gumbel-softmax vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftHead {
    pub bin: usize,
    pub p_hat: Vec<f64>,
}

impl SoftHead {
    pub fn new(o: &[f64], draw: &GumbelDraw) -> Result<Self> {
        let g = gumbel_logits(o, draw);
        let p_hat = logits_to_probs(&g)?;
        Ok(Self {
            bin: argmax(&g),
            p_hat,
        })
    }

    /// `p̂[bin] / max(p̂)`; always 1 in the forward pass.
    pub fn p_bar(&self) -> f64 {
        self.p_hat[self.bin] / self.p_hat[self.bin]
    }

    /// Gradient of `p̂[bin] / max(p̂)` w.r.t. the logits with the denominator
    /// held constant: `δ(j, bin) - p̂[j]`.
    pub fn p_bar_grad(&self) -> Vec<f64> {
        self.p_hat
            .iter()
            .enumerate()
            .map(|(j, &p)| if j == self.bin { 1.0 - p } else { -p })
            .collect()
    }
}

/// Discretized sample of one band at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftSample {
    pub coarse: SoftHead,
    pub fine: SoftHead,
    /// `f(32·c·p̄_c + f·p̄_f)`, exactly the decoded sampled bin.
    pub value: f64,
}

/// Samples both heads and decodes the merged 10-bit bin, keeping a gradient
/// path through the sampled probabilities.
pub fn soft_discretize(
    coarse_logits: &[f64],
    fine_logits: &[f64],
    coarse_draw: &GumbelDraw,
    fine_draw: &GumbelDraw,
    spec: &MuLawSpec,
) -> Result<SoftSample> {
    let coarse = SoftHead::new(coarse_logits, coarse_draw)?;
    let fine = SoftHead::new(fine_logits, fine_draw)?;
    let b = (HEAD_BINS * coarse.bin) as f64 * coarse.p_bar() + fine.bin as f64 * fine.p_bar();
    debug_assert_eq!(b as usize, merge_coarse_fine(coarse.bin, fine.bin));
    Ok(SoftSample {
        value: decode_continuous(b, spec),
        coarse,
        fine,
    })
}

impl SoftSample {
    pub fn index(&self) -> usize {
        merge_coarse_fine(self.coarse.bin, self.fine.bin)
    }

    /// The relaxed expression at other logits with this sample's bins, draws
    /// and denominators held fixed. Equals `value` at the original logits.
    pub fn relaxed(
        &self,
        coarse_logits: &[f64],
        fine_logits: &[f64],
        coarse_draw: &GumbelDraw,
        fine_draw: &GumbelDraw,
        spec: &MuLawSpec,
    ) -> Result<f64> {
        let pc = logits_to_probs(&gumbel_logits(coarse_logits, coarse_draw))?;
        let pf = logits_to_probs(&gumbel_logits(fine_logits, fine_draw))?;
        let (c, f) = (self.coarse.bin, self.fine.bin);
        let b = (HEAD_BINS * c) as f64 * (pc[c] / self.coarse.p_hat[c]) + f as f64 * (pf[f] / self.fine.p_hat[f]);
        Ok(decode_continuous(b, spec))
    }

    /// Maps `dL/dvalue` to `(dL/d coarse logits, dL/d fine logits)`.
    pub fn backward(&self, grad: f64, spec: &MuLawSpec) -> (Vec<f64>, Vec<f64>) {
        let df = grad * decode_continuous_grad(self.index() as f64, spec);
        let sc = df * (HEAD_BINS * self.coarse.bin) as f64;
        let sf = df * self.fine.bin as f64;
        (
            self.coarse.p_bar_grad().into_iter().map(|v| v * sc).collect(),
            self.fine.p_bar_grad().into_iter().map(|v| v * sf).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::mulaw_decode;

    fn random_logits(rng: &mut StreamRng) -> Vec<f64> {
        (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn u_of_inverse_e_gives_zero_noise() {
        let d = GumbelDraw::new(vec![(-1.0f64).exp(); 32]);
        let o: Vec<f64> = (0..32).map(|i| i as f64 * 0.1).collect();
        let g = gumbel_logits(&o, &d);
        for (a, b) in g.iter().zip(&o) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn draws_are_clamped() {
        let d = GumbelDraw::new(vec![0.0, 1.0]);
        assert!(d.noise(0).is_finite() && d.noise(1).is_finite());
    }

    #[test]
    fn saturated_logit_always_wins() {
        let mut o = vec![0.0; 32];
        o[17] = 1e6;
        let mut rng = stream_rng(1);
        assert!((0..1000).all(|_| sample_bin(&o, &mut rng) == 17));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let o = random_logits(&mut stream_rng(2));
        let a: Vec<usize> = {
            let mut r = stream_rng(9);
            (0..100).map(|_| sample_bin(&o, &mut r)).collect()
        };
        let b: Vec<usize> = {
            let mut r = stream_rng(9);
            (0..100).map(|_| sample_bin(&o, &mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_logits_pass_chi_square() {
        let o = vec![0.0f64; 32];
        let mut rng = stream_rng(3);
        let n = 100_000;
        let mut counts = [0usize; 32];
        for _ in 0..n {
            counts[sample_bin(&o, &mut rng)] += 1;
        }
        let e = n as f64 / 32.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99th percentile of chi-square with 31 degrees of freedom.
        assert!(chi2 < 52.191, "chi2 = {chi2}");
    }

    #[test]
    fn shift_leaves_distribution_unchanged() {
        let o = random_logits(&mut stream_rng(4));
        let shifted: Vec<f64> = o.iter().map(|v| v + 5.0).collect();
        let (mut r1, mut r2) = (stream_rng(5), stream_rng(5));
        for _ in 0..1000 {
            assert_eq!(sample_bin(&o, &mut r1), sample_bin(&shifted, &mut r2));
        }
    }

    #[test]
    fn forward_value_is_exact_bin_center() {
        let spec = MuLawSpec::default();
        let mut rng = stream_rng(6);
        for _ in 0..200 {
            let (oc, of) = (random_logits(&mut rng), random_logits(&mut rng));
            let (dc, df) = (GumbelDraw::sample(&mut rng, 32), GumbelDraw::sample(&mut rng, 32));
            let s = soft_discretize(&oc, &of, &dc, &df, &spec).unwrap();
            assert_eq!(s.coarse.p_bar(), 1.0);
            assert_eq!(s.value, mulaw_decode(s.index(), &spec));
            assert_eq!(s.coarse.bin, argmax(&gumbel_logits(&oc, &dc)));
        }
    }

    #[test]
    fn gradient_matches_relaxed_finite_differences() {
        let spec = MuLawSpec::default();
        let mut rng = stream_rng(7);
        for _ in 0..10 {
            let (oc, of) = (random_logits(&mut rng), random_logits(&mut rng));
            let (dc, df) = (GumbelDraw::sample(&mut rng, 32), GumbelDraw::sample(&mut rng, 32));
            let s = soft_discretize(&oc, &of, &dc, &df, &spec).unwrap();
            let relaxed = |oc: &[f64], of: &[f64]| s.relaxed(oc, of, &dc, &df, &spec).unwrap();
            assert_eq!(relaxed(&oc, &of), s.value);
            let (gc, gf) = s.backward(1.0, &spec);
            let h = 1e-6;
            for j in 0..32 {
                let (mut a, mut b) = (oc.clone(), oc.clone());
                a[j] += h;
                b[j] -= h;
                let fd = (relaxed(&a, &of) - relaxed(&b, &of)) / (2.0 * h);
                assert!((fd - gc[j]).abs() <= 1e-4 * gc[j].abs().max(1e-6), "coarse {j}: {fd} vs {}", gc[j]);
                let (mut a, mut b) = (of.clone(), of.clone());
                a[j] += h;
                b[j] -= h;
                let fd = (relaxed(&oc, &a) - relaxed(&oc, &b)) / (2.0 * h);
                assert!((fd - gf[j]).abs() <= 1e-4 * gf[j].abs().max(1e-6), "fine {j}: {fd} vs {}", gf[j]);
            }
        }
    }
}
