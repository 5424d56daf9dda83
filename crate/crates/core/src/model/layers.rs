//! Single-layer forward operations of the network.

use super::config::NetworkConfig;
use super::params::{BlockSparse, DualFcParams, GruParams, ModelParams, ResidualParams};
use crate::error::{Error, Result};
use crate::real::Real;

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub fn tanhshrink<F: Real>(x: F) -> F {
    x - x.tanh()
}

#[inline]
pub fn relu<F: Real>(x: F) -> F {
    x.max(F::zero())
}

/// Segmental convolution over the stacked `(r + 1 + n)·d` window followed by
/// the ReLU projection to `cond_proj`.
pub fn segmental_conv<F: Real>(p: &ModelParams<F>, window: &[F]) -> Result<Vec<F>> {
    if window.len() != p.cfg.segconv_dim() {
        return Err(Error::shape("segmental conv window", p.cfg.segconv_dim(), window.len()));
    }
    let seg = p.segconv.forward(window);
    Ok(p.cond_fc.forward(&seg).into_iter().map(relu).collect())
}

/// Gate nonlinearities given both projections (biases included). Gates are
/// stacked `[update; reset; new]` and the reset gate is applied after the
/// recurrent projection.
pub fn gru_gates<F: Real>(gi: &[F], gh: &[F], h: &[F]) -> Vec<F> {
    let u = h.len();
    debug_assert_eq!(gi.len(), 3 * u);
    debug_assert_eq!(gh.len(), 3 * u);
    (0..u)
        .map(|i| {
            let z = sigmoid(gi[i] + gh[i]);
            let r = sigmoid(gi[u + i] + gh[u + i]);
            let n = (gi[2 * u + i] + r * gh[2 * u + i]).tanh();
            (F::one() - z) * n + z * h[i]
        })
        .collect()
}

fn input_projection<F: Real>(g: &GruParams<F>, x: &[F]) -> Result<Vec<F>> {
    if x.len() != g.input_dim() {
        return Err(Error::shape("GRU input", g.input_dim(), x.len()));
    }
    let mut gi = g.b_in.clone();
    g.w_in.matvec_acc(x, &mut gi);
    Ok(gi)
}

/// Dense GRU step.
pub fn gru_step<F: Real>(g: &GruParams<F>, x: &[F], h: &[F]) -> Result<Vec<F>> {
    if h.len() != g.units {
        return Err(Error::shape("GRU hidden", g.units, h.len()));
    }
    let gi = input_projection(g, x)?;
    let mut gh = g.b_rec.clone();
    g.w_rec.matvec_acc(h, &mut gh);
    Ok(gru_gates(&gi, &gh, h))
}

/// GRU step whose recurrent product runs over the block-compressed matrix.
pub fn sparse_gru_step<F: Real>(
    g: &GruParams<F>,
    rec: &BlockSparse<F>,
    x: &[F],
    h: &[F],
) -> Result<Vec<F>> {
    if h.len() != g.units || rec.cols != g.units || rec.rows != 3 * g.units {
        return Err(Error::shape("sparse GRU hidden", g.units, h.len()));
    }
    let gi = input_projection(g, x)?;
    let mut gh = g.b_rec.clone();
    rec.matvec_acc(h, &mut gh);
    Ok(gru_gates(&gi, &gh, h))
}

/// Per-band view of a DualFC output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput<F> {
    pub bands: usize,
    pub lp_order: usize,
    pub latent: usize,
    /// `[signs (M·K) | mags (M·K) | latent (M·L)]`
    pub data: Vec<F>,
}

impl<F: Real> HeadOutput<F> {
    pub fn sign(&self, m: usize) -> &[F] {
        let k = self.lp_order;
        &self.data[m * k..(m + 1) * k]
    }

    pub fn mag(&self, m: usize) -> &[F] {
        let k = self.lp_order;
        let o = self.bands * k;
        &self.data[o + m * k..o + (m + 1) * k]
    }

    pub fn latent(&self, m: usize) -> &[F] {
        let o = 2 * self.bands * self.lp_order;
        &self.data[o + m * self.latent..o + (m + 1) * self.latent]
    }
}

/// Activation of output unit `j` in the DualFC layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadAct {
    Tanh,
    Exp,
    Identity,
}

pub fn head_act(cfg: &NetworkConfig, j: usize) -> HeadAct {
    let mk = cfg.bands * cfg.lp_order;
    if j < mk {
        HeadAct::Tanh
    } else if j < 2 * mk {
        HeadAct::Exp
    } else {
        HeadAct::Identity
    }
}

#[inline]
pub fn apply_act<F: Real>(act: HeadAct, x: F) -> F {
    match act {
        HeadAct::Tanh => x.tanh(),
        HeadAct::Exp => x.exp(),
        HeadAct::Identity => x,
    }
}

/// `0.5·exp(λ1)⊙act(W1 h + b1) + 0.5·exp(λ2)⊙act(W2 h + b2)`.
pub fn dual_fc_head<F: Real>(
    p: &DualFcParams<F>,
    cfg: &NetworkConfig,
    h: &[F],
) -> Result<HeadOutput<F>> {
    if p.ch1.out_dim() != cfg.head_output() {
        return Err(Error::shape("DualFC output", cfg.head_output(), p.ch1.out_dim()));
    }
    if h.len() != p.ch1.in_dim() {
        return Err(Error::shape("DualFC input", p.ch1.in_dim(), h.len()));
    }
    let y1 = p.ch1.forward(h);
    let y2 = p.ch2.forward(h);
    let half = F::c(0.5);
    let data = (0..y1.len())
        .map(|j| {
            let act = head_act(cfg, j);
            half * p.lambda1[j].exp() * apply_act(act, y1[j])
                + half * p.lambda2[j].exp() * apply_act(act, y2[j])
        })
        .collect();
    Ok(HeadOutput {
        bands: cfg.bands,
        lp_order: cfg.lp_order,
        latent: cfg.logit_latent,
        data,
    })
}

/// Hadamard product of LP signs and magnitudes.
pub fn lp_coefficients<F: Real>(sign: &[F], mag: &[F]) -> Vec<F> {
    debug_assert_eq!(sign.len(), mag.len());
    sign.iter().zip(mag).map(|(s, m)| *s * *m).collect()
}

/// Hidden activations and output logits of the residual FC.
pub fn residual_forward<F: Real>(p: &ResidualParams<F>, latent: &[F]) -> (Vec<F>, Vec<F>) {
    let hidden: Vec<F> = p.fc1.forward(latent).into_iter().map(relu).collect();
    let out = p.fc2.forward(&hidden).into_iter().map(tanhshrink).collect();
    (hidden, out)
}

pub fn residual_logits<F: Real>(p: &ResidualParams<F>, latent: &[F]) -> Vec<F> {
    residual_forward(p, latent).1
}

/// `o + sum_k a[k] v_{t-1-k}`. `history[k]` is the bin `k + 1` steps back,
/// `None` before the stream start (contributes nothing).
pub fn lp_combine<F: Real>(a: &[F], history: &[Option<usize>], o: &[F]) -> Result<Vec<F>> {
    if a.len() != history.len() {
        return Err(Error::shape("LP history", a.len(), history.len()));
    }
    let mut out = o.to_vec();
    for (&ak, h) in a.iter().zip(history) {
        if let Some(b) = *h {
            if b >= out.len() {
                return Err(Error::shape("LP history bin", out.len(), b));
            }
            out[b] += ak;
        }
    }
    Ok(out)
}

/// Numerically stable softmax; NaN logits are an error.
pub fn logits_to_probs<F: Real>(o: &[F]) -> Result<Vec<F>> {
    if o.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN logit".into()));
    }
    let mx = o.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = o.iter().map(|&v| (v - mx).exp()).collect();
    let s: F = e.iter().copied().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `log softmax(o)[i]`.
pub fn log_prob<F: Real>(o: &[F], i: usize) -> F {
    let mx = o.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = o.iter().map(|&v| (v - mx).exp()).sum();
    o[i] - mx - s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::Matrix;
    use crate::model::NetworkConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn randv(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn small_cfg() -> NetworkConfig {
        NetworkConfig {
            sample_rate: 16_000,
            frame_shift: 160,
            bands: 2,
            lp_order: 2,
            cond_dim: 3,
            segconv_prev: 2,
            segconv_next: 1,
            cond_proj: 5,
            embed_dim: 4,
            sparse_units: 16,
            dense_units: 8,
            head_bins: 32,
            logit_latent: 4,
            residual_hidden: 6,
        }
    }

    #[test]
    fn tanhshrink_closed_form() {
        assert!((tanhshrink(1.0f64) - 0.238_405_844_044_235_1).abs() < 1e-12);
        assert_eq!(tanhshrink(0.0f64), 0.0);
    }

    #[test]
    fn segconv_zero_window_gives_zero() {
        let mut p = ModelParams::<f64>::init(small_cfg(), &mut rng(0)).unwrap();
        p.segconv.b.fill(0.0);
        p.cond_fc.b.fill(0.0);
        let y = segmental_conv(&p, &vec![0.0; p.cfg.segconv_dim()]).unwrap();
        assert_eq!(y.len(), p.cfg.cond_proj);
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(segmental_conv(&p, &[0.0; 3]).is_err());
    }

    #[test]
    fn segconv_matches_matmul_oracle() {
        let mut r = rng(1);
        let p = ModelParams::<f64>::init(small_cfg(), &mut r).unwrap();
        let w = randv(&mut r, p.cfg.segconv_dim());
        let got = segmental_conv(&p, &w).unwrap();
        for (i, g) in got.iter().enumerate() {
            let mut acc = p.cond_fc.b[i];
            for j in 0..p.cfg.segconv_dim() {
                let mut s = p.segconv.b[j];
                for l in 0..w.len() {
                    s += p.segconv.w.at(j, l) * w[l];
                }
                acc += p.cond_fc.w.at(i, j) * s;
            }
            assert!((g - acc.max(0.0)).abs() < 1e-12);
            assert!(*g >= 0.0);
        }
    }

    fn reference_gru(g: &GruParams<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
        let u = g.units;
        let row = |m: &Matrix<f64>, r: usize, v: &[f64]| -> f64 {
            (0..v.len()).map(|c| m.at(r, c) * v[c]).sum()
        };
        (0..u)
            .map(|i| {
                let s = |x: f64| 1.0 / (1.0 + (-x).exp());
                let z = s(row(&g.w_in, i, x) + g.b_in[i] + row(&g.w_rec, i, h) + g.b_rec[i]);
                let rr = s(row(&g.w_in, u + i, x)
                    + g.b_in[u + i]
                    + row(&g.w_rec, u + i, h)
                    + g.b_rec[u + i]);
                let n = (row(&g.w_in, 2 * u + i, x)
                    + g.b_in[2 * u + i]
                    + rr * (row(&g.w_rec, 2 * u + i, h) + g.b_rec[2 * u + i]))
                    .tanh();
                (1.0 - z) * n + z * h[i]
            })
            .collect()
    }

    #[test]
    fn gru_zero_fixed_point_and_range() {
        let mut r = rng(2);
        let mut g = GruParams::<f64>::init(8, 5, false, &mut r);
        let h = gru_step(&g, &[0.0; 5], &[0.0; 8]).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        for v in g.b_in.iter_mut() {
            *v = r.gen_range(-3.0..3.0);
        }
        let mut h = vec![0.0; 8];
        for _ in 0..20 {
            h = gru_step(&g, &randv(&mut r, 5), &h).unwrap();
            assert!(h.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn gru_matches_scalar_reference() {
        let mut r = rng(3);
        let mut g = GruParams::<f64>::init(8, 5, false, &mut r);
        g.b_in = randv(&mut r, 24);
        g.b_rec = randv(&mut r, 24);
        let (x, h) = (randv(&mut r, 5), randv(&mut r, 8));
        let got = gru_step(&g, &x, &h).unwrap();
        let want = reference_gru(&g, &x, &h);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sparse_step_equals_dense_on_masked_weights() {
        let mut r = rng(4);
        for case in 0..20 {
            let mut g = GruParams::<f64>::init(32, 7, true, &mut r);
            g.b_rec = randv(&mut r, 96);
            let mask = g.mask.as_mut().unwrap();
            for k in mask.keep.iter_mut() {
                *k = r.gen_bool(if case == 0 { 1.0 } else { 0.3 });
            }
            g.apply_mask();
            let bs = BlockSparse::from_masked(&g.w_rec, g.mask.as_ref().unwrap());
            let (x, h) = (randv(&mut r, 7), randv(&mut r, 32));
            let a = sparse_gru_step(&g, &bs, &x, &h).unwrap();
            let b = reference_gru(&g, &x, &h);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn dual_fc_ranges_and_oracle() {
        let cfg = small_cfg();
        let mut r = rng(5);
        let mut p = DualFcParams::<f64>::init(cfg.head_output(), 8, &mut r);
        p.lambda1 = randv(&mut r, cfg.head_output());
        p.lambda2 = randv(&mut r, cfg.head_output());
        let h = randv(&mut r, 8);
        let out = dual_fc_head(&p, &cfg, &h).unwrap();
        for m in 0..cfg.bands {
            assert!(out.sign(m).iter().all(|v| v.abs() < 1.0));
            assert!(out.mag(m).iter().all(|&v| v > 0.0));
            assert_eq!(out.latent(m).len(), cfg.logit_latent);
        }
        let y1 = p.ch1.forward(&h);
        let y2 = p.ch2.forward(&h);
        let mk = cfg.bands * cfg.lp_order;
        for j in 0..cfg.head_output() {
            let f = |v: f64| {
                if j < mk {
                    v.tanh()
                } else if j < 2 * mk {
                    v.exp()
                } else {
                    v
                }
            };
            let want = 0.5 * p.lambda1[j].exp() * f(y1[j]) + 0.5 * p.lambda2[j].exp() * f(y2[j]);
            assert!((out.data[j] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn dual_fc_identical_channels_is_single_channel() {
        let cfg = small_cfg();
        let mut p = DualFcParams::<f64>::init(cfg.head_output(), 8, &mut rng(6));
        p.ch2 = p.ch1.clone();
        let h = randv(&mut rng(7), 8);
        let out = dual_fc_head(&p, &cfg, &h).unwrap();
        let y = p.ch1.forward(&h);
        for (j, (o, v)) in out.data.iter().zip(&y).enumerate() {
            assert_eq!(*o, apply_act(head_act(&cfg, j), *v));
        }
    }

    #[test]
    fn lp_coefficient_examples() {
        assert_eq!(lp_coefficients(&[-0.5], &[2.0]), vec![-1.0]);
        assert_eq!(lp_coefficients(&[0.0, 0.0], &[3.0, 9.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn residual_zero_and_band_sharing() {
        let mut p = ResidualParams::<f64>::init(4, 6, 32, &mut rng(8));
        p.fc1.b.fill(0.0);
        p.fc2.b.fill(0.0);
        assert!(residual_logits(&p, &[0.0; 4]).iter().all(|&v| v == 0.0));
        let mut r = rng(9);
        let lat: Vec<Vec<f64>> = (0..3).map(|_| randv(&mut r, 4)).collect();
        let fwd: Vec<_> = lat.iter().map(|l| residual_logits(&p, l)).collect();
        let rev: Vec<_> = lat.iter().rev().map(|l| residual_logits(&p, l)).collect();
        assert_eq!(fwd[0], rev[2]);
        assert_eq!(fwd[2], rev[0]);
    }

    #[test]
    fn lp_combine_examples() {
        let o = vec![0.0; 32];
        let y = lp_combine(&[0.5, -0.25], &[Some(3), Some(3)], &o).unwrap();
        assert_eq!(y[3], 0.25);
        assert_eq!(y.iter().filter(|&&v| v != 0.0).count(), 1);
        let o: Vec<f64> = (0..32).map(|i| i as f64).collect();
        assert_eq!(lp_combine(&[], &[], &o).unwrap(), o);
        let y = lp_combine(&[1.0, 2.0], &[None, Some(5)], &o).unwrap();
        assert_eq!(y[5], 7.0);
        assert!(lp_combine(&[1.0], &[], &o).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = logits_to_probs(&[0.7f64; 32]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 32.0).abs() < 1e-15));
        let mut r = rng(10);
        let o = randv(&mut r, 32);
        let shifted: Vec<f64> = o.iter().map(|v| v + 123.0).collect();
        let a = logits_to_probs(&o).unwrap();
        let b = logits_to_probs(&shifted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(logits_to_probs(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn softmax_matches_frozen_high_precision_values() {
        // Computed with 50-digit arithmetic for logits [2, -1, 0.5, 3].
        let p = logits_to_probs(&[2.0f64, -1.0, 0.5, 3.0]).unwrap();
        let want = [
            0.250_551_271_867_114_705_8,
            0.012_474_213_302_103_305_61,
            0.055_905_545_417_102_085_47,
            0.681_068_969_413_679_903_1,
        ];
        for (a, b) in p.iter().zip(&want) {
            assert!(((a - b) / b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    proptest::proptest! {
        #[test]
        fn probs_sum_to_one(o in proptest::collection::vec(-50.0f64..50.0, 32)) {
            let p = logits_to_probs(&o).unwrap();
            let s: f64 = p.iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-9);
            proptest::prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn lp_combine_touches_at_most_k_bins(
            a in proptest::collection::vec(-3.0f64..3.0, 0..8),
            seed in 0u64..1000,
        ) {
            let mut r = rng(seed);
            let hist: Vec<Option<usize>> = a.iter().map(|_| r.gen_bool(0.8).then(|| r.gen_range(0..32))).collect();
            let o = randv(&mut r, 32);
            let y = lp_combine(&a, &hist, &o).unwrap();
            let changed = y.iter().zip(&o).filter(|(u, v)| u != v).count();
            proptest::prop_assert!(changed <= a.len());
            // Naive loop oracle.
            let mut want = o.clone();
            for b in 0..32 {
                for k in 0..a.len() {
                    if hist[k] == Some(b) {
                        want[b] += a[k];
                    }
                }
            }
            for (u, v) in y.iter().zip(&want) {
                proptest::prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
