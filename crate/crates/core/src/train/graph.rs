//! Teacher-forced forward pass with recorded activations, the training
//! objective, and reverse-mode gradients for every parameter.

use rand::Rng;

use crate::codec::{merge_coarse_fine, mulaw_decode, MuLawSpec};
use crate::dsp::{PqmfBank, SubbandTensor};
use crate::error::{Error, Result};
use crate::loss::{ce_head, LossWeights, MultibandStftLoss};
use crate::model::layers::{apply_act, head_act, relu, sigmoid, HeadAct};
use crate::model::{
    DualFcParams, GruParams, Head, Linear, Matrix, ModelParams, NetworkConfig, ResidualParams,
    SynthState,
};
use crate::sampler::{soft_discretize, GumbelDraw, SoftSample};

/// Consecutive frames of one utterance with their target bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Stacked segmental-conv window per frame.
    pub windows: Vec<Vec<f64>>,
    /// Target bins `[step][band]`.
    pub coarse: Vec<Vec<usize>>,
    pub fine: Vec<Vec<usize>>,
}

impl Segment {
    pub fn steps(&self) -> usize {
        self.coarse.len()
    }

    /// Decoded target band signals.
    pub fn target_bands(&self, bands: usize, spec: &MuLawSpec) -> SubbandTensor {
        let mut t = SubbandTensor::zeros(bands, self.steps());
        for s in 0..self.steps() {
            for m in 0..bands {
                t.band_mut(m)[s] = mulaw_decode(merge_coarse_fine(self.coarse[s][m], self.fine[s][m]), spec);
            }
        }
        t
    }

    fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        let spf = cfg.steps_per_frame();
        if self.windows.is_empty() || self.steps() != self.windows.len() * spf || self.fine.len() != self.steps() {
            return Err(Error::shape("segment steps", self.windows.len() * spf, self.steps()));
        }
        if self.windows.iter().any(|w| w.len() != cfg.segconv_dim()) {
            return Err(Error::shape("segment window", cfg.segconv_dim(), 0));
        }
        for row in self.coarse.iter().chain(&self.fine) {
            if row.len() != cfg.bands || row.iter().any(|&b| b >= cfg.head_bins) {
                return Err(Error::Format("segment target bins out of range".into()));
            }
        }
        Ok(())
    }
}

/// Random quantities of one lane: dropout scales and Gumbel draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// Per step, a `cond_proj` vector of `0` or `1 / (1 - p)`; empty without dropout.
    pub dropout: Vec<Vec<f64>>,
    /// Per step: coarse draws of every band, then fine draws of every band.
    pub draws: Vec<(Vec<GumbelDraw>, Vec<GumbelDraw>)>,
}

impl Noise {
    pub fn sample(cfg: &NetworkConfig, steps: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        let dropout = if dropout > 0.0 {
            let keep = 1.0 / (1.0 - dropout);
            (0..steps)
                .map(|_| {
                    (0..cfg.cond_proj)
                        .map(|_| if rng.gen::<f64>() < dropout { 0.0 } else { keep })
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        let draws = (0..steps)
            .map(|_| {
                let c = (0..cfg.bands).map(|_| GumbelDraw::sample(rng, cfg.head_bins)).collect();
                let f = (0..cfg.bands).map(|_| GumbelDraw::sample(rng, cfg.head_bins)).collect();
                (c, f)
            })
            .collect();
        Self { dropout, draws }
    }
}

#[derive(Debug, Clone)]
struct GruTape {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    gh_n: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ResTape {
    pre1: Vec<f64>,
    hidden: Vec<f64>,
    z: Vec<f64>,
}

#[derive(Debug, Clone)]
struct HeadTape {
    h: Vec<f64>,
    y1: Vec<f64>,
    y2: Vec<f64>,
    out: Vec<f64>,
    res: Vec<ResTape>,
    hist: Vec<Vec<Option<usize>>>,
}

#[derive(Debug, Clone)]
struct StepTape {
    frame: usize,
    sparse: GruTape,
    coarse: GruTape,
    fine: GruTape,
    coarse_head: HeadTape,
    fine_head: HeadTape,
    prev_c: Vec<usize>,
    prev_f: Vec<usize>,
    cur_c: Vec<usize>,
}

#[derive(Debug, Clone)]
struct FrameTape {
    window: Vec<f64>,
    seg: Vec<f64>,
    pre: Vec<f64>,
    cond: Vec<f64>,
}

/// Recorded forward pass of one segment.
#[derive(Debug, Clone)]
pub struct Tape {
    frames: Vec<FrameTape>,
    steps: Vec<StepTape>,
    /// `[step][band]` logits.
    pub coarse_logits: Vec<Vec<Vec<f64>>>,
    pub fine_logits: Vec<Vec<Vec<f64>>>,
}

fn linear(l: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    l.forward(x)
}

fn gru_fwd(g: &GruParams<f64>, x: Vec<f64>, h: &[f64]) -> (Vec<f64>, GruTape) {
    let u = g.units;
    let mut gi = g.b_in.clone();
    g.w_in.matvec_acc(&x, &mut gi);
    let mut gh = g.b_rec.clone();
    g.w_rec.matvec_acc(h, &mut gh);
    let mut z = vec![0.0; u];
    let mut r = vec![0.0; u];
    let mut n = vec![0.0; u];
    let mut out = vec![0.0; u];
    for i in 0..u {
        z[i] = sigmoid(gi[i] + gh[i]);
        r[i] = sigmoid(gi[u + i] + gh[u + i]);
        n[i] = (gi[2 * u + i] + r[i] * gh[2 * u + i]).tanh();
        out[i] = (1.0 - z[i]) * n[i] + z[i] * h[i];
    }
    let tape = GruTape {
        x,
        h_prev: h.to_vec(),
        z,
        r,
        n,
        gh_n: gh[2 * u..].to_vec(),
    };
    (out, tape)
}

/// Returns `(dx, dh_prev)`.
fn gru_bwd(g: &GruParams<f64>, t: &GruTape, dh: &[f64], grad: &mut GruParams<f64>) -> (Vec<f64>, Vec<f64>) {
    let u = g.units;
    let mut dgi = vec![0.0; 3 * u];
    let mut dgh = vec![0.0; 3 * u];
    let mut dh_prev = vec![0.0; u];
    for i in 0..u {
        let (z, r, n) = (t.z[i], t.r[i], t.n[i]);
        let dn = dh[i] * (1.0 - z);
        let dz = dh[i] * (t.h_prev[i] - n);
        dh_prev[i] = dh[i] * z;
        let dan = dn * (1.0 - n * n);
        let dr = dan * t.gh_n[i];
        let dar = dr * r * (1.0 - r);
        let daz = dz * z * (1.0 - z);
        dgi[i] = daz;
        dgi[u + i] = dar;
        dgi[2 * u + i] = dan;
        dgh[i] = daz;
        dgh[u + i] = dar;
        dgh[2 * u + i] = dan * r;
    }
    grad.w_in.outer_acc(&dgi, &t.x);
    grad.w_rec.outer_acc(&dgh, &t.h_prev);
    for i in 0..3 * u {
        grad.b_in[i] += dgi[i];
        grad.b_rec[i] += dgh[i];
    }
    let mut dx = vec![0.0; t.x.len()];
    g.w_in.matvec_t_acc(&dgi, &mut dx);
    g.w_rec.matvec_t_acc(&dgh, &mut dh_prev);
    (dx, dh_prev)
}

fn head_fwd(
    dual: &DualFcParams<f64>,
    res: &ResidualParams<f64>,
    cfg: &NetworkConfig,
    h: &[f64],
    hist: &[Vec<Option<usize>>],
) -> (Vec<Vec<f64>>, HeadTape) {
    let y1 = linear(&dual.ch1, h);
    let y2 = linear(&dual.ch2, h);
    let out: Vec<f64> = (0..y1.len())
        .map(|j| {
            let a = head_act(cfg, j);
            0.5 * dual.lambda1[j].exp() * apply_act(a, y1[j]) + 0.5 * dual.lambda2[j].exp() * apply_act(a, y2[j])
        })
        .collect();
    let (k, l, mk) = (cfg.lp_order, cfg.logit_latent, cfg.bands * cfg.lp_order);
    let mut logits = Vec::with_capacity(cfg.bands);
    let mut tapes = Vec::with_capacity(cfg.bands);
    for m in 0..cfg.bands {
        let lat = &out[2 * mk + m * l..2 * mk + (m + 1) * l];
        let pre1 = linear(&res.fc1, lat);
        let hidden: Vec<f64> = pre1.iter().map(|&v| relu(v)).collect();
        let z = linear(&res.fc2, &hidden);
        let mut o: Vec<f64> = z.iter().map(|&v| v - v.tanh()).collect();
        for (kk, hb) in hist[m].iter().enumerate() {
            if let Some(b) = *hb {
                o[b] += out[m * k + kk] * out[mk + m * k + kk];
            }
        }
        logits.push(o);
        tapes.push(ResTape { pre1, hidden, z });
    }
    let tape = HeadTape {
        h: h.to_vec(),
        y1,
        y2,
        out,
        res: tapes,
        hist: hist.to_vec(),
    };
    (logits, tape)
}

/// Returns `dL/dh` of the head input.
fn head_bwd(
    dual: &DualFcParams<f64>,
    res: &ResidualParams<f64>,
    cfg: &NetworkConfig,
    t: &HeadTape,
    dlogits: &[Vec<f64>],
    gdual: &mut DualFcParams<f64>,
    gres: &mut ResidualParams<f64>,
) -> Vec<f64> {
    let (k, l, mk) = (cfg.lp_order, cfg.logit_latent, cfg.bands * cfg.lp_order);
    let mut dout = vec![0.0; t.out.len()];
    for m in 0..cfg.bands {
        let d = &dlogits[m];
        for (kk, hb) in t.hist[m].iter().enumerate() {
            if let Some(b) = *hb {
                let (si, mi) = (m * k + kk, mk + m * k + kk);
                dout[si] += d[b] * t.out[mi];
                dout[mi] += d[b] * t.out[si];
            }
        }
        let rt = &t.res[m];
        let dz: Vec<f64> = d.iter().zip(&rt.z).map(|(g, z)| g * z.tanh().powi(2)).collect();
        gres.fc2.w.outer_acc(&dz, &rt.hidden);
        for (b, g) in gres.fc2.b.iter_mut().zip(&dz) {
            *b += g;
        }
        let mut dhid = vec![0.0; rt.hidden.len()];
        res.fc2.w.matvec_t_acc(&dz, &mut dhid);
        for (dh, p) in dhid.iter_mut().zip(&rt.pre1) {
            if *p <= 0.0 {
                *dh = 0.0;
            }
        }
        let lat = &t.out[2 * mk + m * l..2 * mk + (m + 1) * l];
        gres.fc1.w.outer_acc(&dhid, lat);
        for (b, g) in gres.fc1.b.iter_mut().zip(&dhid) {
            *b += g;
        }
        res.fc1.w.matvec_t_acc(&dhid, &mut dout[2 * mk + m * l..2 * mk + (m + 1) * l]);
    }
    let n = t.out.len();
    let mut dy1 = vec![0.0; n];
    let mut dy2 = vec![0.0; n];
    for j in 0..n {
        let act = head_act(cfg, j);
        for (y, lam, dy, glam) in [
            (t.y1[j], dual.lambda1[j], &mut dy1[j], &mut gdual.lambda1[j]),
            (t.y2[j], dual.lambda2[j], &mut dy2[j], &mut gdual.lambda2[j]),
        ] {
            let e = 0.5 * lam.exp();
            let a = apply_act(act, y);
            *glam += dout[j] * e * a;
            let da = match act {
                HeadAct::Tanh => 1.0 - a * a,
                HeadAct::Exp => a,
                HeadAct::Identity => 1.0,
            };
            *dy = dout[j] * e * da;
        }
    }
    gdual.ch1.w.outer_acc(&dy1, &t.h);
    gdual.ch2.w.outer_acc(&dy2, &t.h);
    for j in 0..n {
        gdual.ch1.b[j] += dy1[j];
        gdual.ch2.b[j] += dy2[j];
    }
    let mut dh = vec![0.0; t.h.len()];
    dual.ch1.w.matvec_t_acc(&dy1, &mut dh);
    dual.ch2.w.matvec_t_acc(&dy2, &mut dh);
    dh
}

fn embed(table: &Matrix<f64>, bins: &[usize], out: &mut Vec<f64>) {
    for &b in bins {
        out.extend_from_slice(table.row(b));
    }
}

/// Teacher-forced forward pass. `state` supplies the carried hidden vectors
/// and histories and is advanced to the end of the segment.
pub fn forward(p: &ModelParams<f64>, seg: &Segment, state: &mut SynthState<f64>, dropout: &[Vec<f64>]) -> Result<Tape> {
    let cfg = p.cfg;
    seg.check(&cfg)?;
    if !dropout.is_empty() && dropout.len() != seg.steps() {
        return Err(Error::shape("dropout scales", seg.steps(), dropout.len()));
    }
    let spf = cfg.steps_per_frame();
    let frames: Vec<FrameTape> = seg
        .windows
        .iter()
        .map(|w| {
            let s = linear(&p.segconv, w);
            let pre = linear(&p.cond_fc, &s);
            let cond = pre.iter().map(|&v| relu(v)).collect();
            FrameTape {
                window: w.clone(),
                seg: s,
                pre,
                cond,
            }
        })
        .collect();
    let mut steps = Vec::with_capacity(seg.steps());
    let mut coarse_logits = Vec::with_capacity(seg.steps());
    let mut fine_logits = Vec::with_capacity(seg.steps());
    for t in 0..seg.steps() {
        let frame = t / spf;
        let mut cond = frames[frame].cond.clone();
        if let Some(d) = dropout.get(t) {
            for (c, s) in cond.iter_mut().zip(d) {
                *c *= s;
            }
        }
        let mut xs = Vec::with_capacity(cfg.sparse_input());
        xs.extend_from_slice(&cond);
        embed(&p.embed_coarse, &state.last_coarse, &mut xs);
        embed(&p.embed_fine, &state.last_fine, &mut xs);
        let (hs, ts) = gru_fwd(&p.sparse_gru, xs, &state.h_sparse);

        let mut xc = Vec::with_capacity(cfg.coarse_input());
        xc.extend_from_slice(&hs);
        xc.extend_from_slice(&cond);
        let mut xf = xc.clone();
        let (hc, tc) = gru_fwd(&p.coarse_gru, xc, &state.h_coarse);
        let (lc, thc) = head_fwd(&p.coarse_head, &p.coarse_residual, &cfg, &hc, &state.coarse_hist);

        let cur_c = seg.coarse[t].clone();
        embed(&p.embed_coarse, &cur_c, &mut xf);
        let (hf, tf) = gru_fwd(&p.fine_gru, xf, &state.h_fine);
        let (lf, thf) = head_fwd(&p.fine_head, &p.fine_residual, &cfg, &hf, &state.fine_hist);

        steps.push(StepTape {
            frame,
            sparse: ts,
            coarse: tc,
            fine: tf,
            coarse_head: thc,
            fine_head: thf,
            prev_c: state.last_coarse.clone(),
            prev_f: state.last_fine.clone(),
            cur_c,
        });
        state.h_sparse = hs;
        state.h_coarse = hc;
        state.h_fine = hf;
        state.commit(&seg.coarse[t], &seg.fine[t]);
        coarse_logits.push(lc);
        fine_logits.push(lf);
    }
    Ok(Tape {
        frames,
        steps,
        coarse_logits,
        fine_logits,
    })
}

/// Accumulates parameter gradients of one segment given `dL/d logits`.
pub fn backward(
    p: &ModelParams<f64>,
    tape: &Tape,
    dropout: &[Vec<f64>],
    dcoarse: &[Vec<Vec<f64>>],
    dfine: &[Vec<Vec<f64>>],
    grad: &mut ModelParams<f64>,
) {
    let cfg = p.cfg;
    let (n_s, pc, me) = (cfg.sparse_units, cfg.cond_proj, cfg.bands * cfg.embed_dim);
    let e = cfg.embed_dim;
    let mut dh_s = vec![0.0; cfg.sparse_units];
    let mut dh_c = vec![0.0; cfg.dense_units];
    let mut dh_f = vec![0.0; cfg.dense_units];
    let mut dcond_frames = vec![vec![0.0; pc]; tape.frames.len()];
    for (t, st) in tape.steps.iter().enumerate().rev() {
        let dhf_head = head_bwd(
            &p.fine_head,
            &p.fine_residual,
            &cfg,
            &st.fine_head,
            &dfine[t],
            &mut grad.fine_head,
            &mut grad.fine_residual,
        );
        for (a, b) in dh_f.iter_mut().zip(&dhf_head) {
            *a += b;
        }
        let (dxf, dhf_prev) = gru_bwd(&p.fine_gru, &st.fine, &dh_f, &mut grad.fine_gru);

        let dhc_head = head_bwd(
            &p.coarse_head,
            &p.coarse_residual,
            &cfg,
            &st.coarse_head,
            &dcoarse[t],
            &mut grad.coarse_head,
            &mut grad.coarse_residual,
        );
        for (a, b) in dh_c.iter_mut().zip(&dhc_head) {
            *a += b;
        }
        let (dxc, dhc_prev) = gru_bwd(&p.coarse_gru, &st.coarse, &dh_c, &mut grad.coarse_gru);

        for i in 0..n_s {
            dh_s[i] += dxf[i] + dxc[i];
        }
        let mut dcond: Vec<f64> = (0..pc).map(|i| dxf[n_s + i] + dxc[n_s + i]).collect();
        for (m, &b) in st.cur_c.iter().enumerate() {
            let off = n_s + pc + m * e;
            for (g, d) in grad.embed_coarse.data[b * e..(b + 1) * e].iter_mut().zip(&dxf[off..off + e]) {
                *g += d;
            }
        }

        let (dxs, dhs_prev) = gru_bwd(&p.sparse_gru, &st.sparse, &dh_s, &mut grad.sparse_gru);
        for i in 0..pc {
            dcond[i] += dxs[i];
        }
        for (m, &b) in st.prev_c.iter().enumerate() {
            let off = pc + m * e;
            for (g, d) in grad.embed_coarse.data[b * e..(b + 1) * e].iter_mut().zip(&dxs[off..off + e]) {
                *g += d;
            }
        }
        for (m, &b) in st.prev_f.iter().enumerate() {
            let off = pc + me + m * e;
            for (g, d) in grad.embed_fine.data[b * e..(b + 1) * e].iter_mut().zip(&dxs[off..off + e]) {
                *g += d;
            }
        }
        let df = &mut dcond_frames[st.frame];
        match dropout.get(t) {
            Some(s) => df.iter_mut().zip(&dcond).zip(s).for_each(|((a, b), s)| *a += b * s),
            None => df.iter_mut().zip(&dcond).for_each(|(a, b)| *a += b),
        }
        dh_s = dhs_prev;
        dh_c = dhc_prev;
        dh_f = dhf_prev;
    }
    for (ft, dc) in tape.frames.iter().zip(&dcond_frames) {
        let dpre: Vec<f64> = dc.iter().zip(&ft.pre).map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }).collect();
        debug_assert_eq!(ft.cond.len(), dpre.len());
        grad.cond_fc.w.outer_acc(&dpre, &ft.seg);
        for (b, g) in grad.cond_fc.b.iter_mut().zip(&dpre) {
            *b += g;
        }
        let mut dseg = vec![0.0; ft.seg.len()];
        p.cond_fc.w.matvec_t_acc(&dpre, &mut dseg);
        grad.segconv.w.outer_acc(&dseg, &ft.window);
        for (b, g) in grad.segconv.b.iter_mut().zip(&dseg) {
            *b += g;
        }
    }
    grad.apply_masks();
}

/// Shared, immutable pieces of the objective.
#[derive(Debug)]
pub struct Objective {
    pub bank: PqmfBank,
    pub stft: MultibandStftLoss,
    pub spec: MuLawSpec,
    pub weights: LossWeights,
}

/// Loss values of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub ce_coarse: f64,
    pub ce_fine: f64,
    pub stft: f64,
    pub total: f64,
}

impl LossReport {
    pub fn ce(&self) -> f64 {
        self.ce_coarse + self.ce_fine
    }
}

/// Gradients w.r.t. every logit of every lane, plus the sampled values.
#[derive(Debug, Clone)]
pub struct LogitGrads {
    pub coarse: Vec<Vec<Vec<Vec<f64>>>>,
    pub fine: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[lane][step][band]`
    pub samples: Vec<Vec<Vec<SoftSample>>>,
}

/// Per-lane inputs to the objective.
pub struct LaneView<'a> {
    pub segment: &'a Segment,
    pub coarse_logits: &'a [Vec<Vec<f64>>],
    pub fine_logits: &'a [Vec<Vec<f64>>],
    pub noise: &'a Noise,
}

impl Objective {
    /// Cross-entropy (mean over every step, band and lane, summed over heads)
    /// plus the STFT loss (mean over lanes). With `frozen` the discretized
    /// samples use the relaxed expression around the given samples; no
    /// gradients are produced in that mode.
    pub fn evaluate(
        &self,
        lanes: &[LaneView<'_>],
        frozen: Option<&[Vec<Vec<SoftSample>>]>,
        want_grad: bool,
    ) -> Result<(LossReport, Option<LogitGrads>)> {
        let mut lc = Vec::new();
        let mut lf = Vec::new();
        let mut tc = Vec::new();
        let mut tf = Vec::new();
        for l in lanes {
            lc.extend(l.coarse_logits.iter().flatten().cloned());
            lf.extend(l.fine_logits.iter().flatten().cloned());
            tc.extend(l.segment.coarse.iter().flatten().copied());
            tf.extend(l.segment.fine.iter().flatten().copied());
        }
        let (ce_c, gc) = ce_head(&lc, &tc)?;
        let (ce_f, gf) = ce_head(&lf, &tf)?;

        let mut report = LossReport {
            ce_coarse: ce_c,
            ce_fine: ce_f,
            ..Default::default()
        };
        let mut grads = want_grad.then(|| {
            let mut it_c = gc.into_iter();
            let mut it_f = gf.into_iter();
            let mut coarse = Vec::new();
            let mut fine = Vec::new();
            for l in lanes {
                let shape = |it: &mut std::vec::IntoIter<Vec<f64>>| -> Vec<Vec<Vec<f64>>> {
                    l.coarse_logits
                        .iter()
                        .map(|step| step.iter().map(|_| it.next().unwrap().iter().map(|g| g * self.weights.ce).collect()).collect())
                        .collect()
                };
                coarse.push(shape(&mut it_c));
                fine.push(shape(&mut it_f));
            }
            LogitGrads {
                coarse,
                fine,
                samples: Vec::new(),
            }
        });

        if self.weights.stft > 0.0 || frozen.is_some() {
            let lane_scale = 1.0 / lanes.len() as f64;
            for (li, l) in lanes.iter().enumerate() {
                let bands = l.segment.coarse[0].len();
                let steps = l.segment.steps();
                let mut sampled = SubbandTensor::zeros(bands, steps);
                let mut samples = Vec::with_capacity(steps);
                for t in 0..steps {
                    let (dc, df) = &l.noise.draws[t];
                    let mut row = Vec::with_capacity(bands);
                    for m in 0..bands {
                        let (oc, of) = (&l.coarse_logits[t][m], &l.fine_logits[t][m]);
                        let v = match frozen {
                            Some(fz) => fz[li][t][m].relaxed(oc, of, &dc[m], &df[m], &self.spec)?,
                            None => {
                                let s = soft_discretize(oc, of, &dc[m], &df[m], &self.spec)?;
                                let v = s.value;
                                row.push(s);
                                v
                            }
                        };
                        sampled.band_mut(m)[t] = v;
                    }
                    samples.push(row);
                }
                let target = l.segment.target_bands(bands, &self.spec);
                let target_full = self.bank.synthesize(&target)?;
                let r = if want_grad {
                    self.stft.eval_grad(&self.bank, &sampled, &target, &target_full)?
                } else {
                    self.stft.eval(&self.bank, &sampled, &target, &target_full)?
                };
                report.stft += r.value * lane_scale;
                if let Some(g) = grads.as_mut() {
                    let w = self.weights.stft * lane_scale;
                    for t in 0..steps {
                        for m in 0..bands {
                            let dv = r.grad.band(m)[t] * w;
                            if dv == 0.0 {
                                continue;
                            }
                            let (gc, gf) = samples[t][m].backward(dv, &self.spec);
                            for (a, b) in g.coarse[li][t][m].iter_mut().zip(&gc) {
                                *a += b;
                            }
                            for (a, b) in g.fine[li][t][m].iter_mut().zip(&gf) {
                                *a += b;
                            }
                        }
                    }
                    g.samples.push(samples);
                }
            }
        }
        report.total = self.weights.ce * report.ce() + self.weights.stft * report.stft;
        Ok((report, grads))
    }
}

/// Gradient of the batch objective w.r.t. every parameter. Each lane starts
/// from its own carried state; the states are advanced.
pub fn batch_gradient(
    p: &ModelParams<f64>,
    obj: &Objective,
    segments: &[&Segment],
    states: &mut [SynthState<f64>],
    noise: &[Noise],
) -> Result<(LossReport, ModelParams<f64>)> {
    let mut tapes = Vec::with_capacity(segments.len());
    for ((seg, st), nz) in segments.iter().zip(states.iter_mut()).zip(noise) {
        tapes.push(forward(p, seg, st, &nz.dropout)?);
    }
    let views: Vec<LaneView<'_>> = tapes
        .iter()
        .zip(segments)
        .zip(noise)
        .map(|((t, s), n)| LaneView {
            segment: s,
            coarse_logits: &t.coarse_logits,
            fine_logits: &t.fine_logits,
            noise: n,
        })
        .collect();
    let (report, g) = obj.evaluate(&views, None, true)?;
    let g = g.expect("gradients requested");
    let mut grad = p.zeros_like();
    for (i, tape) in tapes.iter().enumerate() {
        backward(p, tape, &noise[i].dropout, &g.coarse[i], &g.fine[i], &mut grad);
    }
    for t in grad.tensors() {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", t.name)));
        }
    }
    Ok((report, grad))
}

/// Logits of the coarse or fine head at every step; used to compare against
/// the autoregressive path.
pub fn tape_logits(tape: &Tape, head: Head) -> &[Vec<Vec<f64>>] {
    match head {
        Head::Coarse => &tape.coarse_logits,
        Head::Fine => &tape.fine_logits,
    }
}
