//! Streaming synthesis in `f32`.
//!
//! Per conditioning frame the segmental conv and every GRU's conditioning
//! projection are computed once. Embedding inputs are folded into per-bin
//! gate tables, so a band-rate step costs one block-sparse recurrent product,
//! one fused dense product of the sparse hidden state into both dense GRUs,
//! and the small heads.
//!
//! Latency: a frame is synthesized once its `segconv_next` lookahead frames
//! have arrived, and the causal PQMF adds `order / 2` samples. The synthesizer
//! drops those first PQMF samples and drains them on [`Synthesizer::flush`],
//! so a stream of `F` frames emits exactly `F × frame_shift` samples.

mod bench;
mod complexity;
pub mod kernels;

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use crate::codec::{merge_coarse_fine, mulaw_decode, MuLawSpec, BINS};
use crate::dsp::{Deemphasis, MelFrameSeq, PqmfBank, PqmfConfig, PqmfSynthesisStream, PREEMPHASIS_ALPHA};
use crate::error::{Error, Result};
use crate::model::layers::{head_act, HeadAct};
use crate::model::{utterance_windows, BlockMask, BlockSparse, Head, Linear, ModelParams, NetworkConfig};
use crate::sampler::{sample_bin, stream_rng, StreamRng};

pub use bench::{bench_rtf, pin_to_one_core, BenchReport};
pub use complexity::{complexity, complexity_gflops, Complexity, ComplexityItem};

use kernels::{add_assign, block_sparse_acc_dir, gemv_acc, gemv_acc_dir, gru_update, tanh_approx};

#[derive(Debug, Clone)]
struct Dense {
    cols: usize,
    w: Vec<f32>,
    b: Vec<f32>,
}

impl Dense {
    fn from_linear(l: &Linear<f32>) -> Self {
        Self {
            cols: l.in_dim(),
            w: l.w.data.clone(),
            b: l.b.clone(),
        }
    }

    /// Columns `[lo, hi)` of a row-major matrix, with the given bias.
    fn slice(w: &crate::model::Matrix<f32>, lo: usize, hi: usize, b: Vec<f32>) -> Self {
        let mut data = Vec::with_capacity(w.rows * (hi - lo));
        for r in 0..w.rows {
            data.extend_from_slice(&w.row(r)[lo..hi]);
        }
        Self { cols: hi - lo, w: data, b }
    }

    fn forward(&self, x: &[f32], out: &mut Vec<f32>) {
        debug_assert_eq!(x.len(), self.cols);
        out.clear();
        out.extend_from_slice(&self.b);
        gemv_acc(&self.w, x, out);
    }
}

/// `W[:, lo..lo+e] · table[b]` for every bin `b`: `bins × rows` values.
fn gate_table(w: &crate::model::Matrix<f32>, lo: usize, table: &crate::model::Matrix<f32>) -> Vec<f32> {
    let e = table.cols;
    let part = Dense::slice(w, lo, lo + e, vec![0.0; w.rows]);
    let mut out = Vec::with_capacity(table.rows * w.rows);
    let mut v = Vec::new();
    for b in 0..table.rows {
        part.forward(table.row(b), &mut v);
        out.extend_from_slice(&v);
    }
    out
}

#[derive(Debug, Clone)]
struct Head32 {
    ch1: Dense,
    ch2: Dense,
    g1: Vec<f32>,
    g2: Vec<f32>,
    acts: Vec<HeadAct>,
    fc1: Dense,
    fc2: Dense,
}

/// Inference-ready network.
#[derive(Debug, Clone)]
pub struct EngineModel {
    cfg: NetworkConfig,
    pqmf: PqmfBank,
    decode: Vec<f32>,
    segconv: Dense,
    cond_fc: Dense,
    // Sparse GRU.
    s_cond: Dense,
    s_emb_c: Vec<f32>,
    s_emb_f: Vec<f32>,
    s_row_ptr: Vec<u32>,
    s_col_idx: Vec<u32>,
    s_values: Vec<f32>,
    s_b_rec: Vec<f32>,
    // Coarse and fine GRUs: stacked input from the sparse hidden state.
    d_hidden: Vec<f32>,
    c_cond: Dense,
    f_cond: Dense,
    f_emb_c: Vec<f32>,
    c_rec: Dense,
    f_rec: Dense,
    heads: [Head32; 2],
}

impl EngineModel {
    pub fn new(p: &ModelParams<f32>, pqmf: &PqmfConfig) -> Result<Self> {
        p.validate()?;
        let cfg = p.cfg;
        let bank = PqmfBank::design(pqmf)?;
        if bank.bands() != cfg.bands {
            return Err(Error::shape("PQMF bands", cfg.bands, bank.bands()));
        }
        let spec = MuLawSpec::default();
        let (pc, e, m) = (cfg.cond_proj, cfg.embed_dim, cfg.bands);
        let s = &p.sparse_gru;
        let s_emb = |table, base: usize| -> Vec<f32> {
            (0..m).flat_map(|j| gate_table(&s.w_in, base + j * e, table)).collect()
        };
        let mask = s.mask.clone().unwrap_or_else(|| BlockMask::dense(s.w_rec.rows, s.w_rec.cols));
        let rec = BlockSparse::from_masked(&s.w_rec, &mask);
        let s_units = cfg.sparse_units;

        let mut d_hidden = Vec::with_capacity(6 * cfg.dense_units * s_units);
        for g in [&p.coarse_gru, &p.fine_gru] {
            d_hidden.extend(Dense::slice(&g.w_in, 0, s_units, Vec::new()).w);
        }
        let head = |dual: &crate::model::DualFcParams<f32>, res: &crate::model::ResidualParams<f32>| Head32 {
            ch1: Dense::from_linear(&dual.ch1),
            ch2: Dense::from_linear(&dual.ch2),
            g1: dual.lambda1.iter().map(|l| 0.5 * l.exp()).collect(),
            g2: dual.lambda2.iter().map(|l| 0.5 * l.exp()).collect(),
            acts: (0..cfg.head_output()).map(|j| head_act(&cfg, j)).collect(),
            fc1: Dense::from_linear(&res.fc1),
            fc2: Dense::from_linear(&res.fc2),
        };
        Ok(Self {
            cfg,
            pqmf: bank,
            decode: (0..BINS).map(|b| mulaw_decode(b, &spec) as f32).collect(),
            segconv: Dense::from_linear(&p.segconv),
            cond_fc: Dense::from_linear(&p.cond_fc),
            s_cond: Dense::slice(&s.w_in, 0, pc, s.b_in.clone()),
            s_emb_c: s_emb(&p.embed_coarse, pc),
            s_emb_f: s_emb(&p.embed_fine, pc + m * e),
            s_row_ptr: rec.row_ptr,
            s_col_idx: rec.col_idx,
            s_values: rec.values,
            s_b_rec: s.b_rec.clone(),
            d_hidden,
            c_cond: Dense::slice(&p.coarse_gru.w_in, s_units, s_units + pc, p.coarse_gru.b_in.clone()),
            f_cond: Dense::slice(&p.fine_gru.w_in, s_units, s_units + pc, p.fine_gru.b_in.clone()),
            f_emb_c: (0..m)
                .flat_map(|j| gate_table(&p.fine_gru.w_in, s_units + pc + j * e, &p.embed_coarse))
                .collect(),
            c_rec: Dense {
                cols: cfg.dense_units,
                w: p.coarse_gru.w_rec.data.clone(),
                b: p.coarse_gru.b_rec.clone(),
            },
            f_rec: Dense {
                cols: cfg.dense_units,
                w: p.fine_gru.w_rec.data.clone(),
                b: p.fine_gru.b_rec.clone(),
            },
            heads: [
                head(&p.coarse_head, &p.coarse_residual),
                head(&p.fine_head, &p.fine_residual),
            ],
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn pqmf(&self) -> &PqmfBank {
        &self.pqmf
    }

    /// Stored recurrent blocks of the sparse GRU.
    pub fn sparse_blocks(&self) -> usize {
        self.s_col_idx.len()
    }
}

/// Per-stream recurrent state and scratch buffers.
#[derive(Debug, Clone)]
struct Core {
    h_s: Vec<f32>,
    h_c: Vec<f32>,
    h_f: Vec<f32>,
    // `[band][k]`, most recent first, `-1` before the stream start.
    hist_c: Vec<i32>,
    hist_f: Vec<i32>,
    last_c: Vec<usize>,
    last_f: Vec<usize>,
    rng: StreamRng,
    cond: Vec<f32>,
    seg: Vec<f32>,
    gi_s: Vec<f32>,
    gi_c: Vec<f32>,
    gi_f: Vec<f32>,
    gi: Vec<f32>,
    gh: Vec<f32>,
    // Recurrent pre-activations of the sparse GRU for the next step.
    gh_s: Vec<f32>,
    // Traversal direction of the large products, flipped every step.
    reverse: bool,
    gd: Vec<f32>,
    head: Vec<f32>,
    y2: Vec<f32>,
    hidden: Vec<f32>,
    logits: Vec<f32>,
    bins: Vec<usize>,
}

impl Core {
    fn new(cfg: &NetworkConfig, seed: u64) -> Self {
        let (c0, f0) = crate::model::initial_bins();
        let mk = cfg.bands * cfg.lp_order;
        Self {
            h_s: vec![0.0; cfg.sparse_units],
            h_c: vec![0.0; cfg.dense_units],
            h_f: vec![0.0; cfg.dense_units],
            hist_c: vec![-1; mk],
            hist_f: vec![-1; mk],
            last_c: vec![c0; cfg.bands],
            last_f: vec![f0; cfg.bands],
            rng: stream_rng(seed),
            cond: Vec::new(),
            seg: Vec::new(),
            gi_s: Vec::new(),
            gi_c: Vec::new(),
            gi_f: Vec::new(),
            gi: Vec::new(),
            gh: Vec::new(),
            gh_s: Vec::new(),
            reverse: false,
            gd: vec![0.0; 6 * cfg.dense_units],
            head: Vec::new(),
            y2: Vec::new(),
            hidden: Vec::new(),
            logits: Vec::new(),
            bins: vec![0; cfg.bands],
        }
    }

    /// Synthesizes the band samples of one frame into `out` (`[step][band]`).
    fn run_frame(
        &mut self,
        md: &EngineModel,
        window: &[f32],
        out: &mut Vec<f32>,
        choose: &mut impl FnMut(&mut StreamRng, Head, usize, &[f32]) -> usize,
    ) {
        let cfg = &md.cfg;
        md.segconv.forward(window, &mut self.seg);
        md.cond_fc.forward(&self.seg, &mut self.cond);
        self.cond.iter_mut().for_each(|v| *v = v.max(0.0));
        md.s_cond.forward(&self.cond, &mut self.gi_s);
        md.c_cond.forward(&self.cond, &mut self.gi_c);
        md.f_cond.forward(&self.cond, &mut self.gi_f);
        for _ in 0..cfg.steps_per_frame() {
            self.step(md, out, choose);
        }
    }

    fn sparse_rec(&mut self, md: &EngineModel) {
        self.gh_s.clear();
        self.gh_s.extend_from_slice(&md.s_b_rec);
        block_sparse_acc_dir(&md.s_row_ptr, &md.s_col_idx, &md.s_values, &self.h_s, &mut self.gh_s, self.reverse);
    }

    fn step(
        &mut self,
        md: &EngineModel,
        out: &mut Vec<f32>,
        choose: &mut impl FnMut(&mut StreamRng, Head, usize, &[f32]) -> usize,
    ) {
        let cfg = &md.cfg;
        let (m_bands, s3, d, b) = (cfg.bands, 3 * cfg.sparse_units, cfg.dense_units, cfg.head_bins);

        // Sparse GRU.
        self.gi.clear();
        self.gi.extend_from_slice(&self.gi_s);
        for m in 0..m_bands {
            let c = (m * b + self.last_c[m]) * s3;
            add_assign(&mut self.gi, &md.s_emb_c[c..c + s3]);
            let f = (m * b + self.last_f[m]) * s3;
            add_assign(&mut self.gi, &md.s_emb_f[f..f + s3]);
        }
        if self.gh_s.is_empty() {
            self.sparse_rec(md);
        }
        gru_update(&mut self.h_s, &self.gi, &self.gh_s);

        // Both dense GRUs read the sparse hidden state in one product. The
        // sparse recurrent product for the next step follows from the same state,
        // and the two run in alternating order so the cache keeps the weights
        // touched last.
        self.gd.fill(0.0);
        if self.reverse {
            self.sparse_rec(md);
            gemv_acc_dir(&md.d_hidden, &self.h_s, &mut self.gd, true);
        } else {
            gemv_acc_dir(&md.d_hidden, &self.h_s, &mut self.gd, false);
            self.sparse_rec(md);
        }
        self.reverse = !self.reverse;

        // Coarse.
        self.gi.clear();
        self.gi.extend_from_slice(&self.gi_c);
        add_assign(&mut self.gi, &self.gd[..3 * d]);
        md.c_rec.forward(&self.h_c, &mut self.gh);
        gru_update(&mut self.h_c, &self.gi, &self.gh);
        self.head_logits(md, Head::Coarse);
        for m in 0..m_bands {
            let c = choose(&mut self.rng, Head::Coarse, m, &self.logits[m * b..(m + 1) * b]);
            self.bins[m] = c;
        }
        let coarse = self.bins.clone();

        // Fine.
        self.gi.clear();
        self.gi.extend_from_slice(&self.gi_f);
        add_assign(&mut self.gi, &self.gd[3 * d..]);
        for (m, &c) in coarse.iter().enumerate() {
            let o = (m * b + c) * 3 * d;
            add_assign(&mut self.gi, &md.f_emb_c[o..o + 3 * d]);
        }
        md.f_rec.forward(&self.h_f, &mut self.gh);
        gru_update(&mut self.h_f, &self.gi, &self.gh);
        self.head_logits(md, Head::Fine);
        for m in 0..m_bands {
            self.bins[m] = choose(&mut self.rng, Head::Fine, m, &self.logits[m * b..(m + 1) * b]);
        }

        let k = cfg.lp_order;
        for m in 0..m_bands {
            let (c, f) = (coarse[m], self.bins[m]);
            if k > 0 {
                let hc = &mut self.hist_c[m * k..(m + 1) * k];
                hc.rotate_right(1);
                hc[0] = c as i32;
                let hf = &mut self.hist_f[m * k..(m + 1) * k];
                hf.rotate_right(1);
                hf[0] = f as i32;
            }
            self.last_c[m] = c;
            self.last_f[m] = f;
            out.push(md.decode[merge_coarse_fine(c, f)]);
        }
    }

    /// Fills `self.logits` with `[band][bin]` logits of one head.
    fn head_logits(&mut self, md: &EngineModel, head: Head) {
        let cfg = &md.cfg;
        let (hp, h, hist) = match head {
            Head::Coarse => (&md.heads[0], &self.h_c, &self.hist_c),
            Head::Fine => (&md.heads[1], &self.h_f, &self.hist_f),
        };
        hp.ch1.forward(h, &mut self.head);
        hp.ch2.forward(h, &mut self.y2);
        for j in 0..self.head.len() {
            let (a, b) = (self.head[j], self.y2[j]);
            let (a, b) = match hp.acts[j] {
                HeadAct::Tanh => (tanh_approx(a), tanh_approx(b)),
                HeadAct::Exp => (a.exp(), b.exp()),
                HeadAct::Identity => (a, b),
            };
            self.head[j] = hp.g1[j] * a + hp.g2[j] * b;
        }
        let (k, l, mk, bins) = (cfg.lp_order, cfg.logit_latent, cfg.bands * cfg.lp_order, cfg.head_bins);
        self.logits.clear();
        for m in 0..cfg.bands {
            let lat = &self.head[2 * mk + m * l..2 * mk + (m + 1) * l];
            hp.fc1.forward(lat, &mut self.hidden);
            self.hidden.iter_mut().for_each(|v| *v = v.max(0.0));
            let at = self.logits.len();
            self.logits.extend_from_slice(&hp.fc2.b);
            gemv_acc(&hp.fc2.w, &self.hidden, &mut self.logits[at..]);
            for v in &mut self.logits[at..] {
                *v -= tanh_approx(*v);
            }
            for kk in 0..k {
                let bin = hist[m * k + kk];
                if bin >= 0 {
                    let a = self.head[m * k + kk] * self.head[mk + m * k + kk];
                    self.logits[at + bin as usize] += a;
                }
            }
            debug_assert_eq!(self.logits.len(), at + bins);
        }
    }
}

fn gumbel_choose(rng: &mut StreamRng, _: Head, _: usize, logits: &[f32]) -> usize {
    sample_bin(logits, rng)
}

/// Synthesis time split.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub network: Duration,
    pub pqmf: Duration,
}

/// Incremental synthesizer: [`push_frame`](Self::push_frame) features in,
/// [`pull_samples`](Self::pull_samples) waveform out.
#[derive(Debug, Clone)]
pub struct Synthesizer<'m> {
    model: &'m EngineModel,
    core: Core,
    recent: VecDeque<Vec<f32>>,
    received: usize,
    generated: usize,
    window: Vec<f32>,
    bands: Vec<f32>,
    pqmf: PqmfSynthesisStream,
    deemph: Deemphasis<f32>,
    skip: usize,
    out: Vec<f32>,
    emitted: usize,
    finished: bool,
    timing: Timing,
}

impl<'m> Synthesizer<'m> {
    pub fn new(model: &'m EngineModel, seed: u64) -> Self {
        Self {
            model,
            core: Core::new(&model.cfg, seed),
            recent: VecDeque::new(),
            received: 0,
            generated: 0,
            window: Vec::with_capacity(model.cfg.segconv_dim()),
            bands: Vec::new(),
            pqmf: model.pqmf.synthesis_stream(),
            deemph: Deemphasis::new(PREEMPHASIS_ALPHA as f32),
            skip: model.pqmf.config().group_delay(),
            out: Vec::new(),
            emitted: 0,
            finished: false,
            timing: Timing::default(),
        }
    }

    /// Full-band samples of latency beyond the lookahead frames.
    pub fn pqmf_delay(&self) -> usize {
        self.model.pqmf.config().group_delay()
    }

    pub fn timing(&self) -> Timing {
        self.timing
    }

    pub fn push_frame(&mut self, frame: &[f32]) -> Result<()> {
        let cfg = &self.model.cfg;
        if self.finished {
            return Err(Error::Stream("frame pushed after flush".into()));
        }
        if frame.len() != cfg.cond_dim {
            return Err(Error::shape("feature frame", cfg.cond_dim, frame.len()));
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature frame".into()));
        }
        self.recent.push_back(frame.to_vec());
        if self.recent.len() > cfg.window() {
            self.recent.pop_front();
        }
        self.received += 1;
        while self.generated + cfg.segconv_next < self.received {
            self.generate_next();
        }
        Ok(())
    }

    /// Ends the stream: synthesizes the remaining frames with the last frame
    /// repeated as lookahead and drains the PQMF delay.
    pub fn flush(&mut self) -> Result<()> {
        if self.finished {
            return Ok(());
        }
        if self.received == 0 {
            return Err(Error::Empty("no frames pushed"));
        }
        while self.generated < self.received {
            self.generate_next();
        }
        self.finished = true;
        let total = self.received * self.model.cfg.frame_shift;
        let m = self.model.cfg.bands;
        let zeros = vec![0.0f32; m];
        let mut buf = vec![0.0f32; m];
        let t0 = Instant::now();
        while self.emitted + self.out.len() < total {
            self.pqmf.push(&zeros, &mut buf);
            self.emit(&buf, total);
        }
        self.timing.pqmf += t0.elapsed();
        Ok(())
    }

    /// Moves every sample synthesized so far into `out`; returns the count.
    pub fn pull_samples(&mut self, out: &mut Vec<f32>) -> usize {
        let n = self.out.len();
        out.append(&mut self.out);
        self.emitted += n;
        n
    }

    fn generate_next(&mut self) {
        let cfg = self.model.cfg;
        let f = self.generated as isize;
        let (r, n) = (cfg.segconv_prev as isize, cfg.segconv_next as isize);
        // `recent` holds frames `[received - len, received)`.
        let first = (self.received - self.recent.len()) as isize;
        self.window.clear();
        for j in f - r..=f + n {
            if j < 0 {
                self.window.extend(std::iter::repeat(0.0).take(cfg.cond_dim));
            } else {
                let j = j.min(self.received as isize - 1);
                self.window.extend_from_slice(&self.recent[(j - first) as usize]);
            }
        }
        let t0 = Instant::now();
        self.bands.clear();
        self.core.run_frame(self.model, &self.window, &mut self.bands, &mut gumbel_choose);
        let t1 = Instant::now();
        let m = cfg.bands;
        let mut buf = vec![0.0f32; m];
        let total = usize::MAX;
        for s in 0..cfg.steps_per_frame() {
            self.pqmf.push(&self.bands[s * m..(s + 1) * m], &mut buf);
            self.emit(&buf, total);
        }
        self.timing.network += t1 - t0;
        self.timing.pqmf += t1.elapsed();
        self.generated += 1;
    }

    fn emit(&mut self, buf: &[f32], total: usize) {
        for &v in buf {
            if self.skip > 0 {
                self.skip -= 1;
            } else if self.emitted + self.out.len() < total {
                let y = self.deemph.step(v);
                self.out.push(y);
            }
        }
    }
}

/// Whole-utterance synthesis: every frame's band samples first, then one PQMF
/// pass. Produces the same samples as streaming with the same seed.
pub fn synthesize(model: &EngineModel, frames: &MelFrameSeq, seed: u64) -> Result<Vec<f32>> {
    let cfg = model.cfg;
    if frames.dim != cfg.cond_dim {
        return Err(Error::shape("feature dimension", cfg.cond_dim, frames.dim));
    }
    if frames.frames() == 0 {
        return Err(Error::Empty("no frames"));
    }
    if frames.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature frames".into()));
    }
    let windows = utterance_windows(&cfg, &frames.data)?;
    let mut core = Core::new(&cfg, seed);
    let mut bands = Vec::with_capacity(frames.frames() * cfg.frame_shift);
    for w in &windows {
        core.run_frame(model, w, &mut bands, &mut gumbel_choose);
    }
    Ok(pqmf_offline(model, &bands, frames.frames() * cfg.frame_shift))
}

fn pqmf_offline(model: &EngineModel, bands: &[f32], total: usize) -> Vec<f32> {
    let m = model.cfg.bands;
    let delay = model.pqmf.config().group_delay();
    let mut stream = model.pqmf.synthesis_stream();
    let mut full = Vec::with_capacity(total + delay + m);
    let mut buf = vec![0.0f32; m];
    let zeros = vec![0.0f32; m];
    let mut steps = bands.chunks_exact(m);
    while full.len() < total + delay {
        stream.push(steps.next().unwrap_or(&zeros), &mut buf);
        full.extend_from_slice(&buf);
    }
    let mut de = Deemphasis::new(PREEMPHASIS_ALPHA as f32);
    full[delay..delay + total].iter().map(|&v| de.step(v)).collect()
}

/// Logits from the engine path for given per-step bins; the reference for
/// cross-checking against the `f64` network.
pub fn forced_logits(
    model: &EngineModel,
    frames: &MelFrameSeq,
    coarse: &[Vec<usize>],
    fine: &[Vec<usize>],
) -> Result<(Vec<Vec<Vec<f32>>>, Vec<Vec<Vec<f32>>>)> {
    let cfg = model.cfg;
    let windows = utterance_windows(&cfg, &frames.data)?;
    let steps = windows.len() * cfg.steps_per_frame();
    if coarse.len() < steps || fine.len() < steps {
        return Err(Error::shape("forced bins", steps, coarse.len().min(fine.len())));
    }
    let mut core = Core::new(&cfg, 0);
    let (mut lc, mut lf) = (Vec::new(), Vec::new());
    let mut t = 0usize;
    let mut sink = Vec::new();
    for w in &windows {
        let mut choose = |_: &mut StreamRng, head: Head, m: usize, l: &[f32]| -> usize {
            let (store, bins) = match head {
                Head::Coarse => (&mut lc, &coarse[t]),
                Head::Fine => (&mut lf, &fine[t]),
            };
            if m == 0 {
                store.push(Vec::new());
            }
            store.last_mut().unwrap().push(l.to_vec());
            if head == Head::Fine && m + 1 == cfg.bands {
                t += 1;
            }
            bins[m]
        };
        core.run_frame(model, w, &mut sink, &mut choose);
    }
    Ok((lc, lf))
}
