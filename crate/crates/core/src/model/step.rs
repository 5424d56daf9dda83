//! One band-rate step of the autoregressive network.

use super::layers::{dual_fc_head, gru_step, lp_coefficients, lp_combine, residual_logits, segmental_conv};
use super::params::ModelParams;
use crate::codec::{silence_bin, split_coarse_fine, MuLawSpec};
use crate::error::{Error, Result};
use crate::real::Real;

/// Which of the two 5-bit heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Coarse,
    Fine,
}

/// Coarse and fine bins that seed the embedding inputs before the first sample.
pub fn initial_bins() -> (usize, usize) {
    split_coarse_fine(silence_bin(&MuLawSpec::default()))
}

/// Per-stream mutable state.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthState<F> {
    /// Stacked conditioning window, oldest frame first.
    pub window: Vec<F>,
    pub h_sparse: Vec<F>,
    pub h_coarse: Vec<F>,
    pub h_fine: Vec<F>,
    /// `[band][k]`, most recent first; `None` before the stream start.
    pub coarse_hist: Vec<Vec<Option<usize>>>,
    pub fine_hist: Vec<Vec<Option<usize>>>,
    /// Bins of the previous step, embedded as input to the sparse GRU.
    pub last_coarse: Vec<usize>,
    pub last_fine: Vec<usize>,
}

impl<F: Real> SynthState<F> {
    pub fn new<G: Real>(p: &ModelParams<G>) -> Self {
        let c = &p.cfg;
        let (c0, f0) = initial_bins();
        Self {
            window: vec![F::zero(); c.segconv_dim()],
            h_sparse: vec![F::zero(); c.sparse_units],
            h_coarse: vec![F::zero(); c.dense_units],
            h_fine: vec![F::zero(); c.dense_units],
            coarse_hist: vec![vec![None; c.lp_order]; c.bands],
            fine_hist: vec![vec![None; c.lp_order]; c.bands],
            last_coarse: vec![c0; c.bands],
            last_fine: vec![f0; c.bands],
        }
    }

    /// Shifts one conditioning frame into the window. After frames `0..=f+n`
    /// have been pushed the window is centred on frame `f`.
    pub fn push_frame(&mut self, frame: &[F]) -> Result<()> {
        let d = frame.len();
        if d == 0 || self.window.len() % d != 0 {
            return Err(Error::shape("conditioning frame", self.window.len(), d));
        }
        self.window.rotate_left(d);
        let n = self.window.len();
        self.window[n - d..].copy_from_slice(frame);
        Ok(())
    }

    /// Records the bins emitted at this step.
    pub fn commit(&mut self, coarse: &[usize], fine: &[usize]) {
        for m in 0..coarse.len() {
            push_hist(&mut self.coarse_hist[m], coarse[m]);
            push_hist(&mut self.fine_hist[m], fine[m]);
        }
        self.last_coarse.copy_from_slice(coarse);
        self.last_fine.copy_from_slice(fine);
    }
}

fn push_hist(h: &mut [Option<usize>], bin: usize) {
    if h.is_empty() {
        return;
    }
    h.rotate_right(1);
    h[0] = Some(bin);
}

/// Logits and chosen bins of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<F> {
    /// `[band][bin]`
    pub coarse_logits: Vec<Vec<F>>,
    pub fine_logits: Vec<Vec<F>>,
    pub coarse: Vec<usize>,
    pub fine: Vec<usize>,
}

/// Conditioning vector for the frame at the centre of `state.window`.
pub fn conditioning<F: Real>(p: &ModelParams<F>, state: &SynthState<F>) -> Result<Vec<F>> {
    segmental_conv(p, &state.window)
}

fn embed_into<F: Real>(table: &super::params::Matrix<F>, bins: &[usize], out: &mut Vec<F>) {
    for &b in bins {
        out.extend_from_slice(table.row(b));
    }
}

/// Logits of every band for one head given the head GRU's hidden vector.
pub fn head_logits<F: Real>(
    p: &ModelParams<F>,
    head: Head,
    h: &[F],
    hist: &[Vec<Option<usize>>],
) -> Result<Vec<Vec<F>>> {
    let (dual, res) = match head {
        Head::Coarse => (&p.coarse_head, &p.coarse_residual),
        Head::Fine => (&p.fine_head, &p.fine_residual),
    };
    let out = dual_fc_head(dual, &p.cfg, h)?;
    (0..p.cfg.bands)
        .map(|m| {
            let a = lp_coefficients(out.sign(m), out.mag(m));
            let o = residual_logits(res, out.latent(m));
            lp_combine(&a, &hist[m], &o)
        })
        .collect()
}

/// Runs one band-rate step. `cond` is the projected conditioning vector of the
/// current frame; `choose(head, band, logits)` picks each bin, coarse bins of
/// all bands first, then fine bins. The state is advanced with the chosen bins.
pub fn full_step<F: Real>(
    p: &ModelParams<F>,
    state: &mut SynthState<F>,
    cond: &[F],
    mut choose: impl FnMut(Head, usize, &[F]) -> usize,
) -> Result<StepOutput<F>> {
    let c = &p.cfg;
    if cond.len() != c.cond_proj {
        return Err(Error::shape("conditioning vector", c.cond_proj, cond.len()));
    }
    let mut x = Vec::with_capacity(c.sparse_input());
    x.extend_from_slice(cond);
    embed_into(&p.embed_coarse, &state.last_coarse, &mut x);
    embed_into(&p.embed_fine, &state.last_fine, &mut x);
    state.h_sparse = gru_step(&p.sparse_gru, &x, &state.h_sparse)?;

    let mut xc = Vec::with_capacity(c.fine_input());
    xc.extend_from_slice(&state.h_sparse);
    xc.extend_from_slice(cond);
    state.h_coarse = gru_step(&p.coarse_gru, &xc, &state.h_coarse)?;
    let coarse_logits = head_logits(p, Head::Coarse, &state.h_coarse, &state.coarse_hist)?;
    let coarse: Vec<usize> = coarse_logits
        .iter()
        .enumerate()
        .map(|(m, l)| choose(Head::Coarse, m, l))
        .collect();

    embed_into(&p.embed_coarse, &coarse, &mut xc);
    state.h_fine = gru_step(&p.fine_gru, &xc, &state.h_fine)?;
    let fine_logits = head_logits(p, Head::Fine, &state.h_fine, &state.fine_hist)?;
    let fine: Vec<usize> = fine_logits
        .iter()
        .enumerate()
        .map(|(m, l)| choose(Head::Fine, m, l))
        .collect();

    state.commit(&coarse, &fine);
    Ok(StepOutput {
        coarse_logits,
        fine_logits,
        coarse,
        fine,
    })
}

/// Stacked segmental-conv windows for a whole utterance. Frames before the
/// start are zero; frames past the end repeat the last frame.
pub fn utterance_windows<F: Real>(cfg: &super::NetworkConfig, frames: &[F]) -> Result<Vec<Vec<F>>> {
    let d = cfg.cond_dim;
    if frames.is_empty() || frames.len() % d != 0 {
        return Err(Error::shape("conditioning frames", d, frames.len() % d.max(1)));
    }
    let count = frames.len() / d;
    let (r, n) = (cfg.segconv_prev as isize, cfg.segconv_next as isize);
    Ok((0..count as isize)
        .map(|f| {
            let mut w = Vec::with_capacity(cfg.segconv_dim());
            for j in f - r..=f + n {
                if j < 0 {
                    w.extend(std::iter::repeat(F::zero()).take(d));
                } else {
                    let j = (j as usize).min(count - 1);
                    w.extend_from_slice(&frames[j * d..(j + 1) * d]);
                }
            }
            w
        })
        .collect())
}
