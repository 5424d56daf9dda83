//! Desk-scale trainer: teacher-forced gradients, RAdam, truncated BPTT over
//! short segments, conditioning dropout and the sparsification hook.

mod data;
pub mod graph;
mod radam;

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::codec::MuLawSpec;
use crate::dsp::{PqmfBank, PqmfConfig};
use crate::error::{Error, Result};
use crate::loss::{LossWeights, MultibandStftLoss};
use crate::model::{ModelParams, NetworkConfig, SynthState};
use crate::sampler::{stream_rng, StreamRng};
use crate::sparsify::{density_at, prune_gru, SparsitySchedule};

pub use data::Utterance;
pub use graph::{batch_gradient, LossReport, Noise, Objective, Segment};
pub use radam::RAdam;

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Frames per truncated-BPTT segment.
    pub batch_frames: usize,
    pub batch_size: usize,
    /// Drop probability on the upsampled conditioning.
    pub dropout: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub ce_weight: f64,
    pub stft_weight: f64,
    /// Held-out evaluation period in steps.
    pub eval_every: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub sparsity: SparsitySchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_frames: 6,
            batch_size: 8,
            dropout: 0.5,
            max_steps: 100_000,
            seed: 1,
            ce_weight: 1.0,
            stft_weight: 1.0,
            eval_every: 1000,
            patience: 10,
            sparsity: SparsitySchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_frames == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("learning rate, batch sizes and eval period must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        LossWeights::new(self.ce_weight, self.stft_weight)?;
        self.sparsity.validate()
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let bad = || Error::Config(format!("line {}: bad value for {k}: {v}", no + 1));
            match k {
                "learning_rate" => c.learning_rate = v.parse().map_err(|_| bad())?,
                "batch_frames" => c.batch_frames = v.parse().map_err(|_| bad())?,
                "batch_size" => c.batch_size = v.parse().map_err(|_| bad())?,
                "dropout" => c.dropout = v.parse().map_err(|_| bad())?,
                "max_steps" => c.max_steps = v.parse().map_err(|_| bad())?,
                "seed" => c.seed = v.parse().map_err(|_| bad())?,
                "ce_weight" => c.ce_weight = v.parse().map_err(|_| bad())?,
                "stft_weight" => c.stft_weight = v.parse().map_err(|_| bad())?,
                "eval_every" => c.eval_every = v.parse().map_err(|_| bad())?,
                "patience" => c.patience = v.parse().map_err(|_| bad())?,
                "density_update" => c.sparsity.targets[0] = v.parse().map_err(|_| bad())?,
                "density_reset" => c.sparsity.targets[1] = v.parse().map_err(|_| bad())?,
                "density_new" => c.sparsity.targets[2] = v.parse().map_err(|_| bad())?,
                "sparsify_start" => c.sparsity.start_step = v.parse().map_err(|_| bad())?,
                "sparsify_end" => c.sparsity.end_step = v.parse().map_err(|_| bad())?,
                "sparsify_every" => c.sparsity.rerank_every = v.parse().map_err(|_| bad())?,
                "keep_diagonal" => c.sparsity.keep_diagonal = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Config(format!("line {}: unknown key {k}", no + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub ce: f64,
    pub stft: f64,
    pub total: f64,
    pub density: f64,
    pub lr: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("step,ce,stft,density,lr\n");
    for r in rows {
        body.push_str(&format!("{},{:.6},{:.6},{:.6},{:e}\n", r.step, r.ce, r.stft, r.density, r.lr));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

impl Objective {
    /// PQMF bank (flatness-tuned cutoff) and STFT tables for the network's rate.
    pub fn for_network(cfg: &NetworkConfig, weights: LossWeights) -> Result<Self> {
        let bank = PqmfBank::design(&PqmfConfig::for_sample_rate(cfg.sample_rate)?.tuned()?)?;
        if bank.bands() != cfg.bands {
            return Err(Error::shape("PQMF bands", cfg.bands, bank.bands()));
        }
        Ok(Self {
            bank,
            stft: MultibandStftLoss::for_sample_rate(cfg.sample_rate)?,
            spec: MuLawSpec::default(),
            weights,
        })
    }
}

#[derive(Debug, Clone)]
struct Lane {
    utt: usize,
    seg: usize,
    state: SynthState<f64>,
}

/// Training state.
pub struct Trainer {
    pub params: ModelParams<f64>,
    pub opt: RAdam,
    pub cfg: TrainConfig,
    pub objective: Objective,
    segments: Vec<Vec<Segment>>,
    lanes: Vec<Lane>,
    rng: StreamRng,
}

impl Trainer {
    pub fn new(params: ModelParams<f64>, cfg: TrainConfig, objective: Objective, data: &[Utterance]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let segments: Vec<Vec<Segment>> = data
            .iter()
            .map(|u| u.segments(&params.cfg, cfg.batch_frames))
            .collect::<Result<_>>()?;
        let lanes = (0..cfg.batch_size)
            .map(|l| {
                let utt = l % segments.len();
                // Stagger lanes that share an utterance.
                let share = cfg.batch_size.div_ceil(segments.len());
                let seg = (l / segments.len()) * segments[utt].len() / share;
                Lane {
                    utt,
                    seg,
                    state: SynthState::new(&params),
                }
            })
            .collect();
        Ok(Self {
            opt: RAdam::new(&params),
            rng: stream_rng(cfg.seed),
            params,
            cfg,
            objective,
            segments,
            lanes,
        })
    }

    /// One optimizer step on the next segment of every lane.
    pub fn step(&mut self) -> Result<StepLog> {
        let segs: Vec<&Segment> = self.lanes.iter().map(|l| &self.segments[l.utt][l.seg]).collect();
        let noise: Vec<Noise> = segs
            .iter()
            .map(|s| Noise::sample(&self.params.cfg, s.steps(), self.cfg.dropout, &mut self.rng))
            .collect();
        let mut states: Vec<SynthState<f64>> = self.lanes.iter().map(|l| l.state.clone()).collect();
        let (report, grad) = batch_gradient(&self.params, &self.objective, &segs, &mut states, &noise)?;
        self.opt.update(&mut self.params, &grad, self.cfg.learning_rate);
        let step = self.opt.step;
        if self.cfg.sparsity.is_rerank_step(step) {
            let keep_diag = self.cfg.sparsity.keep_diagonal;
            prune_gru(&mut self.params.sparse_gru, density_at(step, &self.cfg.sparsity), keep_diag)?;
        }
        for (lane, st) in self.lanes.iter_mut().zip(states) {
            lane.state = st;
            lane.seg += 1;
            if lane.seg >= self.segments[lane.utt].len() {
                lane.utt = self.rng.gen_range(0..self.segments.len());
                lane.seg = 0;
                lane.state = SynthState::new(&self.params);
            }
        }
        Ok(StepLog {
            step,
            ce: report.ce(),
            stft: report.stft,
            total: report.total,
            density: self.params.sparse_gru.mask.as_ref().map_or(1.0, |m| m.density()),
            lr: self.cfg.learning_rate,
        })
    }

    /// Teacher-forced loss over whole utterances without dropout and with a
    /// fixed Gumbel seed.
    pub fn evaluate(&self, data: &[Utterance]) -> Result<LossReport> {
        evaluate(&self.params, &self.objective, data, self.cfg.batch_frames, self.cfg.seed)
    }
}

/// Mean loss over all segments of `data`, hidden state carried across the
/// segments of each utterance.
pub fn evaluate(
    params: &ModelParams<f64>,
    objective: &Objective,
    data: &[Utterance],
    seg_frames: usize,
    seed: u64,
) -> Result<LossReport> {
    let mut rng = stream_rng(seed ^ 0x5eed);
    let mut acc = LossReport::default();
    let mut count = 0.0;
    for u in data {
        let mut state = SynthState::new(params);
        for seg in u.segments(&params.cfg, seg_frames)? {
            let noise = Noise::sample(&params.cfg, seg.steps(), 0.0, &mut rng);
            let tape = graph::forward(params, &seg, &mut state, &[])?;
            let view = graph::LaneView {
                segment: &seg,
                coarse_logits: &tape.coarse_logits,
                fine_logits: &tape.fine_logits,
                noise: &noise,
            };
            let (r, _) = objective.evaluate(&[view], None, false)?;
            acc.ce_coarse += r.ce_coarse;
            acc.ce_fine += r.ce_fine;
            acc.stft += r.stft;
            acc.total += r.total;
            count += 1.0;
        }
    }
    if count == 0.0 {
        return Err(Error::Empty("evaluation set"));
    }
    acc.ce_coarse /= count;
    acc.ce_fine /= count;
    acc.stft /= count;
    acc.total /= count;
    Ok(acc)
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best held-out loss (or the last ones without a
    /// held-out set).
    pub params: ModelParams<f64>,
    pub log: Vec<StepLog>,
    pub best_valid: Option<f64>,
    pub stopped_early: bool,
}

/// Runs up to `max_steps` optimizer steps with early stopping on `valid`.
/// `on_step` sees every log row and may return `false` to stop.
pub fn train_loop(
    params: ModelParams<f64>,
    cfg: TrainConfig,
    objective: Objective,
    train: &[Utterance],
    valid: &[Utterance],
    mut on_step: impl FnMut(&StepLog) -> bool,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(params, cfg, objective, train)?;
    let mut log = Vec::new();
    let mut best: Option<(f64, ModelParams<f64>)> = None;
    let mut bad = 0;
    let mut stopped_early = false;
    for _ in 0..trainer.cfg.max_steps {
        let row = trainer.step()?;
        log.push(row);
        if !on_step(&row) {
            break;
        }
        if !valid.is_empty() && row.step % trainer.cfg.eval_every == 0 {
            let v = trainer.evaluate(valid)?.total;
            log::info!("step {} held-out loss {v:.4}", row.step);
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, trainer.params.clone()));
                bad = 0;
            } else {
                bad += 1;
                if bad >= trainer.cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let (best_valid, params) = match best {
        Some((v, p)) => (Some(v), p),
        None => (None, trainer.params),
    };
    Ok(TrainOutcome {
        params,
        log,
        best_valid,
        stopped_early,
    })
}

#[cfg(test)]
mod tests;
