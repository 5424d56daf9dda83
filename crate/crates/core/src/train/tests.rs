use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{backward, forward, LaneView};
use super::*;
use crate::codec::MuLawSpec;
use crate::dsp::{PqmfBank, PqmfConfig, StftConfig};
use crate::loss::{LossWeights, MultibandStftLoss, StftLossConfig};
use crate::model::{conditioning, full_step, utterance_windows, Head, ModelParams, NetworkConfig, SynthState};

fn toy2() -> NetworkConfig {
    NetworkConfig {
        sample_rate: 16_000,
        frame_shift: 20,
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

fn small_objective(weights: LossWeights) -> Objective {
    let bank = PqmfBank::design(
        &PqmfConfig {
            bands: 2,
            order: 30,
            beta: 9.0,
            cutoff: 0.25,
        }
        .tuned()
        .unwrap(),
    )
    .unwrap();
    let res = |pairs: &[(usize, usize)]| StftLossConfig {
        resolutions: pairs
            .iter()
            .map(|&(f, s)| StftConfig::with_loss_window(f, s).unwrap())
            .collect(),
    };
    Objective {
        bank,
        stft: MultibandStftLoss::new(&res(&[(16, 4), (8, 2)]), &res(&[(32, 8), (16, 4)])).unwrap(),
        spec: MuLawSpec::default(),
        weights,
    }
}

/// Random parameters with every bias and lambda moved off zero.
fn params(seed: u64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(toy2(), &mut rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    p.apply_masks();
    p
}

fn segment(cfg: &NetworkConfig, frames: usize, seed: u64) -> Segment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feats: Vec<f64> = (0..frames * cfg.cond_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let steps = frames * cfg.steps_per_frame();
    let bins = |rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..steps)
            .map(|_| (0..cfg.bands).map(|_| rng.gen_range(0..cfg.head_bins)).collect())
            .collect()
    };
    Segment {
        windows: utterance_windows(cfg, &feats).unwrap(),
        coarse: bins(&mut rng),
        fine: bins(&mut rng),
    }
}

#[test]
fn teacher_forced_logits_match_autoregressive_step() {
    let p = params(3);
    let cfg = p.cfg;
    let seg = segment(&cfg, 4, 4);
    let mut st = SynthState::new(&p);
    let tape = forward(&p, &seg, &mut st, &[]).unwrap();

    let mut ar = SynthState::<f64>::new(&p);
    let spf = cfg.steps_per_frame();
    for t in 0..seg.steps() {
        ar.window = seg.windows[t / spf].clone();
        let cond = conditioning(&p, &ar).unwrap();
        let out = full_step(&p, &mut ar, &cond, |head, m, _| match head {
            Head::Coarse => seg.coarse[t][m],
            Head::Fine => seg.fine[t][m],
        })
        .unwrap();
        for m in 0..cfg.bands {
            for (a, b) in out.coarse_logits[m].iter().zip(&graph::tape_logits(&tape, Head::Coarse)[t][m]) {
                assert!((a - b).abs() < 1e-12, "coarse step {t} band {m}");
            }
            for (a, b) in out.fine_logits[m].iter().zip(&graph::tape_logits(&tape, Head::Fine)[t][m]) {
                assert!((a - b).abs() < 1e-12, "fine step {t} band {m}");
            }
        }
    }
    assert_eq!(ar.h_sparse, st.h_sparse);
    assert_eq!(ar.coarse_hist, st.coarse_hist);
}

#[test]
fn gradient_matches_finite_differences() {
    let p = params(5);
    let cfg = p.cfg;
    // 5 frames of 10 steps: 50 samples per band, 100 full-band samples.
    let seg = segment(&cfg, 5, 6);
    let obj = small_objective(LossWeights::new(1.0, 1.0).unwrap());
    let noise = Noise::sample(&cfg, seg.steps(), 0.3, &mut ChaCha8Rng::seed_from_u64(7));
    let mut state0 = SynthState::new(&p);
    // Nonzero carried state.
    state0.h_sparse.iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * (i as f64).sin());
    state0.commit(&[3, 30], &[1, 17]);

    let mut st = state0.clone();
    let tape = forward(&p, &seg, &mut st, &noise.dropout).unwrap();
    let view = LaneView {
        segment: &seg,
        coarse_logits: &tape.coarse_logits,
        fine_logits: &tape.fine_logits,
        noise: &noise,
    };
    let (report, lg) = obj.evaluate(&[view], None, true).unwrap();
    assert!(report.stft > 0.0);
    let lg = lg.unwrap();
    let mut grad = p.zeros_like();
    backward(&p, &tape, &noise.dropout, &lg.coarse[0], &lg.fine[0], &mut grad);

    let loss_at = |q: &ModelParams<f64>| -> f64 {
        let mut st = state0.clone();
        let tape = forward(q, &seg, &mut st, &noise.dropout).unwrap();
        let view = LaneView {
            segment: &seg,
            coarse_logits: &tape.coarse_logits,
            fine_logits: &tape.fine_logits,
            noise: &noise,
        };
        obj.evaluate(&[view], Some(&lg.samples), false).unwrap().0.total
    };
    assert!((loss_at(&p) - report.total).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let names: Vec<&'static str> = p.tensors().iter().map(|t| t.name).collect();
    let h = 1e-5;
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        let g = grad.tensors()[ti].data.to_vec();
        let mut picks: Vec<usize> = (0..4).map(|_| rng.gen_range(0..g.len())).collect();
        picks.push((0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap());
        for i in picks {
            if *name == crate::model::SPARSE_TENSOR
                && p.sparse_gru.mask.as_ref().is_some_and(|m| !m.covers(i / m.cols, i % m.cols))
            {
                continue;
            }
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.tensors_mut()[ti].data[i] += h;
            minus.tensors_mut()[ti].data[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let an = g[i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                "{name}[{i}]: finite difference {fd}, analytic {an}"
            );
            checked += 1;
        }
    }
    assert!(checked > 5 * names.len() / 2);
}

#[test]
fn config_parses_and_rejects_unknown_keys() {
    let c = TrainConfig::parse("learning_rate = 3e-4\n# comment\nbatch_size=2\ndropout = 0\nkeep_diagonal = false\n").unwrap();
    assert_eq!(c.learning_rate, 3e-4);
    assert_eq!(c.batch_size, 2);
    assert_eq!(c.dropout, 0.0);
    assert!(!c.sparsity.keep_diagonal);
    assert_eq!(c.batch_frames, 6);
    assert!(TrainConfig::parse("lr = 1").is_err());
    assert!(TrainConfig::parse("dropout = 1.0").is_err());
}

#[test]
fn training_step_reduces_loss_on_a_fixed_segment() {
    let p = params(9);
    let cfg = p.cfg;
    let mut seg = segment(&cfg, 3, 10);
    // Learnable target: a fixed bin pair.
    seg.coarse.iter_mut().flatten().for_each(|b| *b = 7);
    seg.fine.iter_mut().flatten().for_each(|b| *b = 20);
    let obj = small_objective(LossWeights::new(1.0, 0.0).unwrap());
    let mut opt = RAdam::new(&p);
    let mut p = p;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..60 {
        let noise = Noise::sample(&cfg, seg.steps(), 0.0, &mut rng);
        let mut states = vec![SynthState::new(&p)];
        let (r, g) = batch_gradient(&p, &obj, &[&seg], &mut states, &[noise]).unwrap();
        first.get_or_insert(r.total);
        last = r.total;
        opt.update(&mut p, &g, 1e-2);
    }
    assert!(last < 0.5 * first.unwrap(), "{first:?} -> {last}");
}
