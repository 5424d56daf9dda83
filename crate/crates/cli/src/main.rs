use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use mwdlp::dsp::wav::{check_rate, read_wav, write_wav};
use mwdlp::dsp::{log_spectral_distortion, mel_spectrogram, MelConfig, MelFrameSeq, PqmfBank, PqmfConfig, Waveform};
use mwdlp::engine::{bench_rtf, complexity, synthesize, EngineModel};
use mwdlp::loss::LossWeights;
use mwdlp::model::{ModelParams, NetworkConfig};
use mwdlp::sparsify::{gate_densities, prune_gru, TARGET_DENSITIES};
use mwdlp::train::{train_loop, write_metrics_csv, Objective, TrainConfig, Utterance};
use mwdlp::{featfile, modelfile};

#[derive(Parser)]
#[command(name = "mwdlp", version, about = "Multiband WaveRNN vocoder with linear prediction in logit space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    #[value(name = "full-24k")]
    Full24k,
    #[value(name = "full-16k")]
    Full16k,
    #[value(name = "toy-16k")]
    Toy16k,
}

impl Preset {
    fn config(self, lp_order: Option<usize>) -> NetworkConfig {
        let mut c = match self {
            Preset::Full24k => NetworkConfig::full_24k(8),
            Preset::Full16k => NetworkConfig::full_16k(8),
            Preset::Toy16k => NetworkConfig::toy_16k(),
        };
        if let Some(k) = lp_order {
            c.lp_order = k;
        }
        c
    }
}

#[derive(Subcommand)]
enum Command {
    /// WAV to feature file.
    Features { input: PathBuf, output: PathBuf },
    /// Train on every WAV in a directory; writes a model file and a CSV log.
    Train {
        /// `key = value` training configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "toy-16k")]
        network: Preset,
        #[arg(long)]
        lp_order: Option<usize>,
        /// Overrides the seed of the configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `max_steps` of the configuration.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Model and feature file (or WAV) to WAV.
    Synth {
        #[arg(long)]
        model: PathBuf,
        /// Feature file or WAV.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expected sample rate; must match the model.
        #[arg(long)]
        sample_rate: Option<u32>,
    },
    /// Real-time factor of file-to-file synthesis on one core.
    Bench {
        #[arg(long, conflicts_with = "preset")]
        model: Option<PathBuf>,
        /// Randomly initialized network pruned to the target densities.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        no_pin: bool,
    },
    /// FLOP breakdown of the band-rate network.
    Complexity {
        /// Defaults to both full-size presets.
        #[arg(long, value_enum, conflicts_with = "model")]
        preset: Vec<Preset>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        lp_order: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Mel log spectral distortion in dB between two WAVs.
    EvalLsd {
        reference: PathBuf,
        degraded: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Summary of a model file.
    Inspect { model: PathBuf },
}

/// Exit codes by failure class.
fn exit_code(e: &anyhow::Error) -> u8 {
    use mwdlp::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Io { .. }) => 3,
        Some(E::Format(_) | E::Checksum { .. } | E::Version(_) | E::Wav(_)) => 4,
        Some(E::Config(_) | E::Shape { .. } | E::Empty(_)) => 2,
        Some(E::NonFinite(_) | E::Stream(_)) => 5,
        None => 1,
    }
}

/// The error chain on one line, without causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out.replace('\n', " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Features { input, output } => features(&input, &output),
        Command::Train {
            config,
            data,
            out,
            log,
            network,
            lp_order,
            seed,
            steps,
        } => train(config.as_deref(), &data, &out, &log, network.config(lp_order), seed, steps),
        Command::Synth {
            model,
            input,
            output,
            seed,
            sample_rate,
        } => synth(&model, &input, &output, seed, sample_rate),
        Command::Bench {
            model,
            preset,
            seconds,
            seed,
            json,
            no_pin,
        } => bench(model.as_deref(), preset, seconds, seed, json.as_deref(), !no_pin),
        Command::Complexity {
            preset,
            model,
            lp_order,
            json,
        } => complexity_cmd(preset, model.as_deref(), lp_order, json),
        Command::EvalLsd {
            reference,
            degraded,
            json,
        } => eval_lsd(&reference, &degraded, json),
        Command::Inspect { model } => inspect(&model),
    }
}

fn features_of(wave: &Waveform) -> Result<MelFrameSeq> {
    Ok(mel_spectrogram(&wave.samples, &MelConfig::for_sample_rate(wave.sample_rate)?)?)
}

fn features(input: &Path, output: &Path) -> Result<()> {
    let mel = features_of(&read_wav(input)?)?;
    featfile::save(&mel, output)?;
    println!("{} frames × {} → {}", mel.frames(), mel.dim, output.display());
    Ok(())
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| mwdlp::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(mwdlp::Error::Empty("no .wav files in the data directory").into());
    }
    Ok(files)
}

fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    log_path: &Path,
    net: NetworkConfig,
    seed: Option<u64>,
    steps: Option<u64>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| mwdlp::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            TrainConfig::parse(&text).with_context(|| format!("{}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.max_steps = s;
    }
    net.validate()?;
    let pqmf = PqmfConfig::for_sample_rate(net.sample_rate)?.tuned()?;
    let bank = PqmfBank::design(&pqmf)?;
    let files = wav_files(data)?;
    // Every tenth file is held out, or the last one when there are fewer than ten.
    let n = files.len();
    let held_out = |i: usize| n > 1 && (i % 10 == 9 || (n < 10 && i + 1 == n));
    let mut train_set = Vec::new();
    let mut valid_set = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let u = Utterance::from_waveform(&read_wav(f)?, &net, &bank).with_context(|| format!("{}", f.display()))?;
        if held_out(i) {
            valid_set.push(u);
        } else {
            train_set.push(u);
        }
    }
    let params = ModelParams::<f64>::init(net, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    log::info!(
        "{} training and {} held-out utterances, {} parameters",
        train_set.len(),
        valid_set.len(),
        params.num_params()
    );
    let objective = Objective::for_network(&net, LossWeights::new(cfg.ce_weight, cfg.stft_weight)?)?;
    let outcome = train_loop(params, cfg, objective, &train_set, &valid_set, |r| {
        if r.step % 100 == 0 {
            log::info!("step {} ce {:.4} stft {:.4} density {:.3}", r.step, r.ce, r.stft, r.density);
        }
        true
    })?;
    write_metrics_csv(log_path, &outcome.log)?;
    modelfile::save(&outcome.params, &pqmf, out)?;
    let last = outcome.log.last().map_or(0, |r| r.step);
    match outcome.best_valid {
        Some(v) => println!(
            "{last} steps{}, best held-out loss {v:.4} → {}",
            if outcome.stopped_early { " (stopped early)" } else { "" },
            out.display()
        ),
        None => println!("{last} steps → {}", out.display()),
    }
    Ok(())
}

fn load_engine(path: &Path) -> Result<EngineModel> {
    let mf = modelfile::load(path).with_context(|| format!("{}", path.display()))?;
    Ok(EngineModel::new(&mf.params, &mf.pqmf)?)
}

fn synth(model: &Path, input: &Path, output: &Path, seed: u64, sample_rate: Option<u32>) -> Result<()> {
    let md = load_engine(model)?;
    let sr = md.config().sample_rate;
    if let Some(want) = sample_rate {
        check_rate(want)?;
        if want != sr {
            return Err(mwdlp::Error::Config(format!("--sample-rate {want} but the model runs at {sr} Hz")).into());
        }
    }
    let head = std::fs::read(input).map_err(|e| mwdlp::Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mel = if head.starts_with(b"RIFF") {
        let wave = read_wav(input)?;
        if wave.sample_rate != sr {
            return Err(mwdlp::Error::Config(format!("input at {} Hz, model at {sr} Hz", wave.sample_rate)).into());
        }
        features_of(&wave)?
    } else {
        featfile::from_bytes(&head).with_context(|| format!("{}", input.display()))?
    };
    let samples = synthesize(&md, &mel, seed)?;
    write_wav(output, &Waveform::new(sr, samples.iter().map(|&v| v as f64).collect()))?;
    println!("{} samples at {sr} Hz → {}", samples.len(), output.display());
    Ok(())
}

fn preset_model(preset: Preset, seed: u64) -> Result<EngineModel> {
    let cfg = preset.config(None);
    let mut p = ModelParams::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    prune_gru(&mut p.sparse_gru, TARGET_DENSITIES, true)?;
    p.apply_masks();
    Ok(EngineModel::new(&p, &PqmfConfig::for_sample_rate(cfg.sample_rate)?.tuned()?)?)
}

fn bench(model: Option<&Path>, preset: Option<Preset>, seconds: f64, seed: u64, json: Option<&Path>, pin: bool) -> Result<()> {
    if !(seconds > 0.0) {
        return Err(mwdlp::Error::Config(format!("duration must be positive, got {seconds}")).into());
    }
    let md = match (model, preset) {
        (Some(p), _) => load_engine(p)?,
        (None, Some(p)) => preset_model(p, seed)?,
        (None, None) => bail!("bench needs --model or --preset"),
    };
    let r = bench_rtf(&md, seconds, seed, pin)?;
    println!("sample rate     {} Hz", r.sample_rate);
    println!("audio           {:.2} s ({} frames)", r.audio_secs, r.frames);
    println!("wall clock      {:.3} s", r.total_secs);
    println!("  wav i/o       {:.3} s", r.io_secs);
    println!("  features      {:.3} s", r.features_secs);
    println!("  network       {:.3} s ({:.1}%)", r.network_secs, 100.0 * r.network_share);
    println!("  pqmf          {:.3} s", r.pqmf_secs);
    println!("RTF             {:.3}", r.rtf);
    println!("simd {}  pinned {}", r.simd, r.pinned);
    if let Some(path) = json {
        std::fs::write(path, serde_json::to_string_pretty(&r)? + "\n").map_err(|e| mwdlp::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn complexity_cmd(presets: Vec<Preset>, model: Option<&Path>, lp_order: Option<usize>, as_json: bool) -> Result<()> {
    let mut targets: Vec<(String, NetworkConfig, [f64; 3])> = Vec::new();
    if let Some(p) = model {
        let mf = modelfile::load(p).with_context(|| format!("{}", p.display()))?;
        let d = mf.params.sparse_gru.mask.as_ref().map_or([1.0; 3], gate_densities);
        targets.push((p.display().to_string(), mf.params.cfg, d));
    } else {
        let presets = if presets.is_empty() {
            vec![Preset::Full24k, Preset::Full16k]
        } else {
            presets
        };
        for p in presets {
            let name = p.to_possible_value().unwrap().get_name().to_string();
            targets.push((name, p.config(lp_order), TARGET_DENSITIES));
        }
    }
    let mut out = Vec::new();
    for (name, cfg, d) in targets {
        let c = complexity(&cfg, d)?;
        if as_json {
            out.push(json!({
                "name": name,
                "sample_rate": cfg.sample_rate,
                "bands": cfg.bands,
                "lp_order": cfg.lp_order,
                "densities": d,
                "band_rate": c.band_rate,
                "gflops": c.gflops(),
                "items": c.items,
            }));
        } else {
            println!(
                "{name}: {} Hz, {} bands, K = {}, densities {:.3}/{:.3}/{:.3}",
                cfg.sample_rate, cfg.bands, cfg.lp_order, d[0], d[1], d[2]
            );
            for i in &c.items {
                println!("  {:<26}{:>8.3} GFLOPS", i.name, i.flops_per_step * c.band_rate * 1e-9);
            }
            println!("  {:<26}{:>8.3} GFLOPS", "total", c.gflops());
        }
    }
    if as_json {
        println!("{}", serde_json::to_string_pretty(&out)?);
    }
    Ok(())
}

fn eval_lsd(reference: &Path, degraded: &Path, as_json: bool) -> Result<()> {
    let a = read_wav(reference)?;
    let b = read_wav(degraded)?;
    if a.sample_rate != b.sample_rate {
        return Err(mwdlp::Error::Config(format!("sample rates differ: {} vs {}", a.sample_rate, b.sample_rate)).into());
    }
    let n = a.samples.len().min(b.samples.len());
    let trim = |w: &Waveform| Waveform::new(w.sample_rate, w.samples[..n].to_vec());
    let lsd = log_spectral_distortion(&features_of(&trim(&a))?, &features_of(&trim(&b))?)?;
    if as_json {
        println!("{}", json!({ "lsd_db": lsd, "samples": n, "sample_rate": a.sample_rate }));
    } else {
        println!("{lsd:.4} dB");
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| mwdlp::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mf = modelfile::from_bytes(&bytes).with_context(|| format!("{}", path.display()))?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let c = mf.params.cfg;
    println!("{}: {} bytes, crc32 {crc:08x} (ok)", path.display(), bytes.len());
    println!(
        "network: {} Hz, {} bands, K = {}, frame shift {}, {} mels, context -{}/+{}",
        c.sample_rate, c.bands, c.lp_order, c.frame_shift, c.cond_dim, c.segconv_prev, c.segconv_next
    );
    println!(
        "  conditioning {}, embedding {}, sparse GRU {}, dense GRUs {}, bins {}, latent {}, residual hidden {}",
        c.cond_proj, c.embed_dim, c.sparse_units, c.dense_units, c.head_bins, c.logit_latent, c.residual_hidden
    );
    println!(
        "pqmf: {} bands, order {}, beta {}, cutoff {}",
        mf.pqmf.bands, mf.pqmf.order, mf.pqmf.beta, mf.pqmf.cutoff
    );
    match &mf.params.sparse_gru.mask {
        Some(m) => {
            let d = gate_densities(m);
            println!(
                "sparse GRU recurrent density {:.4} (z {:.4}, r {:.4}, n {:.4}), {} blocks",
                m.density(),
                d[0],
                d[1],
                d[2],
                m.kept()
            );
        }
        None => println!("sparse GRU recurrent matrix dense"),
    }
    println!("{} parameters", mf.params.num_params());
    for t in mf.params.tensors() {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        println!("  {:<28}{}", t.name, shape.join(" × "));
    }
    Ok(())
}
