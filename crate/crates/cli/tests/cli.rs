use std::path::Path;
use std::process::{Command, Output};

use mwdlp::dsp::wav::write_wav;
use mwdlp::dsp::Waveform;

fn mwdlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mwdlp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn tone(path: &Path, seconds: f64, f0: f64) {
    let n = (16_000.0 * seconds) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / 16_000.0;
            0.3 * (2.0 * std::f64::consts::PI * f0 * t).sin() + 0.1 * (2.0 * std::f64::consts::PI * 3.1 * f0 * t).sin()
        })
        .collect();
    write_wav(path, &Waveform::new(16_000, samples)).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn complexity_reports_both_presets() {
    let text = stdout(&mwdlp(&["complexity"]));
    assert!(text.contains("full-24k") && text.contains("full-16k"));
    let json: serde_json::Value = serde_json::from_str(&stdout(&mwdlp(&["complexity", "--json"]))).unwrap();
    let items = json.as_array().unwrap();
    assert_eq!(items.len(), 2);
    for it in items {
        let total: f64 = it["items"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| i["flops_per_step"].as_f64().unwrap())
            .sum();
        let g = it["gflops"].as_f64().unwrap();
        assert!((total * it["band_rate"].as_f64().unwrap() * 1e-9 - g).abs() < 1e-9);
    }
}

#[test]
fn lsd_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.wav"), dir.path().join("b.wav"));
    tone(&a, 0.5, 220.0);
    tone(&b, 0.4, 330.0);
    assert_eq!(stdout(&mwdlp(&["eval-lsd", p(&a), p(&a)])).trim(), "0.0000 dB");
    let out = stdout(&mwdlp(&["eval-lsd", p(&a), p(&b), "--json"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["lsd_db"].as_f64().unwrap() > 1.0);
    assert_eq!(v["samples"].as_u64().unwrap(), 6400);
}

#[test]
fn train_synth_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    tone(&data.join("a.wav"), 0.4, 200.0);
    tone(&data.join("b.wav"), 0.3, 260.0);
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "# short run\nlearning_rate = 1e-3\nbatch_size = 2\neval_every = 2\n").unwrap();
    let (model, log) = (dir.path().join("m.mwdl"), dir.path().join("log.csv"));
    let out = stdout(&mwdlp(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&model), "--log", p(&log), "--steps", "4",
    ]));
    assert!(out.contains("best held-out loss"), "{out}");
    let csv = std::fs::read_to_string(&log).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,ce,stft,density,lr\n"));

    let info = stdout(&mwdlp(&["inspect", p(&model)]));
    assert!(info.contains("crc32") && info.contains("sparse_gru"), "{info}");

    let feats = dir.path().join("a.feat");
    stdout(&mwdlp(&["features", p(&data.join("a.wav")), p(&feats)]));
    let synth = |input: &Path, out: &Path, seed: &str| {
        stdout(&mwdlp(&[
            "synth", "--model", p(&model), "--input", p(input), "--output", p(out), "--seed", seed, "--sample-rate", "16000",
        ]))
    };
    let (w1, w2, w3, w4) = (
        dir.path().join("1.wav"),
        dir.path().join("2.wav"),
        dir.path().join("3.wav"),
        dir.path().join("4.wav"),
    );
    synth(&feats, &w1, "7");
    synth(&feats, &w2, "7");
    synth(&feats, &w3, "8");
    synth(&data.join("a.wav"), &w4, "7");
    let read = |q: &Path| std::fs::read(q).unwrap();
    assert_eq!(read(&w1), read(&w2));
    assert_ne!(read(&w1), read(&w3));
    // Features extracted internally are the same as from the feature file.
    assert_eq!(read(&w1), read(&w4));
    let wave = mwdlp::dsp::wav::read_wav(&w1).unwrap();
    let frames = mwdlp::featfile::load(&feats).unwrap().frames();
    assert_eq!(wave.samples.len(), frames * 160);
}

#[test]
fn bench_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let text = stdout(&mwdlp(&["bench", "--preset", "toy-16k", "--seconds", "0.5", "--json", p(&json)]));
    assert!(text.contains("RTF"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(v["rtf"].as_f64().unwrap() > 0.0);
    assert_eq!(v["sample_rate"].as_u64().unwrap(), 16_000);
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let check = |args: &[&str], code: i32| {
        let o = mwdlp(args);
        let err = String::from_utf8(o.stderr).unwrap();
        assert_eq!(o.status.code(), Some(code), "{args:?}: {err}");
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "));
    };
    let missing = dir.path().join("missing.wav");
    check(&["inspect", p(&missing)], 3);
    check(&["eval-lsd", p(&missing), p(&missing)], 3);

    let junk = dir.path().join("junk.mwdl");
    std::fs::write(&junk, b"MWDL not really a model").unwrap();
    check(&["inspect", p(&junk)], 4);

    let wide = dir.path().join("w.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 44_100,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    hound::WavWriter::create(&wide, spec).unwrap().finalize().unwrap();
    check(&["features", p(&wide), p(&dir.path().join("w.feat"))], 2);
    check(&["bench", "--preset", "toy-16k", "--seconds=-1"], 2);
}
