//! End-to-end tests of the `onsetforge` binary: subcommand wiring, file
//! outputs, exit codes, and per-seed reproducibility.

use std::path::PathBuf;
use std::process::{Command, Output};

use once_cell::sync::Lazy;
use onsetforge::basis::{self, ToyInstrument};
use onsetforge::cqt::CqtConfig;
use onsetforge::network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_onsetforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn onsetforge")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// One toy basis file, built once and shared across tests.
struct Fixture {
    _dir: TempDir,
    basis_path: PathBuf,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = TempDir::new().expect("tempdir");
    let cfg = CqtConfig::default();
    let inst = ToyInstrument { partials: 3, ..ToyInstrument::default() };
    let toy = basis::synth_toy_basis(&cfg, 42, &inst, 90).expect("toy basis");
    let basis_path = dir.path().join("toy.sbas");
    toy.save(&basis_path).expect("save basis");
    Fixture { _dir: dir, basis_path }
});

fn basis_arg() -> String {
    FIXTURE.basis_path.display().to_string()
}

#[test]
fn usage_errors_exit_with_code_2() {
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"decode_threshold": 0.8, "no_such_key": 1}"#).unwrap();
    let out = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "datagen",
        "stats",
        "--basis",
        &basis_arg(),
        "--n",
        "1",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn corrupt_basis_file_exits_with_code_3() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.sbas");
    std::fs::write(&bad, b"XXXXnot a basis").unwrap();
    let out = run(&[
        "datagen",
        "stats",
        "--basis",
        bad.to_str().unwrap(),
        "--n",
        "1",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn missing_file_exits_with_code_3() {
    let out = run(&["datagen", "stats", "--basis", "/nonexistent/x.sbas", "--n", "1"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn diverged_training_exits_with_code_4() {
    let dir = TempDir::new().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"train": {"learning_rate": 1e200, "iterations": 10}}"#)
        .unwrap();
    let out = run(&[
        "--config",
        cfg_path.to_str().unwrap(),
        "train",
        "--basis",
        &basis_arg(),
        "--out",
        dir.path().join("m.onnw").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn train_zero_iterations_writes_the_initial_parameters() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("init.onnw");
    let out = run(&[
        "train",
        "--basis",
        &basis_arg(),
        "--iterations",
        "0",
        "--seed",
        "1",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_success(&out);

    let expected_path = dir.path().join("expected.onnw");
    let params = network::init_params(&mut ChaCha8Rng::seed_from_u64(1));
    let fingerprint = network::CqtFingerprint::from(&CqtConfig::default());
    network::save_model(&params, &fingerprint, &expected_path).unwrap();
    assert_eq!(
        std::fs::read(&model).unwrap(),
        std::fs::read(&expected_path).unwrap()
    );
}

#[test]
fn train_and_dump_are_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let model_a = dir.path().join("a.onnw");
    let model_b = dir.path().join("b.onnw");
    for model in [&model_a, &model_b] {
        let out = run(&[
            "--threads",
            "1",
            "train",
            "--basis",
            &basis_arg(),
            "--iterations",
            "30",
            "--seed",
            "1",
            "--out",
            model.to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    assert_eq!(
        std::fs::read(&model_a).unwrap(),
        std::fs::read(&model_b).unwrap()
    );

    let dump_a = dir.path().join("a.onst");
    let dump_b = dir.path().join("b.onst");
    for dump in [&dump_a, &dump_b] {
        let out = run(&[
            "--threads",
            "1",
            "datagen",
            "dump",
            "--basis",
            &basis_arg(),
            "--n",
            "200",
            "--seed",
            "1",
            "--out",
            dump.to_str().unwrap(),
        ]);
        assert_success(&out);
    }
    let bytes_a = std::fs::read(&dump_a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&dump_b).unwrap());
    let examples = onsetforge::datagen::load_dataset(&dump_a).unwrap();
    assert_eq!(examples.len(), 200);

    // a different seed changes the output
    let dump_c = dir.path().join("c.onst");
    let out = run(&[
        "--threads",
        "1",
        "datagen",
        "dump",
        "--basis",
        &basis_arg(),
        "--n",
        "200",
        "--seed",
        "2",
        "--out",
        dump_c.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_ne!(bytes_a, std::fs::read(&dump_c).unwrap());
}

#[test]
fn threads_env_var_matches_the_flag() {
    let dir = TempDir::new().unwrap();
    let by_flag = dir.path().join("flag.onst");
    let by_env = dir.path().join("env.onst");
    assert_success(&run(&[
        "--threads",
        "2",
        "datagen",
        "dump",
        "--basis",
        &basis_arg(),
        "--n",
        "8",
        "--seed",
        "4",
        "--out",
        by_flag.to_str().unwrap(),
    ]));
    let out = bin()
        .env("ONSETFORGE_THREADS", "2")
        .args([
            "datagen",
            "dump",
            "--basis",
            &basis_arg(),
            "--n",
            "8",
            "--seed",
            "4",
            "--out",
            by_env.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out);
    let flag_bytes = std::fs::read(&by_flag).unwrap();
    assert_eq!(flag_bytes, std::fs::read(&by_env).unwrap());

    // a different worker count lays out different RNG streams
    let one = dir.path().join("one.onst");
    assert_success(&run(&[
        "--threads",
        "1",
        "datagen",
        "dump",
        "--basis",
        &basis_arg(),
        "--n",
        "8",
        "--seed",
        "4",
        "--out",
        one.to_str().unwrap(),
    ]));
    assert_ne!(flag_bytes, std::fs::read(&one).unwrap());
}

#[test]
fn datagen_dump_writes_window_images() {
    let dir = TempDir::new().unwrap();
    let dump = dir.path().join("d.onst");
    let pgm = dir.path().join("w.pgm");
    let out = run(&[
        "datagen",
        "dump",
        "--basis",
        &basis_arg(),
        "--n",
        "3",
        "--seed",
        "9",
        "--out",
        dump.to_str().unwrap(),
        "--pgm",
        pgm.to_str().unwrap(),
        "--pgm-index",
        "2",
    ]);
    assert_success(&out);
    let bytes = std::fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n8 79\n255\n"));

    let out = run(&[
        "datagen",
        "dump",
        "--basis",
        &basis_arg(),
        "--n",
        "3",
        "--seed",
        "9",
        "--out",
        dump.to_str().unwrap(),
        "--pgm",
        pgm.to_str().unwrap(),
        "--pgm-index",
        "3",
    ]);
    assert_eq!(code(&out), 2); // index out of range
}

#[test]
fn datagen_stats_reports_the_configured_distributions() {
    let out = run(&[
        "datagen",
        "stats",
        "--basis",
        &basis_arg(),
        "--n",
        "20000",
        "--seed",
        "3",
    ]);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stats emits JSON");
    let mean_chords = report["mean_chords"].as_f64().unwrap();
    let mean_size = report["mean_chord_size"].as_f64().unwrap();
    assert!((mean_chords - 6.0).abs() < 0.15, "mean chords {mean_chords}");
    assert!((mean_size - 2.5).abs() < 0.1, "mean chord size {mean_size}");
}

#[test]
fn emit_config_round_trips_and_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let emitted = dir.path().join("effective.json");
    let dump_a = dir.path().join("a.onst");
    let out = run(&[
        "--threads",
        "1",
        "--emit-config",
        emitted.to_str().unwrap(),
        "datagen",
        "dump",
        "--basis",
        &basis_arg(),
        "--n",
        "50",
        "--seed",
        "7",
        "--out",
        dump_a.to_str().unwrap(),
    ]);
    assert_success(&out);

    // the emitted file re-parses and reproduces the identical run
    let emitted_again = dir.path().join("effective2.json");
    let dump_b = dir.path().join("b.onst");
    let out = run(&[
        "--config",
        emitted.to_str().unwrap(),
        "--emit-config",
        emitted_again.to_str().unwrap(),
        "datagen",
        "dump",
        "--basis",
        &basis_arg(),
        "--n",
        "50",
        "--out",
        dump_b.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_eq!(
        std::fs::read_to_string(&emitted).unwrap(),
        std::fs::read_to_string(&emitted_again).unwrap()
    );
    assert_eq!(std::fs::read(&dump_a).unwrap(), std::fs::read(&dump_b).unwrap());
}

#[test]
fn transcribe_silence_yields_no_events() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("m.onnw");
    assert_success(&run(&[
        "train",
        "--basis",
        &basis_arg(),
        "--iterations",
        "0",
        "--seed",
        "1",
        "--out",
        model.to_str().unwrap(),
    ]));

    let wav = dir.path().join("silence.wav");
    onsetforge::audio::write_wav_pcm16(&wav, &vec![0.0; 66150], 44100).unwrap();
    let events_csv = dir.path().join("events.csv");
    let out = run(&[
        "transcribe",
        "--model",
        model.to_str().unwrap(),
        "--audio",
        wav.to_str().unwrap(),
        "--out",
        events_csv.to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = std::fs::read_to_string(&events_csv).unwrap();
    assert_eq!(text.trim(), "onset_seconds,midi_pitch,confidence");

    // identical invocations agree byte for byte
    let events_b = dir.path().join("events_b.csv");
    assert_success(&run(&[
        "transcribe",
        "--model",
        model.to_str().unwrap(),
        "--audio",
        wav.to_str().unwrap(),
        "--out",
        events_b.to_str().unwrap(),
    ]));
    assert_eq!(
        std::fs::read(&events_csv).unwrap(),
        std::fs::read(&events_b).unwrap()
    );
}

#[test]
fn transcribe_refuses_wrong_sample_rate() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("m.onnw");
    assert_success(&run(&[
        "train",
        "--basis",
        &basis_arg(),
        "--iterations",
        "0",
        "--out",
        model.to_str().unwrap(),
    ]));
    let wav = dir.path().join("x48k.wav");
    onsetforge::audio::write_wav_pcm16(&wav, &vec![0.1; 48000], 48000).unwrap();
    let out = run(&[
        "transcribe",
        "--model",
        model.to_str().unwrap(),
        "--audio",
        wav.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unsupported sample rate"));
}

#[test]
fn evaluate_events_on_identical_csvs_scores_one() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("events.csv");
    std::fs::write(
        &csv,
        "onset_seconds,midi_pitch,confidence\n1.0,60,0.9\n2.5,72,0.85\n2.5,60,0.99\n",
    )
    .unwrap();
    let report_path = dir.path().join("report.json");
    let out = run(&[
        "evaluate",
        "events",
        "--predictions",
        csv.to_str().unwrap(),
        "--truth",
        csv.to_str().unwrap(),
        "--tolerance",
        "0.05",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["pooled"]["f_measure"].as_f64().unwrap(), 1.0);
    assert_eq!(report["pooled"]["true_positives"].as_u64().unwrap(), 3);
}

#[test]
fn evaluate_events_matches_maps_style_annotations() {
    let dir = TempDir::new().unwrap();
    let pred = dir.path().join("pred.csv");
    std::fs::write(&pred, "onset_seconds,midi_pitch,confidence\n1.01,60,0.9\n5.0,64,0.9\n")
        .unwrap();
    let truth = dir.path().join("truth.txt");
    std::fs::write(&truth, "OnsetTime\tOffsetTime\tMidiPitch\n1.0\t2.0\t60\n3.0\t4.0\t62\n")
        .unwrap();
    let out = run(&[
        "evaluate",
        "events",
        "--predictions",
        pred.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
    ]);
    assert_success(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pooled"]["true_positives"].as_u64().unwrap(), 1);
    assert_eq!(report["pooled"]["false_positives"].as_u64().unwrap(), 1);
    assert_eq!(report["pooled"]["false_negatives"].as_u64().unwrap(), 1);
}

#[test]
fn basis_build_ingests_a_directory_of_wavs() {
    let dir = TempDir::new().unwrap();
    let wav_dir = dir.path().join("notes");
    std::fs::create_dir(&wav_dir).unwrap();
    let rate = 44100u32;
    for midi in basis::LOWEST_MIDI..=basis::HIGHEST_MIDI {
        let freq = basis::midi_frequency(midi).min(5000.0);
        let samples: Vec<f64> = (0..(0.4 * rate as f64) as usize)
            .map(|n| {
                if (n as f64) < 0.1 * rate as f64 {
                    0.0
                } else {
                    0.4 * (std::f64::consts::TAU * freq * n as f64 / rate as f64).sin()
                }
            })
            .collect();
        onsetforge::audio::write_wav_pcm16(wav_dir.join(format!("{midi}.wav")), &samples, rate)
            .unwrap();
    }
    let out_path = dir.path().join("built.sbas");
    let out = run(&[
        "basis",
        "build",
        "--dir",
        wav_dir.to_str().unwrap(),
        "--onset-time",
        "0.1",
        "--instrument",
        "sine-fixture",
        "--velocity",
        "90",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let built = onsetforge::basis::SpectralBasis::load(&out_path).unwrap();
    assert_eq!(built.instrument(), "sine-fixture");
    assert_eq!(built.onset_frame(), 4); // round(0.1 * 44100 / 1024)
    assert_eq!(built.frames(), 18); // 0.4 s at 44.1 kHz / 1024 + 1

    // a built basis feeds straight into generation
    let dump = dir.path().join("d.onst");
    assert_success(&run(&[
        "datagen",
        "dump",
        "--basis",
        out_path.to_str().unwrap(),
        "--n",
        "5",
        "--seed",
        "1",
        "--out",
        dump.to_str().unwrap(),
    ]));
}

#[test]
fn inspect_render_and_windows_evaluation_work_from_cqts_files() {
    let dir = TempDir::new().unwrap();
    // a 1.5 s tone at A4 with onset at 0.5 s
    let rate = 44100u32;
    let samples: Vec<f64> = (0..(1.5 * rate as f64) as usize)
        .map(|n| {
            if (n as f64) < 0.5 * rate as f64 {
                0.0
            } else {
                0.5 * (std::f64::consts::TAU * 440.0 * n as f64 / rate as f64).sin()
            }
        })
        .collect();
    let wav = dir.path().join("tone.wav");
    onsetforge::audio::write_wav_pcm16(&wav, &samples, rate).unwrap();

    let spec_pgm = dir.path().join("spec.pgm");
    let cqts = dir.path().join("tone.cqts");
    let roll_pgm = dir.path().join("roll.pgm");
    let model = dir.path().join("m.onnw");
    assert_success(&run(&[
        "train",
        "--basis",
        &basis_arg(),
        "--iterations",
        "0",
        "--out",
        model.to_str().unwrap(),
    ]));
    let out = run(&[
        "inspect",
        "render",
        "--input",
        wav.to_str().unwrap(),
        "--out",
        spec_pgm.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--roll-out",
        roll_pgm.to_str().unwrap(),
        "--cqts-out",
        cqts.to_str().unwrap(),
    ]);
    assert_success(&out);
    // 1.5 s -> 65 frames; spectrogram is frames x 79, roll frames x 88
    assert!(std::fs::read(&spec_pgm).unwrap().starts_with(b"P5\n65 79\n255\n"));
    assert!(std::fs::read(&roll_pgm).unwrap().starts_with(b"P5\n65 88\n255\n"));

    // windows evaluation straight from the saved spectrogram
    let truth = dir.path().join("truth.txt");
    std::fs::write(&truth, "OnsetTime\tOffsetTime\tMidiPitch\n0.5\t1.5\t69\n").unwrap();
    let report_path = dir.path().join("windows.json");
    let out = run(&[
        "evaluate",
        "windows",
        "--model",
        model.to_str().unwrap(),
        "--input",
        cqts.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--samples",
        "100",
        "--seed",
        "5",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["pieces"][0]["sampled"].as_u64().unwrap(), 100);
    let total = report["pooled_confusion"]["htp"].as_u64().unwrap()
        + report["pooled_confusion"]["stp"].as_u64().unwrap()
        + report["pooled_confusion"]["hfp"].as_u64().unwrap()
        + report["pooled_confusion"]["sfn"].as_u64().unwrap()
        + report["pooled_confusion"]["vc"].as_u64().unwrap()
        + report["pooled_confusion"]["sfp"].as_u64().unwrap()
        + report["pooled_confusion"]["hfn"].as_u64().unwrap()
        + report["pooled_confusion"]["stn"].as_u64().unwrap()
        + report["pooled_confusion"]["htn"].as_u64().unwrap();
    let discarded = report["pieces"][0]["discarded"].as_u64().unwrap();
    assert_eq!(total, (100 - discarded) * 88);
}
