//! Subcommand implementations: flag merging, file wiring, and delegation
//! to the library.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use onsetforge::audio::{load_wav, AudioClip};
use onsetforge::basis::{self, BasisSet, ToyInstrument};
use onsetforge::cqt::{cqt, ComplexSpectrogram, CqtConfig, MagnitudeSpectrogram};
use onsetforge::datagen::{self, GenStats};
use onsetforge::decoder::{self, DecodedEvent, NoteEvent};
use onsetforge::eval;
use onsetforge::network::{self, CqtFingerprint, NetworkParams};
use onsetforge::render;
use onsetforge::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{
    BasisBuildArgs, BasisSynthArgs, DatagenDumpArgs, DatagenStatsArgs, EvaluateEventsArgs,
    EvaluateWindowsArgs, InspectRenderArgs, TrainArgs, TranscribeArgs,
};

fn maybe_emit(config: &RunConfig, emit: &Option<PathBuf>) -> Result<()> {
    if let Some(path) = emit {
        config.emit(path)?;
    }
    Ok(())
}

pub fn basis_build(
    config: &mut RunConfig,
    emit: &Option<PathBuf>,
    args: BasisBuildArgs,
) -> Result<()> {
    maybe_emit(config, emit)?;
    let mut clips: Vec<AudioClip> = Vec::with_capacity(basis::NOTE_COUNT);
    for midi in basis::LOWEST_MIDI..=basis::HIGHEST_MIDI {
        let path = args.dir.join(format!("{midi}.wav"));
        if !path.exists() {
            return Err(Error::InvalidInput(format!(
                "basis ingestion: missing {}",
                path.display()
            )));
        }
        clips.push(load_wav(&path)?);
    }
    let built = basis::build_basis(
        &config.cqt,
        &clips,
        args.onset_time,
        &args.instrument,
        args.velocity,
    )?;
    built.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn basis_synth(
    config: &mut RunConfig,
    emit: &Option<PathBuf>,
    args: BasisSynthArgs,
) -> Result<()> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    maybe_emit(config, emit)?;
    if args.velocities.is_empty() {
        return Err(Error::InvalidInput("basis synth: no velocities given".into()));
    }
    let defaults = ToyInstrument::default();
    let inst = ToyInstrument {
        partials: args.partials.unwrap_or(defaults.partials),
        partial_rolloff: args.partial_rolloff.unwrap_or(defaults.partial_rolloff),
        decay_rate: args.decay_rate.unwrap_or(defaults.decay_rate),
        decay_spread: args.decay_spread.unwrap_or(defaults.decay_spread),
        velocity_scaling: args.velocity_scaling.unwrap_or(defaults.velocity_scaling),
        detune_cents: args.detune_cents.unwrap_or(defaults.detune_cents),
    };
    std::fs::create_dir_all(&args.out_dir)?;
    let set = basis::synth_toy_basis_set(&config.cqt, config.seed, &inst, &args.velocities)?;
    for b in set.iter() {
        let path = args.out_dir.join(format!("toy-v{:03}.sbas", b.velocity()));
        b.save(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Splits `n` into per-worker chunks; worker `w` generates its chunk from
/// stream `w` of the seeded generator, so output depends only on
/// (seed, thread count).
fn generate_chunked(
    set: &BasisSet,
    config: &RunConfig,
    n: usize,
    workers: usize,
) -> Vec<datagen::TrainingExample> {
    let workers = workers.max(1).min(n.max(1));
    let sizes: Vec<usize> = (0..workers)
        .map(|w| n / workers + usize::from(w < n % workers))
        .collect();
    let chunks: Vec<Vec<datagen::TrainingExample>> = sizes
        .par_iter()
        .enumerate()
        .map(|(w, &count)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(w as u64);
            datagen::generate_batch(&mut rng, set, &config.datagen, count)
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

pub fn datagen_dump(
    config: &mut RunConfig,
    emit: &Option<PathBuf>,
    args: DatagenDumpArgs,
) -> Result<()> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    maybe_emit(config, emit)?;
    let set = BasisSet::load(&args.basis)?;
    let examples = generate_chunked(&set, config, args.n, config.threads.max(1));
    datagen::save_dataset(&examples, &args.out)?;
    println!("wrote {} examples to {}", examples.len(), args.out.display());
    if let Some(pgm) = &args.pgm {
        let example = examples.get(args.pgm_index).ok_or_else(|| {
            Error::InvalidInput(format!(
                "--pgm-index {} out of range (generated {})",
                args.pgm_index,
                examples.len()
            ))
        })?;
        render::window_pgm(example, pgm)?;
        println!("wrote {}", pgm.display());
    }
    Ok(())
}

pub fn datagen_stats(
    config: &mut RunConfig,
    emit: &Option<PathBuf>,
    args: DatagenStatsArgs,
) -> Result<()> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    maybe_emit(config, emit)?;
    let set = BasisSet::load(&args.basis)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stats = GenStats::default();
    datagen::generate_batch_with_stats(&mut rng, &set, &config.datagen, args.n, &mut stats);
    let report = serde_json::json!({
        "examples": args.n,
        "attempts": stats.attempts,
        "discards": stats.discards,
        "discard_rate": stats.discards as f64 / stats.attempts.max(1) as f64,
        "mean_chords": stats.mean_chords(),
        "mean_chord_size": stats.mean_chord_size(),
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

pub fn train(config: &mut RunConfig, emit: &Option<PathBuf>, args: TrainArgs) -> Result<()> {
    if let Some(iterations) = args.iterations {
        config.train.iterations = iterations;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
        config.seed = seed;
    }
    maybe_emit(config, emit)?;
    let set = BasisSet::load(&args.basis)?;
    let total = config.train.iterations;
    let (params, metrics) = network::train(&set, &config.datagen, &config.train, |iter, loss, _| {
        eprintln!("iteration {iter}/{total}: loss {loss:.6}");
    })?;
    network::save_model(&params, &CqtFingerprint::from(set.config()), &args.out)?;
    println!("wrote {}", args.out.display());
    if let Some(path) = &args.metrics {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "iteration,train_loss")?;
        for row in &metrics {
            writeln!(w, "{},{}", row.iteration, row.train_loss)?;
        }
        w.flush()?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn load_model_checked(path: &Path, cqt_config: &CqtConfig) -> Result<NetworkParams> {
    let (params, fingerprint) = network::load_model(path)?;
    if !fingerprint.matches(cqt_config) {
        return Err(Error::InvalidInput(format!(
            "model {} was trained with a different transform configuration: {fingerprint:?}",
            path.display()
        )));
    }
    Ok(params)
}

/// Loads a piece as a normalized magnitude spectrogram: either a
/// precomputed CQTS file or a WAV that is transformed on the fly.
fn load_piece(path: &Path, cqt_config: &CqtConfig) -> Result<MagnitudeSpectrogram> {
    let spec = load_spectrogram(path, cqt_config)?;
    let mut mag = spec.magnitudes();
    mag.normalize_to_unit_max();
    Ok(mag)
}

fn load_spectrogram(path: &Path, cqt_config: &CqtConfig) -> Result<ComplexSpectrogram> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("cqts") => ComplexSpectrogram::load(path),
        _ => {
            let clip = load_wav(path)?;
            clip.expect_rate(cqt_config.sample_rate)?;
            cqt(cqt_config, &clip.samples)
        }
    }
}

fn write_events(events: &[DecodedEvent], out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            decoder::write_events_csv(path, events)?;
            println!("wrote {} events to {}", events.len(), path.display());
        }
        None => {
            println!("onset_seconds,midi_pitch,confidence");
            for ev in events {
                println!("{},{},{}", ev.onset_seconds, ev.pitch, ev.confidence);
            }
        }
    }
    Ok(())
}

pub fn transcribe(
    config: &mut RunConfig,
    emit: &Option<PathBuf>,
    args: TranscribeArgs,
) -> Result<()> {
    if let Some(threshold) = args.threshold {
        config.decode_threshold = threshold;
    }
    config.validate()?;
    maybe_emit(config, emit)?;
    let params = load_model_checked(&args.model, &config.cqt)?;
    let clip = load_wav(&args.audio)?;
    clip.expect_rate(config.cqt.sample_rate)?;
    let spec = cqt(&config.cqt, &clip.samples)?;
    let mut mag = spec.magnitudes();
    mag.normalize_to_unit_max();
    let roll = decoder::roll_out(&params, &mag, config.datagen.silence_threshold)?;
    let events = decoder::decode_events(&roll, config.decode_threshold);
    if let Some(path) = &args.roll_pgm {
        render::roll_pgm(&roll, path)?;
        println!("wrote {}", path.display());
    }
    write_events(&events, &args.out)
}

/// Reads a manifest of tab-separated `left<TAB>right` path pairs.
fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut cols = trimmed.split('\t');
        let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: expected two tab-separated paths", i + 1),
            });
        };
        pairs.push((PathBuf::from(a.trim()), PathBuf::from(b.trim())));
    }
    Ok(pairs)
}

fn piece_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn write_report<T: serde::Serialize>(report: &T, out: &Option<PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
    match out {
        Some(path) => {
            std::fs::write(path, text + "\n")?;
            println!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

pub fn evaluate_windows(
    config: &mut RunConfig,
    emit: &Option<PathBuf>,
    args: EvaluateWindowsArgs,
) -> Result<()> {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    maybe_emit(config, emit)?;
    let params = load_model_checked(&args.model, &config.cqt)?;
    let pairs = match (&args.list, &args.input, &args.truth) {
        (Some(list), _, _) => read_manifest(list)?,
        (None, Some(input), Some(truth)) => vec![(input.clone(), truth.clone())],
        _ => {
            return Err(Error::InvalidInput(
                "evaluate windows: give --input with --truth, or --list".into(),
            ))
        }
    };
    let pieces = pairs
        .iter()
        .map(|(input, truth)| {
            Ok(eval::WindowsPieceInput {
                name: piece_name(input),
                magnitudes: load_piece(input, &config.cqt)?,
                truth: eval::read_truth_events(truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let report = eval::evaluate_windows(
        &params,
        &pieces,
        args.samples,
        &mut rng,
        &config.datagen,
        config.ternary_hi,
        config.ternary_lo,
    )?;
    write_report(&report, &args.out)
}

pub fn evaluate_events(
    config: &mut RunConfig,
    emit: &Option<PathBuf>,
    args: EvaluateEventsArgs,
) -> Result<()> {
    if let Some(tolerance) = args.tolerance {
        config.eval_tolerance = tolerance;
    }
    config.validate()?;
    maybe_emit(config, emit)?;
    let pairs = match (&args.list, &args.predictions, &args.audio, &args.truth) {
        (Some(list), _, _, _) => read_manifest(list)?,
        (None, Some(pred), None, Some(truth)) => vec![(pred.clone(), truth.clone())],
        (None, None, Some(audio), Some(truth)) => vec![(audio.clone(), truth.clone())],
        _ => {
            return Err(Error::InvalidInput(
                "evaluate events: give --predictions or --model/--audio with --truth, or --list"
                    .into(),
            ))
        }
    };
    let model = args
        .model
        .as_ref()
        .map(|path| load_model_checked(path, &config.cqt))
        .transpose()?;
    let pieces = pairs
        .iter()
        .map(|(left, truth)| {
            let predictions: Vec<NoteEvent> = match &model {
                Some(params) => {
                    let mag = load_piece(left, &config.cqt)?;
                    let roll =
                        decoder::roll_out(params, &mag, config.datagen.silence_threshold)?;
                    decoder::decode_events(&roll, config.decode_threshold)
                        .iter()
                        .map(|e| e.note_event())
                        .collect()
                }
                None => decoder::read_events_csv(left)?
                    .iter()
                    .map(|e| e.note_event())
                    .collect(),
            };
            Ok(eval::EventsPieceInput {
                name: piece_name(left),
                predictions,
                truth: eval::read_truth_events(truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = eval::evaluate_events(&pieces, config.eval_tolerance);
    write_report(&report, &args.out)
}

pub fn inspect_render(
    config: &mut RunConfig,
    emit: &Option<PathBuf>,
    args: InspectRenderArgs,
) -> Result<()> {
    maybe_emit(config, emit)?;
    let spec = load_spectrogram(&args.input, &config.cqt)?;
    if let Some(path) = &args.cqts_out {
        spec.save(path)?;
        println!("wrote {}", path.display());
    }
    let mut mag = spec.magnitudes();
    mag.normalize_to_unit_max();
    render::spectrogram_pgm(&mag, &args.out)?;
    println!("wrote {}", args.out.display());
    if let (Some(model), Some(roll_out_path)) = (&args.model, &args.roll_out) {
        let params = load_model_checked(model, &config.cqt)?;
        let roll = decoder::roll_out(&params, &mag, config.datagen.silence_threshold)?;
        render::roll_pgm(&roll, roll_out_path)?;
        println!("wrote {}", roll_out_path.display());
    }
    Ok(())
}
