use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use onsetforge::Error;

mod commands;
mod config;

use config::RunConfig;

/// Piano note-onset transcription trained on procedurally generated data.
#[derive(Parser)]
#[command(name = "onsetforge", version, about)]
struct Cli {
    /// JSON configuration file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads (falls back to ONSETFORGE_THREADS, then all cores).
    /// Use 1 for fully deterministic runs.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Write the merged effective configuration to this path before running.
    #[arg(long, global = true, value_name = "FILE")]
    emit_config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or synthesize spectral bases.
    #[command(subcommand)]
    Basis(BasisCmd),
    /// Generate labeled training windows.
    #[command(subcommand)]
    Datagen(DatagenCmd),
    /// Train the onset network on procedurally generated data.
    Train(TrainArgs),
    /// Transcribe a WAV file into timed note events.
    Transcribe(TranscribeArgs),
    /// Score predictions against ground truth.
    #[command(subcommand)]
    Evaluate(EvaluateCmd),
    /// Render inspection images.
    #[command(subcommand)]
    Inspect(InspectCmd),
}

#[derive(Subcommand)]
enum BasisCmd {
    /// Build a basis from 88 recordings named `<midi>.wav` (21..=108).
    Build(BasisBuildArgs),
    /// Synthesize toy-instrument bases, one file per velocity.
    Synth(BasisSynthArgs),
}

#[derive(Args)]
struct BasisBuildArgs {
    /// Directory containing 21.wav .. 108.wav at the configured rate.
    #[arg(long, value_name = "DIR")]
    dir: PathBuf,
    /// Note onset time within every clip, in seconds.
    #[arg(long, value_name = "SECONDS")]
    onset_time: f64,
    /// Instrument tag stored in the basis file.
    #[arg(long)]
    instrument: String,
    /// MIDI velocity tag (1..=127).
    #[arg(long)]
    velocity: u8,
    /// Output basis file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct BasisSynthArgs {
    /// Seed for the toy renderer.
    #[arg(long)]
    seed: Option<u64>,
    /// Velocities to render, one basis file each.
    #[arg(long, value_delimiter = ',', default_values_t = [30u8, 60, 90, 120])]
    velocities: Vec<u8>,
    /// Output directory for `toy-v###.sbas` files.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Harmonic partials per note.
    #[arg(long)]
    partials: Option<usize>,
    /// Amplitude rolloff exponent across partials.
    #[arg(long)]
    partial_rolloff: Option<f64>,
    /// Base temporal decay in 1/s.
    #[arg(long)]
    decay_rate: Option<f64>,
    /// Extra decay per partial index.
    #[arg(long)]
    decay_spread: Option<f64>,
    /// Velocity-to-brightness exponent.
    #[arg(long)]
    velocity_scaling: Option<f64>,
    /// Random detune range in cents.
    #[arg(long)]
    detune_cents: Option<f64>,
}

#[derive(Subcommand)]
enum DatagenCmd {
    /// Write generated examples to a binary dataset file.
    Dump(DatagenDumpArgs),
    /// Report generation statistics over many attempts.
    Stats(DatagenStatsArgs),
}

#[derive(Args)]
struct DatagenDumpArgs {
    /// Basis files forming the generation set (repeatable).
    #[arg(long, required = true, value_name = "FILE")]
    basis: Vec<PathBuf>,
    /// Number of examples.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Also render one example's window as a PGM image.
    #[arg(long, value_name = "FILE")]
    pgm: Option<PathBuf>,
    /// Index of the example to render.
    #[arg(long, default_value_t = 0)]
    pgm_index: usize,
}

#[derive(Args)]
struct DatagenStatsArgs {
    #[arg(long, required = true, value_name = "FILE")]
    basis: Vec<PathBuf>,
    /// Number of examples to generate.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, required = true, value_name = "FILE")]
    basis: Vec<PathBuf>,
    /// Output model file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Optional CSV metrics log (iteration, train_loss).
    #[arg(long, value_name = "FILE")]
    metrics: Option<PathBuf>,
    /// Override the configured iteration count.
    #[arg(long)]
    iterations: Option<u64>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TranscribeArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Input WAV file at the configured sample rate.
    #[arg(long, value_name = "FILE")]
    audio: PathBuf,
    /// Output events CSV (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Override the piano-roll activation threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Also render the raw piano roll as a PGM image.
    #[arg(long, value_name = "FILE")]
    roll_pgm: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvaluateCmd {
    /// Validation protocol: ternary scoring of sampled reading windows.
    Windows(EvaluateWindowsArgs),
    /// Test protocol: event matching within a time tolerance.
    Events(EvaluateEventsArgs),
}

#[derive(Args)]
struct EvaluateWindowsArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Annotated piece: a WAV or CQTS spectrogram file.
    #[arg(long, value_name = "FILE", requires = "truth")]
    input: Option<PathBuf>,
    /// Ground-truth annotations for --input.
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Manifest of `input<TAB>truth` lines for multi-piece runs.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["input", "truth"])]
    list: Option<PathBuf>,
    /// Reading windows sampled per piece.
    #[arg(long, default_value_t = 1000)]
    samples: u64,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSON report (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateEventsArgs {
    /// Predicted events CSV (mutually exclusive with --model/--audio).
    #[arg(long, value_name = "FILE", conflicts_with_all = ["model", "audio"])]
    predictions: Option<PathBuf>,
    /// Transcribe this model over --audio instead of reading predictions.
    #[arg(long, value_name = "FILE", requires = "audio")]
    model: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    audio: Option<PathBuf>,
    /// Ground truth: annotation text or events CSV.
    #[arg(long, value_name = "FILE")]
    truth: Option<PathBuf>,
    /// Manifest of `predictions<TAB>truth` (or `audio<TAB>truth` with
    /// --model) lines.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["predictions", "audio", "truth"])]
    list: Option<PathBuf>,
    /// Override the matching tolerance in seconds.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Output JSON report (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum InspectCmd {
    /// Render a spectrogram (and optionally a piano roll) as PGM images.
    Render(InspectRenderArgs),
}

#[derive(Args)]
struct InspectRenderArgs {
    /// Input WAV or CQTS file.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output spectrogram PGM.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Model for the optional piano-roll rendering.
    #[arg(long, value_name = "FILE", requires = "roll_out")]
    model: Option<PathBuf>,
    /// Output piano-roll PGM.
    #[arg(long, value_name = "FILE", requires = "model")]
    roll_out: Option<PathBuf>,
    /// Also save the computed spectrogram as a CQTS file.
    #[arg(long, value_name = "FILE")]
    cqts_out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidInput(_) => 2,
        Error::Format { .. } | Error::UnsupportedRate { .. } | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn resolve_threads(cli_threads: Option<usize>, config_threads: usize) -> usize {
    cli_threads
        .or_else(|| {
            std::env::var("ONSETFORGE_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(config_threads)
}

fn run(cli: Cli) -> onsetforge::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    config.threads = resolve_threads(cli.threads, config.threads);
    if config.threads > 0 {
        // ignore the error if a pool already exists (e.g. in tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global();
    }
    match cli.command {
        Command::Basis(BasisCmd::Build(args)) => {
            commands::basis_build(&mut config, &cli.emit_config, args)
        }
        Command::Basis(BasisCmd::Synth(args)) => {
            commands::basis_synth(&mut config, &cli.emit_config, args)
        }
        Command::Datagen(DatagenCmd::Dump(args)) => {
            commands::datagen_dump(&mut config, &cli.emit_config, args)
        }
        Command::Datagen(DatagenCmd::Stats(args)) => {
            commands::datagen_stats(&mut config, &cli.emit_config, args)
        }
        Command::Train(args) => commands::train(&mut config, &cli.emit_config, args),
        Command::Transcribe(args) => commands::transcribe(&mut config, &cli.emit_config, args),
        Command::Evaluate(EvaluateCmd::Windows(args)) => {
            commands::evaluate_windows(&mut config, &cli.emit_config, args)
        }
        Command::Evaluate(EvaluateCmd::Events(args)) => {
            commands::evaluate_events(&mut config, &cli.emit_config, args)
        }
        Command::Inspect(InspectCmd::Render(args)) => {
            commands::inspect_render(&mut config, &cli.emit_config, args)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
