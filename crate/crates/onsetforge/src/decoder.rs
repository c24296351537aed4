//! Sliding-window decoding: run the network over every reading-window
//! position of a full-piece spectrogram, threshold the resulting piano
//! roll, and collapse runs of consecutive activations into timed note
//! events.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::basis::{HIGHEST_MIDI, LOWEST_MIDI};
use crate::cqt::{self, CqtConfig, MagnitudeSpectrogram};
use crate::datagen::{CENTER_OFFSET, WINDOW_BINS, WINDOW_FRAMES, WINDOW_VALUES};
use crate::error::{Error, Result};
use crate::network::{self, forward_batch, NetworkParams, OUTPUT_DIM};

/// A pitched onset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    /// MIDI pitch, 21..=108.
    pub pitch: u8,
    /// Onset time in seconds.
    pub onset: f64,
}

/// A decoded onset with the maximum network activation of its run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodedEvent {
    pub pitch: u8,
    pub onset_seconds: f64,
    pub confidence: f64,
}

impl DecodedEvent {
    pub fn note_event(&self) -> NoteEvent {
        NoteEvent { pitch: self.pitch, onset: self.onset_seconds }
    }
}

/// Frames × 88 matrix of raw network outputs. Rows whose reading window
/// does not fit inside the piece, or whose window is silent, are all zero.
#[derive(Debug, Clone)]
pub struct PianoRoll {
    pub frames: usize,
    pub sample_rate: f64,
    pub hop: u32,
    /// Frame-major activations, `frames` rows of 88.
    pub data: Array2<f64>,
}

impl PianoRoll {
    #[inline]
    pub fn at(&self, frame: usize, pitch_index: usize) -> f64 {
        self.data[(frame, pitch_index)]
    }
}

/// Evaluates the network at every valid window position of a full-piece
/// magnitude spectrogram (already normalized to a global maximum of 1).
/// Windows are renormalized individually; silent windows produce zero rows.
pub fn roll_out(
    params: &NetworkParams,
    mag: &MagnitudeSpectrogram,
    silence_threshold: f64,
) -> Result<PianoRoll> {
    if mag.bins != WINDOW_BINS {
        return Err(Error::invalid(format!(
            "decoder: spectrogram has {} bins, the network needs {WINDOW_BINS}",
            mag.bins
        )));
    }
    let mut data = Array2::zeros((mag.frames, OUTPUT_DIM));
    if mag.frames < WINDOW_FRAMES {
        return Ok(PianoRoll {
            frames: mag.frames,
            sample_rate: mag.sample_rate,
            hop: mag.hop,
            data,
        });
    }
    let first = CENTER_OFFSET;
    let last = mag.frames - (WINDOW_FRAMES - CENTER_OFFSET);

    // batch the live windows so the forward pass runs as matrix products
    const CHUNK: usize = 256;
    let mut centers = Vec::with_capacity(CHUNK);
    let mut x = Array2::zeros((CHUNK, WINDOW_VALUES));
    let flush = |centers: &mut Vec<usize>, x: &mut Array2<f64>, data: &mut Array2<f64>| {
        if centers.is_empty() {
            return;
        }
        let batch = x.slice(ndarray::s![..centers.len(), ..]).to_owned();
        let pass = forward_batch(params, &batch);
        for (row, &center) in pass.outputs.rows().into_iter().zip(centers.iter()) {
            data.row_mut(center).assign(&row);
        }
        centers.clear();
    };

    for center in first..=last {
        let start = center - CENTER_OFFSET;
        let window_max = (start..start + WINDOW_FRAMES)
            .flat_map(|t| mag.frame(t))
            .cloned()
            .fold(0.0, f64::max);
        if window_max <= silence_threshold {
            continue; // leave the row zero
        }
        let slot = centers.len();
        {
            let mut row = x.row_mut(slot);
            for (w, t) in (start..start + WINDOW_FRAMES).enumerate() {
                for (k, &v) in mag.frame(t).iter().enumerate() {
                    row[w * WINDOW_BINS + k] = v / window_max;
                }
            }
        }
        centers.push(center);
        if centers.len() == CHUNK {
            flush(&mut centers, &mut x, &mut data);
        }
    }
    flush(&mut centers, &mut x, &mut data);

    Ok(PianoRoll { frames: mag.frames, sample_rate: mag.sample_rate, hop: mag.hop, data })
}

/// Thresholds the roll and merges every maximal run of consecutive
/// activations per pitch into one event at the run's mean frame. Events
/// are sorted by (onset, pitch).
pub fn decode_events(roll: &PianoRoll, threshold: f64) -> Vec<DecodedEvent> {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "decode threshold must lie in (0, 1)"
    );
    let mut events = Vec::new();
    let seconds_per_frame = roll.hop as f64 / roll.sample_rate;
    for pitch_index in 0..OUTPUT_DIM {
        let mut run_start: Option<usize> = None;
        let mut run_confidence = 0.0f64;
        for frame in 0..=roll.frames {
            let active = frame < roll.frames && roll.at(frame, pitch_index) > threshold;
            if active {
                if run_start.is_none() {
                    run_start = Some(frame);
                    run_confidence = 0.0;
                }
                run_confidence = run_confidence.max(roll.at(frame, pitch_index));
            } else if let Some(start) = run_start.take() {
                let len = frame - start;
                let mean_frame = (start + frame - 1) as f64 / 2.0;
                debug_assert!(len > 0);
                events.push(DecodedEvent {
                    pitch: LOWEST_MIDI + pitch_index as u8,
                    onset_seconds: mean_frame * seconds_per_frame,
                    confidence: run_confidence,
                });
            }
        }
    }
    events.sort_by(|a, b| {
        a.onset_seconds
            .total_cmp(&b.onset_seconds)
            .then(a.pitch.cmp(&b.pitch))
    });
    events
}

/// Full transcription of raw samples: transform, normalize, roll out the
/// network, decode events.
pub fn transcribe_samples(
    params: &NetworkParams,
    config: &CqtConfig,
    samples: &[f64],
    threshold: f64,
    silence_threshold: f64,
) -> Result<Vec<DecodedEvent>> {
    let spec = cqt::cqt(config, samples)?;
    let mut mag = spec.magnitudes();
    mag.normalize_to_unit_max();
    let roll = roll_out(params, &mag, silence_threshold)?;
    Ok(decode_events(&roll, threshold))
}

/// Loads a model and a WAV file and transcribes it. The model's stored
/// transform fingerprint must match `config`.
pub fn transcribe_file(
    model_path: impl AsRef<Path>,
    audio_path: impl AsRef<Path>,
    config: &CqtConfig,
    threshold: f64,
    silence_threshold: f64,
) -> Result<Vec<DecodedEvent>> {
    let (params, fingerprint) = network::load_model(model_path)?;
    if !fingerprint.matches(config) {
        return Err(Error::invalid(format!(
            "model was trained with a different transform configuration \
             ({fingerprint:?})"
        )));
    }
    let clip = crate::audio::load_wav(audio_path)?;
    clip.expect_rate(config.sample_rate)?;
    transcribe_samples(&params, config, &clip.samples, threshold, silence_threshold)
}

/// Writes events as `onset_seconds,midi_pitch,confidence` CSV.
pub fn write_events_csv(path: impl AsRef<Path>, events: &[DecodedEvent]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    writeln!(w, "onset_seconds,midi_pitch,confidence")?;
    for ev in events {
        writeln!(w, "{},{},{}", ev.onset_seconds, ev.pitch, ev.confidence)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an events CSV (the confidence column is optional and defaults
/// to 1).
pub fn read_events_csv(path: impl AsRef<Path>) -> Result<Vec<DecodedEvent>> {
    let path = path.as_ref();
    let fail = |line: usize, reason: &str| {
        Error::format(path, format!("line {line}: {reason}"))
    };
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 && trimmed.starts_with("onset_seconds") {
            continue;
        }
        let mut cols = trimmed.split(',');
        let onset: f64 = cols
            .next()
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| fail(i + 1, "bad onset value"))?;
        let pitch: u8 = cols
            .next()
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| fail(i + 1, "bad pitch value"))?;
        if !(LOWEST_MIDI..=HIGHEST_MIDI).contains(&pitch) {
            return Err(fail(i + 1, &format!("pitch {pitch} outside 21..=108")));
        }
        if !onset.is_finite() {
            return Err(fail(i + 1, "non-finite onset"));
        }
        let confidence: f64 = match cols.next() {
            Some(c) => c.trim().parse().map_err(|_| fail(i + 1, "bad confidence value"))?,
            None => 1.0,
        };
        events.push(DecodedEvent { pitch, onset_seconds: onset, confidence });
    }
    Ok(events)
}
