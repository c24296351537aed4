//! Grayscale PGM dumps of spectrograms, reading windows, and piano rolls
//! for visual inspection.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::cqt::MagnitudeSpectrogram;
use crate::datagen::{TrainingExample, WINDOW_BINS, WINDOW_FRAMES};
use crate::decoder::PianoRoll;
use crate::error::Result;

/// Writes a binary (P5) PGM. `pixels` is row-major, top row first.
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), width * height);
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()?;
    Ok(())
}

fn level(v: f64, max: f64) -> u8 {
    if max <= 0.0 {
        return 0;
    }
    ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders a magnitude spectrogram with time on the x axis and low
/// frequencies at the bottom.
pub fn spectrogram_pgm(mag: &MagnitudeSpectrogram, path: impl AsRef<Path>) -> Result<()> {
    let max = mag.max_value();
    let mut pixels = Vec::with_capacity(mag.frames * mag.bins);
    for row in 0..mag.bins {
        let bin = mag.bins - 1 - row;
        for t in 0..mag.frames {
            pixels.push(level(mag.at(t, bin), max));
        }
    }
    write_pgm(path, mag.frames, mag.bins, &pixels)
}

/// Renders one training window (8 frames × 79 bins).
pub fn window_pgm(example: &TrainingExample, path: impl AsRef<Path>) -> Result<()> {
    let mut pixels = Vec::with_capacity(WINDOW_FRAMES * WINDOW_BINS);
    for row in 0..WINDOW_BINS {
        let bin = WINDOW_BINS - 1 - row;
        for t in 0..WINDOW_FRAMES {
            pixels.push(level(example.window_at(t, bin), 1.0));
        }
    }
    write_pgm(path, WINDOW_FRAMES, WINDOW_BINS, &pixels)
}

/// Renders a raw piano roll with time on the x axis and low pitches at the
/// bottom; gray level is the network activation.
pub fn roll_pgm(roll: &PianoRoll, path: impl AsRef<Path>) -> Result<()> {
    let pitches = roll.data.ncols();
    let mut pixels = Vec::with_capacity(roll.frames * pitches);
    for row in 0..pitches {
        let pitch_index = pitches - 1 - row;
        for t in 0..roll.frames {
            pixels.push(level(roll.at(t, pitch_index), 1.0));
        }
    }
    write_pgm(path, roll.frames, pitches, &pixels)
}
