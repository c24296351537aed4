//! Constant-Q transform: the time-frequency representation every other
//! stage consumes.
//!
//! Bins are spaced geometrically at 12 per octave starting from G1, so each
//! bin lines up with an equal-tempered semitone. Every bin gets its own
//! analysis kernel: a Hann-windowed complex exponential whose length is
//! chosen so the kernel always spans `q_factor` cycles of its center
//! frequency. Kernels are L1-normalized and applied by direct inner product
//! against the (zero-padded) signal, which keeps the transform exactly
//! linear.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use num_complex::Complex32;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic tag of the spectrogram file format.
pub const SPECTROGRAM_MAGIC: &[u8; 4] = b"CQTS";
const SPECTROGRAM_VERSION: u32 = 1;

/// Transform parameters.
///
/// Defaults give 79 bins from G1 (≈ 49 Hz) upward at 12 bins per octave,
/// frames every 1024 samples of 44.1 kHz audio (≈ 43 frames/s), and a
/// Q-factor of 32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CqtConfig {
    /// Audio sample rate in Hz.
    pub sample_rate: f64,
    /// Samples between successive frames.
    pub hop: usize,
    /// Number of frequency bins.
    pub bins: usize,
    /// Geometric bin spacing; 12 puts one bin per semitone.
    pub bins_per_octave: usize,
    /// Ratio of center frequency to bandwidth; larger means longer kernels.
    pub q_factor: f64,
    /// Center frequency of bin 0 in Hz.
    pub min_freq: f64,
}

impl Default for CqtConfig {
    fn default() -> Self {
        CqtConfig {
            sample_rate: 44100.0,
            hop: 1024,
            bins: 79,
            bins_per_octave: 12,
            q_factor: 32.0,
            min_freq: 48.9994, // G1
        }
    }
}

impl CqtConfig {
    /// Checks the structural invariants; transform entry points call this.
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::invalid("cqt: bins must be >= 1"));
        }
        if self.hop == 0 {
            return Err(Error::invalid("cqt: hop must be >= 1"));
        }
        if self.bins_per_octave == 0 {
            return Err(Error::invalid("cqt: bins_per_octave must be >= 1"));
        }
        if !self.q_factor.is_finite() || self.q_factor <= 0.0 {
            return Err(Error::invalid("cqt: q_factor must be > 0"));
        }
        if !self.min_freq.is_finite() || self.min_freq <= 0.0 {
            return Err(Error::invalid("cqt: min_freq must be > 0"));
        }
        if !self.sample_rate.is_finite() || self.sample_rate <= 0.0 {
            return Err(Error::invalid("cqt: sample_rate must be > 0"));
        }
        let top = self.bin_frequency(self.bins - 1);
        if top >= self.sample_rate / 2.0 {
            return Err(Error::invalid(format!(
                "cqt: highest bin ({top:.1} Hz) is at or above Nyquist ({:.1} Hz)",
                self.sample_rate / 2.0
            )));
        }
        Ok(())
    }

    /// Center frequency of bin `k`: `min_freq * 2^(k / bins_per_octave)`.
    ///
    /// Panics if `k` is out of range.
    pub fn bin_frequency(&self, k: usize) -> f64 {
        assert!(k < self.bins, "bin index {k} out of range (bins = {})", self.bins);
        self.min_freq * (k as f64 / self.bins_per_octave as f64).exp2()
    }

    /// Analysis window length for bin `k` in samples:
    /// `ceil(q_factor * sample_rate / bin_frequency(k))`.
    pub fn kernel_length(&self, k: usize) -> usize {
        (self.q_factor * self.sample_rate / self.bin_frequency(k)).ceil() as usize
    }

    /// Frames per second: `sample_rate / hop`.
    pub fn frame_rate(&self) -> f64 {
        self.sample_rate / self.hop as f64
    }

    /// Number of frames produced for `samples` audio samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        samples / self.hop + 1
    }

    /// Time in seconds of (possibly fractional) frame index `frame`.
    pub fn frame_to_seconds(&self, frame: f64) -> f64 {
        frame * self.hop as f64 / self.sample_rate
    }

    /// Nearest frame index for a time in seconds.
    pub fn seconds_to_frame(&self, seconds: f64) -> i64 {
        (seconds * self.sample_rate / self.hop as f64).round() as i64
    }
}

/// Complex time-frequency matrix, frame-major.
///
/// Values are stored at 32 bits per component to match the on-disk format;
/// all arithmetic that produces them runs at 64 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub sample_rate: f64,
    pub hop: u32,
    pub data: Vec<Complex32>,
}

impl ComplexSpectrogram {
    pub fn new(
        frames: usize,
        bins: usize,
        sample_rate: f64,
        hop: u32,
        data: Vec<Complex32>,
    ) -> Result<Self> {
        if data.len() != frames * bins {
            return Err(Error::invalid(format!(
                "spectrogram: data length {} != frames {frames} x bins {bins}",
                data.len()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::invalid("spectrogram: non-finite value"));
        }
        Ok(ComplexSpectrogram { frames, bins, sample_rate, hop, data })
    }

    #[inline]
    pub fn at(&self, frame: usize, bin: usize) -> Complex32 {
        self.data[frame * self.bins + bin]
    }

    /// One frame as a contiguous slice of `bins` values.
    #[inline]
    pub fn frame(&self, t: usize) -> &[Complex32] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    /// Truncates to the first `frames` frames.
    pub fn truncate_frames(&mut self, frames: usize) {
        assert!(frames <= self.frames);
        self.frames = frames;
        self.data.truncate(frames * self.bins);
    }

    pub fn magnitudes(&self) -> MagnitudeSpectrogram {
        let data = self
            .data
            .iter()
            .map(|c| (c.re as f64).hypot(c.im as f64))
            .collect();
        MagnitudeSpectrogram {
            frames: self.frames,
            bins: self.bins,
            sample_rate: self.sample_rate,
            hop: self.hop,
            data,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, path)
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SPECTROGRAM_MAGIC)?;
        w.write_u32::<LE>(SPECTROGRAM_VERSION)?;
        w.write_u32::<LE>(self.frames as u32)?;
        w.write_u32::<LE>(self.bins as u32)?;
        w.write_f64::<LE>(self.sample_rate)?;
        w.write_u32::<LE>(self.hop)?;
        for c in &self.data {
            w.write_f32::<LE>(c.re)?;
            w.write_f32::<LE>(c.im)?;
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let fail = |reason: &str| Error::format(path, reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| fail("truncated spectrogram header"))?;
        if &magic != SPECTROGRAM_MAGIC {
            return Err(fail("bad magic (expected CQTS)"));
        }
        let version = r.read_u32::<LE>().map_err(|_| fail("truncated header"))?;
        if version != SPECTROGRAM_VERSION {
            return Err(fail(&format!("unsupported spectrogram version {version}")));
        }
        let frames = r.read_u32::<LE>().map_err(|_| fail("truncated header"))? as usize;
        let bins = r.read_u32::<LE>().map_err(|_| fail("truncated header"))? as usize;
        let sample_rate = r.read_f64::<LE>().map_err(|_| fail("truncated header"))?;
        let hop = r.read_u32::<LE>().map_err(|_| fail("truncated header"))?;
        let count = frames
            .checked_mul(bins)
            .ok_or_else(|| fail("frame/bin counts overflow"))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let re = r.read_f32::<LE>().map_err(|_| fail("truncated spectrogram data"))?;
            let im = r.read_f32::<LE>().map_err(|_| fail("truncated spectrogram data"))?;
            data.push(Complex32::new(re, im));
        }
        ComplexSpectrogram::new(frames, bins, sample_rate, hop, data)
            .map_err(|e| fail(&e.to_string()))
    }
}

/// Real magnitude matrix, frame-major; the decoder and window extraction
/// operate on this form.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram {
    pub frames: usize,
    pub bins: usize,
    pub sample_rate: f64,
    pub hop: u32,
    pub data: Vec<f64>,
}

impl MagnitudeSpectrogram {
    #[inline]
    pub fn at(&self, frame: usize, bin: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    /// Scales so the maximum value is exactly 1; returns the former maximum.
    /// A silent spectrogram is left unchanged.
    pub fn normalize_to_unit_max(&mut self) -> f64 {
        let max = self.max_value();
        if max > 0.0 {
            for v in &mut self.data {
                *v /= max;
            }
        }
        max
    }
}

struct BinKernel {
    /// Real parts of the L1-normalized windowed exponential.
    re: Vec<f64>,
    /// Imaginary parts.
    im: Vec<f64>,
    /// The kernel spans samples `t*hop - half .. t*hop - half + len` for
    /// frame `t`.
    half: isize,
}

/// Precomputed analysis kernel bank; reuse it when transforming many clips
/// under one configuration.
pub struct CqtKernels {
    config: CqtConfig,
    kernels: Vec<BinKernel>,
}

impl CqtKernels {
    pub fn new(config: &CqtConfig) -> Result<Self> {
        config.validate()?;
        let kernels = (0..config.bins)
            .map(|k| {
                let len = config.kernel_length(k);
                let freq = config.bin_frequency(k);
                let norm: f64 = (0..len).map(|j| hann(j, len)).sum();
                let center = (len / 2) as f64;
                let mut re = Vec::with_capacity(len);
                let mut im = Vec::with_capacity(len);
                for j in 0..len {
                    let w = hann(j, len) / norm;
                    let phase =
                        -2.0 * std::f64::consts::PI * freq * (j as f64 - center) / config.sample_rate;
                    let (s, c) = phase.sin_cos();
                    re.push(w * c);
                    im.push(w * s);
                }
                BinKernel { re, im, half: (len / 2) as isize }
            })
            .collect();
        Ok(CqtKernels { config: config.clone(), kernels })
    }

    pub fn config(&self) -> &CqtConfig {
        &self.config
    }

    /// Transforms `audio` (at `config.sample_rate`), producing
    /// `len/hop + 1` frames. Frame `t` is centered at sample `t*hop`; the
    /// signal is treated as zero outside its extent.
    pub fn transform(&self, audio: &[f64]) -> Result<ComplexSpectrogram> {
        if audio.is_empty() {
            return Err(Error::invalid("cqt: empty audio"));
        }
        if audio.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("cqt: non-finite audio sample"));
        }
        let cfg = &self.config;
        let frames = cfg.frame_count(audio.len());
        let bins = cfg.bins;
        let mut data = vec![Complex32::new(0.0, 0.0); frames * bins];
        // Frames write disjoint rows, so the result does not depend on the
        // number of worker threads.
        data.par_chunks_mut(bins).enumerate().for_each(|(t, row)| {
            let center = (t * cfg.hop) as isize;
            for (k, kern) in self.kernels.iter().enumerate() {
                row[k] = kern.apply(audio, center);
            }
        });
        ComplexSpectrogram::new(frames, bins, cfg.sample_rate, cfg.hop as u32, data)
    }
}

impl BinKernel {
    fn apply(&self, audio: &[f64], center: isize) -> Complex32 {
        let len = self.re.len() as isize;
        let start = center - self.half;
        let lo = start.max(0);
        let hi = (start + len).min(audio.len() as isize);
        if hi <= lo {
            return Complex32::new(0.0, 0.0);
        }
        let off = (lo - start) as usize;
        let n = (hi - lo) as usize;
        let x = &audio[lo as usize..hi as usize];
        let re = dot(&self.re[off..off + n], x);
        let im = dot(&self.im[off..off + n], x);
        Complex32::new(re as f32, im as f32)
    }
}

fn hann(j: usize, len: usize) -> f64 {
    if len < 2 {
        return 1.0;
    }
    let x = std::f64::consts::PI * j as f64 / (len - 1) as f64;
    let s = x.sin();
    s * s
}

/// Eight-lane dot product. The lane split gives the optimizer independent
/// accumulation chains while keeping a fixed summation order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

/// One-shot transform; builds the kernel bank and applies it.
pub fn cqt(config: &CqtConfig, audio: &[f64]) -> Result<ComplexSpectrogram> {
    CqtKernels::new(config)?.transform(audio)
}
