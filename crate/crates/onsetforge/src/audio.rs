//! WAV ingestion. Supports RIFF/WAVE with 16-bit PCM or 32-bit IEEE-float
//! samples, mono or stereo; stereo is downmixed by averaging. No resampling
//! is performed anywhere in the toolkit; callers check the rate explicitly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};

use crate::error::{Error, Result};

/// Decoded mono audio.
#[derive(Debug, Clone)]
pub struct AudioClip {
    /// Samples in [-1, 1].
    pub samples: Vec<f64>,
    /// Sample rate in Hz.
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Errors unless the clip was recorded at `rate` Hz. The toolkit never
    /// resamples; files at other rates are refused here.
    pub fn expect_rate(&self, rate: f64) -> Result<()> {
        if (self.sample_rate as f64 - rate).abs() > 1e-9 {
            return Err(Error::UnsupportedRate { got: self.sample_rate, want: rate });
        }
        Ok(())
    }
}

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

/// Reads a WAV file into a mono clip.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let fail = |reason: String| Error::format(path, reason);

    let mut riff = [0u8; 4];
    r.read_exact(&mut riff).map_err(|_| fail("truncated RIFF header".into()))?;
    if &riff != b"RIFF" {
        return Err(fail("not a RIFF file".into()));
    }
    let _riff_size = r.read_u32::<LE>().map_err(|_| fail("truncated RIFF header".into()))?;
    let mut wave = [0u8; 4];
    r.read_exact(&mut wave).map_err(|_| fail("truncated RIFF header".into()))?;
    if &wave != b"WAVE" {
        return Err(fail("not a WAVE file".into()));
    }

    let mut format: Option<(u16, u16, u32, u16)> = None; // (codec, channels, rate, bits)
    loop {
        let mut id = [0u8; 4];
        if r.read_exact(&mut id).is_err() {
            return Err(fail("no data chunk found".into()));
        }
        let size = r.read_u32::<LE>().map_err(|_| fail("truncated chunk header".into()))? as usize;
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too short".into()));
                }
                let codec = r.read_u16::<LE>().map_err(|_| fail("truncated fmt chunk".into()))?;
                let channels = r.read_u16::<LE>().map_err(|_| fail("truncated fmt chunk".into()))?;
                let rate = r.read_u32::<LE>().map_err(|_| fail("truncated fmt chunk".into()))?;
                let _byte_rate = r.read_u32::<LE>().map_err(|_| fail("truncated fmt chunk".into()))?;
                let _block_align = r.read_u16::<LE>().map_err(|_| fail("truncated fmt chunk".into()))?;
                let bits = r.read_u16::<LE>().map_err(|_| fail("truncated fmt chunk".into()))?;
                skip(&mut r, size - 16).map_err(|_| fail("truncated fmt chunk".into()))?;
                format = Some((codec, channels, rate, bits));
            }
            b"data" => {
                let (codec, channels, rate, bits) =
                    format.ok_or_else(|| fail("data chunk before fmt chunk".into()))?;
                if channels == 0 || channels > 2 {
                    return Err(fail(format!("unsupported channel count {channels}")));
                }
                let samples = match (codec, bits) {
                    (FORMAT_PCM, 16) => read_pcm16(&mut r, size, channels)
                        .map_err(|_| fail("truncated sample data".into()))?,
                    (FORMAT_IEEE_FLOAT, 32) => read_float32(&mut r, size, channels)
                        .map_err(|_| fail("truncated sample data".into()))?,
                    _ => {
                        return Err(fail(format!(
                            "unsupported codec (format tag {codec}, {bits}-bit); \
                             need 16-bit PCM or 32-bit float"
                        )))
                    }
                };
                return Ok(AudioClip { samples, sample_rate: rate });
            }
            _ => {
                // chunks are word-aligned
                skip(&mut r, size + (size & 1)).map_err(|_| fail("truncated chunk".into()))?;
            }
        }
    }
}

fn skip<R: Read>(r: &mut R, n: usize) -> std::io::Result<()> {
    std::io::copy(&mut r.take(n as u64), &mut std::io::sink()).map(|_| ())
}

fn read_pcm16<R: Read>(r: &mut R, size: usize, channels: u16) -> std::io::Result<Vec<f64>> {
    let frames = size / (2 * channels as usize);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut acc = 0.0f64;
        for _ in 0..channels {
            acc += r.read_i16::<LE>()? as f64 / 32768.0;
        }
        out.push(acc / channels as f64);
    }
    Ok(out)
}

fn read_float32<R: Read>(r: &mut R, size: usize, channels: u16) -> std::io::Result<Vec<f64>> {
    let frames = size / (4 * channels as usize);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let mut acc = 0.0f64;
        for _ in 0..channels {
            acc += r.read_f32::<LE>()? as f64;
        }
        out.push(acc / channels as f64);
    }
    Ok(out)
}

/// Writes mono 16-bit PCM; values are clamped to [-1, 1].
pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[f64], sample_rate: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    let data_len = (samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_u32::<LE>(36 + data_len)?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_u32::<LE>(16)?;
    w.write_u16::<LE>(FORMAT_PCM)?;
    w.write_u16::<LE>(1)?;
    w.write_u32::<LE>(sample_rate)?;
    w.write_u32::<LE>(sample_rate * 2)?;
    w.write_u16::<LE>(2)?;
    w.write_u16::<LE>(16)?;
    w.write_all(b"data")?;
    w.write_u32::<LE>(data_len)?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_i16::<LE>(v)?;
    }
    w.flush()?;
    Ok(())
}
