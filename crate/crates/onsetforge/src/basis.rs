//! Spectral bases: 88 per-note complex spectrograms (one per piano key)
//! plus the onset frame shared by all of them. Generation superimposes
//! scaled, shifted copies of these spectrograms, so a basis is the only
//! acoustic knowledge the system ever sees.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioClip;
use crate::cqt::{ComplexSpectrogram, CqtConfig, CqtKernels};
use crate::error::{Error, Result};

/// Keys on a piano; every basis carries one spectrogram per key.
pub const NOTE_COUNT: usize = 88;
/// MIDI pitch of the lowest key (A0).
pub const LOWEST_MIDI: u8 = 21;
/// MIDI pitch of the highest key (C8).
pub const HIGHEST_MIDI: u8 = 108;

/// Magic tag of the basis file format.
pub const BASIS_MAGIC: &[u8; 4] = b"SBAS";
const BASIS_VERSION: u32 = 1;

/// Equal-tempered frequency of a MIDI pitch (A4 = 69 = 440 Hz).
pub fn midi_frequency(midi: u8) -> f64 {
    440.0 * ((midi as f64 - 69.0) / 12.0).exp2()
}

/// Index of a MIDI pitch within an 88-entry note array.
pub fn midi_to_index(midi: u8) -> Option<usize> {
    (LOWEST_MIDI..=HIGHEST_MIDI)
        .contains(&midi)
        .then(|| (midi - LOWEST_MIDI) as usize)
}

/// The 88 labeled note spectrograms for one (instrument, velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    config: CqtConfig,
    instrument: String,
    velocity: u8,
    onset_frame: usize,
    notes: Vec<ComplexSpectrogram>,
}

impl SpectralBasis {
    /// Assembles a basis from already-transformed notes, enforcing the
    /// structural invariants: exactly 88 notes, uniform shape, onset inside
    /// every note, and no note silent from the onset onward.
    pub fn from_parts(
        config: CqtConfig,
        instrument: String,
        velocity: u8,
        onset_frame: usize,
        notes: Vec<ComplexSpectrogram>,
    ) -> Result<Self> {
        config.validate()?;
        if !(1..=127).contains(&velocity) {
            return Err(Error::invalid(format!("basis: velocity {velocity} outside 1..=127")));
        }
        if notes.len() != NOTE_COUNT {
            return Err(Error::invalid(format!(
                "basis: expected {NOTE_COUNT} note spectrograms, got {}",
                notes.len()
            )));
        }
        let frames = notes[0].frames;
        for (i, note) in notes.iter().enumerate() {
            if note.bins != config.bins {
                return Err(Error::invalid(format!(
                    "basis: note {} has {} bins, config says {}",
                    LOWEST_MIDI as usize + i,
                    note.bins,
                    config.bins
                )));
            }
            if note.frames != frames {
                return Err(Error::invalid(format!(
                    "basis: note {} has {} frames, expected {frames}",
                    LOWEST_MIDI as usize + i,
                    note.frames
                )));
            }
        }
        if onset_frame >= frames {
            return Err(Error::invalid(format!(
                "basis: onset frame {onset_frame} outside {frames}-frame spectrograms"
            )));
        }
        for (i, note) in notes.iter().enumerate() {
            let live = (onset_frame..frames)
                .any(|t| note.frame(t).iter().any(|c| c.re != 0.0 || c.im != 0.0));
            if !live {
                return Err(Error::invalid(format!(
                    "basis: note {} (MIDI pitch {}) is silent after the onset frame",
                    i,
                    LOWEST_MIDI as usize + i
                )));
            }
        }
        Ok(SpectralBasis { config, instrument, velocity, onset_frame, notes })
    }

    pub fn config(&self) -> &CqtConfig {
        &self.config
    }

    pub fn instrument(&self) -> &str {
        &self.instrument
    }

    pub fn velocity(&self) -> u8 {
        self.velocity
    }

    /// Frame index of the note onset within every note spectrogram.
    pub fn onset_frame(&self) -> usize {
        self.onset_frame
    }

    /// Frame count shared by all note spectrograms.
    pub fn frames(&self) -> usize {
        self.notes[0].frames
    }

    /// Spectrogram of note `index` (0 = A0 = MIDI 21).
    pub fn note(&self, index: usize) -> &ComplexSpectrogram {
        &self.notes[index]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(BASIS_MAGIC)?;
        w.write_u32::<LE>(BASIS_VERSION)?;
        w.write_f64::<LE>(self.config.sample_rate)?;
        w.write_u32::<LE>(self.config.hop as u32)?;
        w.write_u32::<LE>(self.config.bins as u32)?;
        w.write_u32::<LE>(self.config.bins_per_octave as u32)?;
        w.write_f64::<LE>(self.config.q_factor)?;
        w.write_f64::<LE>(self.config.min_freq)?;
        let tag = self.instrument.as_bytes();
        if tag.len() > u16::MAX as usize {
            return Err(Error::invalid("basis: instrument tag too long"));
        }
        w.write_u16::<LE>(tag.len() as u16)?;
        w.write_all(tag)?;
        w.write_u8(self.velocity)?;
        w.write_u32::<LE>(self.onset_frame as u32)?;
        w.write_u32::<LE>(self.frames() as u32)?;
        for note in &self.notes {
            note.write_to(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let fail = |reason: &str| Error::format(path, reason);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fail("truncated basis header"))?;
        if &magic != BASIS_MAGIC {
            return Err(fail("bad magic (expected SBAS)"));
        }
        let version = r.read_u32::<LE>().map_err(|_| fail("truncated header"))?;
        if version != BASIS_VERSION {
            return Err(fail(&format!("unsupported basis version {version}")));
        }
        let config = CqtConfig {
            sample_rate: r.read_f64::<LE>().map_err(|_| fail("truncated header"))?,
            hop: r.read_u32::<LE>().map_err(|_| fail("truncated header"))? as usize,
            bins: r.read_u32::<LE>().map_err(|_| fail("truncated header"))? as usize,
            bins_per_octave: r.read_u32::<LE>().map_err(|_| fail("truncated header"))? as usize,
            q_factor: r.read_f64::<LE>().map_err(|_| fail("truncated header"))?,
            min_freq: r.read_f64::<LE>().map_err(|_| fail("truncated header"))?,
        };
        let tag_len = r.read_u16::<LE>().map_err(|_| fail("truncated header"))? as usize;
        let mut tag = vec![0u8; tag_len];
        r.read_exact(&mut tag).map_err(|_| fail("truncated instrument tag"))?;
        let instrument =
            String::from_utf8(tag).map_err(|_| fail("instrument tag is not UTF-8"))?;
        let velocity = r.read_u8().map_err(|_| fail("truncated header"))?;
        let onset_frame = r.read_u32::<LE>().map_err(|_| fail("truncated header"))? as usize;
        let frames = r.read_u32::<LE>().map_err(|_| fail("truncated header"))? as usize;

        let mut notes = Vec::with_capacity(NOTE_COUNT);
        for i in 0..NOTE_COUNT {
            let note = ComplexSpectrogram::read_from(&mut r, path)
                .map_err(|e| fail(&format!("note {i}: {e}")))?;
            if note.frames != frames {
                return Err(fail(&format!(
                    "note {i} has {} frames, header says {frames}",
                    note.frames
                )));
            }
            notes.push(note);
        }
        SpectralBasis::from_parts(config, instrument, velocity, onset_frame, notes)
            .map_err(|e| fail(&e.to_string()))
    }
}

/// A non-empty collection of bases sharing one transform configuration.
#[derive(Debug, Clone)]
pub struct BasisSet {
    bases: Vec<SpectralBasis>,
}

impl BasisSet {
    pub fn new(bases: Vec<SpectralBasis>) -> Result<Self> {
        let first = bases
            .first()
            .ok_or_else(|| Error::invalid("basis set: need at least one basis"))?;
        let config = first.config.clone();
        for b in &bases {
            if b.config != config {
                return Err(Error::invalid(format!(
                    "basis set: basis '{}' v{} uses a different transform configuration",
                    b.instrument, b.velocity
                )));
            }
        }
        Ok(BasisSet { bases })
    }

    pub fn config(&self) -> &CqtConfig {
        &self.bases[0].config
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, index: usize) -> &SpectralBasis {
        &self.bases[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &SpectralBasis> {
        self.bases.iter()
    }

    /// Loads several basis files into one set.
    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        let bases = paths
            .iter()
            .map(SpectralBasis::load)
            .collect::<Result<Vec<_>>>()?;
        BasisSet::new(bases)
    }
}

/// Builds a basis from 88 recordings (A0 to C8 in pitch order) that all
/// start their note at `onset_time` seconds. Spectrograms are truncated to
/// the shortest clip's frame count so the set has a uniform shape.
pub fn build_basis(
    config: &CqtConfig,
    clips: &[AudioClip],
    onset_time: f64,
    instrument: &str,
    velocity: u8,
) -> Result<SpectralBasis> {
    if clips.len() != NOTE_COUNT {
        return Err(Error::invalid(format!(
            "basis: expected {NOTE_COUNT} clips, got {}",
            clips.len()
        )));
    }
    if !onset_time.is_finite() || onset_time < 0.0 {
        return Err(Error::invalid("basis: onset time must be >= 0"));
    }
    for (i, clip) in clips.iter().enumerate() {
        clip.expect_rate(config.sample_rate)?;
        if onset_time >= clip.duration_seconds() {
            return Err(Error::invalid(format!(
                "basis: onset time {onset_time} s outside clip for MIDI pitch {}",
                LOWEST_MIDI as usize + i
            )));
        }
    }
    let kernels = CqtKernels::new(config)?;
    let mut notes = clips
        .iter()
        .map(|clip| kernels.transform(&clip.samples))
        .collect::<Result<Vec<_>>>()?;
    let min_frames = notes.iter().map(|n| n.frames).min().unwrap();
    for note in &mut notes {
        note.truncate_frames(min_frames);
    }
    let onset_frame = (onset_time * config.sample_rate / config.hop as f64).round() as usize;
    SpectralBasis::from_parts(config.clone(), instrument.to_string(), velocity, onset_frame, notes)
}

/// Parameters of the built-in harmonic toy instrument. It stands in for
/// externally rendered piano samples so the whole pipeline can run
/// self-contained.
#[derive(Debug, Clone)]
pub struct ToyInstrument {
    /// Number of harmonic partials per note.
    pub partials: usize,
    /// Amplitude of partial p falls off as p^-rolloff.
    pub partial_rolloff: f64,
    /// Base exponential amplitude decay in 1/s.
    pub decay_rate: f64,
    /// Extra decay per partial index (higher partials die faster).
    pub decay_spread: f64,
    /// How strongly MIDI velocity tilts the partial spectrum; louder notes
    /// get relatively stronger high partials.
    pub velocity_scaling: f64,
    /// Random per-partial detuning range in cents.
    pub detune_cents: f64,
}

impl Default for ToyInstrument {
    fn default() -> Self {
        ToyInstrument {
            partials: 8,
            partial_rolloff: 1.0,
            decay_rate: 1.1,
            decay_spread: 0.4,
            velocity_scaling: 0.6,
            detune_cents: 2.0,
        }
    }
}

/// Leading silence in toy renders, seconds.
pub const TOY_SILENCE_SECONDS: f64 = 0.5;
/// Sustained-tone length in toy renders, seconds.
pub const TOY_TONE_SECONDS: f64 = 3.0;

/// Renders one toy note: 0.5 s of silence followed by a 3 s sum of
/// exponentially decaying harmonic partials.
pub fn synth_note_audio(
    sample_rate: f64,
    inst: &ToyInstrument,
    midi: u8,
    velocity: u8,
    rng: &mut impl Rng,
) -> Vec<f64> {
    assert!(inst.partials >= 1, "toy instrument needs at least one partial");
    let f0 = midi_frequency(midi);
    let brightness = (velocity as f64 / 127.0).powf(inst.velocity_scaling);
    let loudness = velocity as f64 / 127.0;

    struct Partial {
        freq: f64,
        amp: f64,
        phase: f64,
        decay: f64,
    }
    let mut parts = Vec::with_capacity(inst.partials);
    for p in 1..=inst.partials {
        let detune_cents = rng.random_range(-inst.detune_cents..=inst.detune_cents);
        let freq = f0 * p as f64 * (detune_cents / 1200.0).exp2();
        let amp = (p as f64).powf(-inst.partial_rolloff) * brightness.powi(p as i32 - 1);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let decay = inst.decay_rate * (1.0 + inst.decay_spread * (p as f64 - 1.0));
        if freq < sample_rate / 2.0 {
            parts.push(Partial { freq, amp, phase, decay });
        }
    }
    let norm: f64 = parts.iter().map(|p| p.amp).sum();

    let silence = (TOY_SILENCE_SECONDS * sample_rate).round() as usize;
    let tone = (TOY_TONE_SECONDS * sample_rate).round() as usize;
    let mut out = vec![0.0; silence + tone];
    for (i, sample) in out[silence..].iter_mut().enumerate() {
        let t = i as f64 / sample_rate;
        let mut acc = 0.0;
        for p in &parts {
            acc += p.amp * (std::f64::consts::TAU * p.freq * t + p.phase).sin() * (-p.decay * t).exp();
        }
        *sample = loudness * acc / norm;
    }
    out
}

/// Builds a full 88-note toy basis for one velocity. Deterministic for a
/// given (seed, velocity) pair.
pub fn synth_toy_basis(
    config: &CqtConfig,
    seed: u64,
    inst: &ToyInstrument,
    velocity: u8,
) -> Result<SpectralBasis> {
    let kernels = CqtKernels::new(config)?;
    synth_toy_basis_with(config, &kernels, seed, inst, velocity)
}

fn synth_toy_basis_with(
    config: &CqtConfig,
    kernels: &CqtKernels,
    seed: u64,
    inst: &ToyInstrument,
    velocity: u8,
) -> Result<SpectralBasis> {
    if inst.partials == 0 {
        return Err(Error::invalid("toy basis: partials must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(velocity as u64);
    let mut notes = Vec::with_capacity(NOTE_COUNT);
    for i in 0..NOTE_COUNT {
        let midi = LOWEST_MIDI + i as u8;
        let audio = synth_note_audio(config.sample_rate, inst, midi, velocity, &mut rng);
        notes.push(kernels.transform(&audio)?);
    }
    let onset_frame =
        (TOY_SILENCE_SECONDS * config.sample_rate / config.hop as f64).round() as usize;
    SpectralBasis::from_parts(
        config.clone(),
        format!("toy-{seed}"),
        velocity,
        onset_frame,
        notes,
    )
}

/// One toy basis per velocity, sharing a kernel bank across the renders.
pub fn synth_toy_basis_set(
    config: &CqtConfig,
    seed: u64,
    inst: &ToyInstrument,
    velocities: &[u8],
) -> Result<BasisSet> {
    let kernels = CqtKernels::new(config)?;
    let bases = velocities
        .iter()
        .map(|&v| synth_toy_basis_with(config, &kernels, seed, inst, v))
        .collect::<Result<Vec<_>>>()?;
    BasisSet::new(bases)
}
