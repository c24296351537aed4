//! Procedural generation of labeled training windows.
//!
//! Each training example is an 8-frame reading window of a synthetic
//! spectrogram built by superimposing randomly placed chords, where every
//! chord is itself a superposition of per-note basis spectrograms with
//! random scale, complex phase, sub-frame jitter, and occasional forced
//! decay. Labels are ternary per pitch: an onset exactly at the window's
//! 5th frame is true, an onset one or two frames away is unknown (excluded
//! from the loss), anything else is false.
//!
//! The same windowing and label rules are reused to extract validation
//! windows from annotated real spectrograms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use num_complex::Complex64;
use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, NOTE_COUNT};
use crate::cqt::MagnitudeSpectrogram;
use crate::decoder::NoteEvent;
use crate::error::{Error, Result};

/// Frames in a reading window.
pub const WINDOW_FRAMES: usize = 8;
/// Offset of the prediction target (the 5th frame) within the window.
pub const CENTER_OFFSET: usize = 4;
/// Frequency bins the fixed network topology expects.
pub const WINDOW_BINS: usize = 79;
/// Flattened window length (frame-major).
pub const WINDOW_VALUES: usize = WINDOW_FRAMES * WINDOW_BINS;

/// Magic tag of the dataset dump format.
pub const DATASET_MAGIC: &[u8; 4] = b"ONST";
const DATASET_VERSION: u32 = 1;

/// Knobs of the generation algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    /// Earliest chord onset, in frames relative to the window center.
    pub onset_frame_min: i64,
    /// Latest chord onset (inclusive).
    pub onset_frame_max: i64,
    /// Poisson mean of the number of chords per example.
    pub chords_lambda: f64,
    /// Geometric parameter for notes per chord (support 1, 2, ...).
    pub notes_p: f64,
    pub note_scale_min: f64,
    pub note_scale_max: f64,
    pub chord_scale_min: f64,
    pub chord_scale_max: f64,
    /// Std-dev of the per-note temporal jitter; realized as round(N(0, σ)).
    pub jitter_sigma: f64,
    /// Probability that a note is given a forced exponential decay.
    pub decay_prob: f64,
    /// Per-frame factor of the forced decay (e⁻¹ by default).
    pub decay_factor_per_frame: f64,
    /// Upper bound of the uniform white noise added to magnitudes.
    pub noise_magnitude: f64,
    /// Windows whose pre-noise magnitude never exceeds this are discarded.
    pub silence_threshold: f64,
    /// Frames in a reading window; the fixed network requires 8.
    pub window_frames: usize,
    /// Index of the target frame; the fixed network requires 4.
    pub center_frame_offset: usize,
    /// Relative frames labeled unknown instead of false.
    pub unknown_halo: Vec<i64>,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            onset_frame_min: -130,
            onset_frame_max: 10,
            chords_lambda: 6.0,
            notes_p: 0.4,
            note_scale_min: 0.1,
            note_scale_max: 1.0,
            chord_scale_min: 0.1,
            chord_scale_max: 1.0,
            jitter_sigma: 0.5,
            decay_prob: 0.05,
            decay_factor_per_frame: (-1.0f64).exp(),
            noise_magnitude: 0.003,
            silence_threshold: 1e-3,
            window_frames: WINDOW_FRAMES,
            center_frame_offset: CENTER_OFFSET,
            unknown_halo: vec![-2, -1, 1, 2],
        }
    }
}

impl DatagenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_frames != WINDOW_FRAMES || self.center_frame_offset != CENTER_OFFSET {
            return Err(Error::invalid(format!(
                "datagen: the network input is fixed at {WINDOW_FRAMES} frames \
                 with target frame {CENTER_OFFSET}"
            )));
        }
        if self.onset_frame_min > self.onset_frame_max {
            return Err(Error::invalid("datagen: onset frame range is empty"));
        }
        if !self.chords_lambda.is_finite() || self.chords_lambda <= 0.0 {
            return Err(Error::invalid("datagen: chords_lambda must be > 0"));
        }
        if !(self.notes_p > 0.0 && self.notes_p <= 1.0) {
            return Err(Error::invalid("datagen: notes_p must be in (0, 1]"));
        }
        for (lo, hi, what) in [
            (self.note_scale_min, self.note_scale_max, "note_scale"),
            (self.chord_scale_min, self.chord_scale_max, "chord_scale"),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("datagen: bad {what} range")));
            }
        }
        if !(0.0..=1.0).contains(&self.decay_prob) {
            return Err(Error::invalid("datagen: decay_prob must be in [0, 1]"));
        }
        if !self.jitter_sigma.is_finite() || self.jitter_sigma < 0.0 {
            return Err(Error::invalid("datagen: jitter_sigma must be >= 0"));
        }
        if !self.noise_magnitude.is_finite() || self.noise_magnitude < 0.0 {
            return Err(Error::invalid("datagen: noise_magnitude must be >= 0"));
        }
        if !self.silence_threshold.is_finite() || self.silence_threshold <= 0.0 {
            return Err(Error::invalid("datagen: silence_threshold must be > 0"));
        }
        if self.unknown_halo.contains(&0) {
            return Err(Error::invalid("datagen: unknown_halo must not contain 0"));
        }
        Ok(())
    }
}

/// Per-pitch onset state used for labeling and for the loss mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ternary {
    False,
    Unknown,
    True,
}

impl Ternary {
    /// Numeric encoding fed to the loss: T = 1, U = ½, F = 0.
    pub fn encoded(self) -> f64 {
        match self {
            Ternary::True => 1.0,
            Ternary::Unknown => 0.5,
            Ternary::False => 0.0,
        }
    }

    /// Compact file encoding: F = 0, U = 1, T = 2.
    pub fn code(self) -> u8 {
        match self {
            Ternary::False => 0,
            Ternary::Unknown => 1,
            Ternary::True => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Ternary::False),
            1 => Some(Ternary::Unknown),
            2 => Some(Ternary::True),
            _ => None,
        }
    }
}

/// Ternary onset label for all 88 pitches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryLabel(pub [Ternary; NOTE_COUNT]);

impl TernaryLabel {
    pub fn all_false() -> Self {
        TernaryLabel([Ternary::False; NOTE_COUNT])
    }

    /// The {1, ½, 0} encoding of all 88 components.
    pub fn encoded(&self) -> [f64; NOTE_COUNT] {
        std::array::from_fn(|i| self.0[i].encoded())
    }
}

/// Builds a label from per-pitch onset frames relative to the window
/// center: exactly 0 is true, a halo frame is unknown, anything else false.
/// A true onset takes precedence over an unknown one at the same pitch.
pub fn labels_from_onsets<I>(onsets: I, halo: &[i64]) -> TernaryLabel
where
    I: IntoIterator<Item = (usize, i64)>,
{
    let mut label = TernaryLabel::all_false();
    for (pitch, frame) in onsets {
        let slot = &mut label.0[pitch];
        if frame == 0 {
            *slot = Ternary::True;
        } else if halo.contains(&frame) && *slot != Ternary::True {
            *slot = Ternary::Unknown;
        }
    }
    label
}

/// One normalized reading window with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// 8×79 magnitudes, frame-major, maximum value exactly 1.
    pub window: Vec<f64>,
    pub labels: TernaryLabel,
}

impl TrainingExample {
    #[inline]
    pub fn window_at(&self, frame: usize, bin: usize) -> f64 {
        self.window[frame * WINDOW_BINS + bin]
    }
}

/// A single note inside a chord plan.
#[derive(Debug, Clone, PartialEq)]
pub struct NotePlan {
    /// Note index 0..88 (0 = A0).
    pub pitch: usize,
    /// Amplitude factor.
    pub scale: f64,
    /// Unit-modulus complex phase multiplier.
    pub phase: Complex64,
    /// Temporal shift in frames.
    pub jitter: i64,
    /// If set, frames at and after this window-relative frame decay.
    pub decay_start: Option<i64>,
}

/// A chord: an onset frame (relative to the window center) plus notes.
#[derive(Debug, Clone, PartialEq)]
pub struct ChordPlan {
    pub onset_frame: i64,
    pub scale: f64,
    pub notes: Vec<NotePlan>,
}

/// Everything needed to render one training window deterministically.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub basis_index: usize,
    pub chords: Vec<ChordPlan>,
}

impl WindowPlan {
    /// Draws a plan from the configured distributions.
    pub fn sample(rng: &mut impl Rng, basis_count: usize, cfg: &DatagenConfig) -> Self {
        assert!(basis_count > 0, "datagen: empty basis set");
        let basis_index = rng.random_range(0..basis_count);
        let poisson = Poisson::new(cfg.chords_lambda).expect("validated lambda");
        let geometric = Geometric::new(cfg.notes_p).expect("validated p");
        let jitter_dist = Normal::new(0.0, cfg.jitter_sigma).expect("validated sigma");

        let chord_count = poisson.sample(rng) as usize;
        let mut chords = Vec::with_capacity(chord_count);
        for _ in 0..chord_count {
            let onset_frame = rng.random_range(cfg.onset_frame_min..=cfg.onset_frame_max);
            // geometric with support {0, 1, ...}; a chord has at least one note
            let note_count = (geometric.sample(rng) as usize + 1).min(NOTE_COUNT);
            let pitches = index_sample(rng, NOTE_COUNT, note_count);
            let mut notes = Vec::with_capacity(note_count);
            for pitch in pitches {
                let scale = rng.random_range(cfg.note_scale_min..=cfg.note_scale_max);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let phase = Complex64::from_polar(1.0, theta);
                let jitter = if cfg.jitter_sigma > 0.0 {
                    jitter_dist.sample(rng).round() as i64
                } else {
                    0
                };
                let decay_start = if cfg.decay_prob > 0.0 && rng.random_bool(cfg.decay_prob) {
                    let lo = -(cfg.center_frame_offset as i64);
                    let hi = (cfg.window_frames - cfg.center_frame_offset) as i64 - 1;
                    Some(rng.random_range(lo..=hi))
                } else {
                    None
                };
                notes.push(NotePlan { pitch, scale, phase, jitter, decay_start });
            }
            let scale = rng.random_range(cfg.chord_scale_min..=cfg.chord_scale_max);
            chords.push(ChordPlan { onset_frame, scale, notes });
        }
        WindowPlan { basis_index, chords }
    }

    /// Post-jitter onset frames of every rendered note, relative to the
    /// window center. Labels follow these.
    pub fn onsets(&self) -> impl Iterator<Item = (usize, i64)> + '_ {
        self.chords.iter().flat_map(|chord| {
            chord
                .notes
                .iter()
                .map(move |note| (note.pitch, chord.onset_frame + note.jitter))
        })
    }

    pub fn labels(&self, cfg: &DatagenConfig) -> TernaryLabel {
        labels_from_onsets(self.onsets(), &cfg.unknown_halo)
    }
}

/// Superimposes the plan's notes over the reading window and returns the
/// 8×79 magnitudes (no silence test, noise, or normalization applied).
pub fn render_plan(set: &BasisSet, plan: &WindowPlan, cfg: &DatagenConfig) -> Vec<f64> {
    let basis = set.get(plan.basis_index);
    assert_eq!(
        basis.config().bins,
        WINDOW_BINS,
        "datagen: basis must have {WINDOW_BINS} bins to feed the fixed network"
    );
    let frames = basis.frames() as i64;
    let onset_frame = basis.onset_frame() as i64;
    let mut acc = vec![Complex64::new(0.0, 0.0); WINDOW_VALUES];
    for chord in &plan.chords {
        for note in &chord.notes {
            let spec = basis.note(note.pitch);
            let note_onset = chord.onset_frame + note.jitter;
            for w in 0..WINDOW_FRAMES {
                let rel = w as i64 - CENTER_OFFSET as i64;
                // basis frame that lands on window frame `rel`; frames
                // outside the basis extent contribute nothing
                let src = rel - note_onset + onset_frame;
                if src < 0 || src >= frames {
                    continue;
                }
                let mut factor = note.phase * (chord.scale * note.scale);
                if let Some(d0) = note.decay_start {
                    if rel >= d0 {
                        factor *= cfg.decay_factor_per_frame.powi((rel - d0) as i32);
                    }
                }
                let row = spec.frame(src as usize);
                let out = &mut acc[w * WINDOW_BINS..(w + 1) * WINDOW_BINS];
                for (o, c) in out.iter_mut().zip(row) {
                    *o += factor * Complex64::new(c.re as f64, c.im as f64);
                }
            }
        }
    }
    acc.into_iter().map(|c| c.norm()).collect()
}

/// Aggregate counters over generation attempts, including discarded ones.
#[derive(Debug, Clone, Default)]
pub struct GenStats {
    pub attempts: u64,
    pub discards: u64,
    /// attempts hist\[k\] drew k chords.
    pub chord_count_hist: Vec<u64>,
    /// chords hist\[k\] drew k notes.
    pub chord_size_hist: Vec<u64>,
}

impl GenStats {
    fn record(&mut self, plan: &WindowPlan) {
        self.attempts += 1;
        bump(&mut self.chord_count_hist, plan.chords.len());
        for chord in &plan.chords {
            bump(&mut self.chord_size_hist, chord.notes.len());
        }
    }

    pub fn mean_chords(&self) -> f64 {
        mean_of_hist(&self.chord_count_hist)
    }

    pub fn mean_chord_size(&self) -> f64 {
        mean_of_hist(&self.chord_size_hist)
    }
}

fn bump(hist: &mut Vec<u64>, index: usize) {
    if hist.len() <= index {
        hist.resize(index + 1, 0);
    }
    hist[index] += 1;
}

fn mean_of_hist(hist: &[u64]) -> f64 {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let weighted: f64 = hist.iter().enumerate().map(|(k, &n)| k as f64 * n as f64).sum();
    weighted / total as f64
}

/// A generated example together with the plan that produced it.
#[derive(Debug, Clone)]
pub struct TracedExample {
    pub example: TrainingExample,
    pub plan: WindowPlan,
    /// Attempts discarded as silent before this example was produced.
    pub restarts: u64,
}

fn generate_inner(
    rng: &mut impl Rng,
    set: &BasisSet,
    cfg: &DatagenConfig,
    mut stats: Option<&mut GenStats>,
) -> TracedExample {
    let mut restarts = 0u64;
    loop {
        let plan = WindowPlan::sample(rng, set.len(), cfg);
        if let Some(stats) = stats.as_deref_mut() {
            stats.record(&plan);
        }
        let mut window = render_plan(set, &plan, cfg);
        let pre_noise_max = window.iter().cloned().fold(0.0, f64::max);
        if pre_noise_max <= cfg.silence_threshold {
            restarts += 1;
            if let Some(stats) = stats.as_deref_mut() {
                stats.discards += 1;
            }
            assert!(
                restarts < 100_000_000,
                "datagen stalled: {restarts} consecutive silent windows; \
                 check the basis and configuration"
            );
            continue;
        }
        if cfg.noise_magnitude > 0.0 {
            for v in &mut window {
                *v += rng.random_range(0.0..cfg.noise_magnitude);
            }
        }
        let max = window.iter().cloned().fold(0.0, f64::max);
        for v in &mut window {
            *v /= max;
        }
        let labels = plan.labels(cfg);
        return TracedExample { example: TrainingExample { window, labels }, plan, restarts };
    }
}

/// Generates one training example, restarting internally on silent windows.
pub fn generate_example(
    rng: &mut impl Rng,
    set: &BasisSet,
    cfg: &DatagenConfig,
) -> TrainingExample {
    generate_inner(rng, set, cfg, None).example
}

/// Like [`generate_example`] but also returns the generating plan and the
/// number of discarded attempts, for diagnostics and label auditing.
pub fn generate_example_traced(
    rng: &mut impl Rng,
    set: &BasisSet,
    cfg: &DatagenConfig,
) -> TracedExample {
    generate_inner(rng, set, cfg, None)
}

/// `n` sequential examples from one RNG stream. Callers that parallelize
/// must give each worker its own stream; outputs are deterministic per
/// (seed, stream) pair.
pub fn generate_batch(
    rng: &mut impl Rng,
    set: &BasisSet,
    cfg: &DatagenConfig,
    n: usize,
) -> Vec<TrainingExample> {
    (0..n).map(|_| generate_example(rng, set, cfg)).collect()
}

/// Batch generation that also accumulates attempt statistics.
pub fn generate_batch_with_stats(
    rng: &mut impl Rng,
    set: &BasisSet,
    cfg: &DatagenConfig,
    n: usize,
    stats: &mut GenStats,
) -> Vec<TrainingExample> {
    (0..n)
        .map(|_| generate_inner(rng, set, cfg, Some(stats)).example)
        .collect()
}

/// Slices the 8-frame window centered at `center` out of a full-piece
/// magnitude spectrogram (already normalized to a global maximum of 1),
/// renormalizes it, and labels it from the onset annotations. Returns
/// `None` when the window is silent and must be discarded.
pub fn extract_window(
    mag: &MagnitudeSpectrogram,
    annotations: &[NoteEvent],
    center: usize,
    cfg: &DatagenConfig,
) -> Result<Option<TrainingExample>> {
    if mag.bins != WINDOW_BINS {
        return Err(Error::invalid(format!(
            "extract_window: spectrogram has {} bins, the network needs {WINDOW_BINS}",
            mag.bins
        )));
    }
    if mag.frames < WINDOW_FRAMES {
        return Err(Error::invalid(format!(
            "extract_window: spectrogram has {} frames, need at least {WINDOW_FRAMES}",
            mag.frames
        )));
    }
    if center < CENTER_OFFSET || center > mag.frames - (WINDOW_FRAMES - CENTER_OFFSET) {
        return Err(Error::invalid(format!(
            "extract_window: center {center} out of range {}..={}",
            CENTER_OFFSET,
            mag.frames - (WINDOW_FRAMES - CENTER_OFFSET)
        )));
    }
    let start = center - CENTER_OFFSET;
    let mut window = Vec::with_capacity(WINDOW_VALUES);
    for t in start..start + WINDOW_FRAMES {
        window.extend_from_slice(mag.frame(t));
    }
    let max = window.iter().cloned().fold(0.0, f64::max);
    if max <= cfg.silence_threshold {
        return Ok(None);
    }
    for v in &mut window {
        *v /= max;
    }
    let rate = mag.sample_rate;
    let hop = mag.hop as f64;
    let labels = labels_from_onsets(
        annotations.iter().filter_map(|ev| {
            let idx = crate::basis::midi_to_index(ev.pitch)?;
            let frame = (ev.onset * rate / hop).round() as i64;
            Some((idx, frame - center as i64))
        }),
        &cfg.unknown_halo,
    );
    Ok(Some(TrainingExample { window, labels }))
}

/// Writes examples as a flat binary dataset (632 f32 window values and 88
/// label codes per example).
pub fn save_dataset(examples: &[TrainingExample], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LE>(DATASET_VERSION)?;
    w.write_u32::<LE>(examples.len() as u32)?;
    for ex in examples {
        debug_assert_eq!(ex.window.len(), WINDOW_VALUES);
        for &v in &ex.window {
            w.write_f32::<LE>(v as f32)?;
        }
        for t in &ex.labels.0 {
            w.write_u8(t.code())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingExample>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let fail = |reason: &str| Error::format(path, reason);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| fail("truncated dataset header"))?;
    if &magic != DATASET_MAGIC {
        return Err(fail("bad magic (expected ONST)"));
    }
    let version = r.read_u32::<LE>().map_err(|_| fail("truncated header"))?;
    if version != DATASET_VERSION {
        return Err(fail(&format!("unsupported dataset version {version}")));
    }
    let count = r.read_u32::<LE>().map_err(|_| fail("truncated header"))? as usize;
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut window = Vec::with_capacity(WINDOW_VALUES);
        for _ in 0..WINDOW_VALUES {
            let v = r.read_f32::<LE>().map_err(|_| fail("truncated example data"))? as f64;
            if !v.is_finite() {
                return Err(fail("non-finite window value"));
            }
            window.push(v);
        }
        let mut labels = TernaryLabel::all_false();
        for slot in labels.0.iter_mut() {
            let code = r.read_u8().map_err(|_| fail("truncated example data"))?;
            *slot = Ternary::from_code(code)
                .ok_or_else(|| fail(&format!("invalid label code {code}")))?;
        }
        examples.push(TrainingExample { window, labels });
    }
    Ok(examples)
}
