//! Hand-crafted fixtures shared by the unit tests. The fake basis gives
//! every note a single known bin so superposition and label checks have
//! exact expectations without running the transform.

use num_complex::{Complex32, Complex64};

use crate::basis::{BasisSet, SpectralBasis, NOTE_COUNT};
use crate::cqt::{ComplexSpectrogram, CqtConfig};
use crate::datagen::{ChordPlan, NotePlan, WindowPlan, WINDOW_BINS};

/// A basis whose note `i` occupies bin `i % 79` with magnitude 1.0 at the
/// onset frame, decaying by 0.85 per frame afterwards.
pub(crate) fn fake_basis(frames: usize, onset: usize) -> SpectralBasis {
    let cfg = CqtConfig::default();
    let notes = (0..NOTE_COUNT)
        .map(|i| {
            let mut data = vec![Complex32::new(0.0, 0.0); frames * WINDOW_BINS];
            let bin = i % WINDOW_BINS;
            for t in onset..frames {
                let mag = 0.85f32.powi((t - onset) as i32);
                data[t * WINDOW_BINS + bin] = Complex32::new(mag, 0.0);
            }
            ComplexSpectrogram::new(frames, WINDOW_BINS, cfg.sample_rate, cfg.hop as u32, data)
                .unwrap()
        })
        .collect();
    SpectralBasis::from_parts(cfg, "fake".into(), 90, onset, notes).unwrap()
}

pub(crate) fn fake_basis_set() -> BasisSet {
    BasisSet::new(vec![fake_basis(40, 5)]).unwrap()
}

/// A plan with one chord containing one unscaled, unjittered, undecayed
/// note with neutral phase.
pub(crate) fn single_note_plan(pitch: usize, onset_frame: i64) -> WindowPlan {
    WindowPlan {
        basis_index: 0,
        chords: vec![ChordPlan {
            onset_frame,
            scale: 1.0,
            notes: vec![NotePlan {
                pitch,
                scale: 1.0,
                phase: Complex64::new(1.0, 0.0),
                jitter: 0,
                decay_start: None,
            }],
        }],
    }
}
