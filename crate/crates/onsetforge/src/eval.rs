//! Scoring: one-to-one onset matching with a time tolerance (the test
//! protocol) and ternary confusion counts over reading windows (the
//! validation protocol).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::Serialize;

use crate::basis::{HIGHEST_MIDI, LOWEST_MIDI};
use crate::cqt::MagnitudeSpectrogram;
use crate::datagen::{self, DatagenConfig, Ternary, TernaryLabel};
use crate::decoder::NoteEvent;
use crate::error::{Error, Result};
use crate::network::{forward_batch, NetworkParams, OUTPUT_DIM};

/// Note-matching counts and the derived metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchReport {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f_measure: f64,
}

impl MatchReport {
    /// Derives P = TP/(TP+FP), R = TP/(TP+FN), A = TP/(TP+FP+FN) and
    /// F = 2PR/(P+R); empty denominators give 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let accuracy = ratio(tp, tp + fp + fn_);
        let f_measure = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MatchReport {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            accuracy,
            f_measure,
        }
    }
}

/// Kuhn's augmenting-path maximum bipartite matching. Edges connect a
/// truth onset to a prediction within the tolerance.
fn max_matching(truth: &[f64], preds: &[f64], tolerance: f64) -> usize {
    fn augment(
        t: usize,
        truth: &[f64],
        preds: &[f64],
        tolerance: f64,
        visited: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for p in 0..preds.len() {
            if visited[p] || (truth[t] - preds[p]).abs() > tolerance {
                continue;
            }
            visited[p] = true;
            let free = match owner[p] {
                None => true,
                Some(prev) => augment(prev, truth, preds, tolerance, visited, owner),
            };
            if free {
                owner[p] = Some(t);
                return true;
            }
        }
        false
    }

    let mut owner: Vec<Option<usize>> = vec![None; preds.len()];
    let mut matched = 0;
    for t in 0..truth.len() {
        let mut visited = vec![false; preds.len()];
        if augment(t, truth, preds, tolerance, &mut visited, &mut owner) {
            matched += 1;
        }
    }
    matched
}

/// Scores predictions against ground truth. Within each pitch, a
/// maximum-cardinality one-to-one matching pairs events whose onsets differ
/// by at most `tolerance` seconds; matched pairs are true positives,
/// unmatched truths false negatives, unmatched predictions false positives.
pub fn match_events(predictions: &[NoteEvent], truth: &[NoteEvent], tolerance: f64) -> MatchReport {
    let mut by_pitch: BTreeMap<u8, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ev in truth {
        by_pitch.entry(ev.pitch).or_default().0.push(ev.onset);
    }
    for ev in predictions {
        by_pitch.entry(ev.pitch).or_default().1.push(ev.onset);
    }
    let mut tp = 0u64;
    for (truths, preds) in by_pitch.values() {
        tp += max_matching(truths, preds, tolerance) as u64;
    }
    let fp = predictions.len() as u64 - tp;
    let fn_ = truth.len() as u64 - tp;
    MatchReport::from_counts(tp, fp, fn_)
}

/// The nine-cell confusion matrix of ternary predictions against ternary
/// labels. Rows are predictions (T, U, F), columns labels (T, U, F):
/// hard cells pair two definite values, soft cells involve an unknown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TernaryConfusion {
    pub htp: u64,
    pub stp: u64,
    pub hfp: u64,
    pub sfn: u64,
    pub vc: u64,
    pub sfp: u64,
    pub hfn: u64,
    pub stn: u64,
    pub htn: u64,
}

impl TernaryConfusion {
    pub fn total(&self) -> u64 {
        self.htp + self.stp + self.hfp + self.sfn + self.vc + self.sfp + self.hfn + self.stn
            + self.htn
    }

    pub fn merge(&mut self, other: &TernaryConfusion) {
        self.htp += other.htp;
        self.stp += other.stp;
        self.hfp += other.hfp;
        self.sfn += other.sfn;
        self.vc += other.vc;
        self.sfp += other.sfp;
        self.hfn += other.hfn;
        self.stn += other.stn;
        self.htn += other.htn;
    }

    /// Adds one (prediction, label) observation.
    pub fn tally(&mut self, prediction: Ternary, label: Ternary) {
        use Ternary::{False, True, Unknown};
        let cell = match (prediction, label) {
            (True, True) => &mut self.htp,
            (True, Unknown) => &mut self.stp,
            (True, False) => &mut self.hfp,
            (Unknown, True) => &mut self.sfn,
            (Unknown, Unknown) => &mut self.vc,
            (Unknown, False) => &mut self.sfp,
            (False, True) => &mut self.hfn,
            (False, Unknown) => &mut self.stn,
            (False, False) => &mut self.htn,
        };
        *cell += 1;
    }
}

/// Interprets a sigmoid output as a ternary value: above `hi` is a reported
/// onset, below `lo` a reported absence, anything else (including the
/// boundaries) unknown.
pub fn classify_output(output: f64, hi: f64, lo: f64) -> Ternary {
    if output > hi {
        Ternary::True
    } else if output < lo {
        Ternary::False
    } else {
        Ternary::Unknown
    }
}

/// Tallies network output rows against their labels.
pub fn ternary_confusion<'a, I>(rows: I, hi: f64, lo: f64) -> Result<TernaryConfusion>
where
    I: IntoIterator<Item = (&'a [f64], &'a TernaryLabel)>,
{
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid("ternary thresholds: hi must exceed lo"));
    }
    let mut confusion = TernaryConfusion::default();
    for (outputs, labels) in rows {
        assert_eq!(outputs.len(), OUTPUT_DIM);
        for (&y, &label) in outputs.iter().zip(&labels.0) {
            confusion.tally(classify_output(y, hi, lo), label);
        }
    }
    Ok(confusion)
}

/// Precision/recall/accuracy/f-measure in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TernaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f_measure: f64,
}

/// Metrics over the ternary confusion matrix:
/// P = (HTP+STP)/(HTP+STP+HFP), R = HTP/(HTP+SFN+HFN),
/// A = (HTP+STP)/(HTP+STP+HFP+SFN+HFN), F = 2PR/(P+R); empty denominators
/// give 0.
pub fn ternary_metrics(c: &TernaryConfusion) -> TernaryMetrics {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.htp + c.stp, c.htp + c.stp + c.hfp);
    let recall = ratio(c.htp, c.htp + c.sfn + c.hfn);
    let accuracy = ratio(c.htp + c.stp, c.htp + c.stp + c.hfp + c.sfn + c.hfn);
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    TernaryMetrics { precision, recall, accuracy, f_measure }
}

/// Reads tab-separated onset annotations with an
/// `OnsetTime<TAB>OffsetTime<TAB>MidiPitch` header; the offset column is
/// parsed but ignored.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<NoteEvent>> {
    let path = path.as_ref();
    let fail =
        |line: usize, reason: &str| Error::format(path, format!("line {line}: {reason}"));
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 && trimmed.starts_with("OnsetTime") {
            continue;
        }
        let mut cols = trimmed.split_whitespace();
        let onset: f64 = cols
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| fail(i + 1, "bad onset value"))?;
        let _offset: f64 = cols
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| fail(i + 1, "bad offset value"))?;
        let pitch: u8 = cols
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| fail(i + 1, "bad pitch value"))?;
        if !(LOWEST_MIDI..=HIGHEST_MIDI).contains(&pitch) {
            return Err(fail(i + 1, &format!("pitch {pitch} outside 21..=108")));
        }
        if !onset.is_finite() {
            return Err(fail(i + 1, "non-finite onset"));
        }
        events.push(NoteEvent { pitch, onset });
    }
    Ok(events)
}

/// Reads ground-truth events from either an annotation text file or an
/// events CSV, chosen by extension.
pub fn read_truth_events(path: impl AsRef<Path>) -> Result<Vec<NoteEvent>> {
    let path = path.as_ref();
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        Ok(crate::decoder::read_events_csv(path)?
            .iter()
            .map(|e| e.note_event())
            .collect())
    } else {
        read_annotations(path)
    }
}

/// One piece of an event-level evaluation.
#[derive(Debug, Clone)]
pub struct EventsPieceInput {
    pub name: String,
    pub predictions: Vec<NoteEvent>,
    pub truth: Vec<NoteEvent>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EventsPieceReport {
    pub name: String,
    #[serde(flatten)]
    pub report: MatchReport,
}

/// Unweighted means of the per-piece metrics.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MacroAverages {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub f_measure: f64,
}

/// Event-level evaluation report. The pooled counts are the headline; the
/// macro averages are reported alongside.
#[derive(Debug, Clone, Serialize)]
pub struct EventsEvalReport {
    pub tolerance: f64,
    pub pieces: Vec<EventsPieceReport>,
    pub pooled: MatchReport,
    pub macro_average: MacroAverages,
}

/// Scores every piece and aggregates both pooled and macro-averaged
/// metrics. An empty input produces an empty report.
pub fn evaluate_events(pieces: &[EventsPieceInput], tolerance: f64) -> EventsEvalReport {
    let mut reports = Vec::with_capacity(pieces.len());
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for piece in pieces {
        let report = match_events(&piece.predictions, &piece.truth, tolerance);
        tp += report.true_positives;
        fp += report.false_positives;
        fn_ += report.false_negatives;
        reports.push(EventsPieceReport { name: piece.name.clone(), report });
    }
    let pooled = MatchReport::from_counts(tp, fp, fn_);
    let macro_average = macro_of(reports.iter().map(|p| {
        (p.report.precision, p.report.recall, p.report.accuracy, p.report.f_measure)
    }));
    EventsEvalReport { tolerance, pieces: reports, pooled, macro_average }
}

fn macro_of(items: impl Iterator<Item = (f64, f64, f64, f64)>) -> MacroAverages {
    let mut n = 0usize;
    let (mut p, mut r, mut a, mut f) = (0.0, 0.0, 0.0, 0.0);
    for (pp, rr, aa, ff) in items {
        p += pp;
        r += rr;
        a += aa;
        f += ff;
        n += 1;
    }
    if n == 0 {
        return MacroAverages { precision: 0.0, recall: 0.0, accuracy: 0.0, f_measure: 0.0 };
    }
    let n = n as f64;
    MacroAverages { precision: p / n, recall: r / n, accuracy: a / n, f_measure: f / n }
}

/// One piece of a window-level (validation protocol) evaluation: a
/// full-piece magnitude spectrogram already normalized to a global maximum
/// of 1, plus its onset annotations.
#[derive(Debug, Clone)]
pub struct WindowsPieceInput {
    pub name: String,
    pub magnitudes: MagnitudeSpectrogram,
    pub truth: Vec<NoteEvent>,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowsPieceReport {
    pub name: String,
    pub sampled: u64,
    pub discarded: u64,
    pub confusion: TernaryConfusion,
    pub metrics: TernaryMetrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowsEvalReport {
    pub hi_threshold: f64,
    pub lo_threshold: f64,
    pub samples_per_piece: u64,
    pub pieces: Vec<WindowsPieceReport>,
    pub pooled_confusion: TernaryConfusion,
    pub pooled_metrics: TernaryMetrics,
    pub macro_average: MacroAverages,
}

/// Validation-protocol evaluation: draws reading windows at random centers
/// from each piece, discards silent ones, and tallies ternary predictions
/// against labels built from the annotations.
pub fn evaluate_windows(
    params: &NetworkParams,
    pieces: &[WindowsPieceInput],
    samples_per_piece: u64,
    rng: &mut impl Rng,
    cfg: &DatagenConfig,
    hi: f64,
    lo: f64,
) -> Result<WindowsEvalReport> {
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid("ternary thresholds: hi must exceed lo"));
    }
    let mut reports = Vec::with_capacity(pieces.len());
    let mut pooled = TernaryConfusion::default();
    for piece in pieces {
        let frames = piece.magnitudes.frames;
        if frames < datagen::WINDOW_FRAMES {
            return Err(Error::invalid(format!(
                "piece '{}' has only {frames} frames; windows need {}",
                piece.name,
                datagen::WINDOW_FRAMES
            )));
        }
        let lo_center = datagen::CENTER_OFFSET;
        let hi_center = frames - (datagen::WINDOW_FRAMES - datagen::CENTER_OFFSET);
        let mut confusion = TernaryConfusion::default();
        let mut discarded = 0u64;
        let mut windows: Vec<f64> = Vec::new();
        let mut labels: Vec<TernaryLabel> = Vec::new();
        for _ in 0..samples_per_piece {
            let center = rng.random_range(lo_center..=hi_center);
            match datagen::extract_window(&piece.magnitudes, &piece.truth, center, cfg)? {
                Some(example) => {
                    windows.extend_from_slice(&example.window);
                    labels.push(example.labels);
                }
                None => discarded += 1,
            }
        }
        if !labels.is_empty() {
            let x = Array2::from_shape_vec((labels.len(), datagen::WINDOW_VALUES), windows)
                .expect("window layout");
            let pass = forward_batch(params, &x);
            for (row, label) in pass.outputs.rows().into_iter().zip(&labels) {
                for (&y, &t) in row.iter().zip(&label.0) {
                    confusion.tally(classify_output(y, hi, lo), t);
                }
            }
        }
        pooled.merge(&confusion);
        reports.push(WindowsPieceReport {
            name: piece.name.clone(),
            sampled: samples_per_piece,
            discarded,
            metrics: ternary_metrics(&confusion),
            confusion,
        });
    }
    let pooled_metrics = ternary_metrics(&pooled);
    let macro_average = macro_of(reports.iter().map(|p| {
        (p.metrics.precision, p.metrics.recall, p.metrics.accuracy, p.metrics.f_measure)
    }));
    Ok(WindowsEvalReport {
        hi_threshold: hi,
        lo_threshold: lo,
        samples_per_piece,
        pieces: reports,
        pooled_confusion: pooled,
        pooled_metrics,
        macro_average,
    })
}
