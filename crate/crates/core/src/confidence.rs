//! Confidence measures over decoded hypotheses and threshold-based selection
//! of pseudo-labeled data, with a small calibration routine that picks the
//! operating threshold from a held-out labeled set.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{Hypothesis, NBestList};
use crate::model::PosteriorTrace;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("calibration split produced an empty partition: {0} utterances at wer <= {1}, {2} above")]
    DegenerateSplit(usize, f64, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mean per-step entropy of the decoder posterior trace, in nats.
/// None if the trace has no decoder steps.
pub fn entropy_of(trace: &PosteriorTrace) -> Option<f64> {
    if trace.decoder_steps.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for step in &trace.decoder_steps {
        let mut h = 0.0;
        for &p in step {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h;
    }
    Some(total / trace.decoder_steps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    /// length-normalized log posterior; higher is more confident
    DecodeScore,
    /// mean decoder entropy; lower is more confident
    Entropy,
}

impl Measure {
    pub fn value(&self, h: &Hypothesis) -> f64 {
        match self {
            Measure::DecodeScore => h.decode_score,
            Measure::Entropy => h.entropy,
        }
    }

    /// true if the confident side of the threshold is >= (else <=)
    pub fn keep_ge(&self) -> bool {
        matches!(self, Measure::DecodeScore)
    }

    pub fn accepts(&self, value: f64, threshold: f64) -> bool {
        if self.keep_ge() {
            value >= threshold
        } else {
            value <= threshold
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Measure::DecodeScore => "decode_score",
            Measure::Entropy => "entropy",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub measure: Measure,
    pub threshold: f64,
    /// cap on accepted hypotheses per utterance, best-valued first
    pub max_hyps_per_utt: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectedHyp {
    pub utt_id: String,
    pub text: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SelectionAudit {
    pub considered: usize,
    pub kept: usize,
    pub rejected_threshold: usize,
    pub rejected_cap: usize,
    pub utts_with_keep: usize,
}

/// Filter N-best lists by the configured measure and threshold. Within each
/// utterance, surviving hypotheses are ordered most-confident first and capped.
pub fn select(lists: &[NBestList], cfg: &SelectionConfig) -> (Vec<SelectedHyp>, SelectionAudit) {
    let mut out = Vec::new();
    let mut audit = SelectionAudit::default();
    for list in lists {
        let mut passing: Vec<&Hypothesis> = Vec::new();
        for h in &list.hyps {
            audit.considered += 1;
            if h.truncated || h.text.is_empty() {
                audit.rejected_threshold += 1;
                continue;
            }
            if cfg.measure.accepts(cfg.measure.value(h), cfg.threshold) {
                passing.push(h);
            } else {
                audit.rejected_threshold += 1;
            }
        }
        passing.sort_by(|a, b| {
            let (va, vb) = (cfg.measure.value(a), cfg.measure.value(b));
            let ord = if cfg.measure.keep_ge() {
                vb.partial_cmp(&va)
            } else {
                va.partial_cmp(&vb)
            };
            ord.unwrap().then_with(|| a.text.cmp(&b.text))
        });
        if passing.len() > cfg.max_hyps_per_utt {
            audit.rejected_cap += passing.len() - cfg.max_hyps_per_utt;
            passing.truncate(cfg.max_hyps_per_utt);
        }
        if !passing.is_empty() {
            audit.utts_with_keep += 1;
        }
        for h in passing {
            audit.kept += 1;
            out.push(SelectedHyp {
                utt_id: list.utt_id.clone(),
                text: h.text.clone(),
                value: cfg.measure.value(h),
            });
        }
    }
    (out, audit)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub threshold: f64,
    pub miss_rate: f64,
    pub false_accept_rate: f64,
    pub reliable_count: usize,
    pub unreliable_count: usize,
}

/// One calibration point: the confidence value of an utterance's 1-best
/// hypothesis and the WER of that hypothesis against the reference.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CalibPoint {
    pub value: f64,
    pub wer: f64,
}

/// Choose the threshold minimizing miss + false-accept over a value grid.
///
/// Points with wer <= wer_split form the reliable set (should be accepted);
/// the rest should be rejected. The grid covers the observed value range at
/// the given step; cost ties resolve to the midpoint of the tied range,
/// snapped back onto the grid.
pub fn calibrate_threshold(
    points: &[CalibPoint],
    measure: Measure,
    wer_split: f64,
    grid_step: f64,
) -> Result<CalibrationOutcome, ConfidenceError> {
    if points.is_empty() {
        return Err(ConfidenceError::EmptyCalibration);
    }
    assert!(grid_step > 0.0);
    let reliable: Vec<f64> = points.iter().filter(|p| p.wer <= wer_split).map(|p| p.value).collect();
    let unreliable: Vec<f64> = points.iter().filter(|p| p.wer > wer_split).map(|p| p.value).collect();
    if reliable.is_empty() || unreliable.is_empty() {
        return Err(ConfidenceError::DegenerateSplit(reliable.len(), wer_split, unreliable.len()));
    }
    let lo = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / grid_step).floor() as i64;
    let last = (hi / grid_step).ceil() as i64;

    let cost_at = |theta: f64| -> (f64, f64, f64) {
        let miss = reliable.iter().filter(|&&v| !measure.accepts(v, theta)).count() as f64
            / reliable.len() as f64;
        let fa = unreliable.iter().filter(|&&v| measure.accepts(v, theta)).count() as f64
            / unreliable.len() as f64;
        (miss + fa, miss, fa)
    };

    let mut best_cost = f64::INFINITY;
    let mut tied: Vec<i64> = Vec::new();
    for g in first..=last {
        let theta = g as f64 * grid_step;
        let (c, _, _) = cost_at(theta);
        if c < best_cost - 1e-12 {
            best_cost = c;
            tied = vec![g];
        } else if (c - best_cost).abs() <= 1e-12 {
            tied.push(g);
        }
    }
    // resolve ties to the midpoint of the widest contiguous tied plateau, so
    // the chosen threshold itself attains the minimum cost
    let mut best_run = (0usize, 0usize); // (start index in tied, len)
    let mut run_start = 0usize;
    for i in 1..=tied.len() {
        if i == tied.len() || tied[i] != tied[i - 1] + 1 {
            let len = i - run_start;
            if len > best_run.1 {
                best_run = (run_start, len);
            }
            run_start = i;
        }
    }
    let run = &tied[best_run.0..best_run.0 + best_run.1];
    let theta = run[run.len() / 2] as f64 * grid_step;
    let (_, miss, fa) = cost_at(theta);
    Ok(CalibrationOutcome {
        threshold: theta,
        miss_rate: miss,
        false_accept_rate: fa,
        reliable_count: reliable.len(),
        unreliable_count: unreliable.len(),
    })
}

/// CSV histogram of confidence values, split by the wer_split partition.
/// Columns: bin_lo, bin_hi, reliable_count, unreliable_count.
pub fn export_histogram(
    path: &Path,
    points: &[CalibPoint],
    wer_split: f64,
    bins: usize,
) -> Result<(), ConfidenceError> {
    assert!(bins >= 1);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "bin_lo,bin_hi,reliable_count,unreliable_count")?;
    if points.is_empty() {
        return Ok(());
    }
    let lo = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    for b in 0..bins {
        let blo = lo + b as f64 * width;
        let bhi = if b + 1 == bins { hi } else { blo + width };
        let in_bin = |v: f64| v >= blo && (v < bhi || (b + 1 == bins && v <= bhi));
        let rel = points.iter().filter(|p| p.wer <= wer_split && in_bin(p.value)).count();
        let unrel = points.iter().filter(|p| p.wer > wer_split && in_bin(p.value)).count();
        writeln!(w, "{blo},{bhi},{rel},{unrel}")?;
    }
    w.flush()?;
    Ok(())
}
