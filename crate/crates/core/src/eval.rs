//! False-alarm and false-reject accounting.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted: bool, label: u8) {
        match (predicted, label == 1) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Tallies `p ≥ threshold` predictions against labels.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if probs.is_empty() {
        return Err(KwsError::contract("cannot evaluate an empty set"));
    }
    if probs.len() != labels.len() {
        return Err(KwsError::contract(format!(
            "{} probabilities but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probs.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(KwsError::contract(format!("probability {p} outside [0, 1]")));
        }
        if y > 1 {
            return Err(KwsError::contract(format!("label {y} is not 0 or 1")));
        }
        c.record(p >= threshold, y);
    }
    Ok(c)
}

/// A ratio that is undefined when its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rate {
    Defined(f64),
    Undefined,
}

impl Rate {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Rate::Undefined
        } else {
            Rate::Defined(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Rate::Defined(v) => Some(v),
            Rate::Undefined => None,
        }
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rate::Defined(v) => write!(f, "{v:.3}"),
            Rate::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub far: Rate,
    pub frr: Rate,
    /// `far + frr`, undefined if either is.
    pub score: Rate,
    pub accuracy: Rate,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

impl EvalReport {
    pub fn score_value(&self) -> Option<f64> {
        self.score.value()
    }

    /// One delimited record: threshold, far, frr, score, accuracy, tp, fp, tn, fn.
    pub fn to_record(&self) -> String {
        let c = &self.counts;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.threshold, self.far, self.frr, self.score, self.accuracy, c.tp, c.fp, c.tn, c.fn_
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "FAR {} FRR {} Score {} accuracy {} (threshold {}, n={})",
            self.far,
            self.frr,
            self.score,
            self.accuracy,
            self.threshold,
            self.counts.total()
        )
    }
}

pub fn report(c: &ConfusionCounts, threshold: f64) -> EvalReport {
    let far = Rate::ratio(c.fp, c.fp + c.tn);
    let frr = Rate::ratio(c.fn_, c.fn_ + c.tp);
    let score = match (far, frr) {
        (Rate::Defined(a), Rate::Defined(b)) => Rate::Defined(a + b),
        _ => Rate::Undefined,
    };
    EvalReport {
        far,
        frr,
        score,
        accuracy: Rate::ratio(c.tp + c.tn, c.total()),
        threshold,
        counts: *c,
    }
}

/// Score from published FAR and FRR values.
pub fn score_from_rates(far: f64, frr: f64) -> f64 {
    far + frr
}

pub fn evaluate(probs: &[f64], labels: &[u8], threshold: f64) -> Result<EvalReport> {
    Ok(report(&confusion(probs, labels, threshold)?, threshold))
}

pub fn threshold_sweep(probs: &[f64], labels: &[u8], grid: &[f64]) -> Result<Vec<EvalReport>> {
    if grid.is_empty() {
        return Err(KwsError::contract("threshold grid is empty"));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(KwsError::contract("threshold grid must be ascending"));
    }
    grid.iter().map(|&t| evaluate(probs, labels, t)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count_neg: u64,
    pub count_pos: u64,
}

/// Per-class histogram of `values` over `bins` equal-width bins spanning
/// their range. A zero-width range collapses into one occupied bin.
pub fn class_histogram(values: &[f64], labels: &[u8], bins: usize) -> Result<Vec<HistogramBin>> {
    if values.len() != labels.len() {
        return Err(KwsError::contract(format!(
            "{} values but {} labels",
            values.len(),
            labels.len()
        )));
    }
    if bins == 0 {
        return Err(KwsError::contract("histogram needs at least one bin"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(KwsError::contract("histogram values must be finite"));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = if hi > lo { bins } else { 1 };
    let width = if hi > lo { (hi - lo) / n as f64 } else { 0.0 };
    let mut out: Vec<HistogramBin> = (0..n)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: if i + 1 == n { hi } else { lo + (i + 1) as f64 * width },
            count_neg: 0,
            count_pos: 0,
        })
        .collect();
    for (&v, &y) in values.iter().zip(labels) {
        let i = if width > 0.0 {
            (((v - lo) / width) as usize).min(n - 1)
        } else {
            0
        };
        if y == 1 {
            out[i].count_pos += 1;
        } else {
            out[i].count_neg += 1;
        }
    }
    Ok(out)
}

pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count_neg,count_pos";

/// Writes histogram bins of the signed distance margin as CSV with columns
/// `bin_lo,bin_hi,count_neg,count_pos`.
pub fn export_histograms(margins: &[f64], labels: &[u8], bins: usize, path: impl AsRef<Path>) -> Result<Vec<HistogramBin>> {
    let path = path.as_ref();
    let hist = class_histogram(margins, labels, bins)?;
    let mut body = String::from(HISTOGRAM_HEADER);
    body.push('\n');
    for b in &hist {
        body.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, b.count_neg, b.count_pos));
    }
    let mut f = std::fs::File::create(path).map_err(|e| KwsError::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| KwsError::io(path, e))?;
    Ok(hist)
}
