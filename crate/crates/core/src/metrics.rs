//! Segment-adjusted detection metrics.
//!
//! A point is evaluable when it has a score and is not missing. A truth
//! segment counts as fully detected as soon as any of its evaluable points is
//! flagged (`score >= threshold`); points outside segments count as usual.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::series::{segments, PreparedSeries, RawSeries};

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub anomaly: Vec<bool>,
    pub missing: Vec<bool>,
    /// Maximal runs of `anomaly`.
    pub segments: Vec<Range<usize>>,
}

impl GroundTruth {
    pub fn new(anomaly: Vec<bool>, missing: Vec<bool>) -> Self {
        assert_eq!(anomaly.len(), missing.len(), "mask lengths must match");
        let segments = segments(&anomaly);
        Self {
            anomaly,
            missing,
            segments,
        }
    }

    pub fn from_raw(raw: &RawSeries) -> Self {
        Self::new(
            (0..raw.len()).map(|i| raw.is_anomaly(i)).collect(),
            raw.values.iter().map(Option::is_none).collect(),
        )
    }

    pub fn from_prepared(series: &PreparedSeries) -> Self {
        Self::new(series.anomaly.clone(), series.missing.clone())
    }

    pub fn len(&self) -> usize {
        self.anomaly.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anomaly.is_empty()
    }
}

fn evaluable_score(truth: &GroundTruth, scores: &[Option<f64>], i: usize) -> Option<f64> {
    if truth.missing[i] {
        None
    } else {
        scores[i]
    }
}

fn check_len(truth: &GroundTruth, n: usize) {
    assert_eq!(truth.len(), n, "scores and ground truth must cover the same points");
}

/// Segment adjustment of point flags. `None` marks points that are not
/// evaluable; they are never flagged in the output.
pub fn adjust(truth: &GroundTruth, raw_flags: &[Option<bool>]) -> Vec<bool> {
    check_len(truth, raw_flags.len());
    let evaluable = |i: usize| !truth.missing[i] && raw_flags[i].is_some();
    let mut out: Vec<bool> = (0..raw_flags.len())
        .map(|i| evaluable(i) && raw_flags[i] == Some(true))
        .collect();
    for seg in &truth.segments {
        if seg.clone().any(|i| out[i]) {
            for i in seg.clone().filter(|&i| evaluable(i)) {
                out[i] = true;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

impl Counts {
    /// Precision is 1 with nothing flagged, recall is 1 with nothing to find.
    pub fn prf(&self) -> Prf {
        let precision = if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        };
        let recall = if self.tp + self.fn_ == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        };
        let fscore = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            fscore,
        }
    }
}

/// TP/FP/FN of adjusted flags over evaluable points.
pub fn count(truth: &GroundTruth, scores: &[Option<f64>], adjusted: &[bool]) -> Counts {
    let mut c = Counts::default();
    for i in 0..truth.len() {
        if evaluable_score(truth, scores, i).is_none() {
            continue;
        }
        match (truth.anomaly[i], adjusted[i]) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

pub fn flags_at(scores: &[Option<f64>], threshold: f64) -> Vec<Option<bool>> {
    scores.iter().map(|s| s.map(|v| v >= threshold)).collect()
}

pub fn prf_at_threshold(truth: &GroundTruth, scores: &[Option<f64>], threshold: f64) -> Prf {
    check_len(truth, scores.len());
    let adjusted = adjust(truth, &flags_at(scores, threshold));
    count(truth, scores, &adjusted).prf()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
}

/// Segment view used by the threshold sweep: evaluable size and max score of
/// each segment, and the scores of evaluable normal points.
struct SweepInput {
    segment_max: Vec<(f64, usize)>,
    normal_scores: Vec<f64>,
    anomaly_points: usize,
    candidates: Vec<f64>,
}

fn sweep_input(truth: &GroundTruth, scores: &[Option<f64>]) -> SweepInput {
    check_len(truth, scores.len());
    let mut segment_max = Vec::new();
    let mut anomaly_points = 0;
    for seg in &truth.segments {
        let vals: Vec<f64> = seg
            .clone()
            .filter_map(|i| evaluable_score(truth, scores, i))
            .collect();
        if let Some(max) = vals.iter().copied().max_by(f64::total_cmp) {
            segment_max.push((max, vals.len()));
            anomaly_points += vals.len();
        }
    }
    let normal_scores: Vec<f64> = (0..truth.len())
        .filter(|&i| !truth.anomaly[i])
        .filter_map(|i| evaluable_score(truth, scores, i))
        .collect();
    let mut candidates: Vec<f64> = (0..truth.len())
        .filter_map(|i| evaluable_score(truth, scores, i))
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(f64::INFINITY);
    SweepInput {
        segment_max,
        normal_scores,
        anomaly_points,
        candidates,
    }
}

/// Counts at every candidate threshold, in descending threshold order.
fn sweep(input: &SweepInput) -> Vec<(f64, Counts)> {
    let mut seg = input.segment_max.clone();
    seg.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut normals = input.normal_scores.clone();
    normals.sort_by(|a, b| b.total_cmp(a));
    let (mut si, mut ni, mut tp, mut fp) = (0, 0, 0, 0);
    input
        .candidates
        .iter()
        .rev()
        .map(|&th| {
            while si < seg.len() && seg[si].0 >= th {
                tp += seg[si].1;
                si += 1;
            }
            while ni < normals.len() && normals[ni] >= th {
                fp += 1;
                ni += 1;
            }
            (
                th,
                Counts {
                    tp,
                    fp,
                    fn_: input.anomaly_points - tp,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestF {
    pub fscore: f64,
    /// Smallest threshold attaining `fscore`.
    pub threshold: f64,
    /// Ascending thresholds, ending with `+inf`.
    pub table: Vec<ThresholdRow>,
}

/// Best adjusted F-score over all distinct score values and `+inf`.
pub fn best_fscore(truth: &GroundTruth, scores: &[Option<f64>]) -> BestF {
    let mut table: Vec<ThresholdRow> = sweep(&sweep_input(truth, scores))
        .into_iter()
        .map(|(threshold, c)| {
            let Prf {
                precision,
                recall,
                fscore,
            } = c.prf();
            ThresholdRow {
                threshold,
                precision,
                recall,
                fscore,
            }
        })
        .collect();
    table.reverse();
    let mut best = table[0];
    for row in &table[1..] {
        if row.fscore > best.fscore {
            best = *row;
        }
    }
    BestF {
        fscore: best.fscore,
        threshold: best.threshold,
        table,
    }
}

/// Average precision over the adjusted precision-recall curve:
/// `sum_i (R_i - R_{i-1}) * P_i` with thresholds descending and `R_0 = 0`.
pub fn auc(truth: &GroundTruth, scores: &[Option<f64>]) -> Result<f64> {
    let input = sweep_input(truth, scores);
    if input.anomaly_points == 0 {
        return Err(Error::NoAnomalies);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (_, c) in sweep(&input) {
        let prf = c.prf();
        ap += (prf.recall - prev_recall) * prf.precision;
        prev_recall = prf.recall;
    }
    Ok(ap)
}

/// Per segment with at least one evaluable point: intervals from the segment
/// start to its first raw flag, or `None` when undetected.
pub fn alert_delays(truth: &GroundTruth, scores: &[Option<f64>], threshold: f64) -> Vec<Option<usize>> {
    check_len(truth, scores.len());
    truth
        .segments
        .iter()
        .filter(|seg| {
            (seg.start..seg.end)
                .any(|i| evaluable_score(truth, scores, i).is_some())
        })
        .map(|seg| {
            seg.clone()
                .find(|&i| evaluable_score(truth, scores, i).is_some_and(|s| s >= threshold))
                .map(|i| i - seg.start)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub table: Vec<ThresholdRow>,
    pub best_f_score: f64,
    pub best_threshold: f64,
    pub best_precision: f64,
    pub best_recall: f64,
    /// `None` when there are no evaluable anomaly points.
    pub auc: Option<f64>,
    /// At the best threshold.
    pub alert_delays: Vec<Option<usize>>,
    pub evaluable_points: usize,
    pub anomaly_points: usize,
}

impl EvalReport {
    pub fn mean_alert_delay(&self) -> Option<f64> {
        let detected: Vec<usize> = self.alert_delays.iter().flatten().copied().collect();
        if detected.is_empty() {
            None
        } else {
            Some(detected.iter().sum::<usize>() as f64 / detected.len() as f64)
        }
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "evaluable points: {}", self.evaluable_points);
        let _ = writeln!(out, "anomaly points:   {}", self.anomaly_points);
        let _ = writeln!(out, "best F-score:     {:.6}", self.best_f_score);
        let _ = writeln!(out, "best threshold:   {}", self.best_threshold);
        let _ = writeln!(out, "precision:        {:.6}", self.best_precision);
        let _ = writeln!(out, "recall:           {:.6}", self.best_recall);
        match self.auc {
            Some(a) => {
                let _ = writeln!(out, "AUC:              {a:.6}");
            }
            None => out.push_str("AUC:              undefined (no anomalies)\n"),
        }
        let detected = self.alert_delays.iter().flatten().count();
        let _ = writeln!(
            out,
            "segments:         {detected}/{} detected",
            self.alert_delays.len()
        );
        match self.mean_alert_delay() {
            Some(d) => {
                let _ = writeln!(out, "mean alert delay: {d:.3} intervals");
            }
            None => out.push_str("mean alert delay: n/a\n"),
        }
        out
    }

    pub fn table_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,fscore\n");
        for r in &self.table {
            let _ = writeln!(out, "{},{},{},{}", r.threshold, r.precision, r.recall, r.fscore);
        }
        out
    }
}

pub fn evaluate(truth: &GroundTruth, scores: &[Option<f64>]) -> EvalReport {
    let best = best_fscore(truth, scores);
    let row = best
        .table
        .iter()
        .find(|r| r.threshold == best.threshold)
        .copied()
        .expect("best threshold is a table row");
    let input = sweep_input(truth, scores);
    let evaluable_points = (0..truth.len())
        .filter(|&i| evaluable_score(truth, scores, i).is_some())
        .count();
    EvalReport {
        auc: auc(truth, scores).ok(),
        alert_delays: alert_delays(truth, scores, best.threshold),
        best_f_score: best.fscore,
        best_threshold: best.threshold,
        best_precision: row.precision,
        best_recall: row.recall,
        evaluable_points,
        anomaly_points: input.anomaly_points,
        table: best.table,
    }
}
