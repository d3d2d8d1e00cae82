//! KPI series ingest and preparation.
//!
//! Raw series come from `timestamp,value,label` CSV. Preparation standardizes
//! values with statistics taken over normal, observed points and fills missing
//! slots with zero (the standardized mean). Windows carry the per-point
//! normal indicator used to mask the training objective.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Standard deviations below this are treated as a constant series.
pub const MIN_STD: f64 = 1e-8;

pub const CSV_HEADER: &str = "timestamp,value,label";

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub timestamps: Vec<i64>,
    /// `None` marks a missing point.
    pub values: Vec<Option<f64>>,
    /// `Some(true)` marks a labeled anomaly; `None` is unlabeled.
    pub labels: Vec<Option<bool>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Sampling interval in seconds, checking that it is constant.
    pub fn interval(&self) -> Result<i64> {
        if self.values.len() != self.len() || self.labels.len() != self.len() {
            return Err(Error::DimensionMismatch {
                what: "raw series columns",
                expected: self.len(),
                got: self.values.len().min(self.labels.len()),
            });
        }
        if self.len() < 2 {
            return Ok(1);
        }
        let interval = self.timestamps[1] - self.timestamps[0];
        if interval <= 0 {
            return Err(Error::IrregularInterval {
                row: 1,
                detail: "timestamps must be strictly increasing".into(),
            });
        }
        for (i, pair) in self.timestamps.windows(2).enumerate() {
            if pair[1] - pair[0] != interval {
                return Err(Error::IrregularInterval {
                    row: i + 1,
                    detail: format!("step {} differs from {interval}", pair[1] - pair[0]),
                });
            }
        }
        Ok(interval)
    }

    pub fn is_anomaly(&self, i: usize) -> bool {
        self.labels[i] == Some(true)
    }

    pub fn anomaly_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_anomaly(i)).count()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Parse `timestamp,value,label` CSV text. The label column may be
    /// omitted. Gaps that are whole multiples of the interval become missing
    /// rows; any other irregularity is an error naming the line.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, i64, Option<f64>, Option<bool>)> = Vec::new();
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((_, l)) => break l,
                None => {
                    return Err(Error::Csv {
                        line: 1,
                        message: "empty input".into(),
                    })
                }
            }
        };
        let columns: Vec<_> = header.split(',').map(str::trim).collect();
        if columns.first() != Some(&"timestamp") || columns.get(1) != Some(&"value") {
            return Err(Error::Csv {
                line: 1,
                message: format!("expected header `{CSV_HEADER}`, got `{header}`"),
            });
        }
        let has_label = columns.get(2) == Some(&"label");
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<_> = line.split(',').map(str::trim).collect();
            let expected = if has_label { 3 } else { 2 };
            if fields.len() != expected {
                return Err(Error::Csv {
                    line: line_no,
                    message: format!("expected {expected} fields, got {}", fields.len()),
                });
            }
            let ts = fields[0].parse::<i64>().map_err(|_| Error::Csv {
                line: line_no,
                message: format!("bad timestamp `{}`", fields[0]),
            })?;
            let value = match fields[1] {
                "" | "null" | "NaN" | "nan" => None,
                v => {
                    let parsed = v.parse::<f64>().map_err(|_| Error::Csv {
                        line: line_no,
                        message: format!("bad value `{v}`"),
                    })?;
                    if !parsed.is_finite() {
                        return Err(Error::Csv {
                            line: line_no,
                            message: format!("non-finite value `{v}`"),
                        });
                    }
                    Some(parsed)
                }
            };
            let label = if has_label {
                match fields[2] {
                    "" => None,
                    "0" => Some(false),
                    "1" => Some(true),
                    other => {
                        return Err(Error::Csv {
                            line: line_no,
                            message: format!("label must be 0, 1 or empty, got `{other}`"),
                        })
                    }
                }
            } else {
                None
            };
            rows.push((line_no, ts, value, label));
        }

        let mut interval = i64::MAX;
        for pair in rows.windows(2) {
            let step = pair[1].1 - pair[0].1;
            if step <= 0 {
                return Err(Error::Csv {
                    line: pair[1].0,
                    message: "timestamps must be strictly increasing".into(),
                });
            }
            interval = interval.min(step);
        }

        let mut out = RawSeries {
            timestamps: Vec::with_capacity(rows.len()),
            values: Vec::with_capacity(rows.len()),
            labels: Vec::with_capacity(rows.len()),
        };
        for (i, &(line, ts, value, label)) in rows.iter().enumerate() {
            if i > 0 {
                let prev = rows[i - 1].1;
                let step = ts - prev;
                if step % interval != 0 {
                    return Err(Error::Csv {
                        line,
                        message: format!(
                            "gap of {step}s is not a multiple of the {interval}s interval"
                        ),
                    });
                }
                for k in 1..step / interval {
                    out.timestamps.push(prev + k * interval);
                    out.values.push(None);
                    out.labels.push(None);
                }
            }
            out.timestamps.push(ts);
            out.values.push(value);
            out.labels.push(label);
        }
        Ok(out)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 24);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{},", self.timestamps[i]);
            if let Some(v) = self.values[i] {
                let _ = write!(out, "{v}");
            }
            out.push(',');
            out.push(if self.is_anomaly(i) { '1' } else { '0' });
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Standardization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    /// Population mean and standard deviation.
    pub fn fit(values: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let n = values.clone().count();
        if n < 2 {
            return Err(Error::TooFewPoints {
                needed: 2,
                found: n,
            });
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std < MIN_STD {
            return Err(Error::ConstantSeries { std, min: MIN_STD });
        }
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSeries {
    /// Timestamp of the first point.
    pub start: i64,
    pub interval: i64,
    /// Standardized values; exactly 0 at missing points.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
    pub anomaly: Vec<bool>,
    pub stats: Standardization,
}

impl PreparedSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> i64 {
        self.start + i as i64 * self.interval
    }

    /// Neither missing nor a labeled anomaly.
    pub fn is_normal(&self, i: usize) -> bool {
        !self.missing[i] && !self.anomaly[i]
    }

    pub fn labeled_count(&self) -> usize {
        self.anomaly.iter().filter(|&&a| a).count()
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn slice(&self, range: Range<usize>) -> PreparedSeries {
        PreparedSeries {
            start: self.timestamp(range.start),
            interval: self.interval,
            values: self.values[range.clone()].to_vec(),
            missing: self.missing[range.clone()].to_vec(),
            anomaly: self.anomaly[range].to_vec(),
            stats: self.stats,
        }
    }

    /// Raw-scale view of the series, for re-standardization.
    pub fn to_raw(&self) -> RawSeries {
        RawSeries {
            timestamps: (0..self.len()).map(|i| self.timestamp(i)).collect(),
            values: (0..self.len())
                .map(|i| (!self.missing[i]).then(|| self.stats.invert(self.values[i])))
                .collect(),
            labels: self.anomaly.iter().map(|&a| Some(a)).collect(),
        }
    }

    /// The window ending at `last`, which must be at least `window - 1`.
    pub fn window_at(&self, last: usize, window: usize) -> Window {
        let range = last + 1 - window..last + 1;
        let alpha: Vec<f64> = range
            .clone()
            .map(|i| if self.is_normal(i) { 1.0 } else { 0.0 })
            .collect();
        let normal = alpha.iter().filter(|&&a| a == 1.0).count();
        Window {
            x: self.values[range].to_vec(),
            alpha,
            beta: normal as f64 / window as f64,
            last_index: last,
        }
    }
}

/// A length-`W` view of a series ending at `last_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x: Vec<f64>,
    /// 1.0 where the point is neither missing nor a labeled anomaly, else 0.0.
    pub alpha: Vec<f64>,
    /// Fraction of normal points.
    pub beta: f64,
    pub last_index: usize,
}

impl Window {
    pub fn is_clean(&self) -> bool {
        self.alpha.iter().all(|&a| a == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.49,
            valid: 0.21,
            test: 0.30,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, valid: f64, test: f64) -> Result<Self> {
        let spec = Self { train, valid, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|&r| !r.is_finite() || r < 0.0) {
            return Err(Error::config("split ratios must be nonnegative"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split ratios must sum to 1"));
        }
        Ok(())
    }

    /// Segment lengths for `n` points: floor boundaries, remainder to test.
    pub fn lengths(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((n as f64 * r) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let valid = floor(self.valid).min(n - train);
        (train, valid, n - train - valid)
    }
}

/// Standardize a raw series. Without `stats`, mean and population standard
/// deviation are fitted on points that are neither missing nor labeled
/// anomalies.
pub fn prepare(raw: &RawSeries, stats: Option<Standardization>) -> Result<PreparedSeries> {
    let interval = raw.interval()?;
    let missing: Vec<bool> = raw.values.iter().map(Option::is_none).collect();
    let anomaly: Vec<bool> = (0..raw.len()).map(|i| raw.is_anomaly(i)).collect();
    let stats = match stats {
        Some(s) => {
            if s.std.is_nan() || s.std < MIN_STD {
                return Err(Error::ConstantSeries {
                    std: s.std,
                    min: MIN_STD,
                });
            }
            s
        }
        None => Standardization::fit(
            raw.values
                .iter()
                .zip(&anomaly)
                .filter(|(_, &a)| !a)
                .filter_map(|(v, _)| *v),
        )?,
    };
    let values = raw
        .values
        .iter()
        .map(|v| v.map_or(0.0, |v| stats.apply(v)))
        .collect();
    Ok(PreparedSeries {
        start: raw.timestamps.first().copied().unwrap_or(0),
        interval,
        values,
        missing,
        anomaly,
        stats,
    })
}

/// All `N - W + 1` sliding windows in order.
pub fn make_windows(series: &PreparedSeries, window: usize) -> Result<Vec<Window>> {
    check_window(series.len(), window)?;
    Ok((window - 1..series.len())
        .map(|last| series.window_at(last, window))
        .collect())
}

pub(crate) fn check_window(len: usize, window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::config("window size must be at least 1"));
    }
    if len < window {
        return Err(Error::SeriesTooShort { len, window });
    }
    Ok(())
}

/// Mark `round(lambda * n_eligible)` normal points as missing, chosen
/// uniformly without replacement. Returns the modified copy and the sorted
/// injected indices.
pub fn inject_missing<R: Rng + ?Sized>(
    series: &PreparedSeries,
    lambda: f64,
    rng: &mut R,
) -> Result<(PreparedSeries, Vec<usize>)> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::config(format!(
            "injection ratio must be in [0, 1), got {lambda}"
        )));
    }
    let mut out = series.clone();
    let eligible: Vec<usize> = (0..series.len()).filter(|&i| series.is_normal(i)).collect();
    let count = (lambda * eligible.len() as f64).round() as usize;
    if count == 0 {
        return Ok((out, Vec::new()));
    }
    let mut chosen: Vec<usize> = index::sample(rng, eligible.len(), count)
        .into_iter()
        .map(|k| eligible[k])
        .collect();
    chosen.sort_unstable();
    for &i in &chosen {
        out.values[i] = 0.0;
        out.missing[i] = true;
    }
    Ok((out, chosen))
}

/// Maximal runs of `true`.
pub fn segments(mask: &[bool]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..mask.len());
    }
    out
}

/// Drop whole anomaly segments, each draw choosing a remaining segment with
/// probability proportional to its length, until at most
/// `keep_ratio * original` labeled points remain.
pub fn downsample_labels<R: Rng + ?Sized>(
    series: &PreparedSeries,
    keep_ratio: f64,
    rng: &mut R,
) -> Result<PreparedSeries> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(Error::config(format!(
            "label keep ratio must be in [0, 1], got {keep_ratio}"
        )));
    }
    let mut out = series.clone();
    let mut remaining = segments(&series.anomaly);
    let original: usize = remaining.iter().map(|s| s.len()).sum();
    let target = keep_ratio * original as f64;
    let mut retained = original;
    while retained as f64 > target && !remaining.is_empty() {
        let total: usize = remaining.iter().map(|s| s.len()).sum();
        let mut pick = rng.random_range(0..total);
        let mut idx = 0;
        while pick >= remaining[idx].len() {
            pick -= remaining[idx].len();
            idx += 1;
        }
        let seg = remaining.remove(idx);
        retained -= seg.len();
        for i in seg {
            out.anomaly[i] = false;
        }
    }
    Ok(out)
}

/// Contiguous chronological split. Standardization statistics are refitted
/// on the train part and applied to all three parts.
pub fn split(
    series: &PreparedSeries,
    spec: SplitSpec,
) -> Result<(PreparedSeries, PreparedSeries, PreparedSeries)> {
    spec.validate()?;
    let (n_train, n_valid, _) = spec.lengths(series.len());
    let raw = series.to_raw();
    let part = |range: Range<usize>| RawSeries {
        timestamps: raw.timestamps[range.clone()].to_vec(),
        values: raw.values[range.clone()].to_vec(),
        labels: raw.labels[range].to_vec(),
    };
    let n = series.len();
    let train_raw = part(0..n_train);
    let train = prepare(&train_raw, None)?;
    let restandardize = |range: Range<usize>| -> Result<PreparedSeries> {
        let mut p = prepare(&part(range.clone()), Some(train.stats))?;
        // an empty or one-point part has no interval of its own
        p.start = series.timestamp(range.start);
        p.interval = series.interval;
        Ok(p)
    };
    let valid = restandardize(n_train..n_train + n_valid)?;
    let test = restandardize(n_train + n_valid..n)?;
    Ok((train, valid, test))
}

/// Mean absolute first difference over consecutive observed pairs.
pub fn smoothness_stat(series: &PreparedSeries) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            window: 2,
        });
    }
    let (sum, pairs) = (1..series.len())
        .filter(|&t| !series.missing[t] && !series.missing[t - 1])
        .fold((0.0, 0usize), |(s, c), t| {
            (s + (series.values[t] - series.values[t - 1]).abs(), c + 1)
        });
    if pairs == 0 {
        return Err(Error::NoObservedPairs);
    }
    Ok(sum / pairs as f64)
}
