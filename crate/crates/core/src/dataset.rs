//! Load-series ingestion: CSV parsing, min-max normalization, windowing
//! and chronological train/validation/test splits.

use std::collections::HashMap;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A uniformly sampled univariate load series (values in MW).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    timestamps: Vec<NaiveDateTime>,
    values: Vec<f64>,
    step_minutes: i64,
}

impl TimeSeries {
    pub fn new(timestamps: Vec<NaiveDateTime>, values: Vec<f64>, step_minutes: i64) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} timestamps vs {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if values.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                have: values.len(),
            });
        }
        if step_minutes <= 0 {
            return Err(Error::Config(format!(
                "step_minutes must be positive, got {step_minutes}"
            )));
        }
        if let Some(row) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::DataRow {
                row,
                msg: format!("non-finite load value {}", values[row]),
            });
        }
        check_spacing(&timestamps, step_minutes)?;
        Ok(Self {
            timestamps,
            values,
            step_minutes,
        })
    }

    /// Series starting at `start` with a fixed step; used for synthetic data.
    pub fn from_values(start: NaiveDateTime, step_minutes: i64, values: Vec<f64>) -> Result<Self> {
        let step = chrono::Duration::minutes(step_minutes);
        let timestamps = (0..values.len()).map(|i| start + step * i as i32).collect();
        Self::new(timestamps, values, step_minutes)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn step_minutes(&self) -> i64 {
        self.step_minutes
    }

    /// Contiguous sub-series `[start, end)`. Sub-series shorter than two
    /// points are rejected like any other series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::Index(format!("slice {start}..{end} of len {}", self.len())));
        }
        Self::new(
            self.timestamps[start..end].to_vec(),
            self.values[start..end].to_vec(),
            self.step_minutes,
        )
    }

    /// Same timestamps, values transformed elementwise.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.timestamps.clone(),
            self.values.iter().map(|&v| f(v)).collect(),
            self.step_minutes,
        )
    }

    /// Appends `other`, which must start exactly one step after `self` ends.
    pub fn concat(&self, other: &TimeSeries) -> Result<Self> {
        let mut ts = self.timestamps.clone();
        ts.extend_from_slice(&other.timestamps);
        let mut vs = self.values.clone();
        vs.extend_from_slice(&other.values);
        Self::new(ts, vs, self.step_minutes)
    }
}

fn check_spacing(timestamps: &[NaiveDateTime], step_minutes: i64) -> Result<()> {
    let step = chrono::Duration::minutes(step_minutes);
    let mut bad = Vec::new();
    let mut detail = Vec::new();
    for (i, w) in timestamps.windows(2).enumerate() {
        let diff = w[1] - w[0];
        if diff != step {
            bad.push(i + 1);
            if diff > step {
                let mut t = w[0] + step;
                while t < w[1] && detail.len() < 16 {
                    detail.push(format!("missing slot {t}"));
                    t += step;
                }
            } else {
                detail.push(format!(
                    "row {} at {} is {} min after previous",
                    i + 1,
                    w[1],
                    diff.num_minutes()
                ));
            }
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Gap {
            indices: bad,
            step_minutes,
            detail: detail.join("; "),
        })
    }
}

/// Names of the timestamp and load columns in an input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMap {
    pub timestamp: String,
    pub load: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            load: "load".into(),
        }
    }
}

/// Parses an ISO-8601 timestamp (with or without offset) or integer epoch seconds.
pub fn parse_timestamp(raw: &str) -> Option<NaiveDateTime> {
    let s = raw.trim();
    if let Ok(secs) = s.parse::<i64>() {
        return DateTime::from_timestamp(secs, 0).map(|d| d.naive_utc());
    }
    if let Ok(d) = DateTime::parse_from_rfc3339(s) {
        return Some(d.naive_utc());
    }
    const FORMATS: [&str; 6] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %H:%M",
    ];
    for f in FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t);
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Reads a load CSV, sorts rows by timestamp and infers the sampling step
/// as the most frequent positive spacing.
pub fn load_csv(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<TimeSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, columns)
}

pub fn read_csv<R: std::io::Read>(reader: R, columns: &ColumnMap) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Schema(e.to_string()))?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Schema(format!(
                "missing column `{name}` (have {:?})",
                headers.iter().collect::<Vec<_>>()
            ))
        })
    };
    let ts_col = find(&columns.timestamp)?;
    let load_col = find(&columns.load)?;

    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // data rows are numbered from 1, header excluded
        let row = i + 1;
        let rec = rec.map_err(|e| Error::DataRow {
            row,
            msg: e.to_string(),
        })?;
        let raw_ts = rec.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(raw_ts).ok_or_else(|| Error::DataRow {
            row,
            msg: format!("unparseable timestamp `{raw_ts}`"),
        })?;
        let raw_load = rec.get(load_col).unwrap_or("");
        let load: f64 = raw_load.parse().map_err(|_| Error::DataRow {
            row,
            msg: format!("unparseable load `{raw_load}`"),
        })?;
        if !load.is_finite() {
            return Err(Error::DataRow {
                row,
                msg: format!("non-finite load `{raw_load}`"),
            });
        }
        rows.push((ts, load));
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            have: rows.len(),
        });
    }
    rows.sort_by_key(|r| r.0);

    let mut counts: HashMap<i64, usize> = HashMap::new();
    for w in rows.windows(2) {
        let d = (w[1].0 - w[0].0).num_minutes();
        if d > 0 {
            *counts.entry(d).or_default() += 1;
        }
    }
    let step = counts
        .into_iter()
        .max_by_key(|&(d, c)| (c, std::cmp::Reverse(d)))
        .map(|(d, _)| d)
        .ok_or_else(|| Error::Data("all timestamps identical".into()))?;

    let (timestamps, values) = rows.into_iter().unzip();
    TimeSeries::new(timestamps, values, step)
}

/// Min-max scaling bounds fitted on the training partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub min_value: f64,
    pub max_value: f64,
}

impl NormalizationParams {
    pub fn new(min_value: f64, max_value: f64) -> Result<Self> {
        if !(max_value > min_value) || !min_value.is_finite() || !max_value.is_finite() {
            return Err(Error::Config(format!(
                "invalid normalization range [{min_value}, {max_value}]"
            )));
        }
        Ok(Self { min_value, max_value })
    }

    fn range(&self) -> f64 {
        self.max_value - self.min_value
    }

    pub fn normalize_value(&self, x: f64) -> f64 {
        (x - self.min_value) / self.range()
    }

    pub fn denormalize_value(&self, z: f64) -> f64 {
        z * self.range() + self.min_value
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.normalize_value(v)).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.denormalize_value(v)).collect()
    }
}

pub fn fit_normalizer(train: &TimeSeries) -> Result<NormalizationParams> {
    let (lo, hi) = train
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if lo == hi {
        return Err(Error::DegenerateRange(lo));
    }
    NormalizationParams::new(lo, hi)
}

/// Free-function form of [`NormalizationParams::normalize`].
pub fn normalize(x: &[f64], p: &NormalizationParams) -> Vec<f64> {
    p.normalize(x)
}

pub fn denormalize(z: &[f64], p: &NormalizationParams) -> Vec<f64> {
    p.denormalize(z)
}

/// Look-back/horizon geometry of one sample. The sample length is
/// `lookback + horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            lookback: 288,
            horizon: 12,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn sample_len(&self) -> usize {
        self.lookback + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "window lookback/horizon/stride must be positive: {self:?}"
            )));
        }
        if self.lookback < self.horizon {
            return Err(Error::Config(format!(
                "lookback {} shorter than horizon {}",
                self.lookback, self.horizon
            )));
        }
        Ok(())
    }
}

/// One window of the source series: `lookback` conditioning points
/// followed by `horizon` target points.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub lookback: usize,
    pub horizon: usize,
    /// Offset of `values[0]` in the source series.
    pub time_index: usize,
    /// Timestamp of `values[0]`.
    pub start: NaiveDateTime,
    /// Timestamp of the first horizon point.
    pub horizon_start: NaiveDateTime,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lookback_values(&self) -> &[f64] {
        &self.values[..self.lookback]
    }

    pub fn horizon_values(&self) -> &[f64] {
        &self.values[self.lookback..]
    }
}

pub fn window_count(len: usize, spec: &WindowSpec) -> usize {
    let m = spec.sample_len();
    if len < m {
        0
    } else {
        (len - m) / spec.stride + 1
    }
}

pub fn make_windows(series: &TimeSeries, spec: &WindowSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let m = spec.sample_len();
    if series.len() < m {
        return Err(Error::InsufficientData {
            needed: m,
            have: series.len(),
        });
    }
    Ok((0..window_count(series.len(), spec))
        .map(|i| {
            let start = i * spec.stride;
            Sample {
                values: series.values()[start..start + m].to_vec(),
                lookback: spec.lookback,
                horizon: spec.horizon,
                time_index: start,
                start: series.timestamps()[start],
                horizon_start: series.timestamps()[start + spec.lookback],
            }
        })
        .collect())
}

/// Windows whose horizon lies entirely inside `target`, with look-back
/// allowed to reach into the tail of `context` (the preceding partition).
/// `time_index` is relative to `target`; it is negative-free because it
/// counts from the start of the concatenated context tail.
pub fn make_eval_windows(context: Option<&TimeSeries>, target: &TimeSeries, spec: &WindowSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let joined = match context {
        Some(ctx) if ctx.len() >= spec.lookback => {
            let tail = ctx.slice(ctx.len() - spec.lookback, ctx.len())?;
            tail.concat(target)?
        }
        _ => target.clone(),
    };
    make_windows(&joined, spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Ratio,
    DateRange,
}

/// Inclusive calendar-date interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateInterval {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub ratio: [f64; 3],
    pub train_range: Option<DateInterval>,
    /// When absent in date-range mode, validation is the last
    /// `val_fraction` of the training range.
    pub val_range: Option<DateInterval>,
    pub test_range: Option<DateInterval>,
    pub val_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::Ratio,
            ratio: [0.8, 0.1, 0.1],
            train_range: None,
            val_range: None,
            test_range: None,
            val_fraction: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SplitMode::Ratio => {
                if self.ratio.iter().any(|&r| !(r > 0.0)) {
                    return Err(Error::Config(format!(
                        "split ratios must be positive: {:?}",
                        self.ratio
                    )));
                }
                let sum: f64 = self.ratio.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
                }
            }
            SplitMode::DateRange => {
                let train = self
                    .train_range
                    .ok_or_else(|| Error::Config("date-range split needs train_range".into()))?;
                let test = self
                    .test_range
                    .ok_or_else(|| Error::Config("date-range split needs test_range".into()))?;
                let mut ordered = vec![train];
                ordered.extend(self.val_range);
                ordered.push(test);
                for r in &ordered {
                    if r.start > r.end {
                        return Err(Error::Config(format!("interval {r:?} ends before it starts")));
                    }
                }
                for w in ordered.windows(2) {
                    if w[0].end >= w[1].start {
                        return Err(Error::Config(format!(
                            "date ranges overlap or are out of order: {:?} then {:?}",
                            w[0], w[1]
                        )));
                    }
                }
                if self.val_range.is_none() && !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "val_fraction {} not in (0,1)",
                        self.val_fraction
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: TimeSeries,
    pub val: TimeSeries,
    pub test: TimeSeries,
}

pub fn split(series: &TimeSeries, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = series.len();
    let bounds = match spec.mode {
        SplitMode::Ratio => {
            let n_train = (n as f64 * spec.ratio[0]).round() as usize;
            let n_val = (n as f64 * spec.ratio[1]).round() as usize;
            let n_train = n_train.min(n);
            let n_val = n_val.min(n - n_train);
            [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)]
        }
        SplitMode::DateRange => {
            let ts = series.timestamps();
            let range_of = |iv: &DateInterval| {
                let lo = ts.partition_point(|t| t.date() < iv.start);
                let hi = ts.partition_point(|t| t.date() <= iv.end);
                (lo, hi.max(lo))
            };
            let train = range_of(spec.train_range.as_ref().unwrap());
            let test = range_of(spec.test_range.as_ref().unwrap());
            let (train, val) = match &spec.val_range {
                Some(v) => (train, range_of(v)),
                None => {
                    let len = train.1 - train.0;
                    let n_val = (len as f64 * spec.val_fraction).round() as usize;
                    ((train.0, train.1 - n_val), (train.1 - n_val, train.1))
                }
            };
            [train, val, test]
        }
    };
    let names = ["train", "validation", "test"];
    for (name, &(lo, hi)) in names.iter().zip(&bounds) {
        if hi <= lo + 1 {
            return Err(Error::Config(format!(
                "{name} partition has {} point(s); need at least 2",
                hi.saturating_sub(lo)
            )));
        }
    }
    Ok(Splits {
        train: series.slice(bounds[0].0, bounds[0].1)?,
        val: series.slice(bounds[1].0, bounds[1].1)?,
        test: series.slice(bounds[2].0, bounds[2].1)?,
    })
}
