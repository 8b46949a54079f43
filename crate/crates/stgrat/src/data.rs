//! Sensor-speed ingestion, normalization, windowing, and chronological
//! splitting.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDateTime;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Time-by-node speed observations on a uniform five-minute grid.
/// Missing entries are stored as 0 with the observed mask cleared.
#[derive(Clone, Debug)]
pub struct SpeedTable {
    timestamps: Vec<i64>,
    node_ids: Vec<String>,
    index: HashMap<String, usize>,
    speeds: Matrix,
    observed: Vec<bool>,
    /// Set when consecutive timestamps deviate from the first spacing
    /// by more than one second.
    pub irregular_spacing: bool,
}

impl SpeedTable {
    pub fn new(
        timestamps: Vec<i64>,
        node_ids: Vec<String>,
        speeds: Matrix,
        observed: Vec<bool>,
    ) -> Result<Self> {
        let (t, n) = (timestamps.len(), node_ids.len());
        if speeds.shape() != (t, n) {
            return Err(Error::Shape(format!(
                "speed table: {:?} grid for {} timestamps x {} nodes",
                speeds.shape(),
                t,
                n
            )));
        }
        if observed.len() != t * n {
            return Err(Error::Shape(format!(
                "speed table: mask length {} for {} cells",
                observed.len(),
                t * n
            )));
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Data(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        for (k, (&s, &m)) in speeds.data().iter().zip(&observed).enumerate() {
            if m && (s < 0.0 || !s.is_finite()) {
                return Err(Error::Data(format!(
                    "observed speed at cell {k} must be finite and nonnegative, got {s}"
                )));
            }
        }
        let irregular_spacing = if t >= 2 {
            let step = timestamps[1] - timestamps[0];
            timestamps
                .windows(2)
                .any(|w| (w[1] - w[0] - step).abs() > 1)
        } else {
            false
        };
        let mut index = HashMap::new();
        for (i, id) in node_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate node id {id}")));
            }
        }
        Ok(SpeedTable {
            timestamps,
            node_ids,
            index,
            speeds,
            observed,
            irregular_spacing,
        })
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn timestamp(&self, t: usize) -> i64 {
        self.timestamps[t]
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    #[inline]
    pub fn speed(&self, t: usize, n: usize) -> f64 {
        self.speeds.get(t, n)
    }

    #[inline]
    pub fn observed(&self, t: usize, n: usize) -> bool {
        self.observed[t * self.node_count() + n]
    }

    /// Fraction of the day elapsed at step `t`, in `[0, 1)`.
    pub fn time_of_day(&self, t: usize) -> f64 {
        time_of_day(self.timestamps[t])
    }

    /// One node's full speed series with its observed mask.
    pub fn node_series(&self, n: usize) -> (Vec<f64>, Vec<bool>) {
        let speeds = (0..self.len()).map(|t| self.speed(t, n)).collect();
        let mask = (0..self.len()).map(|t| self.observed(t, n)).collect();
        (speeds, mask)
    }
}

pub fn time_of_day(epoch_seconds: i64) -> f64 {
    (epoch_seconds.rem_euclid(86_400)) as f64 / 86_400.0
}

fn parse_timestamp(text: &str, line: usize) -> Result<i64> {
    let trimmed = text.trim();
    if let Ok(epoch) = trimmed.parse::<i64>() {
        return Ok(epoch);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(trimmed, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(Error::Data(format!(
        "line {line}: unparseable timestamp {trimmed:?}"
    )))
}

/// Loads a speed CSV with header `timestamp,<node_id_1>,...`; empty
/// cells are recorded as missing.
pub fn load_speed_table(path: impl AsRef<Path>) -> Result<SpeedTable> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.is_empty() || headers.get(0).map(str::trim) != Some("timestamp") {
        return Err(Error::Data(format!(
            "{}: header must start with 'timestamp'",
            path.display()
        )));
    }
    let node_ids: Vec<String> = headers.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if node_ids.is_empty() {
        return Err(Error::Data(format!("{}: no node columns", path.display())));
    }

    let n = node_ids.len();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    let mut observed = Vec::new();
    let mut seen = HashMap::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        if record.len() != n + 1 {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, got {}",
                n + 1,
                record.len()
            )));
        }
        let ts = parse_timestamp(record.get(0).unwrap_or(""), line)?;
        if let Some(prev) = seen.insert(ts, line) {
            return Err(Error::Data(format!(
                "line {line}: duplicate timestamp (first seen on line {prev})"
            )));
        }
        timestamps.push(ts);
        for field in record.iter().skip(1) {
            let cell = field.trim();
            if cell.is_empty() {
                values.push(0.0);
                observed.push(false);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Data(format!("line {line}: bad speed value {cell:?}")))?;
                values.push(v);
                observed.push(true);
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let rows = timestamps.len();
    SpeedTable::new(timestamps, node_ids, Matrix::from_vec(rows, n, values)?, observed)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NormMethod {
    Zscore,
    MinMax,
}

impl NormMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(NormMethod::Zscore),
            "minmax" => Ok(NormMethod::MinMax),
            other => Err(Error::Config(format!(
                "unknown normalization method {other:?} (expected zscore or minmax)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            NormMethod::Zscore => "zscore",
            NormMethod::MinMax => "minmax",
        }
    }
}

/// Speed-channel normalization constants, fitted on the training rows
/// only. Time-of-day is always mapped to `[0, 1)` separately.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationStats {
    pub method: NormMethod,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl NormalizationStats {
    /// Fits constants over observed entries in rows `[0, train_rows)`.
    pub fn fit(table: &SpeedTable, method: NormMethod, train_rows: usize) -> Result<Self> {
        let rows = train_rows.min(table.len());
        let mut count = 0usize;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for t in 0..rows {
            for n in 0..table.node_count() {
                if table.observed(t, n) {
                    let v = table.speed(t, n);
                    count += 1;
                    sum += v;
                    min = min.min(v);
                    max = max.max(v);
                }
            }
        }
        if count == 0 {
            return Err(Error::Data("normalization: no observed training entries".into()));
        }
        let mean = sum / count as f64;
        let mut var = 0.0;
        for t in 0..rows {
            for n in 0..table.node_count() {
                if table.observed(t, n) {
                    let d = table.speed(t, n) - mean;
                    var += d * d;
                }
            }
        }
        let std = (var / count as f64).sqrt();
        match method {
            NormMethod::Zscore if std == 0.0 => {
                return Err(Error::Data("normalization: zero standard deviation".into()))
            }
            NormMethod::MinMax if max == min => {
                return Err(Error::Data("normalization: max equals min".into()))
            }
            _ => {}
        }
        Ok(NormalizationStats { method, mean, std, min, max })
    }

    pub fn normalize_value(&self, x: f64) -> f64 {
        match self.method {
            NormMethod::Zscore => (x - self.mean) / self.std,
            NormMethod::MinMax => (x - self.min) / (self.max - self.min),
        }
    }

    pub fn denormalize_value(&self, x: f64) -> f64 {
        match self.method {
            NormMethod::Zscore => x * self.std + self.mean,
            NormMethod::MinMax => x * (self.max - self.min) + self.min,
        }
    }
}

/// Normalizes the speed channel with statistics fitted on rows
/// `[0, train_rows)` only; missing entries become 0 after normalization.
pub fn normalize(
    table: &SpeedTable,
    method: NormMethod,
    train_rows: usize,
) -> Result<(SpeedTable, NormalizationStats)> {
    let stats = NormalizationStats::fit(table, method, train_rows)?;
    let n = table.node_count();
    let mut speeds = Matrix::zeros(table.len(), n);
    let mut observed = Vec::with_capacity(table.len() * n);
    for t in 0..table.len() {
        for j in 0..n {
            let m = table.observed(t, j);
            observed.push(m);
            if m {
                speeds.set(t, j, stats.normalize_value(table.speed(t, j)));
            }
        }
    }
    let normalized = SpeedTable {
        timestamps: table.timestamps.clone(),
        node_ids: table.node_ids.clone(),
        index: table.index.clone(),
        speeds,
        observed,
        irregular_spacing: table.irregular_spacing,
    };
    Ok((normalized, stats))
}

/// Supervised windows over a speed table: contiguous `t_in` input rows
/// followed immediately by `t_out` target rows, stride 1.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    table: Arc<SpeedTable>,
    pub t_in: usize,
    pub t_out: usize,
    starts: Vec<usize>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn table(&self) -> &Arc<SpeedTable> {
        &self.table
    }

    /// Table row where example `i`'s input window begins.
    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    /// Table rows of example `i`'s target window.
    pub fn target_rows(&self, i: usize) -> std::ops::Range<usize> {
        let s = self.starts[i] + self.t_in;
        s..s + self.t_out
    }

    /// One past the last table row any example touches.
    pub fn row_end(&self) -> usize {
        self.starts
            .last()
            .map(|&s| s + self.t_in + self.t_out)
            .unwrap_or(0)
    }
}

pub fn make_windows(table: &Arc<SpeedTable>, t_in: usize, t_out: usize) -> Result<WindowedDataset> {
    if t_in == 0 || t_out == 0 {
        return Err(Error::Contract("make_windows: window lengths must be >= 1".into()));
    }
    let total = table.len();
    if total < t_in + t_out {
        return Err(Error::Data(format!(
            "table has {} rows, need at least {}",
            total,
            t_in + t_out
        )));
    }
    let starts = (0..=total - t_in - t_out).collect();
    Ok(WindowedDataset {
        table: Arc::clone(table),
        t_in,
        t_out,
        starts,
    })
}

/// Splits by example index in chronological order. Train and validation
/// sizes round down; the remainder goes to test.
pub fn chrono_split(
    dataset: &WindowedDataset,
    fractions: (f64, f64, f64),
) -> Result<(WindowedDataset, WindowedDataset, WindowedDataset)> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fe
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Data("chrono_split: empty dataset".into()));
    }
    let total = dataset.len();
    let n_train = (total as f64 * ft).floor() as usize;
    let n_val = (total as f64 * fv).floor() as usize;
    let make = |starts: Vec<usize>| WindowedDataset {
        table: Arc::clone(&dataset.table),
        t_in: dataset.t_in,
        t_out: dataset.t_out,
        starts,
    };
    Ok((
        make(dataset.starts[..n_train].to_vec()),
        make(dataset.starts[n_train..n_train + n_val].to_vec()),
        make(dataset.starts[n_train + n_val..].to_vec()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn table_of(rows: usize, nodes: usize) -> Arc<SpeedTable> {
        let timestamps = (0..rows as i64).map(|t| t * 300).collect();
        let node_ids = (0..nodes).map(|i| format!("s{i}")).collect();
        let speeds = Matrix::from_fn(rows, nodes, |t, n| 40.0 + t as f64 + n as f64);
        Arc::new(SpeedTable::new(timestamps, node_ids, speeds, vec![true; rows * nodes]).unwrap())
    }

    #[test]
    fn load_well_formed_table() {
        let f = write_csv("timestamp,a,b\n0,50.0,60.0\n300,51.0,61.0\n600,52.0,62.0\n");
        let t = load_speed_table(f.path()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.node_count(), 2);
        assert_eq!(t.speed(1, 1), 61.0);
        assert!(!t.irregular_spacing);
    }

    #[test]
    fn empty_cell_is_missing_zero() {
        let f = write_csv("timestamp,a,b\n0,50.0,\n300,51.0,61.0\n");
        let t = load_speed_table(f.path()).unwrap();
        assert_eq!(t.speed(0, 1), 0.0);
        assert!(!t.observed(0, 1));
        assert!(t.observed(0, 0));
    }

    #[test]
    fn duplicate_timestamp_names_row() {
        let f = write_csv("timestamp,a\n0,50.0\n300,51.0\n300,52.0\n");
        let err = load_speed_table(f.path()).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn ragged_row_is_error() {
        let f = write_csv("timestamp,a,b\n0,50.0,60.0\n300,51.0\n");
        assert!(load_speed_table(f.path()).is_err());
    }

    #[test]
    fn unparseable_timestamp_is_error() {
        let f = write_csv("timestamp,a\nnonsense,50.0\n");
        let err = load_speed_table(f.path()).unwrap_err().to_string();
        assert!(err.contains("nonsense"), "{err}");
    }

    #[test]
    fn iso_timestamps_parse() {
        let f = write_csv("timestamp,a\n2012-03-01 00:00:00,50.0\n2012-03-01 00:05:00,51.0\n");
        let t = load_speed_table(f.path()).unwrap();
        assert_eq!(t.timestamp(1) - t.timestamp(0), 300);
        assert_eq!(t.time_of_day(0), 0.0);
        assert!((t.time_of_day(1) - 300.0 / 86_400.0).abs() < 1e-12);
    }

    #[test]
    fn irregular_spacing_flagged() {
        let f = write_csv("timestamp,a\n0,1.0\n300,2.0\n700,3.0\n");
        let t = load_speed_table(f.path()).unwrap();
        assert!(t.irregular_spacing);
    }

    #[test]
    fn zscore_hand_case() {
        let timestamps = vec![0, 300];
        let speeds = Matrix::from_rows(&[vec![50.0], vec![70.0]]).unwrap();
        let table =
            SpeedTable::new(timestamps, vec!["a".into()], speeds, vec![true, true]).unwrap();
        let (norm, stats) = normalize(&table, NormMethod::Zscore, 2).unwrap();
        assert_eq!(stats.mean, 60.0);
        assert_eq!(stats.std, 10.0);
        assert!((stats.normalize_value(60.0)).abs() < 1e-12);
        assert_eq!(norm.speed(0, 0), -1.0);
    }

    #[test]
    fn normalize_round_trip() {
        let table = table_of(10, 3);
        let (_, stats) = normalize(&table, NormMethod::Zscore, 10).unwrap();
        for v in [40.0, 47.5, 52.0] {
            assert!((stats.denormalize_value(stats.normalize_value(v)) - v).abs() < 1e-9);
        }
        let (_, mm) = normalize(&table, NormMethod::MinMax, 10).unwrap();
        for v in [40.0, 47.5, 52.0] {
            assert!((mm.denormalize_value(mm.normalize_value(v)) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn stats_use_training_rows_only() {
        // Crafted so train-only and full-table statistics differ.
        let timestamps = vec![0, 300, 600, 900];
        let speeds = Matrix::from_rows(&[vec![10.0], vec![20.0], vec![90.0], vec![95.0]]).unwrap();
        let table = SpeedTable::new(timestamps, vec!["a".into()], speeds, vec![true; 4]).unwrap();
        let train_only = NormalizationStats::fit(&table, NormMethod::Zscore, 2).unwrap();
        let full = NormalizationStats::fit(&table, NormMethod::Zscore, 4).unwrap();
        assert_eq!(train_only.mean, 15.0);
        assert!(train_only.mean != full.mean);
    }

    #[test]
    fn missing_entry_normalizes_to_zero() {
        let timestamps = vec![0, 300];
        let speeds = Matrix::from_rows(&[vec![50.0], vec![0.0]]).unwrap();
        let table =
            SpeedTable::new(timestamps, vec!["a".into()], speeds, vec![true, false]).unwrap();
        // Need two distinct observed values for zscore; use minmax here.
        let err = normalize(&table, NormMethod::Zscore, 2);
        assert!(err.is_err(), "single observed value has zero std");
        let timestamps = vec![0, 300, 600];
        let speeds = Matrix::from_rows(&[vec![50.0], vec![0.0], vec![70.0]]).unwrap();
        let table = SpeedTable::new(
            timestamps,
            vec!["a".into()],
            speeds,
            vec![true, false, true],
        )
        .unwrap();
        let (norm, _) = normalize(&table, NormMethod::Zscore, 3).unwrap();
        assert_eq!(norm.speed(1, 0), 0.0);
        assert!(!norm.observed(1, 0));
    }

    #[test]
    fn window_count_formula() {
        let table = table_of(24, 2);
        assert_eq!(make_windows(&table, 12, 12).unwrap().len(), 1);
        let table = table_of(26, 2);
        assert_eq!(make_windows(&table, 12, 12).unwrap().len(), 3);
        let table = table_of(23, 2);
        assert!(make_windows(&table, 12, 12).is_err());
    }

    #[test]
    fn split_seven_one_two() {
        let table = table_of(33, 2);
        let ds = make_windows(&table, 12, 12).unwrap();
        assert_eq!(ds.len(), 10);
        let (train, val, test) = chrono_split(&ds, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (7, 1, 2));
        // Chronology: the train window rows end before validation begins.
        assert!(train.start(train.len() - 1) < val.start(0));
    }

    #[test]
    fn split_bad_fractions_is_error() {
        let table = table_of(30, 1);
        let ds = make_windows(&table, 12, 12).unwrap();
        assert!(chrono_split(&ds, (0.7, 0.2, 0.2)).is_err());
    }

    #[test]
    fn time_of_day_midnight_is_zero() {
        assert_eq!(time_of_day(0), 0.0);
        assert_eq!(time_of_day(86_400 * 3), 0.0);
        assert!((time_of_day(43_200) - 0.5).abs() < 1e-12);
    }
}
