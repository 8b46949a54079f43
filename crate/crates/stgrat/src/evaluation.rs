//! Metrics, horizon and time-of-day slicing, changepoint-based
//! impeded-interval extraction, and attention-weight export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::attention::{AttentionRecord, GraphArtifacts};
use crate::data::{NormalizationStats, SpeedTable, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Matrix;

/// MAE, RMSE, and MAPE (percent) over one set of samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// Streaming accumulator used by all slicing paths.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    abs_sum: f64,
    sq_sum: f64,
    count: usize,
    pct_sum: f64,
    pct_count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, truth: f64) {
        let d = pred - truth;
        self.abs_sum += d.abs();
        self.sq_sum += d * d;
        self.count += 1;
        // Zero-truth entries are excluded from MAPE only.
        if truth != 0.0 {
            self.pct_sum += (d.abs() / truth.abs()) * 100.0;
            self.pct_count += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Option<Metrics> {
        if self.count == 0 {
            return None;
        }
        Some(Metrics {
            mae: self.abs_sum / self.count as f64,
            rmse: (self.sq_sum / self.count as f64).sqrt(),
            mape: if self.pct_count > 0 {
                self.pct_sum / self.pct_count as f64
            } else {
                0.0
            },
        })
    }
}

/// Masked MAE/RMSE/MAPE; errors when the mask admits no samples.
pub fn metrics(pred: &Matrix, truth: &Matrix, mask: &[bool]) -> Result<Metrics> {
    if pred.shape() != truth.shape() || mask.len() != pred.len() {
        return Err(Error::Shape(format!(
            "metrics: pred {:?}, truth {:?}, mask {}",
            pred.shape(),
            truth.shape(),
            mask.len()
        )));
    }
    let mut acc = MetricAccumulator::default();
    for ((&p, &t), &m) in pred.data().iter().zip(truth.data()).zip(mask) {
        if m {
            acc.push(p, t);
        }
    }
    acc.finish()
        .ok_or_else(|| Error::Contract("metrics: no mask-true entries".into()))
}

/// Row label inside a [`MetricReport`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Horizon {
    /// 1-based prediction step (3 = 15 min at five-minute spacing).
    Step(usize),
    /// Average over every step.
    Average,
}

impl Horizon {
    pub fn label(&self) -> String {
        match self {
            Horizon::Step(s) => s.to_string(),
            Horizon::Average => "avg".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HorizonMetrics {
    pub horizon: Horizon,
    pub count: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub slice: String,
    pub rows: Vec<HorizonMetrics>,
}

/// Model forecasts over a dataset together with everything needed to
/// slice them: ground truth, masks, and timestamps.
pub struct ForecastSet {
    pub t_out: usize,
    pub n: usize,
    pub preds: Vec<Matrix>,
    pub target_starts: Vec<usize>,
    pub table: Arc<SpeedTable>,
}

impl ForecastSet {
    /// Visits every (example, step, node) sample whose truth is observed.
    pub fn for_each_observed(&self, mut f: impl FnMut(Sample)) {
        for (ex, pred) in self.preds.iter().enumerate() {
            let start = self.target_starts[ex];
            for step in 0..self.t_out {
                let row = start + step;
                for node in 0..self.n {
                    if self.table.observed(row, node) {
                        f(Sample {
                            example: ex,
                            step,
                            node,
                            row,
                            pred: pred.get(step, node),
                            truth: self.table.speed(row, node),
                            timestamp: self.table.timestamp(row),
                        });
                    }
                }
            }
        }
    }
}

/// One observed (example, step, node) prediction/truth pair.
#[derive(Clone, Copy, Debug)]
pub struct Sample {
    pub example: usize,
    pub step: usize,
    pub node: usize,
    pub row: usize,
    pub pred: f64,
    pub truth: f64,
    pub timestamp: i64,
}

/// Runs eval-mode forecasts over the whole dataset in minibatches.
pub fn collect_forecasts(
    model: &Model,
    art: &GraphArtifacts,
    dataset: &WindowedDataset,
    stats: &NormalizationStats,
    eval_batch: usize,
) -> Result<ForecastSet> {
    if dataset.is_empty() {
        return Err(Error::Data("collect_forecasts: empty dataset".into()));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut preds = Vec::with_capacity(dataset.len());
    let mut target_starts = Vec::with_capacity(dataset.len());
    for chunk in indices.chunks(eval_batch.max(1)) {
        let mut out = model.forecast_batch(art, dataset, chunk, stats)?;
        preds.append(&mut out);
        for &ex in chunk {
            target_starts.push(dataset.start(ex) + dataset.t_in);
        }
    }
    Ok(ForecastSet {
        t_out: dataset.t_out,
        n: dataset.table().node_count(),
        preds,
        target_starts,
        table: Arc::clone(dataset.table()),
    })
}

fn report_from_accumulators(
    slice: impl Into<String>,
    per_step: &[MetricAccumulator],
    horizons: &[usize],
    total: MetricAccumulator,
) -> MetricReport {
    let mut rows = Vec::new();
    for &h in horizons {
        if h == 0 || h > per_step.len() {
            continue;
        }
        let acc = per_step[h - 1];
        rows.push(HorizonMetrics {
            horizon: Horizon::Step(h),
            count: acc.count(),
            metrics: acc.finish(),
        });
    }
    rows.push(HorizonMetrics {
        horizon: Horizon::Average,
        count: total.count(),
        metrics: total.finish(),
    });
    MetricReport { slice: slice.into(), rows }
}

/// Per-horizon metrics (steps in `horizons`, 1-based) plus the average
/// over all steps.
pub fn horizon_report(set: &ForecastSet, horizons: &[usize]) -> Result<MetricReport> {
    let mut per_step = vec![MetricAccumulator::default(); set.t_out];
    let mut total = MetricAccumulator::default();
    set.for_each_observed(|s| {
        per_step[s.step].push(s.pred, s.truth);
        total.push(s.pred, s.truth);
    });
    if total.count() == 0 {
        return Err(Error::Contract("horizon_report: no observed targets".into()));
    }
    Ok(report_from_accumulators("all", &per_step, horizons, total))
}

/// Splits samples by the wall-clock hour of their target step into
/// `[start, end)` hour ranges and reports each range separately.
pub fn time_range_metrics(
    set: &ForecastSet,
    ranges: &[(f64, f64)],
    horizons: &[usize],
) -> Result<Vec<MetricReport>> {
    for (i, &(s, e)) in ranges.iter().enumerate() {
        if !(0.0..=24.0).contains(&s) || !(0.0..=24.0).contains(&e) || s >= e {
            return Err(Error::Contract(format!(
                "time range {i} [{s}, {e}) is invalid"
            )));
        }
        for &(s2, e2) in &ranges[i + 1..] {
            if s < e2 && s2 < e {
                return Err(Error::Contract(format!(
                    "time ranges [{s}, {e}) and [{s2}, {e2}) overlap"
                )));
            }
        }
    }
    let mut per_range: Vec<(Vec<MetricAccumulator>, MetricAccumulator)> = ranges
        .iter()
        .map(|_| (vec![MetricAccumulator::default(); set.t_out], MetricAccumulator::default()))
        .collect();
    set.for_each_observed(|s| {
        let hour = s.timestamp.rem_euclid(86_400) as f64 / 3_600.0;
        for (ri, &(lo, hi)) in ranges.iter().enumerate() {
            if hour >= lo && hour < hi {
                per_range[ri].0[s.step].push(s.pred, s.truth);
                per_range[ri].1.push(s.pred, s.truth);
                break;
            }
        }
    });
    Ok(ranges
        .iter()
        .zip(per_range)
        .map(|(&(lo, hi), (steps, total))| {
            report_from_accumulators(format!("{lo:02.0}-{hi:02.0}"), &steps, horizons, total)
        })
        .collect())
}

/// PELT segmentation parameters; the defaults follow the analysis
/// protocol (penalty 10, jump 1, minimum segment size 6).
#[derive(Clone, Copy, Debug)]
pub struct PeltParams {
    pub penalty: f64,
    pub jump: usize,
    pub min_size: usize,
}

impl Default for PeltParams {
    fn default() -> Self {
        PeltParams { penalty: 10.0, jump: 1, min_size: 6 }
    }
}

/// Pruned exact linear-time changepoint detection with an L2 segment
/// cost (sum of squared deviations from the segment mean). Returns the
/// internal breakpoints in increasing order; candidate breakpoints are
/// restricted to multiples of `jump` and every segment spans at least
/// `min_size` points.
pub fn pelt_changepoints(signal: &[f64], params: &PeltParams) -> Result<Vec<usize>> {
    let n = signal.len();
    let PeltParams { penalty, jump, min_size } = *params;
    if jump == 0 || min_size == 0 {
        return Err(Error::Contract("pelt: jump and min_size must be >= 1".into()));
    }
    if n < 2 * min_size {
        return Err(Error::Contract(format!(
            "pelt: signal length {n} is shorter than 2 * min_size = {}",
            2 * min_size
        )));
    }

    let mut sum = vec![0.0; n + 1];
    let mut sumsq = vec![0.0; n + 1];
    for (i, &v) in signal.iter().enumerate() {
        sum[i + 1] = sum[i] + v;
        sumsq[i + 1] = sumsq[i] + v * v;
    }
    let cost = |s: usize, e: usize| -> f64 {
        let len = (e - s) as f64;
        let total = sum[e] - sum[s];
        (sumsq[e] - sumsq[s]) - total * total / len
    };

    // Admissible segment ends: internal multiples of jump that leave
    // room for min_size on both sides, then the series end.
    let mut ends: Vec<usize> = (1..n)
        .filter(|t| t % jump == 0 && *t >= min_size && *t + min_size <= n)
        .collect();
    ends.push(n);

    let mut best_cost: BTreeMap<usize, f64> = BTreeMap::new();
    let mut prev: BTreeMap<usize, usize> = BTreeMap::new();
    best_cost.insert(0, -penalty);
    let mut admissible: Vec<usize> = vec![0];

    for &t in &ends {
        let mut best = f64::INFINITY;
        let mut arg = usize::MAX;
        for &s in &admissible {
            if t < s + min_size {
                continue;
            }
            let c = best_cost[&s] + cost(s, t) + penalty;
            if c < best {
                best = c;
                arg = s;
            }
        }
        if arg == usize::MAX {
            continue;
        }
        best_cost.insert(t, best);
        prev.insert(t, arg);
        // PELT prune: a start that already exceeds the new optimum can
        // never win later (L2 cost is superadditive over concatenation).
        admissible.retain(|&s| {
            t < s + min_size || best_cost[&s] + cost(s, t) <= best
        });
        if t < n {
            admissible.push(t);
        }
    }

    let mut breakpoints = Vec::new();
    let mut at = n;
    while at != 0 {
        let p = *prev
            .get(&at)
            .ok_or_else(|| Error::Contract("pelt: no feasible segmentation".into()))?;
        if p != 0 {
            breakpoints.push(p);
        }
        at = p;
    }
    breakpoints.reverse();
    Ok(breakpoints)
}

/// A changepoint-delimited stretch of one node's series whose slowest
/// observed speed falls below the congestion threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct ImpededInterval {
    pub node: String,
    /// Inclusive start index into the speed table.
    pub start: usize,
    /// Exclusive end index.
    pub end: usize,
    pub min_speed: f64,
}

/// Segments `node`'s speed series and keeps the segments whose minimum
/// observed speed is below `threshold` (mph). Segments with no observed
/// entries are skipped.
pub fn impeded_intervals(
    table: &SpeedTable,
    node: &str,
    params: &PeltParams,
    threshold: f64,
) -> Result<Vec<ImpededInterval>> {
    let idx = table
        .node_index(node)
        .ok_or_else(|| Error::Graph(format!("unknown node id {node}")))?;
    let (series, mask) = table.node_series(idx);
    let mut bounds = pelt_changepoints(&series, params)?;
    bounds.push(series.len());
    let mut out = Vec::new();
    let mut start = 0usize;
    for end in bounds {
        let min = series[start..end]
            .iter()
            .zip(&mask[start..end])
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::INFINITY, f64::min);
        if min.is_finite() && min < threshold {
            out.push(ImpededInterval {
                node: node.to_string(),
                start,
                end,
                min_speed: min,
            });
        }
        start = end;
    }
    Ok(out)
}

/// Metrics restricted to prediction targets that fall inside an impeded
/// interval of their node. Intervals are detected on ground truth; the
/// map is keyed by node index.
pub fn impeded_metrics(
    set: &ForecastSet,
    intervals: &BTreeMap<usize, Vec<ImpededInterval>>,
    horizons: &[usize],
) -> Result<MetricReport> {
    let mut per_step = vec![MetricAccumulator::default(); set.t_out];
    let mut total = MetricAccumulator::default();
    set.for_each_observed(|s| {
        if let Some(list) = intervals.get(&s.node) {
            if list.iter().any(|iv| s.row >= iv.start && s.row < iv.end) {
                per_step[s.step].push(s.pred, s.truth);
                total.push(s.pred, s.truth);
            }
        }
    });
    if total.count() == 0 {
        return Err(Error::Contract(
            "impeded_metrics: no prediction targets overlap the intervals".into(),
        ));
    }
    Ok(report_from_accumulators("impeded", &per_step, horizons, total))
}

/// Writes a metric report CSV: `slice,horizon,metric,value,count`.
pub fn write_metric_reports(reports: &[MetricReport], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "slice,horizon,metric,value,count")?;
    for report in reports {
        for row in &report.rows {
            let h = row.horizon.label();
            match &row.metrics {
                Some(m) => {
                    writeln!(out, "{},{},mae,{},{}", report.slice, h, m.mae, row.count)?;
                    writeln!(out, "{},{},rmse,{},{}", report.slice, h, m.rmse, row.count)?;
                    writeln!(out, "{},{},mape,{},{}", report.slice, h, m.mape, row.count)?;
                }
                None => {
                    writeln!(out, "{},{},mae,,0", report.slice, h)?;
                }
            }
        }
    }
    Ok(())
}

/// Runs one recording forecast and writes the spatial attention weights
/// as CSV rows `layer,head,direction,time_step,query_node,key_node,weight`.
/// The sentinel appears as key id `__sentinel__`; exact zeros are
/// omitted. Returns the number of data rows written.
pub fn export_attention(
    model: &Model,
    art: &GraphArtifacts,
    dataset: &WindowedDataset,
    index: usize,
    stats: &NormalizationStats,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let (_, records) = model.forecast_recorded(art, dataset, index, stats)?;
    write_attention_csv(&records, dataset.table().node_ids(), path)
}

/// Writes spatial attention records; temporal records (no direction)
/// are skipped.
pub fn write_attention_csv(
    records: &[AttentionRecord],
    node_ids: &[String],
    path: impl AsRef<Path>,
) -> Result<usize> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "layer,head,direction,time_step,query_node,key_node,weight")?;
    let mut rows = 0usize;
    for r in records {
        let Some(direction) = r.direction else { continue };
        let query = &node_ids[r.query];
        for &(key, w) in &r.weights {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.layer,
                r.head,
                direction.label(),
                r.time_step,
                query,
                node_ids[key],
                w
            )?;
            rows += 1;
        }
        if let Some(sw) = r.sentinel_weight {
            writeln!(
                out,
                "{},{},{},{},{},__sentinel__,{}",
                r.layer,
                r.head,
                direction.label(),
                r.time_step,
                query,
                sw
            )?;
            rows += 1;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metrics_perfect_prediction() {
        let p = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let m = metrics(&p, &p, &[true, true]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, 0.0));
    }

    #[test]
    fn metrics_hand_case() {
        let pred = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let truth = Matrix::from_rows(&[vec![1.0, 3.0, 5.0]]).unwrap();
        let m = metrics(&pred, &truth, &[true; 3]).unwrap();
        assert!((m.mae - 1.0).abs() < 1e-12);
        assert!((m.rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((m.mape - 100.0 * (0.0 + 1.0 / 3.0 + 2.0 / 5.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_zero_truth_excluded_from_mape_only() {
        let pred = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let truth = Matrix::from_rows(&[vec![0.0, 4.0]]).unwrap();
        let m = metrics(&pred, &truth, &[true, true]).unwrap();
        assert!((m.mae - 1.5).abs() < 1e-12);
        assert!((m.mape - 50.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_empty_mask_is_error() {
        let p = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(metrics(&p, &p, &[false]).is_err());
    }

    #[test]
    fn metrics_match_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let n = rng.random_range(100..10_000);
            let pred = Matrix::from_fn(n, 1, |_, _| rng.random_range(0.0..80.0));
            let truth = Matrix::from_fn(n, 1, |_, _| rng.random_range(0.0..80.0));
            let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.9).collect();
            let m = metrics(&pred, &truth, &mask).unwrap();

            let mut abs = 0.0;
            let mut sq = 0.0;
            let mut c = 0usize;
            let mut pct = 0.0;
            let mut pc = 0usize;
            for i in 0..n {
                if mask[i] {
                    let d = pred.get(i, 0) - truth.get(i, 0);
                    abs += d.abs();
                    sq += d * d;
                    c += 1;
                    if truth.get(i, 0) != 0.0 {
                        pct += d.abs() / truth.get(i, 0) * 100.0;
                        pc += 1;
                    }
                }
            }
            assert!((m.mae - abs / c as f64).abs() < 1e-12);
            assert!((m.rmse - (sq / c as f64).sqrt()).abs() < 1e-12);
            assert!((m.mape - pct / pc as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pelt_constant_signal_has_no_breakpoints() {
        let signal = vec![5.0; 40];
        let bp = pelt_changepoints(&signal, &PeltParams::default()).unwrap();
        assert!(bp.is_empty());
    }

    #[test]
    fn pelt_step_signal_breaks_at_step() {
        let mut signal = vec![0.0; 15];
        signal.extend(vec![10.0; 15]);
        let bp = pelt_changepoints(&signal, &PeltParams::default()).unwrap();
        assert_eq!(bp, vec![15]);
    }

    #[test]
    fn pelt_too_short_signal_is_error() {
        assert!(pelt_changepoints(&[1.0; 11], &PeltParams::default()).is_err());
    }

    /// Exhaustive minimum over all admissible segmentations.
    fn exhaustive_best(signal: &[f64], params: &PeltParams) -> (f64, Vec<usize>) {
        let n = signal.len();
        let mut sum = vec![0.0; n + 1];
        let mut sumsq = vec![0.0; n + 1];
        for (i, &v) in signal.iter().enumerate() {
            sum[i + 1] = sum[i] + v;
            sumsq[i + 1] = sumsq[i] + v * v;
        }
        let cost = |s: usize, e: usize| -> f64 {
            let len = (e - s) as f64;
            let total = sum[e] - sum[s];
            (sumsq[e] - sumsq[s]) - total * total / len
        };
        let mut best = (f64::INFINITY, Vec::new());
        fn recurse(
            start: usize,
            n: usize,
            params: &PeltParams,
            cost: &dyn Fn(usize, usize) -> f64,
            acc_cost: f64,
            acc_bps: &mut Vec<usize>,
            best: &mut (f64, Vec<usize>),
        ) {
            // Close the final segment here.
            if n - start >= params.min_size {
                let total = acc_cost + cost(start, n);
                if total < best.0 {
                    *best = (total, acc_bps.clone());
                }
            }
            let mut next = start + params.min_size;
            while next + params.min_size <= n {
                if next % params.jump == 0 {
                    acc_bps.push(next);
                    recurse(
                        next,
                        n,
                        params,
                        cost,
                        acc_cost + cost(start, next) + params.penalty,
                        acc_bps,
                        best,
                    );
                    acc_bps.pop();
                }
                next += 1;
            }
        }
        let mut bps = Vec::new();
        recurse(0, n, params, &cost, 0.0, &mut bps, &mut best);
        best
    }

    #[test]
    fn pelt_matches_exhaustive_oracle_on_short_signals() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let params = PeltParams { penalty: 10.0, jump: 1, min_size: 6 };
        for trial in 0..120 {
            let n = rng.random_range(12..=30);
            let mut signal = Vec::with_capacity(n);
            let mut level = rng.random_range(0.0..60.0);
            for _ in 0..n {
                if rng.random::<f64>() < 0.12 {
                    level = rng.random_range(0.0..60.0);
                }
                signal.push(level + rng.random_range(-1.0..1.0));
            }
            let got = pelt_changepoints(&signal, &params).unwrap();
            let (_, want) = exhaustive_best(&signal, &params);
            assert_eq!(got, want, "trial {trial}, signal {signal:?}");
        }
    }

    #[test]
    fn pelt_respects_jump_candidates() {
        let mut signal = vec![0.0; 16];
        signal.extend(vec![20.0; 14]);
        let params = PeltParams { penalty: 10.0, jump: 4, min_size: 6 };
        let got = pelt_changepoints(&signal, &params).unwrap();
        let (_, want) = exhaustive_best(&signal, &params);
        assert_eq!(got, want);
        assert!(got.iter().all(|b| b % 4 == 0));
    }

    fn dip_table() -> SpeedTable {
        // 60 steps: fast, dip to ~10 mph, fast again.
        let mut speeds = Vec::new();
        for t in 0..60 {
            if (20..30).contains(&t) {
                speeds.push(10.0 + 0.1 * (t % 3) as f64);
            } else {
                speeds.push(60.0 + 0.1 * (t % 5) as f64);
            }
        }
        SpeedTable::new(
            (0..60).map(|t| t * 300).collect(),
            vec!["a".into()],
            Matrix::from_vec(60, 1, speeds).unwrap(),
            vec![true; 60],
        )
        .unwrap()
    }

    #[test]
    fn impeded_intervals_find_the_dip() {
        let table = dip_table();
        let out = impeded_intervals(&table, "a", &PeltParams::default(), 20.0).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].start >= 18 && out[0].start <= 21, "start {}", out[0].start);
        assert!(out[0].end >= 29 && out[0].end <= 32, "end {}", out[0].end);
        assert!(out[0].min_speed < 20.0);
    }

    #[test]
    fn impeded_intervals_empty_when_fast() {
        let table = SpeedTable::new(
            (0..40).map(|t| t * 300).collect(),
            vec!["a".into()],
            Matrix::from_fn(40, 1, |t, _| 55.0 + (t % 7) as f64),
            vec![true; 40],
        )
        .unwrap();
        let out = impeded_intervals(&table, "a", &PeltParams::default(), 20.0).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn impeded_intervals_disjoint_and_ordered() {
        let mut speeds = Vec::new();
        for block in 0..5 {
            let base = if block % 2 == 0 { 60.0 } else { 8.0 };
            for k in 0..12 {
                speeds.push(base + 0.2 * (k % 4) as f64);
            }
        }
        let table = SpeedTable::new(
            (0..60).map(|t| t * 300).collect(),
            vec!["a".into()],
            Matrix::from_vec(60, 1, speeds).unwrap(),
            vec![true; 60],
        )
        .unwrap();
        let out = impeded_intervals(&table, "a", &PeltParams::default(), 20.0).unwrap();
        assert!(out.len() >= 2);
        for w in out.windows(2) {
            assert!(w[0].end <= w[1].start);
        }
        for iv in &out {
            assert!(iv.end > iv.start);
        }
    }

    fn synthetic_set(seed: u64, rows: usize, n: usize, t_out: usize) -> ForecastSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = Arc::new(
            SpeedTable::new(
                (0..rows as i64).map(|t| t * 300).collect(),
                (0..n).map(|i| format!("s{i}")).collect(),
                Matrix::from_fn(rows, n, |_, _| rng.random_range(20.0..70.0)),
                (0..rows * n).map(|_| rng.random::<f64>() < 0.95).collect(),
            )
            .unwrap(),
        );
        let examples = rows - t_out;
        let preds = (0..examples)
            .map(|_| Matrix::from_fn(t_out, n, |_, _| rng.random_range(20.0..70.0)))
            .collect();
        ForecastSet {
            t_out,
            n,
            preds,
            target_starts: (0..examples).collect(),
            table,
        }
    }

    #[test]
    fn single_full_range_equals_unsliced() {
        let set = synthetic_set(3, 120, 3, 4);
        let all = horizon_report(&set, &[3]).unwrap();
        let ranged = time_range_metrics(&set, &[(0.0, 24.0)], &[3]).unwrap();
        let a = all.rows.last().unwrap().metrics.unwrap();
        let b = ranged[0].rows.last().unwrap().metrics.unwrap();
        assert!((a.mae - b.mae).abs() < 1e-12);
        assert!((a.rmse - b.rmse).abs() < 1e-12);
    }

    #[test]
    fn empty_range_reports_zero_count() {
        // All timestamps sit inside hour 0..1 (steps of 5 minutes from 0).
        let set = synthetic_set(5, 10, 2, 3);
        let reports = time_range_metrics(&set, &[(6.0, 12.0), (0.0, 6.0)], &[3]).unwrap();
        let empty = &reports[0];
        assert_eq!(empty.rows.last().unwrap().count, 0);
        assert!(empty.rows.last().unwrap().metrics.is_none());
        assert!(reports[1].rows.last().unwrap().count > 0);
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let set = synthetic_set(6, 10, 2, 3);
        assert!(time_range_metrics(&set, &[(0.0, 7.0), (6.0, 12.0)], &[3]).is_err());
    }

    #[test]
    fn range_slicing_matches_hand_partition() {
        // Two regimes within one day; per-range metrics must match
        // slicing the samples by hand.
        let set = synthetic_set(9, 288, 2, 3);
        let ranges = [(0.0, 12.0), (12.0, 24.0)];
        let reports = time_range_metrics(&set, &ranges, &[3]).unwrap();
        for (ri, &(lo, hi)) in ranges.iter().enumerate() {
            let mut acc = MetricAccumulator::default();
            set.for_each_observed(|s| {
                let hour = s.timestamp.rem_euclid(86_400) as f64 / 3_600.0;
                if hour >= lo && hour < hi {
                    acc.push(s.pred, s.truth);
                }
            });
            let want = acc.finish().unwrap();
            let got = reports[ri].rows.last().unwrap().metrics.unwrap();
            assert!((want.mae - got.mae).abs() < 1e-12);
            assert!((want.mape - got.mape).abs() < 1e-12);
        }
    }

    #[test]
    fn slice_weighted_combination_recovers_unsliced_mae() {
        let set = synthetic_set(11, 288, 3, 4);
        let ranges = [(0.0, 6.0), (6.0, 12.0), (12.0, 18.0), (18.0, 24.0)];
        let reports = time_range_metrics(&set, &ranges, &[]).unwrap();
        let mut weighted = 0.0;
        let mut total = 0usize;
        for r in &reports {
            let row = r.rows.last().unwrap();
            if let Some(m) = row.metrics {
                weighted += m.mae * row.count as f64;
                total += row.count;
            }
        }
        let unsliced = horizon_report(&set, &[]).unwrap();
        let all = unsliced.rows.last().unwrap();
        assert_eq!(total, all.count);
        assert!((weighted / total as f64 - all.metrics.unwrap().mae).abs() < 1e-9);
    }

    #[test]
    fn impeded_full_coverage_equals_unsliced_and_empty_errors() {
        let set = synthetic_set(13, 60, 2, 3);
        let mut full = BTreeMap::new();
        for node in 0..2 {
            full.insert(
                node,
                vec![ImpededInterval {
                    node: format!("s{node}"),
                    start: 0,
                    end: 60,
                    min_speed: 10.0,
                }],
            );
        }
        let report = impeded_metrics(&set, &full, &[]).unwrap();
        let unsliced = horizon_report(&set, &[]).unwrap();
        assert!(
            (report.rows.last().unwrap().metrics.unwrap().mae
                - unsliced.rows.last().unwrap().metrics.unwrap().mae)
                .abs()
                < 1e-12
        );

        let empty = BTreeMap::new();
        assert!(impeded_metrics(&set, &empty, &[]).is_err());
    }

    #[test]
    fn impeded_half_coverage_matches_hand_masking() {
        let set = synthetic_set(17, 60, 2, 3);
        let mut half = BTreeMap::new();
        half.insert(
            0usize,
            vec![ImpededInterval { node: "s0".into(), start: 0, end: 30, min_speed: 5.0 }],
        );
        let report = impeded_metrics(&set, &half, &[]).unwrap();
        let mut acc = MetricAccumulator::default();
        set.for_each_observed(|s| {
            if s.node == 0 && s.row < 30 {
                acc.push(s.pred, s.truth);
            }
        });
        let want = acc.finish().unwrap();
        let got = report.rows.last().unwrap().metrics.unwrap();
        assert!((want.mae - got.mae).abs() < 1e-12);
        assert_eq!(report.rows.last().unwrap().count, acc.count());
    }
}
