//! Metrics, the historical-average baseline, the low-rank error floor,
//! rolling multi-step evaluation, and hyperparameter search.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit, forecast, HwDmdHyper, HwDmdModel};
use crate::par;
use crate::regression::LagSpec;
use crate::snapshot::{SnapshotSeries, MIN_OD_LAG};

/// RMSE, WMAPE (percent), and R² over a pooled element slice. WMAPE and R²
/// are `None` when their denominator vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub wmape: Option<f64>,
    pub r2: Option<f64>,
}

/// Pooled metrics over paired flat series.
pub fn metrics(actual: &[f64], predicted: &[f64]) -> Result<MetricReport> {
    if actual.is_empty() {
        return Err(Error::InsufficientData("empty metric input".into()));
    }
    if actual.len() != predicted.len() {
        return Err(Error::DimensionMismatch(format!(
            "actual has {} elements, predicted {}",
            actual.len(),
            predicted.len()
        )));
    }
    let n = actual.len() as f64;
    let mut sq_err = 0.0;
    let mut abs_err = 0.0;
    let mut abs_actual = 0.0;
    let mut sum_actual = 0.0;
    for (&a, &p) in actual.iter().zip(predicted) {
        sq_err += (a - p) * (a - p);
        abs_err += (a - p).abs();
        abs_actual += a.abs();
        sum_actual += a;
    }
    let mean = sum_actual / n;
    let var: f64 = actual.iter().map(|&a| (a - mean) * (a - mean)).sum();
    Ok(MetricReport {
        rmse: (sq_err / n).sqrt(),
        wmape: (abs_actual > 0.0).then(|| abs_err / abs_actual * 100.0),
        r2: (var > 0.0).then(|| 1.0 - sq_err / var),
    })
}

/// Historical average: each within-day slot is predicted by its mean over
/// the training days, identically at every horizon.
#[derive(Debug, Clone)]
pub struct HistoricalAverage {
    pub slot_means: Vec<DVector<f64>>,
}

/// Fit the baseline over a range of training days.
pub fn historical_average(
    series: &SnapshotSeries,
    day_range: std::ops::Range<usize>,
) -> Result<HistoricalAverage> {
    let d = series.calendar.intervals_per_day;
    let days = day_range.len();
    if days == 0 || day_range.end * d > series.len() {
        return Err(Error::InsufficientData(format!(
            "day range {day_range:?} not covered by series"
        )));
    }
    let n = series.n();
    let mut slot_means = vec![DVector::zeros(n); d];
    for day in day_range.clone() {
        for (slot, mean) in slot_means.iter_mut().enumerate() {
            *mean += &series.od[day * d + slot];
        }
    }
    for m in &mut slot_means {
        *m /= days as f64;
    }
    Ok(HistoricalAverage { slot_means })
}

impl HistoricalAverage {
    pub fn predict(&self, slot: usize) -> &DVector<f64> {
        &self.slot_means[slot]
    }
}

/// Half-open interval slice `[start, end)` in global 0-based indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSlice {
    pub start: usize,
    pub end: usize,
}

impl EvalSlice {
    pub fn days(day_range: std::ops::Range<usize>, d: usize) -> EvalSlice {
        EvalSlice { start: day_range.start * d, end: day_range.end * d }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Metrics of the rank-constrained projection `U_Y U_Yᵀ y` against `y` over
/// the slice: the error floor for any forecast confined to span(U_Y).
pub fn low_rank_bound(
    series: &SnapshotSeries,
    u_y: &DMatrix<f64>,
    slice: EvalSlice,
) -> Result<(MetricReport, MetricReport)> {
    if slice.is_empty() || slice.end > series.len() {
        return Err(Error::InvalidParameter(format!("bad slice {slice:?}")));
    }
    let mut od_actual = Vec::new();
    let mut od_pred = Vec::new();
    let mut b_actual = Vec::new();
    let mut b_pred = Vec::new();
    for t in slice.start..slice.end {
        let y = &series.od[t];
        let proj = u_y * (u_y.transpose() * y);
        od_actual.extend(y.iter());
        od_pred.extend(proj.iter());
        b_actual.extend(series.boarding[t].iter());
        b_pred.extend(SnapshotSeries::boarding_from_od(series.s, &proj).iter());
    }
    Ok((metrics(&od_actual, &od_pred)?, metrics(&b_actual, &b_pred)?))
}

/// Pooled actual/predicted pairs for one horizon and quantity.
#[derive(Debug, Clone, Default)]
pub struct PairedSeries {
    pub actual: Vec<f64>,
    pub predicted: Vec<f64>,
}

/// Rolling-forecast output over a slice: per-horizon pooled series for OD
/// and boarding flow, plus the per-target forecasts for breakdowns.
#[derive(Debug, Clone)]
pub struct RollingEval {
    /// `od[k-1]` pools every (k)-step OD forecast over the slice.
    pub od: Vec<PairedSeries>,
    pub boarding: Vec<PairedSeries>,
    /// One-step OD forecast per target interval in the slice (same order).
    pub one_step_od: Vec<DVector<f64>>,
}

/// Forecast every target in the slice at horizons `1..=horizon` using the
/// rolling substitution rules, pooling results per horizon. Anchors are
/// evaluated independently (in parallel with the `parallel` feature).
pub fn rolling_eval(
    model: &HwDmdModel,
    series: &SnapshotSeries,
    slice: EvalSlice,
    horizon: usize,
    clamp: bool,
) -> Result<RollingEval> {
    let q_h = model.hyper.lags.max_lag();
    if slice.is_empty() || slice.end > series.len() {
        return Err(Error::InvalidParameter(format!("bad slice {slice:?}")));
    }
    if slice.start < q_h + horizon - 1 {
        return Err(Error::InsufficientData(format!(
            "slice start {} leaves no room for lag {q_h} plus horizon {horizon}",
            slice.start
        )));
    }
    // forecasts[i] holds horizons 1..=horizon issued at anchor t = start+i-...
    let targets: Vec<usize> = (slice.start..slice.end).collect();
    let per_target = par::map_slice(&targets, |&target| {
        // for each horizon k the anchor observes t = target+1-k intervals
        let mut row = Vec::with_capacity(horizon);
        for k in 1..=horizon {
            let t = target + 1 - k;
            let block = forecast(model, series, t, k, clamp)?;
            row.push(block.od[k - 1].clone());
        }
        Ok::<_, Error>(row)
    });

    let mut od = vec![PairedSeries::default(); horizon];
    let mut boarding = vec![PairedSeries::default(); horizon];
    let mut one_step_od = Vec::with_capacity(targets.len());
    for (i, row) in per_target.into_iter().enumerate() {
        let row = row?;
        let target = targets[i];
        for (k, od_hat) in row.into_iter().enumerate() {
            let b_hat = SnapshotSeries::boarding_from_od(series.s, &od_hat);
            od[k].actual.extend(series.od[target].iter());
            od[k].predicted.extend(od_hat.iter());
            boarding[k].actual.extend(series.boarding[target].iter());
            boarding[k].predicted.extend(b_hat.iter());
            if k == 0 {
                one_step_od.push(od_hat);
            }
        }
    }
    Ok(RollingEval { od, boarding, one_step_od })
}

/// Per-horizon metric pairs (OD, boarding) from a rolling evaluation.
pub fn horizon_reports(eval: &RollingEval) -> Result<Vec<(MetricReport, MetricReport)>> {
    eval.od
        .iter()
        .zip(&eval.boarding)
        .map(|(o, b)| Ok((metrics(&o.actual, &o.predicted)?, metrics(&b.actual, &b.predicted)?)))
        .collect()
}

/// One-step OD RMSE of a model over a slice; the scalar minimized by the
/// tuning searches.
pub fn one_step_od_rmse(
    model: &HwDmdModel,
    series: &SnapshotSeries,
    slice: EvalSlice,
) -> Result<f64> {
    let eval = rolling_eval(model, series, slice, 1, false)?;
    Ok(metrics(&eval.od[0].actual, &eval.od[0].predicted)?.rmse)
}

/// Per-slot one-step OD RMSE over a slice (the time-of-day breakdown).
pub fn per_slot_rmse(
    series: &SnapshotSeries,
    slice: EvalSlice,
    one_step_od: &[DVector<f64>],
) -> Vec<(usize, f64)> {
    let d = series.calendar.intervals_per_day;
    let mut acc: Vec<(f64, usize)> = vec![(0.0, 0); d];
    for (i, target) in (slice.start..slice.end).enumerate() {
        let slot = series.calendar.slot_of(target);
        let diff = &series.od[target] - &one_step_od[i];
        acc[slot].0 += diff.norm_squared();
        acc[slot].1 += series.n();
    }
    acc.into_iter()
        .enumerate()
        .filter(|(_, (_, count))| *count > 0)
        .map(|(slot, (sq, count))| (slot, (sq / count as f64).sqrt()))
        .collect()
}

/// Per-magnitude-bin one-step OD RMSE: OD pairs are grouped by their average
/// flow over the slice using powers of two as bin boundaries. Returns
/// `(bin exponent, pair count, rmse)` where pairs in bin `i` satisfy
/// `2^(i-1) <= avg < 2^i` (bin 0 holds avg < 1).
pub fn magnitude_bin_rmse(
    series: &SnapshotSeries,
    slice: EvalSlice,
    one_step_od: &[DVector<f64>],
) -> Vec<(u32, usize, f64)> {
    let n = series.n();
    let count = (slice.end - slice.start) as f64;
    let mut avg = vec![0.0f64; n];
    for target in slice.start..slice.end {
        for (pair, &v) in series.od[target].iter().enumerate() {
            avg[pair] += v;
        }
    }
    for v in &mut avg {
        *v /= count;
    }
    let bin_of = |a: f64| -> u32 {
        if a < 1.0 {
            0
        } else {
            a.log2().floor() as u32 + 1
        }
    };
    let max_bin = avg.iter().map(|&a| bin_of(a)).max().unwrap_or(0);
    let mut sq = vec![0.0f64; max_bin as usize + 1];
    let mut counts = vec![0usize; max_bin as usize + 1];
    for (i, target) in (slice.start..slice.end).enumerate() {
        for pair in 0..n {
            let bin = bin_of(avg[pair]) as usize;
            let diff = series.od[target][pair] - one_step_od[i][pair];
            sq[bin] += diff * diff;
            counts[bin] += 1;
        }
    }
    (0..=max_bin)
        .filter(|&b| counts[b as usize] > 0)
        .map(|b| {
            let pairs = avg.iter().filter(|&&a| bin_of(a) == b).count();
            (b, pairs, (sq[b as usize] / counts[b as usize] as f64).sqrt())
        })
        .collect()
}

/// One recorded tuning decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    /// `lag-eval`, `lag-accept`, `rank-eval`, `rank-accept`, `rho-eval`,
    /// `rho-accept`.
    pub stage: String,
    pub round: usize,
    pub detail: String,
    pub rmse: f64,
}

/// Outcome of the hyperparameter searches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneResult {
    pub od_lags: Vec<usize>,
    pub r_x: usize,
    pub r_y: usize,
    pub rho: f64,
    pub trace: Vec<TraceEntry>,
}

/// Maximum number of OD lags accepted by the greedy search.
pub const MAX_LAGS: usize = 10;

/// Default rank grid: 20 to 100 at an interval of 10.
pub fn default_rank_grid() -> Vec<usize> {
    (2..=10).map(|k| 10 * k).collect()
}

/// Default forgetting-ratio grid: a line search from 0.80 to 1.00 in 0.01
/// steps.
pub fn default_rho_grid() -> Vec<f64> {
    (80..=100).map(|k| k as f64 / 100.0).collect()
}

fn capped_hyper(
    series: &SnapshotSeries,
    lags: &LagSpec,
    r_x: usize,
    r_y: usize,
    rho: f64,
    train_end: usize,
) -> HwDmdHyper {
    let m = train_end.saturating_sub(lags.max_lag());
    let r_x = r_x.min(lags.input_rows(series.s)).min(m).max(1);
    let r_y = r_y.min(series.n()).min(m).max(1);
    HwDmdHyper { lags: lags.clone(), r_x, r_y, rho }
}

fn validation_rmse(
    series: &SnapshotSeries,
    hyper: &HwDmdHyper,
    train_end: usize,
    val: EvalSlice,
) -> Result<f64> {
    let model = fit(&series.head(train_end), hyper)?;
    one_step_od_rmse(&model, series, val)
}

/// Greedily add the candidate lag that most reduces validation one-step OD
/// RMSE; stop when no candidate improves or [`MAX_LAGS`] lags are selected.
/// Candidate evaluations within a round run in parallel.
pub fn greedy_lag_search(
    series: &SnapshotSeries,
    candidates: &[usize],
    train_end: usize,
    val: EvalSlice,
    r_x: usize,
    r_y: usize,
    rho: f64,
) -> Result<TuneResult> {
    let candidates: Vec<usize> = candidates
        .iter()
        .cloned()
        .filter(|&c| c >= MIN_OD_LAG && c < train_end)
        .collect();
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("empty lag candidate set".into()));
    }
    let mut selected: Vec<usize> = Vec::new();
    let mut best_rmse = f64::INFINITY;
    let mut trace = Vec::new();
    let mut round = 1usize;

    while selected.len() < MAX_LAGS {
        let remaining: Vec<usize> = candidates
            .iter()
            .cloned()
            .filter(|c| !selected.contains(c))
            .collect();
        if remaining.is_empty() {
            break;
        }
        let scores = par::map_slice(&remaining, |&cand| {
            let mut lags = selected.clone();
            lags.push(cand);
            lags.sort_unstable();
            let spec = LagSpec::new(lags).expect("validated candidates");
            let hyper = capped_hyper(series, &spec, r_x, r_y, rho, train_end);
            validation_rmse(series, &hyper, train_end, val)
        });
        let mut round_best: Option<(usize, f64)> = None;
        for (&cand, score) in remaining.iter().zip(scores) {
            let rmse = score?;
            trace.push(TraceEntry {
                stage: "lag-eval".into(),
                round,
                detail: format!("lag {cand}"),
                rmse,
            });
            let better = match round_best {
                None => true,
                Some((_, best)) => rmse < best,
            };
            if better {
                round_best = Some((cand, rmse));
            }
        }
        let (cand, rmse) = round_best.expect("nonempty remaining");
        if rmse < best_rmse {
            best_rmse = rmse;
            selected.push(cand);
            selected.sort_unstable();
            trace.push(TraceEntry {
                stage: "lag-accept".into(),
                round,
                detail: format!("lag {cand}"),
                rmse,
            });
        } else {
            break;
        }
        round += 1;
    }
    if selected.is_empty() {
        return Err(Error::InsufficientData(
            "no candidate lag produced a usable model".into(),
        ));
    }
    Ok(TuneResult { od_lags: selected, r_x, r_y, rho, trace })
}

/// Sequential grid search over `(r_X, r_Y)` followed by a line search over
/// ρ, both scored by validation one-step OD RMSE. Grid points are evaluated
/// in parallel; selection is deterministic in grid order.
pub fn rank_and_rho_search(
    series: &SnapshotSeries,
    lags: &LagSpec,
    rank_grid_x: &[usize],
    rank_grid_y: &[usize],
    rho_grid: &[f64],
    train_end: usize,
    val: EvalSlice,
) -> Result<TuneResult> {
    if rank_grid_x.is_empty() || rank_grid_y.is_empty() || rho_grid.is_empty() {
        return Err(Error::InvalidParameter("empty search grid".into()));
    }
    let mut trace = Vec::new();

    let pairs: Vec<(usize, usize)> = rank_grid_x
        .iter()
        .flat_map(|&rx| rank_grid_y.iter().map(move |&ry| (rx, ry)))
        .collect();
    let scores = par::map_slice(&pairs, |&(rx, ry)| {
        let hyper = capped_hyper(series, lags, rx, ry, 1.0, train_end);
        validation_rmse(series, &hyper, train_end, val)
    });
    let mut best: Option<((usize, usize), f64)> = None;
    for (&(rx, ry), score) in pairs.iter().zip(scores) {
        let rmse = score?;
        trace.push(TraceEntry {
            stage: "rank-eval".into(),
            round: 1,
            detail: format!("r_x {rx} r_y {ry}"),
            rmse,
        });
        if best.is_none_or(|(_, b)| rmse < b) {
            best = Some(((rx, ry), rmse));
        }
    }
    let ((r_x, r_y), rank_rmse) = best.expect("nonempty grid");
    trace.push(TraceEntry {
        stage: "rank-accept".into(),
        round: 1,
        detail: format!("r_x {r_x} r_y {r_y}"),
        rmse: rank_rmse,
    });

    let rho_scores = par::map_slice(rho_grid, |&rho| {
        let hyper = capped_hyper(series, lags, r_x, r_y, rho, train_end);
        validation_rmse(series, &hyper, train_end, val)
    });
    let mut best_rho: Option<(f64, f64)> = None;
    for (&rho, score) in rho_grid.iter().zip(rho_scores) {
        let rmse = score?;
        trace.push(TraceEntry {
            stage: "rho-eval".into(),
            round: 2,
            detail: format!("rho {rho}"),
            rmse,
        });
        if best_rho.is_none_or(|(_, b)| rmse < b) {
            best_rho = Some((rho, rmse));
        }
    }
    let (rho, rho_rmse) = best_rho.expect("nonempty rho grid");
    trace.push(TraceEntry {
        stage: "rho-accept".into(),
        round: 2,
        detail: format!("rho {rho}"),
        rmse: rho_rmse,
    });

    Ok(TuneResult { od_lags: lags.od_lags().to_vec(), r_x, r_y, rho, trace })
}
