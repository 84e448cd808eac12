//! Assembly of the lagged regression system: target matrix `Y`, augmented
//! input matrix `X` (lagged OD blocks stacked over two boarding-lag blocks),
//! and the exponential day-level column weights.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::{SnapshotSeries, MIN_OD_LAG};

/// OD time lags `q_1 < … < q_h` (all ≥ 3) plus the fixed boarding lags {1, 2}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagSpec {
    od_lags: Vec<usize>,
}

impl LagSpec {
    pub fn new(od_lags: Vec<usize>) -> Result<Self> {
        if od_lags.is_empty() {
            return Err(Error::InvalidParameter("need at least one OD lag".into()));
        }
        if od_lags[0] < MIN_OD_LAG {
            return Err(Error::InvalidParameter(format!(
                "smallest OD lag must be >= {MIN_OD_LAG}, got {}",
                od_lags[0]
            )));
        }
        if !od_lags.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidParameter(
                "OD lags must be strictly increasing".into(),
            ));
        }
        Ok(LagSpec { od_lags })
    }

    pub fn od_lags(&self) -> &[usize] {
        &self.od_lags
    }

    /// Number of OD lags (`h`).
    pub fn h(&self) -> usize {
        self.od_lags.len()
    }

    /// Largest OD lag (`q_h`).
    pub fn max_lag(&self) -> usize {
        *self.od_lags.last().unwrap()
    }

    /// Row count of the augmented input: `h·n + 2s`.
    pub fn input_rows(&self, s: usize) -> usize {
        self.h() * s * s + 2 * s
    }
}

/// Target matrix `Y`, augmented input `X`, and the day ordinal per column.
/// Columns are ordered oldest to newest.
#[derive(Debug, Clone)]
pub struct RegressionPair {
    /// n×m target, column j = snapshot at global interval `q_h + j`.
    pub y: DMatrix<f64>,
    /// (h·n+2s)×m input; row blocks are OD lags ascending, then boarding
    /// lag 1, then boarding lag 2.
    pub x: DMatrix<f64>,
    /// Day ordinal of each column.
    pub col_day: Vec<usize>,
}

impl RegressionPair {
    pub fn m(&self) -> usize {
        self.y.ncols()
    }
}

/// Exponential day-level forgetting. The per-squared-error weight for data
/// aged `j` days is `ρ^j`; each column of `Y` and `X` is scaled by
/// `σ^j = √ρ^j` so the weighted least squares reproduces the weighted
/// objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub rho: f64,
}

impl WeightSchedule {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "forgetting ratio must be in (0, 1], got {rho}"
            )));
        }
        Ok(WeightSchedule { rho })
    }

    /// Weight of the squared-error term for data `age_days` old: `ρ^age`.
    pub fn loss_weight(&self, age_days: usize) -> f64 {
        self.rho.powi(age_days as i32)
    }

    /// Column scale for data `age_days` old: `σ^age` with `σ = √ρ`.
    pub fn column_scale(&self, age_days: usize) -> f64 {
        self.rho.sqrt().powi(age_days as i32)
    }
}

/// Build the regression pair over the first `t` intervals (1-based end).
pub fn build_pair(series: &SnapshotSeries, lags: &LagSpec, t: usize) -> Result<RegressionPair> {
    let q_h = lags.max_lag();
    if t > series.len() {
        return Err(Error::InsufficientData(format!(
            "t = {t} exceeds series length {}",
            series.len()
        )));
    }
    if t <= q_h {
        return Err(Error::InsufficientData(format!(
            "need t > largest lag q_h = {q_h}, got t = {t}"
        )));
    }
    let s = series.s;
    let n = series.n();
    let m = t - q_h;
    let rows = lags.input_rows(s);

    let mut y = DMatrix::zeros(n, m);
    let mut x = DMatrix::zeros(rows, m);
    let mut col_day = Vec::with_capacity(m);

    for j in 0..m {
        let target = q_h + j; // 0-based global interval of column j
        y.set_column(j, &series.od[target]);
        for (blk, &q) in lags.od_lags().iter().enumerate() {
            x.view_mut((blk * n, j), (n, 1)).copy_from(&series.od[target - q]);
        }
        x.view_mut((lags.h() * n, j), (s, 1)).copy_from(&series.boarding[target - 1]);
        x.view_mut((lags.h() * n + s, j), (s, 1)).copy_from(&series.boarding[target - 2]);
        col_day.push(series.calendar.day_of(target));
    }
    Ok(RegressionPair { y, x, col_day })
}

/// Per-column scales `σ^(day(last) − day(col))` for a pair's columns.
pub fn column_weights(col_day: &[usize], schedule: WeightSchedule) -> DVector<f64> {
    let latest = *col_day.last().expect("nonempty columns");
    DVector::from_iterator(
        col_day.len(),
        col_day.iter().map(|&d| schedule.column_scale(latest - d)),
    )
}

/// Scale the columns of `Y` and `X` by the day weights. `ρ = 1` returns the
/// pair unchanged.
pub fn apply_weights(pair: &RegressionPair, rho: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let schedule = WeightSchedule::new(rho)?;
    let mut yw = pair.y.clone();
    let mut xw = pair.x.clone();
    if rho < 1.0 {
        let w = column_weights(&pair.col_day, schedule);
        for j in 0..pair.m() {
            yw.column_mut(j).scale_mut(w[j]);
            xw.column_mut(j).scale_mut(w[j]);
        }
    }
    Ok((yw, xw))
}

/// One day's worth of targets and aligned lagged inputs, used by the online
/// update. Columns follow the `RegressionPair` layout exactly.
#[derive(Debug, Clone)]
pub struct DailyBatch {
    /// n×d targets for the day's intervals.
    pub y_new: DMatrix<f64>,
    /// (h·n+2s)×d inputs.
    pub x_new: DMatrix<f64>,
    /// Day ordinal of the batch.
    pub day: usize,
}

/// Extract the daily batch for `day` (0-based ordinal) from a full series.
pub fn daily_batch(series: &SnapshotSeries, lags: &LagSpec, day: usize) -> Result<DailyBatch> {
    let d = series.calendar.intervals_per_day;
    let s = series.s;
    let n = series.n();
    let q_h = lags.max_lag();
    let base = day * d;
    if base < q_h {
        return Err(Error::InsufficientData(format!(
            "day {day} starts at interval {base}, before largest lag {q_h}"
        )));
    }
    if base + d > series.len() {
        return Err(Error::InsufficientData(format!(
            "day {day} extends past series length {}",
            series.len()
        )));
    }
    let mut y_new = DMatrix::zeros(n, d);
    let mut x_new = DMatrix::zeros(lags.input_rows(s), d);
    for k in 0..d {
        let target = base + k;
        y_new.set_column(k, &series.od[target]);
        for (blk, &q) in lags.od_lags().iter().enumerate() {
            x_new.view_mut((blk * n, k), (n, 1)).copy_from(&series.od[target - q]);
        }
        x_new.view_mut((lags.h() * n, k), (s, 1)).copy_from(&series.boarding[target - 1]);
        x_new.view_mut((lags.h() * n + s, k), (s, 1)).copy_from(&series.boarding[target - 2]);
    }
    Ok(DailyBatch { y_new, x_new, day })
}
