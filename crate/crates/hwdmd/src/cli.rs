//! Command-line interface: ingestion, synthetic data, training, daily
//! updates, forecasting, evaluation, tuning, and spectral analysis.
//!
//! Every command prints a single JSON summary line on stdout; failures print
//! a JSON error record (`{"category", "message"}`) on stderr and exit
//! nonzero. A flat `key=value` config file can supply defaults; explicit
//! flags always win.

use clap::{Args, Parser, Subcommand};
use nalgebra::Normed;
use serde_json::json;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::estimator::{fit, forecast, HwDmdHyper};
use crate::eval::{
    default_rank_grid, default_rho_grid, greedy_lag_search, historical_average, horizon_reports,
    low_rank_bound, magnitude_bin_rmse, metrics, per_slot_rmse, rank_and_rho_search, rolling_eval,
    EvalSlice,
};
use crate::exact_dmd::exact_dmd;
use crate::io::{
    atomic_write, load_model, load_series, ring_from_series, save_model, save_series,
    series_from_ring, write_matrix_csv, LockGuard, ModelMeta, SavedModel,
};
use crate::online::{daily_update, UpdateOptions};
use crate::regression::{daily_batch, LagSpec};
use crate::snapshot::{build_series, parse_trip_csv, remap_trips, Calendar, SnapshotSeries};
use crate::synth::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Parser)]
#[command(name = "hwdmd", version, about = "High-order weighted DMD flow forecasting")]
pub struct Cli {
    /// Flat key=value config file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bin a trip CSV into a snapshot archive.
    Build(BuildArgs),
    /// Generate a seeded synthetic snapshot archive.
    Synth(SynthArgs),
    /// Fit a model on a snapshot archive.
    Train(TrainArgs),
    /// Fold one new day into an existing model.
    Update(UpdateArgs),
    /// Forecast future intervals from a model.
    Forecast(ForecastArgs),
    /// Score a model (and baselines) over a test range.
    Evaluate(EvaluateArgs),
    /// Search lags, ranks, and the forgetting ratio.
    Tune(TuneArgs),
    /// Eigenvalues and modes of the one-step snapshot propagator.
    Dmd(DmdArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Trip CSV with header `origin,destination,entry_time,exit_time`.
    #[arg(long)]
    pub trips: PathBuf,
    /// Output archive directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Interval length in minutes [default: 30].
    #[arg(long = "interval-min")]
    pub interval_min: Option<u32>,
    /// Intervals per service day [default: 36].
    #[arg(long = "intervals-per-day")]
    pub intervals_per_day: Option<usize>,
    /// Minutes after midnight when service opens [default: 360].
    #[arg(long = "day-start-min")]
    pub day_start_min: Option<u32>,
    /// Write matrices as CSV instead of binary.
    #[arg(long)]
    pub text: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output archive directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Station count [default: 4].
    #[arg(long)]
    pub stations: Option<usize>,
    /// Intervals per day [default: 12].
    #[arg(long = "intervals-per-day")]
    pub intervals_per_day: Option<usize>,
    /// Number of days [default: 10].
    #[arg(long)]
    pub days: Option<usize>,
    /// Latent dimension of the generator [default: 5].
    #[arg(long = "latent-rank")]
    pub latent_rank: Option<usize>,
    /// Noise standard deviation [default: 0.5].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Swap dynamics at the start of this day.
    #[arg(long = "regime-shift-day")]
    pub regime_shift_day: Option<usize>,
    /// RNG seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Round flows to non-negative integers.
    #[arg(long)]
    pub integerize: bool,
    /// Write matrices as CSV instead of binary.
    #[arg(long)]
    pub text: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Snapshot archive directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated OD lags, all >= 3 [default: 3,4,8].
    #[arg(long)]
    pub lags: Option<String>,
    /// Input truncation rank, capped to what the data supports [default: 100].
    #[arg(long)]
    pub rx: Option<usize>,
    /// Target truncation rank, capped likewise [default: 50].
    #[arg(long)]
    pub ry: Option<usize>,
    /// Forgetting ratio in (0, 1] [default: 1.0].
    #[arg(long)]
    pub rho: Option<f64>,
}

#[derive(Debug, Args)]
pub struct UpdateArgs {
    /// Model file to update in place (atomically).
    #[arg(long)]
    pub model: PathBuf,
    /// Snapshot archive covering history through the new day.
    #[arg(long)]
    pub data: PathBuf,
    /// Day ordinal to fold in [default: the day after the last update].
    #[arg(long)]
    pub day: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Snapshot archive; omitted, the model's own snapshot ring is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of observed intervals to forecast from [default: all].
    #[arg(long)]
    pub t: Option<usize>,
    /// Forecast horizon [default: 3].
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Zero negative OD entries before deriving boarding flow.
    #[arg(long)]
    pub clamp: bool,
    /// Write the OD forecasts (one column per horizon) to this CSV.
    #[arg(long = "out-od")]
    pub out_od: Option<PathBuf>,
    /// Write the boarding forecasts (one column per horizon) to this CSV.
    #[arg(long = "out-boarding")]
    pub out_boarding: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Snapshot archive.
    #[arg(long)]
    pub data: PathBuf,
    /// First test day (0-based) [default: the day after the model's last].
    #[arg(long = "start-day")]
    pub start_day: Option<usize>,
    /// One past the last test day [default: end of the archive].
    #[arg(long = "end-day")]
    pub end_day: Option<usize>,
    /// Largest horizon to score [default: 3].
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Zero negative OD entries before deriving boarding flow.
    #[arg(long)]
    pub clamp: bool,
    /// Metric table CSV destination [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write per-slot one-step OD RMSE to this CSV.
    #[arg(long = "per-slot-out")]
    pub per_slot_out: Option<PathBuf>,
    /// Also write per-magnitude-bin one-step OD RMSE to this CSV.
    #[arg(long = "bins-out")]
    pub bins_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    /// Snapshot archive.
    #[arg(long)]
    pub data: PathBuf,
    /// Training days (the rest of the head is never touched) [default: all
    /// but the validation days].
    #[arg(long = "train-days")]
    pub train_days: Option<usize>,
    /// Validation days at the end of the training window [default: 2].
    #[arg(long = "val-days")]
    pub val_days: Option<usize>,
    /// Comma-separated candidate lags [default: 3..=intervals-per-day].
    #[arg(long)]
    pub candidates: Option<String>,
    /// Rank used while searching lags [default: 100, capped].
    #[arg(long = "search-rank")]
    pub search_rank: Option<usize>,
    /// Comma-separated r_X grid [default: 20..=100 step 10].
    #[arg(long = "rx-grid")]
    pub rx_grid: Option<String>,
    /// Comma-separated r_Y grid [default: 20..=100 step 10].
    #[arg(long = "ry-grid")]
    pub ry_grid: Option<String>,
    /// Comma-separated rho grid [default: 0.80..=1.00 step 0.01].
    #[arg(long = "rho-grid")]
    pub rho_grid: Option<String>,
    /// Write the full result (including the RMSE trace) to this JSON file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DmdArgs {
    /// Snapshot archive.
    #[arg(long)]
    pub data: PathBuf,
    /// SVD truncation rank [default: 10].
    #[arg(long)]
    pub rank: Option<usize>,
    /// Eigenvalue CSV destination (index, re, im, magnitude) [default:
    /// stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the real part of the modes (one column per mode).
    #[arg(long = "modes-out")]
    pub modes_out: Option<PathBuf>,
}

/// Flat `key=value` file; `#` starts a comment.
fn load_config(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!(
                "config line {}: expected key=value, got `{line}`",
                lineno + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn cfg_parse<T: FromStr>(cfg: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match cfg.get(key) {
        None => Ok(None),
        Some(raw) => raw.parse().map(Some).map_err(|_| {
            Error::Parse(format!("config key `{key}`: bad value `{raw}`"))
        }),
    }
}

/// Fill an unset option from the config file.
fn merge<T: FromStr>(slot: &mut Option<T>, cfg: &HashMap<String, String>, key: &str) -> Result<()> {
    if slot.is_none() {
        *slot = cfg_parse(cfg, key)?;
    }
    Ok(())
}

fn merge_flag(slot: &mut bool, cfg: &HashMap<String, String>, key: &str) -> Result<()> {
    if !*slot {
        if let Some(v) = cfg_parse::<bool>(cfg, key)? {
            *slot = v;
        }
    }
    Ok(())
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|f| {
            f.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad {what} entry `{f}`")))
        })
        .collect()
}

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|f| {
            f.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad {what} entry `{f}`")))
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

fn metric_csv_row(method: &str, quantity: &str, horizon: usize, r: &crate::eval::MetricReport) -> String {
    let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    format!(
        "{method},{quantity},{horizon},{:.6},{},{}",
        r.rmse,
        fmt_opt(r.wmape),
        fmt_opt(r.r2)
    )
}

/// Cap requested ranks to what the archive can support and note it.
fn capped_ranks(
    series: &SnapshotSeries,
    lags: &LagSpec,
    rx: usize,
    ry: usize,
) -> Result<(usize, usize)> {
    let m = series
        .len()
        .checked_sub(lags.max_lag())
        .filter(|&m| m > 0)
        .ok_or_else(|| {
            Error::InsufficientData(format!(
                "archive has {} intervals; need more than the largest lag {}",
                series.len(),
                lags.max_lag()
            ))
        })?;
    let rx_cap = rx.min(lags.input_rows(series.s)).min(m);
    let ry_cap = ry.min(series.n()).min(m);
    if rx_cap < rx || ry_cap < ry {
        eprintln!("note: ranks capped to r_x = {rx_cap}, r_y = {ry_cap} by the archive size");
    }
    Ok((rx_cap, ry_cap))
}

/// Dispatch a parsed command line; returns the JSON summary printed on
/// stdout.
pub fn run(cli: Cli) -> Result<serde_json::Value> {
    let cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => HashMap::new(),
    };
    match cli.command {
        Command::Build(args) => run_build(args, &cfg),
        Command::Synth(args) => run_synth(args, &cfg),
        Command::Train(args) => run_train(args, &cfg),
        Command::Update(args) => run_update(args, &cfg),
        Command::Forecast(args) => run_forecast(args, &cfg),
        Command::Evaluate(args) => run_evaluate(args, &cfg),
        Command::Tune(args) => run_tune(args, &cfg),
        Command::Dmd(args) => run_dmd(args, &cfg),
    }
}

fn run_build(mut args: BuildArgs, cfg: &HashMap<String, String>) -> Result<serde_json::Value> {
    merge(&mut args.interval_min, cfg, "interval-min")?;
    merge(&mut args.intervals_per_day, cfg, "intervals-per-day")?;
    merge(&mut args.day_start_min, cfg, "day-start-min")?;
    merge_flag(&mut args.text, cfg, "text")?;
    let interval_min = args.interval_min.unwrap_or(30);
    let d = args.intervals_per_day.unwrap_or(36);
    let day_start = args.day_start_min.unwrap_or(360);

    let raw = parse_trip_csv(&fs::read_to_string(&args.trips)?)?;
    if raw.is_empty() {
        return Err(Error::InsufficientData("trip file has no records".into()));
    }
    let (trips, dict) = remap_trips(&raw, None)?;
    let mut days: Vec<chrono::NaiveDate> = trips.iter().map(|t| t.entry_time.date()).collect();
    days.sort();
    days.dedup();
    let calendar = Calendar::new(interval_min, d, day_start, days)?;
    let (series, stats) = build_series(&trips, &calendar, dict.len())?;
    save_series(&args.out, &series, Some(&dict), args.text)?;
    Ok(json!({
        "command": "build",
        "stations": dict.len(),
        "days": series.calendar.service_days.len(),
        "intervals": series.len(),
        "trips": stats,
        "station_hash": dict.hash_hex(),
    }))
}

fn run_synth(mut args: SynthArgs, cfg: &HashMap<String, String>) -> Result<serde_json::Value> {
    merge(&mut args.stations, cfg, "stations")?;
    merge(&mut args.intervals_per_day, cfg, "intervals-per-day")?;
    merge(&mut args.days, cfg, "days")?;
    merge(&mut args.latent_rank, cfg, "latent-rank")?;
    merge(&mut args.noise, cfg, "noise")?;
    merge(&mut args.seed, cfg, "seed")?;
    merge_flag(&mut args.integerize, cfg, "integerize")?;
    merge_flag(&mut args.text, cfg, "text")?;
    let spec = SyntheticSpec {
        s: args.stations.unwrap_or(4),
        d: args.intervals_per_day.unwrap_or(12),
        days: args.days.unwrap_or(10),
        latent_rank: args.latent_rank.unwrap_or(5),
        noise: args.noise.unwrap_or(0.5),
        regime_shift_day: args.regime_shift_day,
        seed: args.seed.unwrap_or(0),
        integerize: args.integerize,
    };
    let (series, _) = generate_synthetic(&spec)?;
    save_series(&args.out, &series, None, args.text)?;
    Ok(json!({
        "command": "synth",
        "stations": spec.s,
        "days": spec.days,
        "intervals": series.len(),
        "seed": spec.seed,
        "total_flow": series.total_flow(),
    }))
}

fn run_train(mut args: TrainArgs, cfg: &HashMap<String, String>) -> Result<serde_json::Value> {
    merge(&mut args.lags, cfg, "lags")?;
    merge(&mut args.rx, cfg, "rx")?;
    merge(&mut args.ry, cfg, "ry")?;
    merge(&mut args.rho, cfg, "rho")?;
    let (series, dict) = load_series(&args.data)?;
    let lags = LagSpec::new(parse_usize_list(
        args.lags.as_deref().unwrap_or("3,4,8"),
        "lag",
    )?)?;
    let (rx, ry) = capped_ranks(&series, &lags, args.rx.unwrap_or(100), args.ry.unwrap_or(50))?;
    let hyper = HwDmdHyper { lags, r_x: rx, r_y: ry, rho: args.rho.unwrap_or(1.0) };

    let started = Instant::now();
    let model = fit(&series, &hyper)?;
    let seconds = started.elapsed().as_secs_f64();

    let (ring_od, ring_boarding) = ring_from_series(&model, &series);
    let stations = dict.as_ref().map_or_else(Vec::new, |d| d.codes.clone());
    let station_hash = dict.as_ref().map_or_else(String::new, |d| d.hash_hex());
    let meta = ModelMeta {
        station_hash,
        stations,
        interval_minutes: series.calendar.interval_minutes,
        day_start_minutes: series.calendar.day_start_minutes,
        last_day: series.calendar.service_days.len().saturating_sub(1),
        last_date: series.calendar.service_days.last().copied(),
    };
    save_model(&args.out, &SavedModel { model, meta, ring_od, ring_boarding })?;
    Ok(json!({
        "command": "train",
        "r_x": rx,
        "r_y": ry,
        "rho": hyper.rho,
        "lags": hyper.lags.od_lags(),
        "intervals": series.len(),
        "seconds": seconds,
    }))
}

fn run_update(mut args: UpdateArgs, cfg: &HashMap<String, String>) -> Result<serde_json::Value> {
    merge(&mut args.day, cfg, "day")?;
    let lock_path = args.model.with_extension("lock");
    let _lock = LockGuard::acquire(&lock_path)?;

    let mut saved = load_model(&args.model)?;
    let (series, dict) = load_series(&args.data)?;
    if let Some(d) = &dict {
        if !saved.meta.station_hash.is_empty() && d.hash_hex() != saved.meta.station_hash {
            return Err(Error::Data(
                "archive station dictionary does not match the model".into(),
            ));
        }
    }
    let day = args.day.unwrap_or(saved.meta.last_day + 1);
    if day <= saved.meta.last_day {
        return Err(Error::InvalidParameter(format!(
            "day {day} was already folded in (model is at day {}); updates must move forward",
            saved.meta.last_day
        )));
    }
    let d = series.calendar.intervals_per_day;
    let batch = daily_batch(&series, &saved.model.hyper.lags, day)?;

    let started = Instant::now();
    daily_update(&mut saved.model, &batch, &UpdateOptions::default())?;
    let seconds = started.elapsed().as_secs_f64();

    let head = series.head((day + 1) * d);
    let (ring_od, ring_boarding) = ring_from_series(&saved.model, &head);
    saved.ring_od = ring_od;
    saved.ring_boarding = ring_boarding;
    saved.meta.last_day = day;
    saved.meta.last_date = series.calendar.service_days.get(day).copied();
    save_model(&args.model, &saved)?;
    Ok(json!({
        "command": "update",
        "day": day,
        "r_x": saved.model.rank_x(),
        "r_y": saved.model.rank_y(),
        "seconds": seconds,
    }))
}

fn run_forecast(mut args: ForecastArgs, cfg: &HashMap<String, String>) -> Result<serde_json::Value> {
    merge(&mut args.t, cfg, "t")?;
    merge(&mut args.horizon, cfg, "horizon")?;
    merge_flag(&mut args.clamp, cfg, "clamp")?;
    let horizon = args.horizon.unwrap_or(3);
    let saved = load_model(&args.model)?;
    let series = match &args.data {
        Some(dir) => load_series(dir)?.0,
        None => series_from_ring(&saved)?,
    };
    let t = args.t.unwrap_or(series.len());
    let block = forecast(&saved.model, &series, t, horizon, args.clamp)?;

    if let Some(path) = &args.out_od {
        let mut m = nalgebra::DMatrix::zeros(saved.model.n(), horizon);
        for (k, od) in block.od.iter().enumerate() {
            m.set_column(k, od);
        }
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &m)?;
        atomic_write(path, &buf)?;
    }
    if let Some(path) = &args.out_boarding {
        let mut m = nalgebra::DMatrix::zeros(saved.model.s, horizon);
        for (k, b) in block.boarding.iter().enumerate() {
            m.set_column(k, b);
        }
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &m)?;
        atomic_write(path, &buf)?;
    }
    let boarding: Vec<Vec<f64>> = block
        .boarding
        .iter()
        .map(|b| b.iter().cloned().collect())
        .collect();
    Ok(json!({
        "command": "forecast",
        "t": t,
        "horizon": horizon,
        "od_totals": block.od.iter().map(|f| f.sum()).collect::<Vec<f64>>(),
        "boarding": boarding,
    }))
}

fn run_evaluate(mut args: EvaluateArgs, cfg: &HashMap<String, String>) -> Result<serde_json::Value> {
    merge(&mut args.start_day, cfg, "start-day")?;
    merge(&mut args.end_day, cfg, "end-day")?;
    merge(&mut args.horizon, cfg, "horizon")?;
    merge_flag(&mut args.clamp, cfg, "clamp")?;
    let horizon = args.horizon.unwrap_or(3);
    let saved = load_model(&args.model)?;
    let (series, _) = load_series(&args.data)?;
    let d = series.calendar.intervals_per_day;
    let total_days = series.calendar.service_days.len();
    let start_day = args.start_day.unwrap_or(saved.meta.last_day + 1);
    let end_day = args.end_day.unwrap_or(total_days);
    if start_day >= end_day || end_day > total_days || start_day == 0 {
        return Err(Error::InvalidParameter(format!(
            "bad test range: days {start_day}..{end_day} of {total_days}"
        )));
    }
    let slice = EvalSlice::days(start_day..end_day, d);

    let eval = rolling_eval(&saved.model, &series, slice, horizon, args.clamp)?;
    let reports = horizon_reports(&eval)?;

    let ha = historical_average(&series, 0..start_day)?;
    let mut ha_od_actual = Vec::new();
    let mut ha_od_pred = Vec::new();
    let mut ha_b_actual = Vec::new();
    let mut ha_b_pred = Vec::new();
    for t in slice.start..slice.end {
        let pred = ha.predict(series.calendar.slot_of(t));
        ha_od_actual.extend(series.od[t].iter());
        ha_od_pred.extend(pred.iter());
        ha_b_actual.extend(series.boarding[t].iter());
        ha_b_pred.extend(SnapshotSeries::boarding_from_od(series.s, pred).iter());
    }
    let ha_od = metrics(&ha_od_actual, &ha_od_pred)?;
    let ha_b = metrics(&ha_b_actual, &ha_b_pred)?;

    let (bound_od, bound_b) = low_rank_bound(&series, &saved.model.u_y, slice)?;

    let mut table = String::from("method,quantity,horizon,rmse,wmape,r2\n");
    for (k, (od, boarding)) in reports.iter().enumerate() {
        table.push_str(&metric_csv_row("model", "od", k + 1, od));
        table.push('\n');
        table.push_str(&metric_csv_row("model", "boarding", k + 1, boarding));
        table.push('\n');
    }
    // the baseline is horizon-independent: one row per quantity per horizon,
    // repeated verbatim
    for k in 1..=horizon {
        table.push_str(&metric_csv_row("ha", "od", k, &ha_od));
        table.push('\n');
        table.push_str(&metric_csv_row("ha", "boarding", k, &ha_b));
        table.push('\n');
    }
    table.push_str(&metric_csv_row("low-rank-bound", "od", 0, &bound_od));
    table.push('\n');
    table.push_str(&metric_csv_row("low-rank-bound", "boarding", 0, &bound_b));
    table.push('\n');
    match &args.out {
        Some(path) => write_text(path, &table)?,
        None => print!("{table}"),
    }

    if let Some(path) = &args.per_slot_out {
        let mut csv = String::from("slot,rmse\n");
        for (slot, rmse) in per_slot_rmse(&series, slice, &eval.one_step_od) {
            csv.push_str(&format!("{slot},{rmse:.6}\n"));
        }
        write_text(path, &csv)?;
    }
    if let Some(path) = &args.bins_out {
        let mut csv = String::from("bin,pairs,rmse\n");
        for (bin, pairs, rmse) in magnitude_bin_rmse(&series, slice, &eval.one_step_od) {
            csv.push_str(&format!("{bin},{pairs},{rmse:.6}\n"));
        }
        write_text(path, &csv)?;
    }

    Ok(json!({
        "command": "evaluate",
        "test_days": [start_day, end_day],
        "horizon": horizon,
        "one_step_od_rmse": reports[0].0.rmse,
        "one_step_boarding_rmse": reports[0].1.rmse,
        "ha_od_rmse": ha_od.rmse,
        "low_rank_bound_od_rmse": bound_od.rmse,
    }))
}

fn run_tune(mut args: TuneArgs, cfg: &HashMap<String, String>) -> Result<serde_json::Value> {
    merge(&mut args.train_days, cfg, "train-days")?;
    merge(&mut args.val_days, cfg, "val-days")?;
    merge(&mut args.candidates, cfg, "candidates")?;
    merge(&mut args.search_rank, cfg, "search-rank")?;
    let (series, _) = load_series(&args.data)?;
    let d = series.calendar.intervals_per_day;
    let total_days = series.calendar.service_days.len();
    let val_days = args.val_days.unwrap_or(2);
    let train_days = args.train_days.unwrap_or_else(|| total_days.saturating_sub(val_days));
    if train_days < 2 || train_days + val_days > total_days {
        return Err(Error::InvalidParameter(format!(
            "split {train_days}+{val_days} days does not fit the {total_days}-day archive"
        )));
    }
    let train_end = train_days * d;
    let val = EvalSlice::days(train_days..train_days + val_days, d);
    let candidates = match &args.candidates {
        Some(text) => parse_usize_list(text, "candidate lag")?,
        None => (3..=d).collect(),
    };
    let search_rank = args.search_rank.unwrap_or(100);

    let lag_result = greedy_lag_search(
        &series,
        &candidates,
        train_end,
        val,
        search_rank,
        search_rank,
        1.0,
    )?;
    let lags = LagSpec::new(lag_result.od_lags.clone())?;

    let rx_grid = match &args.rx_grid {
        Some(text) => parse_usize_list(text, "rank")?,
        None => default_rank_grid(),
    };
    let ry_grid = match &args.ry_grid {
        Some(text) => parse_usize_list(text, "rank")?,
        None => default_rank_grid(),
    };
    let rho_grid = match &args.rho_grid {
        Some(text) => parse_f64_list(text, "rho")?,
        None => default_rho_grid(),
    };
    let mut result =
        rank_and_rho_search(&series, &lags, &rx_grid, &ry_grid, &rho_grid, train_end, val)?;
    let mut trace = lag_result.trace;
    trace.extend(result.trace);
    result.trace = trace;

    if let Some(path) = &args.out {
        let jsonb = serde_json::to_vec_pretty(&result)
            .map_err(|e| Error::Format(format!("result serialization failed: {e}")))?;
        atomic_write(path, &jsonb)?;
    }
    Ok(json!({
        "command": "tune",
        "lags": result.od_lags,
        "r_x": result.r_x,
        "r_y": result.r_y,
        "rho": result.rho,
        "evaluations": result.trace.len(),
    }))
}

fn run_dmd(mut args: DmdArgs, cfg: &HashMap<String, String>) -> Result<serde_json::Value> {
    merge(&mut args.rank, cfg, "rank")?;
    let rank = args.rank.unwrap_or(10);
    let (series, _) = load_series(&args.data)?;
    if series.len() < 2 {
        return Err(Error::InsufficientData("need at least two snapshots".into()));
    }
    let n = series.n();
    let m = series.len() - 1;
    let mut y_prev = nalgebra::DMatrix::zeros(n, m);
    let mut y_next = nalgebra::DMatrix::zeros(n, m);
    for j in 0..m {
        y_prev.set_column(j, &series.od[j]);
        y_next.set_column(j, &series.od[j + 1]);
    }
    let result = exact_dmd(&y_prev, &y_next, rank)?;

    let mut csv = String::from("index,re,im,magnitude\n");
    for (i, lambda) in result.eigenvalues.iter().enumerate() {
        csv.push_str(&format!("{i},{:.9},{:.9},{:.9}\n", lambda.re, lambda.im, lambda.norm()));
    }
    match &args.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(path) = &args.modes_out {
        let real_modes = result.modes.map(|z| z.re);
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &real_modes)?;
        atomic_write(path, &buf)?;
    }
    Ok(json!({
        "command": "dmd",
        "rank": rank,
        "dominant_magnitude": result.eigenvalues.first().map(|z| z.norm()),
    }))
}
