//! Trip ingestion and snapshot series construction.
//!
//! Trips are binned on a fixed interval grid over concatenated workdays into
//! origin-destination (OD) snapshots `f_t ∈ ℝⁿ` (column-major vectorization
//! of the s×s OD matrix, n = s²) and boarding snapshots `b_t ∈ ℝˢ` (row sums
//! of the OD matrix). OD snapshots of the most recent two intervals are
//! treated as unobservable because trips are still in progress; boarding
//! snapshots are observable immediately.

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Smallest OD lag usable at forecast time; lags 1 and 2 are unavailable
/// because those snapshots cannot be observed in real time.
pub const MIN_OD_LAG: usize = 3;

/// One trip, with stations already remapped to dense 0-based indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub origin: usize,
    pub destination: usize,
    pub entry_time: NaiveDateTime,
    pub exit_time: NaiveDateTime,
}

/// Fixed interval grid over an ordered list of workdays. Weekends are
/// removed up front so consecutive service days are adjacent on the global
/// interval axis (each Friday connects to the next Monday).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calendar {
    pub interval_minutes: u32,
    /// Intervals per service day (`d`).
    pub intervals_per_day: usize,
    /// Minutes after midnight when the operating window opens.
    pub day_start_minutes: u32,
    pub service_days: Vec<NaiveDate>,
}

impl Calendar {
    pub fn new(
        interval_minutes: u32,
        intervals_per_day: usize,
        day_start_minutes: u32,
        service_days: Vec<NaiveDate>,
    ) -> Result<Self> {
        if interval_minutes == 0 {
            return Err(Error::InvalidParameter("interval_minutes must be positive".into()));
        }
        if intervals_per_day == 0 {
            return Err(Error::InvalidParameter("intervals_per_day must be positive".into()));
        }
        Ok(Calendar { interval_minutes, intervals_per_day, day_start_minutes, service_days })
    }

    /// Total number of intervals on the grid.
    pub fn num_intervals(&self) -> usize {
        self.service_days.len() * self.intervals_per_day
    }

    /// Day ordinal of a global interval index (0-based).
    pub fn day_of(&self, interval: usize) -> usize {
        interval / self.intervals_per_day
    }

    /// Within-day slot of a global interval index.
    pub fn slot_of(&self, interval: usize) -> usize {
        interval % self.intervals_per_day
    }

    /// Map a timestamp to its global interval index, or `None` when it falls
    /// outside the service days or the operating window.
    pub fn locate(&self, ts: NaiveDateTime) -> Option<usize> {
        let day = self.service_days.iter().position(|&d| d == ts.date())?;
        let minutes = ts.hour() * 60 + ts.minute();
        if minutes < self.day_start_minutes {
            return None;
        }
        let slot = ((minutes - self.day_start_minutes) / self.interval_minutes) as usize;
        if slot >= self.intervals_per_day {
            return None;
        }
        Some(day * self.intervals_per_day + slot)
    }
}

/// Aligned OD and boarding snapshot sequences over a calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    /// Station count.
    pub s: usize,
    /// OD snapshots, each of length n = s².
    pub od: Vec<DVector<f64>>,
    /// Boarding snapshots, each of length s.
    pub boarding: Vec<DVector<f64>>,
    pub calendar: Calendar,
}

impl SnapshotSeries {
    /// Number of OD pairs (n = s²).
    pub fn n(&self) -> usize {
        self.s * self.s
    }

    /// Number of snapshots.
    pub fn len(&self) -> usize {
        self.od.len()
    }

    pub fn is_empty(&self) -> bool {
        self.od.is_empty()
    }

    /// Total flow over the whole series.
    pub fn total_flow(&self) -> f64 {
        self.od.iter().map(|f| f.sum()).sum()
    }

    /// Boarding vector derived from an OD snapshot by row sums.
    pub fn boarding_from_od(s: usize, od: &DVector<f64>) -> DVector<f64> {
        let mut b = DVector::zeros(s);
        for j in 0..s {
            for i in 0..s {
                b[i] += od[j * s + i];
            }
        }
        b
    }

    /// Restrict to the first `t` snapshots (used by rolling evaluation).
    pub fn head(&self, t: usize) -> SnapshotSeries {
        SnapshotSeries {
            s: self.s,
            od: self.od[..t].to_vec(),
            boarding: self.boarding[..t].to_vec(),
            calendar: self.calendar.clone(),
        }
    }
}

/// Counts reported by `build_series`; drops are surfaced, never silent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub total: usize,
    pub counted: usize,
    pub dropped_outside_window: usize,
    pub dropped_same_station: usize,
}

/// Bin trips into OD and boarding snapshots on the calendar grid.
///
/// Trips are aggregated by entry time. Same-station trips and trips outside
/// the operating window are dropped and counted in the returned stats.
pub fn build_series(
    trips: &[TripRecord],
    calendar: &Calendar,
    s: usize,
) -> Result<(SnapshotSeries, IngestStats)> {
    let n = s * s;
    let t_total = calendar.num_intervals();
    let mut od: Vec<DVector<f64>> = (0..t_total).map(|_| DVector::zeros(n)).collect();
    let mut stats = IngestStats { total: trips.len(), ..Default::default() };

    for (pos, trip) in trips.iter().enumerate() {
        if trip.origin >= s || trip.destination >= s {
            return Err(Error::Data(format!(
                "trip record {pos}: station index out of range (origin {}, destination {}, s {s})",
                trip.origin, trip.destination
            )));
        }
        if trip.exit_time < trip.entry_time {
            return Err(Error::Data(format!(
                "trip record {pos}: exit time precedes entry time"
            )));
        }
        if trip.origin == trip.destination {
            stats.dropped_same_station += 1;
            continue;
        }
        match calendar.locate(trip.entry_time) {
            Some(t) => {
                od[t][trip.destination * s + trip.origin] += 1.0;
                stats.counted += 1;
            }
            None => stats.dropped_outside_window += 1,
        }
    }

    let boarding = od.iter().map(|f| SnapshotSeries::boarding_from_od(s, f)).collect();
    Ok((
        SnapshotSeries { s, od, boarding, calendar: calendar.clone() },
        stats,
    ))
}

/// OD lags usable when forecasting at interval `t` (1-based): `{3..t}`.
pub fn available_od_lags(t: usize) -> Result<Vec<usize>> {
    if t < MIN_OD_LAG {
        return Err(Error::InvalidParameter(format!(
            "need t >= {MIN_OD_LAG}, got {t}"
        )));
    }
    Ok((MIN_OD_LAG..=t).collect())
}

/// Whether an OD snapshot `lag` intervals back is observable.
pub fn od_lag_available(lag: usize) -> bool {
    lag >= MIN_OD_LAG
}

/// Whether a boarding snapshot `lag` intervals back is observable.
pub fn boarding_lag_available(lag: usize) -> bool {
    lag >= 1
}

/// Dense 0-based remapping of arbitrary raw station codes. Codes are sorted
/// lexicographically so the mapping does not depend on record order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationDictionary {
    pub codes: Vec<String>,
}

impl StationDictionary {
    pub fn from_codes(mut codes: Vec<String>) -> Self {
        codes.sort();
        codes.dedup();
        StationDictionary { codes }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.codes.binary_search_by(|c| c.as_str().cmp(code)).ok()
    }

    /// SHA-256 hash of the code list, recorded in model files to prevent
    /// applying a model to a mismatched station set.
    pub fn hash_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for code in &self.codes {
            hasher.update(code.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A raw trip line before station remapping.
#[derive(Debug, Clone)]
pub struct RawTrip {
    pub origin: String,
    pub destination: String,
    pub entry_time: NaiveDateTime,
    pub exit_time: NaiveDateTime,
}

fn parse_iso(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .ok()
}

fn parse_epoch(s: &str) -> Option<NaiveDateTime> {
    let secs: i64 = s.trim().parse().ok()?;
    chrono::DateTime::from_timestamp(secs, 0).map(|dt| dt.naive_utc())
}

/// Parse a trip CSV with header `origin,destination,entry_time,exit_time`.
/// Timestamps are ISO-8601 or epoch seconds; the format is detected once per
/// file from the first data row.
pub fn parse_trip_csv(text: &str) -> Result<Vec<RawTrip>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trip file".into()))?;
    let expected = "origin,destination,entry_time,exit_time";
    if header.trim() != expected {
        return Err(Error::Parse(format!(
            "bad trip CSV header: expected `{expected}`, got `{}`",
            header.trim()
        )));
    }

    let mut use_epoch: Option<bool> = None;
    let mut trips = Vec::new();
    for (lineno, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mode = *use_epoch.get_or_insert_with(|| parse_iso(fields[2]).is_none());
        let parse = |s: &str| -> Result<NaiveDateTime> {
            let parsed = if mode { parse_epoch(s) } else { parse_iso(s) };
            parsed.ok_or_else(|| {
                Error::Parse(format!("line {}: bad timestamp `{s}`", lineno + 1))
            })
        };
        trips.push(RawTrip {
            origin: fields[0].to_string(),
            destination: fields[1].to_string(),
            entry_time: parse(fields[2])?,
            exit_time: parse(fields[3])?,
        });
    }
    Ok(trips)
}

/// Remap raw trips to dense indices. With `dict = None` a dictionary is
/// built from the file itself; otherwise unknown codes are an error.
pub fn remap_trips(
    raw: &[RawTrip],
    dict: Option<&StationDictionary>,
) -> Result<(Vec<TripRecord>, StationDictionary)> {
    let dict = match dict {
        Some(d) => d.clone(),
        None => {
            let mut codes: Vec<String> = Vec::with_capacity(raw.len() * 2);
            for t in raw {
                codes.push(t.origin.clone());
                codes.push(t.destination.clone());
            }
            StationDictionary::from_codes(codes)
        }
    };
    let lookup: HashMap<&str, usize> = dict
        .codes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut out = Vec::with_capacity(raw.len());
    for (pos, t) in raw.iter().enumerate() {
        let origin = *lookup.get(t.origin.as_str()).ok_or_else(|| {
            Error::Data(format!("trip record {pos}: unknown station code `{}`", t.origin))
        })?;
        let destination = *lookup.get(t.destination.as_str()).ok_or_else(|| {
            Error::Data(format!(
                "trip record {pos}: unknown station code `{}`",
                t.destination
            ))
        })?;
        out.push(TripRecord {
            origin,
            destination,
            entry_time: t.entry_time,
            exit_time: t.exit_time,
        });
    }
    Ok((out, dict))
}
