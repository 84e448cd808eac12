//! On-disk formats: dense matrices (binary or CSV), snapshot archives, and
//! versioned model files. All writes go through a temp-file-and-rename path
//! so a crash never leaves a half-written artifact behind.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::estimator::{HwDmdHyper, HwDmdModel};
use crate::snapshot::{Calendar, SnapshotSeries, StationDictionary};

const MATRIX_MAGIC: &[u8; 8] = b"ODFMTX01";
const MODEL_MAGIC: &[u8; 8] = b"ODFMDL01";
const MODEL_VERSION: u32 = 1;

/// Serialize a matrix: 8-byte magic, u32 rows, u32 cols (little endian),
/// then column-major f64 little-endian payload.
pub fn write_matrix_bin<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&(m.nrows() as u32).to_le_bytes())?;
    w.write_all(&(m.ncols() as u32).to_le_bytes())?;
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Inverse of [`write_matrix_bin`].
pub fn read_matrix_bin<R: Read>(r: &mut R) -> Result<DMatrix<f64>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(Error::Format(format!(
            "bad matrix magic {magic:?}, expected {MATRIX_MAGIC:?}"
        )));
    }
    let mut dim = [0u8; 4];
    r.read_exact(&mut dim)?;
    let rows = u32::from_le_bytes(dim) as usize;
    r.read_exact(&mut dim)?;
    let cols = u32::from_le_bytes(dim) as usize;
    let mut payload = vec![0u8; rows * cols * 8];
    r.read_exact(&mut payload)?;
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}

/// Plain CSV matrix: one row per line, full `f64` round-trip precision.
pub fn write_matrix_csv<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Inverse of [`write_matrix_csv`]; all rows must have equal length.
pub fn read_matrix_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim().parse().map_err(|_| {
                    Error::Parse(format!("line {}: bad number `{f}`", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Write bytes to `path` atomically: write a sibling temp file, flush, then
/// rename over the destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Metadata sidecar of a snapshot archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveMeta {
    /// `bin` or `csv`.
    pub format: String,
    pub s: usize,
    pub interval_minutes: u32,
    pub intervals_per_day: usize,
    pub day_start_minutes: u32,
    pub service_days: Vec<NaiveDate>,
    /// Raw station codes in index order, when known.
    pub stations: Option<Vec<String>>,
}

/// Save a snapshot series as a directory: `meta.json` plus `od`/`boarding`
/// matrix files (n×T and s×T, one column per interval).
pub fn save_series(
    dir: &Path,
    series: &SnapshotSeries,
    stations: Option<&StationDictionary>,
    text: bool,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = ArchiveMeta {
        format: if text { "csv" } else { "bin" }.into(),
        s: series.s,
        interval_minutes: series.calendar.interval_minutes,
        intervals_per_day: series.calendar.intervals_per_day,
        day_start_minutes: series.calendar.day_start_minutes,
        service_days: series.calendar.service_days.clone(),
        stations: stations.map(|d| d.codes.clone()),
    };
    let meta_json = serde_json::to_vec_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta serialization failed: {e}")))?;
    atomic_write(&dir.join("meta.json"), &meta_json)?;

    let od = columns_to_matrix(&series.od, series.n());
    let boarding = columns_to_matrix(&series.boarding, series.s);
    for (name, matrix) in [("od", &od), ("boarding", &boarding)] {
        let mut buf = Vec::new();
        if text {
            write_matrix_csv(&mut buf, matrix)?;
            atomic_write(&dir.join(format!("{name}.csv")), &buf)?;
        } else {
            write_matrix_bin(&mut buf, matrix)?;
            atomic_write(&dir.join(format!("{name}.bin")), &buf)?;
        }
    }
    Ok(())
}

/// Load a snapshot archive written by [`save_series`].
pub fn load_series(dir: &Path) -> Result<(SnapshotSeries, Option<StationDictionary>)> {
    let meta_text = fs::read_to_string(dir.join("meta.json"))?;
    let meta: ArchiveMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::Format(format!("bad archive meta: {e}")))?;
    let read = |name: &str| -> Result<DMatrix<f64>> {
        match meta.format.as_str() {
            "bin" => {
                let mut f = fs::File::open(dir.join(format!("{name}.bin")))?;
                read_matrix_bin(&mut f)
            }
            "csv" => read_matrix_csv(&fs::read_to_string(dir.join(format!("{name}.csv")))?),
            other => Err(Error::Format(format!("unknown archive format `{other}`"))),
        }
    };
    let od_m = read("od")?;
    let boarding_m = read("boarding")?;
    let n = meta.s * meta.s;
    let total = meta.service_days.len() * meta.intervals_per_day;
    if od_m.shape() != (n, total) || boarding_m.shape() != (meta.s, total) {
        return Err(Error::Format(format!(
            "archive shapes {:?}/{:?} do not match meta (n = {n}, s = {}, T = {total})",
            od_m.shape(),
            boarding_m.shape(),
            meta.s
        )));
    }
    let calendar = Calendar::new(
        meta.interval_minutes,
        meta.intervals_per_day,
        meta.day_start_minutes,
        meta.service_days.clone(),
    )?;
    let series = SnapshotSeries {
        s: meta.s,
        od: matrix_to_columns(&od_m),
        boarding: matrix_to_columns(&boarding_m),
        calendar,
    };
    let dict = meta.stations.map(|codes| StationDictionary { codes });
    Ok((series, dict))
}

fn columns_to_matrix(cols: &[DVector<f64>], rows: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

fn matrix_to_columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..m.ncols()).map(|j| m.column(j).into_owned()).collect()
}

/// Model metadata carried in the file header next to the hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    /// SHA-256 of the station dictionary; rejected on mismatch at load+apply.
    pub station_hash: String,
    pub stations: Vec<String>,
    pub interval_minutes: u32,
    pub day_start_minutes: u32,
    /// Ordinal of the most recent day folded into the model.
    pub last_day: usize,
    /// Calendar date of that day, when known.
    pub last_date: Option<NaiveDate>,
}

/// A model plus the trailing snapshots needed to forecast without reloading
/// the training archive: the last `q_h` OD snapshots and the last two
/// boarding snapshots, oldest first.
#[derive(Debug, Clone)]
pub struct SavedModel {
    pub model: HwDmdModel,
    pub meta: ModelMeta,
    pub ring_od: Vec<DVector<f64>>,
    pub ring_boarding: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    hyper: HwDmdHyper,
    s: usize,
    d: usize,
    meta: ModelMeta,
    ring_len: usize,
}

/// Serialize a model to bytes: magic, version, u64 JSON-header length, the
/// header, then the five core matrices and the snapshot ring.
pub fn model_to_bytes(saved: &SavedModel) -> Result<Vec<u8>> {
    let header = ModelHeader {
        hyper: saved.model.hyper.clone(),
        s: saved.model.s,
        d: saved.model.d,
        meta: saved.meta.clone(),
        ring_len: saved.ring_od.len(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("model header serialization failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_json);
    let m = &saved.model;
    for matrix in [&m.u_x, &m.u_y, &m.p, &m.q_x, &m.q_y] {
        write_matrix_bin(&mut buf, matrix)?;
    }
    write_matrix_bin(&mut buf, &columns_to_matrix(&saved.ring_od, m.n()))?;
    write_matrix_bin(&mut buf, &columns_to_matrix(&saved.ring_boarding, m.s))?;
    Ok(buf)
}

/// Inverse of [`model_to_bytes`].
pub fn model_from_bytes(bytes: &[u8]) -> Result<SavedModel> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported model version {version}, expected {MODEL_VERSION}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > r.len() {
        return Err(Error::Format("truncated model header".into()));
    }
    let header: ModelHeader = serde_json::from_slice(&r[..header_len])
        .map_err(|e| Error::Format(format!("bad model header: {e}")))?;
    r = &r[header_len..];

    let u_x = read_matrix_bin(&mut r)?;
    let u_y = read_matrix_bin(&mut r)?;
    let p = read_matrix_bin(&mut r)?;
    let q_x = read_matrix_bin(&mut r)?;
    let q_y = read_matrix_bin(&mut r)?;
    let ring_od_m = read_matrix_bin(&mut r)?;
    let ring_boarding_m = read_matrix_bin(&mut r)?;

    let n = header.s * header.s;
    if u_x.nrows() != header.hyper.lags.input_rows(header.s) || u_y.nrows() != n {
        return Err(Error::Format("model matrices do not match header dimensions".into()));
    }
    if ring_od_m.ncols() != header.ring_len {
        return Err(Error::Format("snapshot ring does not match header".into()));
    }
    Ok(SavedModel {
        model: HwDmdModel {
            hyper: header.hyper,
            u_x,
            u_y,
            p,
            q_x,
            q_y,
            s: header.s,
            d: header.d,
        },
        meta: header.meta,
        ring_od: matrix_to_columns(&ring_od_m),
        ring_boarding: matrix_to_columns(&ring_boarding_m),
    })
}

/// Atomically save a model file.
pub fn save_model(path: &Path, saved: &SavedModel) -> Result<()> {
    atomic_write(path, &model_to_bytes(saved)?)
}

/// Load a model file.
pub fn load_model(path: &Path) -> Result<SavedModel> {
    model_from_bytes(&fs::read(path)?)
}

/// Fill the snapshot ring of a saved model from the tail of a series.
pub fn ring_from_series(model: &HwDmdModel, series: &SnapshotSeries) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let q_h = model.hyper.lags.max_lag();
    let t = series.len();
    let od = series.od[t.saturating_sub(q_h)..].to_vec();
    let boarding = series.boarding[t.saturating_sub(2)..].to_vec();
    (od, boarding)
}

/// Rebuild a minimal series from a model's snapshot ring, sufficient for
/// forecasting at `t = ring length`.
pub fn series_from_ring(saved: &SavedModel) -> Result<SnapshotSeries> {
    let q_h = saved.model.hyper.lags.max_lag();
    if saved.ring_od.len() < q_h || saved.ring_boarding.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "model carries {} OD / {} boarding snapshots; need {q_h} / 2",
            saved.ring_od.len(),
            saved.ring_boarding.len()
        )));
    }
    let t = saved.ring_od.len();
    let d = saved.model.d;
    let days_needed = t.div_ceil(d);
    let start = saved
        .meta
        .last_date
        .unwrap_or_else(|| NaiveDate::from_ymd_opt(2024, 1, 1).unwrap());
    let service_days: Vec<NaiveDate> = (0..days_needed)
        .map(|k| start - chrono::Duration::days((days_needed - 1 - k) as i64))
        .collect();
    let calendar = Calendar::new(
        saved.meta.interval_minutes.max(1),
        d,
        saved.meta.day_start_minutes,
        service_days,
    )?;
    // left-pad with zero snapshots up to a whole number of days; the pad is
    // never read because forecasting only touches the last q_h intervals
    let total = days_needed * d;
    let n = saved.model.n();
    let s = saved.model.s;
    let mut od = vec![DVector::zeros(n); total - t];
    od.extend(saved.ring_od.iter().cloned());
    let mut boarding = vec![DVector::zeros(s); total - saved.ring_boarding.len()];
    boarding.extend(saved.ring_boarding.iter().cloned());
    Ok(SnapshotSeries { s, od, boarding, calendar })
}

/// Exclusive advisory lock: creating the lock file fails if it already
/// exists; the file is removed on drop.
pub struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    pub fn acquire(path: &Path) -> Result<LockGuard> {
        match fs::OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(_) => Ok(LockGuard { path: path.to_path_buf() }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "another update holds the lock `{}`; remove it if stale",
                path.display()
            ))),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::fit;
    use crate::regression::LagSpec;
    use crate::synth::{generate_synthetic, SyntheticSpec};

    fn sample_matrix() -> DMatrix<f64> {
        DMatrix::from_fn(5, 3, |i, j| (i as f64 + 1.0) * 0.137 - j as f64 * 2.5)
    }

    #[test]
    fn matrix_bin_round_trip_is_bit_identical() {
        let m = sample_matrix();
        let mut buf = Vec::new();
        write_matrix_bin(&mut buf, &m).unwrap();
        let back = read_matrix_bin(&mut buf.as_slice()).unwrap();
        assert_eq!(m.as_slice(), back.as_slice());
        assert_eq!(m.shape(), back.shape());
    }

    #[test]
    fn matrix_csv_round_trip_is_exact() {
        // {:?} prints f64 with round-trip precision
        let m = sample_matrix();
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &m).unwrap();
        let back = read_matrix_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(m.as_slice(), back.as_slice());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let m = sample_matrix();
        let mut buf = Vec::new();
        write_matrix_bin(&mut buf, &m).unwrap();
        buf[0] ^= 0xff;
        assert!(read_matrix_bin(&mut buf.as_slice()).is_err());
        assert!(model_from_bytes(&buf).is_err());
    }

    #[test]
    fn ragged_csv_rejected() {
        assert!(read_matrix_csv("1,2,3\n4,5\n").is_err());
        assert!(read_matrix_csv("1,2\nx,4\n").is_err());
    }

    fn fixture() -> SnapshotSeries {
        generate_synthetic(&SyntheticSpec {
            s: 3,
            d: 6,
            days: 4,
            latent_rank: 3,
            noise: 0.5,
            regime_shift_day: None,
            seed: 9,
            integerize: true,
        })
        .unwrap()
        .0
    }

    #[test]
    fn series_archive_round_trip() {
        let series = fixture();
        let dict = StationDictionary::from_codes(vec!["A".into(), "B".into(), "C".into()]);
        for text in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            save_series(dir.path(), &series, Some(&dict), text).unwrap();
            let (back, dict_back) = load_series(dir.path()).unwrap();
            assert_eq!(series, back);
            assert_eq!(dict_back.as_ref(), Some(&dict));
        }
    }

    fn saved_fixture() -> (SnapshotSeries, SavedModel) {
        let series = fixture();
        let hyper = HwDmdHyper {
            lags: LagSpec::new(vec![3, 6]).unwrap(),
            r_x: 8,
            r_y: 4,
            rho: 0.95,
        };
        let model = fit(&series, &hyper).unwrap();
        let (ring_od, ring_boarding) = ring_from_series(&model, &series);
        let dict = StationDictionary::from_codes(vec!["A".into(), "B".into(), "C".into()]);
        let meta = ModelMeta {
            station_hash: dict.hash_hex(),
            stations: dict.codes.clone(),
            interval_minutes: series.calendar.interval_minutes,
            day_start_minutes: series.calendar.day_start_minutes,
            last_day: 3,
            last_date: series.calendar.service_days.last().copied(),
        };
        (series, SavedModel { model, meta, ring_od, ring_boarding })
    }

    #[test]
    fn model_round_trip_is_bit_identical() {
        let (_, saved) = saved_fixture();
        let bytes = model_to_bytes(&saved).unwrap();
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(saved.model, back.model);
        assert_eq!(saved.ring_od, back.ring_od);
        assert_eq!(saved.ring_boarding, back.ring_boarding);
        assert_eq!(saved.meta.station_hash, back.meta.station_hash);
        // serializing again is byte-identical
        assert_eq!(bytes, model_to_bytes(&back).unwrap());
    }

    #[test]
    fn ring_forecast_matches_full_series_forecast() {
        use crate::estimator::forecast;
        let (series, saved) = saved_fixture();
        let mini = series_from_ring(&saved).unwrap();
        let a = forecast(&saved.model, &series, series.len(), 3, false).unwrap();
        let b = forecast(&saved.model, &mini, mini.len(), 3, false).unwrap();
        for k in 0..3 {
            assert_eq!(a.od[k], b.od[k], "horizon {k}");
        }
    }

    #[test]
    fn unsupported_version_rejected() {
        let (_, saved) = saved_fixture();
        let mut bytes = model_to_bytes(&saved).unwrap();
        bytes[8] = 99; // version word
        let err = model_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("update.lock");
        let guard = LockGuard::acquire(&path).unwrap();
        assert!(LockGuard::acquire(&path).is_err());
        drop(guard);
        assert!(LockGuard::acquire(&path).is_ok());
    }
}
