//! CSV logs. The canonical schemas are
//!
//! ```text
//! imu.csv    t,fx,fy,fz,wx,wy,wz                      s, m/s^2, rad/s
//! dvl.csv    t,b1,b2,b3,b4,v1_valid,..,v4_valid       s, m/s, 0/1
//! truth.csv  t,pn,pe,pd,vn,ve,vd,qw,qx,qy,qz          s, m, m/s, body-to-NED quaternion
//! run.csv    t,x0..x11,pdiag0..pdiag11,innov0..innov2
//! ```
//!
//! Foreign logs are read through [`IngestMetadata`], which names the columns
//! and units. Floats are written in shortest round-trip form.

use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3, Vector4};
use navfuse::beamsnet::TrainHistory;
use navfuse::dvl::DvlBeams;
use navfuse::ekf::{FilterRun, STATE_DIM};
use navfuse::ins::ImuSample;
use navfuse::sim::TruthState;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const IMU_FILE: &str = "imu.csv";
pub const DVL_FILE: &str = "dvl.csv";
pub const TRUTH_FILE: &str = "truth.csv";

/// Gaps longer than this many nominal periods are reported.
pub const GAP_FACTOR: f64 = 2.0;

const IMU_HEADER: [&str; 7] = ["t", "fx", "fy", "fz", "wx", "wy", "wz"];
const DVL_HEADER: [&str; 9] = ["t", "b1", "b2", "b3", "b4", "v1_valid", "v2_valid", "v3_valid", "v4_valid"];
const TRUTH_HEADER: [&str; 11] = ["t", "pn", "pe", "pd", "vn", "ve", "vd", "qw", "qx", "qy", "qz"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeUnit {
    S,
    Ms,
    Us,
}

impl TimeUnit {
    fn to_seconds(self) -> f64 {
        match self {
            TimeUnit::S => 1.0,
            TimeUnit::Ms => 1e-3,
            TimeUnit::Us => 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccelUnit {
    Mps2,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GyroUnit {
    Radps,
    Degps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VelocityUnit {
    Mps,
    Cmps,
    Mmps,
}

impl VelocityUnit {
    fn to_mps(self) -> f64 {
        match self {
            VelocityUnit::Mps => 1.0,
            VelocityUnit::Cmps => 1e-2,
            VelocityUnit::Mmps => 1e-3,
        }
    }
}

/// Column names and units of a foreign log set. The defaults describe the
/// canonical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestMetadata {
    pub delimiter: char,
    pub time_unit: TimeUnit,
    pub accel_unit: AccelUnit,
    pub gyro_unit: GyroUnit,
    pub velocity_unit: VelocityUnit,
    /// Time, then specific force x/y/z, then angular rate x/y/z.
    pub imu_columns: Vec<String>,
    /// Time, then beams 1..4.
    pub dvl_columns: Vec<String>,
    /// Validity flags of beams 1..4; empty means every beam is valid.
    pub dvl_valid_columns: Vec<String>,
    /// Time, position N/E/D, velocity N/E/D, quaternion w/x/y/z.
    pub truth_columns: Vec<String>,
    /// Nominal rates for the gap check; 0 infers them from the median step.
    pub imu_rate_hz: f64,
    pub dvl_rate_hz: f64,
}

impl Default for IngestMetadata {
    fn default() -> Self {
        let names = |h: &[&str]| h.iter().map(|s| s.to_string()).collect();
        Self {
            delimiter: ',',
            time_unit: TimeUnit::S,
            accel_unit: AccelUnit::Mps2,
            gyro_unit: GyroUnit::Radps,
            velocity_unit: VelocityUnit::Mps,
            imu_columns: names(&IMU_HEADER),
            dvl_columns: names(&DVL_HEADER[..5]),
            dvl_valid_columns: names(&DVL_HEADER[5..]),
            truth_columns: names(&TRUTH_HEADER),
            imu_rate_hz: 0.0,
            dvl_rate_hz: 0.0,
        }
    }
}

impl IngestMetadata {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let meta: Self =
            toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, cols: &[String], n: usize| {
            if cols.len() == n {
                Ok(())
            } else {
                Err(HarnessError::Config(format!("{what} needs {n} names, got {}", cols.len())))
            }
        };
        check("imu_columns", &self.imu_columns, 7)?;
        check("dvl_columns", &self.dvl_columns, 5)?;
        if !self.dvl_valid_columns.is_empty() {
            check("dvl_valid_columns", &self.dvl_valid_columns, 4)?;
        }
        check("truth_columns", &self.truth_columns, 11)?;
        if !self.delimiter.is_ascii() {
            return Err(HarnessError::Config("delimiter must be an ASCII character".into()));
        }
        if self.imu_rate_hz < 0.0 || self.dvl_rate_hz < 0.0 {
            return Err(HarnessError::Config("nominal rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// A complete set of logs in internal units.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub dvl: Vec<DvlBeams>,
    pub truth: Option<Vec<TruthState>>,
}

/// Non-fatal findings while reading logs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub imu_rows: usize,
    pub dvl_rows: usize,
    pub truth_rows: usize,
    pub warnings: Vec<String>,
}

struct Table {
    path: PathBuf,
    reader: csv::Reader<File>,
    index: Vec<usize>,
}

impl Table {
    fn open(path: &Path, delimiter: char, columns: &[&String]) -> Result<Self> {
        let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter as u8)
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| HarnessError::row(path, 1, format!("unreadable header: {e}")))?
            .clone();
        let index = columns
            .iter()
            .map(|name| {
                headers
                    .iter()
                    .position(|h| h == name.as_str())
                    .ok_or_else(|| HarnessError::row(path, 1, format!("missing column `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            path: path.to_path_buf(),
            reader,
            index,
        })
    }

    /// Calls `f(line, values)` for every data row.
    fn rows(mut self, mut f: impl FnMut(usize, &[f64]) -> Result<()>) -> Result<()> {
        let mut record = csv::StringRecord::new();
        let mut values = vec![0.0; self.index.len()];
        loop {
            let more = self.reader.read_record(&mut record).map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize);
                HarnessError::row(&self.path, line, e.to_string())
            })?;
            if !more {
                return Ok(());
            }
            let line = record.position().map_or(0, |p| p.line() as usize);
            for (slot, &col) in values.iter_mut().zip(&self.index) {
                let field = record.get(col).unwrap_or("");
                *slot = field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| HarnessError::row(&self.path, line, format!("`{field}` is not a finite number")))?;
            }
            f(line, &values)?;
        }
    }
}

/// Tracks time stamps: strictly increasing, with long gaps reported.
struct Clock<'a> {
    path: &'a Path,
    what: &'static str,
    times: Vec<f64>,
    lines: Vec<usize>,
}

impl<'a> Clock<'a> {
    fn new(path: &'a Path, what: &'static str) -> Self {
        Self {
            path,
            what,
            times: Vec::new(),
            lines: Vec::new(),
        }
    }

    fn push(&mut self, line: usize, t: f64) -> Result<()> {
        if let Some(&prev) = self.times.last() {
            if !(t > prev) {
                return Err(HarnessError::row(
                    self.path,
                    line,
                    format!("time {t} s is not after the previous {} time {prev} s", self.what),
                ));
            }
        }
        self.times.push(t);
        self.lines.push(line);
        Ok(())
    }

    fn gap_warnings(&self, nominal_rate: f64, out: &mut Vec<String>) {
        if self.times.len() < 2 {
            return;
        }
        let period = if nominal_rate > 0.0 {
            1.0 / nominal_rate
        } else {
            let mut steps: Vec<f64> = self.times.windows(2).map(|w| w[1] - w[0]).collect();
            steps.sort_by(f64::total_cmp);
            steps[steps.len() / 2]
        };
        for (i, w) in self.times.windows(2).enumerate() {
            let gap = w[1] - w[0];
            if gap > GAP_FACTOR * period {
                let msg = format!(
                    "{}:{}: {} gap of {gap} s before t = {} s (nominal period {period} s)",
                    self.path.display(),
                    self.lines[i + 1],
                    self.what,
                    w[1]
                );
                log::warn!("{msg}");
                out.push(msg);
            }
        }
    }
}

pub fn read_imu(path: &Path, meta: &IngestMetadata, report: &mut IngestReport) -> Result<Vec<ImuSample>> {
    let cols: Vec<&String> = meta.imu_columns.iter().collect();
    let ts = meta.time_unit.to_seconds();
    let fs = match meta.accel_unit {
        AccelUnit::Mps2 => 1.0,
        AccelUnit::G => navfuse::ins::STANDARD_GRAVITY,
    };
    let ws = match meta.gyro_unit {
        GyroUnit::Radps => 1.0,
        GyroUnit::Degps => std::f64::consts::PI / 180.0,
    };
    let mut clock = Clock::new(path, "IMU");
    let mut out = Vec::new();
    Table::open(path, meta.delimiter, &cols)?.rows(|line, v| {
        let time = v[0] * ts;
        clock.push(line, time)?;
        out.push(ImuSample {
            time,
            specific_force: Vector3::new(v[1], v[2], v[3]) * fs,
            angular_rate: Vector3::new(v[4], v[5], v[6]) * ws,
        });
        Ok(())
    })?;
    if out.is_empty() {
        return Err(HarnessError::Data(format!("{}: no IMU rows", path.display())));
    }
    check_accel_units(path, &out, meta.accel_unit)?;
    let peak_rate = out.iter().map(|s| s.angular_rate.norm()).fold(0.0, f64::max);
    if meta.gyro_unit == GyroUnit::Radps && peak_rate > 10.0 {
        report.warnings.push(format!(
            "{}: peak angular rate {peak_rate:.1} rad/s is implausible; is gyro_unit really radps?",
            path.display()
        ));
    }
    clock.gap_warnings(meta.imu_rate_hz, &mut report.warnings);
    report.imu_rows = out.len();
    Ok(out)
}

/// The mean specific-force magnitude of a marine vehicle is close to one g;
/// a mean near 1 (or near 96) means the declared unit is wrong.
fn check_accel_units(path: &Path, imu: &[ImuSample], declared: AccelUnit) -> Result<()> {
    let mean = imu.iter().map(|s| s.specific_force.norm()).sum::<f64>() / imu.len() as f64;
    let g = navfuse::ins::STANDARD_GRAVITY;
    if (mean - g).abs() > 0.5 * g {
        return Err(HarnessError::Data(format!(
            "{}: mean specific force {mean:.3} m/s^2 after applying accel_unit = {declared:?}; \
             expected about {g} m/s^2, so the declared unit is probably wrong",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_dvl(path: &Path, meta: &IngestMetadata, report: &mut IngestReport) -> Result<Vec<DvlBeams>> {
    let mut cols: Vec<&String> = meta.dvl_columns.iter().collect();
    cols.extend(&meta.dvl_valid_columns);
    let ts = meta.time_unit.to_seconds();
    let vs = meta.velocity_unit.to_mps();
    let has_valid = !meta.dvl_valid_columns.is_empty();
    let mut clock = Clock::new(path, "DVL");
    let mut out = Vec::new();
    Table::open(path, meta.delimiter, &cols)?.rows(|line, v| {
        let time = v[0] * ts;
        clock.push(line, time)?;
        let mut valid = [true; 4];
        if has_valid {
            for (i, flag) in valid.iter_mut().enumerate() {
                *flag = match v[5 + i] {
                    x if x == 0.0 => false,
                    x if x == 1.0 => true,
                    x => return Err(HarnessError::row(path, line, format!("validity flag {x} is not 0 or 1"))),
                };
            }
        }
        out.push(DvlBeams {
            time,
            beams: Vector4::new(v[1], v[2], v[3], v[4]) * vs,
            valid,
        });
        Ok(())
    })?;
    if out.is_empty() {
        return Err(HarnessError::Data(format!("{}: no DVL rows", path.display())));
    }
    clock.gap_warnings(meta.dvl_rate_hz, &mut report.warnings);
    report.dvl_rows = out.len();
    Ok(out)
}

pub fn read_truth(path: &Path, meta: &IngestMetadata, report: &mut IngestReport) -> Result<Vec<TruthState>> {
    let cols: Vec<&String> = meta.truth_columns.iter().collect();
    let ts = meta.time_unit.to_seconds();
    let mut clock = Clock::new(path, "truth");
    let mut out = Vec::new();
    Table::open(path, meta.delimiter, &cols)?.rows(|line, v| {
        let time = v[0] * ts;
        clock.push(line, time)?;
        let q = Quaternion::new(v[7], v[8], v[9], v[10]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(HarnessError::row(path, line, format!("quaternion norm {} is not 1", q.norm())));
        }
        out.push(TruthState {
            time,
            position: Vector3::new(v[1], v[2], v[3]),
            velocity: Vector3::new(v[4], v[5], v[6]),
            attitude: UnitQuaternion::new_unchecked(q),
        });
        Ok(())
    })?;
    report.truth_rows = out.len();
    Ok(out)
}

/// Reads `imu.csv`, `dvl.csv` and, when present, `truth.csv` from `dir`.
pub fn read_dataset(dir: &Path, meta: &IngestMetadata) -> Result<(Dataset, IngestReport)> {
    let mut report = IngestReport::default();
    let imu = read_imu(&dir.join(IMU_FILE), meta, &mut report)?;
    let dvl = read_dvl(&dir.join(DVL_FILE), meta, &mut report)?;
    let truth_path = dir.join(TRUTH_FILE);
    let truth = if truth_path.exists() {
        Some(read_truth(&truth_path, meta, &mut report)?)
    } else {
        None
    };
    Ok((Dataset { imu, dvl, truth }, report))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> HarnessError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => HarnessError::io(path, io),
        other => HarnessError::Data(format!("{}: {other:?}", path.display())),
    }
}

fn write_rows<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

pub fn write_imu(path: &Path, imu: &[ImuSample]) -> Result<()> {
    write_rows(
        path,
        &header(&IMU_HEADER),
        imu.iter().map(|s| {
            let (f, w) = (s.specific_force, s.angular_rate);
            vec![s.time, f.x, f.y, f.z, w.x, w.y, w.z]
        }),
    )
}

pub fn write_dvl(path: &Path, dvl: &[DvlBeams]) -> Result<()> {
    write_rows(
        path,
        &header(&DVL_HEADER),
        dvl.iter().map(|e| {
            let mut row = vec![e.time];
            row.extend(e.beams.iter());
            row.extend(e.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }));
            row
        }),
    )
}

pub fn write_truth(path: &Path, truth: &[TruthState]) -> Result<()> {
    write_rows(
        path,
        &header(&TRUTH_HEADER),
        truth.iter().map(|s| {
            let q = s.attitude.quaternion();
            let (p, v) = (s.position, s.velocity);
            vec![s.time, p.x, p.y, p.z, v.x, v.y, v.z, q.w, q.i, q.j, q.k]
        }),
    )
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    write_imu(&dir.join(IMU_FILE), &data.imu)?;
    write_dvl(&dir.join(DVL_FILE), &data.dvl)?;
    if let Some(truth) = &data.truth {
        write_truth(&dir.join(TRUTH_FILE), truth)?;
    }
    Ok(())
}

pub fn write_run(path: &Path, run: &FilterRun) -> Result<()> {
    let mut h = vec!["t".to_string()];
    h.extend(indexed("x", STATE_DIM));
    h.extend(indexed("pdiag", STATE_DIM));
    h.extend(indexed("innov", 3));
    write_rows(
        path,
        &h,
        run.rows.iter().map(|r| {
            let mut row = vec![r.time];
            row.extend(r.x.iter());
            row.extend(r.p_diag.iter());
            row.extend(r.innovation.iter());
            row
        }),
    )
}

/// Aware and neglect standard deviations side by side.
pub fn write_std_pair(path: &Path, aware: &FilterRun, neglect: &FilterRun) -> Result<()> {
    let mut h = vec!["t".to_string()];
    h.extend(indexed("aware_std", STATE_DIM));
    h.extend(indexed("neglect_std", STATE_DIM));
    write_rows(
        path,
        &h,
        aware.rows.iter().zip(&neglect.rows).map(|(a, n)| {
            let mut row = vec![a.time];
            row.extend(a.p_diag.iter().map(|v| v.sqrt()));
            row.extend(n.p_diag.iter().map(|v| v.sqrt()));
            row
        }),
    )
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut rows = vec![vec![0.0, f64::NAN, history.initial_val_loss, history.initial_val_loss]];
    rows.extend(
        history
            .epochs
            .iter()
            .map(|e| vec![e.epoch as f64, e.train_loss, e.val_loss, e.best_val_loss]),
    );
    write_rows(path, &header(&["epoch", "train_loss", "val_loss", "best_val_loss"]), rows)
}

/// Generic numeric table with a header.
pub fn write_table(path: &Path, names: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    write_rows(path, &header(names), rows)
}
