//! On-disk dataset layout: a directory holding `meta.toml` and one CSV file
//! per stream. Floats are written with Rust's shortest round-trip formatting,
//! so a write followed by a read reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geom::{Pose3, Rot3};
use crate::graph::imu::{ImuBias, ImuSample};
use crate::preprocess::Trace;
use crate::simworld::{GprSample, RawDataset, SimulationConfig, TruthSample, WheelSample};

pub const FORMAT: &str = "gprloc-dataset v1";
pub const META_FILE: &str = "meta.toml";
pub const GPR_FILE: &str = "gpr.csv";
pub const IMU_FILE: &str = "imu.csv";
pub const WHEEL_FILE: &str = "wheel.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const FILES: [&str; 5] = [META_FILE, GPR_FILE, IMU_FILE, WHEEL_FILE, TRUTH_FILE];

pub const IMU_HEADER: [&str; 7] = ["timestamp", "ax", "ay", "az", "gx", "gy", "gz"];
pub const WHEEL_HEADER: [&str; 2] = ["timestamp", "distance"];
pub const TRUTH_HEADER: [&str; 8] = ["timestamp", "x", "y", "z", "qw", "qx", "qy", "qz"];

pub fn gpr_header(samples: usize) -> Vec<String> {
    let mut h = vec!["timestamp".to_string(), "wheel_distance".to_string()];
    h.extend((0..samples).map(|i| format!("sample_{i}")));
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub seed: u64,
    pub trace_samples: usize,
    /// Trace sample period, ns.
    pub trace_dt: f64,
    pub initial_accel_bias: [f64; 3],
    pub initial_gyro_bias: [f64; 3],
    pub units: BTreeMap<String, String>,
    pub simulation: SimulationConfig,
}

impl DatasetMeta {
    pub fn new(seed: u64, simulation: SimulationConfig, data: &RawDataset) -> Self {
        let units = [
            ("timestamp", "s"),
            ("wheel_distance", "m"),
            ("trace_time", "ns"),
            ("accel", "m/s^2 (specific force, body frame)"),
            ("gyro", "rad/s (body frame)"),
            ("position", "m (world frame)"),
            ("quaternion", "body to world, scalar first"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let b = &data.initial_bias;
        DatasetMeta {
            format: FORMAT.to_string(),
            seed,
            trace_samples: simulation.sensor.samples,
            trace_dt: simulation.sensor.dt(),
            initial_accel_bias: [b.accel.x, b.accel.y, b.accel.z],
            initial_gyro_bias: [b.gyro.x, b.gyro.y, b.gyro.z],
            units,
            simulation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub data: RawDataset,
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn strings(h: &[&str]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

/// Writes the dataset directory, creating it when missing.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = toml::to_string(&ds.meta).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(dir.join(META_FILE), meta)?;
    let d = &ds.data;
    write_csv(
        &dir.join(GPR_FILE),
        &gpr_header(ds.meta.trace_samples),
        d.gpr.iter().map(|g| {
            let mut row = vec![num(g.t), num(g.trace.position)];
            row.extend(g.trace.samples.iter().map(|v| num(*v)));
            row
        }),
    )?;
    write_csv(
        &dir.join(IMU_FILE),
        &strings(&IMU_HEADER),
        d.imu.iter().map(|s| {
            [s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z].into_iter().map(num).collect()
        }),
    )?;
    write_csv(
        &dir.join(WHEEL_FILE),
        &strings(&WHEEL_HEADER),
        d.wheel.iter().map(|s| vec![num(s.t), num(s.distance)]),
    )?;
    write_csv(&dir.join(TRUTH_FILE), &strings(&TRUTH_HEADER), d.truth.iter().map(|s| pose_row(s.t, &s.pose)))?;
    Ok(())
}

pub(crate) fn pose_row(t: f64, p: &Pose3) -> Vec<String> {
    let q = p.rotation.wxyz();
    let x = p.translation;
    [t, x.x, x.y, x.z, q[0], q[1], q[2], q[3]].into_iter().map(num).collect()
}

pub(crate) fn pose_from_row(row: &[f64]) -> (f64, Pose3) {
    let rot = Rot3::from_wxyz(row[4], row[5], row[6], row[7]);
    (row[0], Pose3::new(rot, Vector3::new(row[1], row[2], row[3])))
}

/// Reads a CSV file with a mandatory exact header; returns the numeric rows
/// after checking that the first column strictly increases.
pub(crate) fn read_csv(path: &Path, header: &[String]) -> Result<Vec<Vec<f64>>> {
    let name = path.display();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{name}: {e}")))?;
    let got: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if got != header {
        return Err(Error::Data(format!("{name}: header mismatch, expected `{}`", header.join(","))));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{name}: {e}")))?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Data(format!("{name}: row {}: {e}", line + 1)))?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{name}: row {}: non-finite value", line + 1)));
        }
        if let Some(prev) = rows.last() {
            if !(row[0] > prev[0]) {
                return Err(Error::Data(format!(
                    "{name}: timestamps not strictly increasing at row {} ({} after {})",
                    line + 1,
                    row[0],
                    prev[0]
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let meta: DatasetMeta = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if meta.format != FORMAT {
        return Err(Error::Data(format!("{}: unsupported format `{}`", path.display(), meta.format)));
    }
    Ok(meta)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let gpr = read_csv(&dir.join(GPR_FILE), &gpr_header(meta.trace_samples))?
        .into_iter()
        .map(|row| {
            Ok(GprSample { t: row[0], trace: Trace::new(row[2..].to_vec(), meta.trace_dt, row[1])? })
        })
        .collect::<Result<Vec<_>>>()?;
    let imu = read_csv(&dir.join(IMU_FILE), &strings(&IMU_HEADER))?
        .into_iter()
        .map(|r| ImuSample {
            t: r[0],
            accel: Vector3::new(r[1], r[2], r[3]),
            gyro: Vector3::new(r[4], r[5], r[6]),
        })
        .collect();
    let wheel = read_csv(&dir.join(WHEEL_FILE), &strings(&WHEEL_HEADER))?
        .into_iter()
        .map(|r| WheelSample { t: r[0], distance: r[1] })
        .collect();
    let truth = read_csv(&dir.join(TRUTH_FILE), &strings(&TRUTH_HEADER))?
        .into_iter()
        .map(|r| {
            let (t, pose) = pose_from_row(&r);
            TruthSample { t, pose }
        })
        .collect();
    let initial_bias = ImuBias::new(Vector3::from(meta.initial_accel_bias), Vector3::from(meta.initial_gyro_bias));
    Ok(Dataset { meta, data: RawDataset { gpr, imu, wheel, truth, initial_bias } })
}

/// SHA-256 over the file names and bytes of every dataset file.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in FILES {
        let bytes = fs::read(dir.join(name)).map_err(|e| Error::Data(format!("{}: {e}", dir.join(name).display())))?;
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{simulate, TrajectoryConfig};

    fn small() -> (SimulationConfig, RawDataset) {
        let cfg = SimulationConfig { trajectory: TrajectoryConfig::straight(1.0), ..Default::default() };
        let (_, data) = simulate(&cfg, 3).unwrap();
        (cfg, data)
    }

    #[test]
    fn roundtrip_is_exact() {
        let (cfg, data) = small();
        let ds = Dataset { meta: DatasetMeta::new(3, cfg, &data), data };
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.data.gpr, ds.data.gpr);
        assert_eq!(back.data.imu, ds.data.imu);
        assert_eq!(back.data.wheel, ds.data.wheel);
        for (a, b) in back.data.truth.iter().zip(&ds.data.truth) {
            assert_eq!(a.t, b.t);
            assert!(a.pose.boxminus(&b.pose).norm() < 1e-12);
        }
        let other = tempfile::tempdir().unwrap();
        write_dataset(other.path(), &ds).unwrap();
        assert_eq!(dataset_hash(dir.path()).unwrap(), dataset_hash(other.path()).unwrap());
    }

    #[test]
    fn bad_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.csv");
        fs::write(&p, "time,distance\n0,0\n").unwrap();
        assert!(matches!(read_csv(&p, &strings(&WHEEL_HEADER)), Err(Error::Data(_))));
        fs::write(&p, "timestamp,distance\n0,0\n0,1\n").unwrap();
        let err = read_csv(&p, &strings(&WHEEL_HEADER)).unwrap_err();
        assert!(err.to_string().contains("strictly increasing"));
        fs::write(&p, "timestamp,distance\n0,abc\n").unwrap();
        assert!(read_csv(&p, &strings(&WHEEL_HEADER)).is_err());
    }
}
