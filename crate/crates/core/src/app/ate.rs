//! Trajectory estimates and absolute trajectory error.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::app::dataset::{pose_from_row, pose_row, read_csv, TRUTH_HEADER};
use crate::error::{Error, Result};
use crate::geom::Pose3;

/// Largest time offset of an associated estimate/truth pair, s.
pub const MATCH_WINDOW: f64 = 0.01;

pub const ESTIMATE_FILE: &str = "estimate.csv";
pub const ESTIMATE_META_FILE: &str = "estimate.meta";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateProvenance {
    pub model: String,
    pub config_hash: String,
    pub dataset_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEstimate {
    /// One pose per graph state, in creation order.
    pub poses: Vec<(f64, Pose3)>,
    pub provenance: EstimateProvenance,
}

impl TrajectoryEstimate {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(ESTIMATE_FILE))?;
        w.write_record(TRUTH_HEADER)?;
        for (t, p) in &self.poses {
            w.write_record(pose_row(*t, p))?;
        }
        w.flush()?;
        let meta = toml::to_string(&self.provenance).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(dir.join(ESTIMATE_META_FILE), meta)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let header: Vec<String> = TRUTH_HEADER.iter().map(|s| s.to_string()).collect();
        let poses = read_csv(&dir.join(ESTIMATE_FILE), &header)?.iter().map(|r| pose_from_row(r)).collect();
        let path = dir.join(ESTIMATE_META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let provenance = toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(TrajectoryEstimate { poses, provenance })
    }
}

/// Pairs each estimate with the nearest truth sample within
/// [`MATCH_WINDOW`]. `truth` must be sorted by time.
pub fn associate(est: &[(f64, Pose3)], truth: &[(f64, Pose3)]) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let mut out = Vec::with_capacity(est.len());
    for (t, p) in est {
        let i = truth.partition_point(|s| s.0 < *t);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < truth.len())
            .min_by(|&a, &b| (truth[a].0 - t).abs().total_cmp(&(truth[b].0 - t).abs()));
        if let Some(j) = best {
            if (truth[j].0 - t).abs() <= MATCH_WINDOW {
                out.push((p.translation, truth[j].1.translation));
            }
        }
    }
    out
}

/// Rotation and translation minimizing `Σ |R a + t − b|²`.
pub fn rigid_align(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = pairs.len() as f64;
    let ca = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let cb = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in pairs {
        h += (a - ca) * (b - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    (r, cb - r * ca)
}

/// RMSE of position differences after rigid alignment.
pub fn ate_rmse(est: &[(f64, Pose3)], truth: &[(f64, Pose3)]) -> Result<f64> {
    let pairs = associate(est, truth);
    if pairs.len() < 3 {
        return Err(Error::TooFew { needed: 3, have: pairs.len() });
    }
    let (r, t) = rigid_align(&pairs);
    let sq: f64 = pairs.iter().map(|(a, b)| (r * a + t - b).norm_squared()).sum();
    Ok((sq / pairs.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(points: &[[f64; 2]]) -> Vec<(f64, Pose3)> {
        points.iter().enumerate().map(|(i, p)| (i as f64, Pose3::planar(p[0], p[1], 0.3 * i as f64))).collect()
    }

    #[test]
    fn identical_and_offset_trajectories() {
        let truth = traj(&[[0.0, 0.0], [1.0, 0.5], [2.0, -0.3], [3.0, 1.0]]);
        assert!(ate_rmse(&truth, &truth).unwrap() < 1e-12);
        let shifted: Vec<_> = truth
            .iter()
            .map(|(t, p)| (*t, Pose3::from_translation(1.0, 0.0, 0.0).compose(p)))
            .collect();
        assert!(ate_rmse(&shifted, &truth).unwrap() < 1e-12);
    }

    #[test]
    fn scaled_square() {
        let truth = traj(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]);
        let est: Vec<_> = truth
            .iter()
            .map(|(t, p)| {
                let c = Vector3::new(0.5, 0.5, 0.0);
                (*t, Pose3::new(p.rotation, c + (p.translation - c) * 1.1))
            })
            .collect();
        let expected = 0.1 * 2f64.sqrt() / 2.0;
        assert!((ate_rmse(&est, &truth).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn association_window() {
        let truth = traj(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]);
        let late: Vec<_> = truth.iter().map(|(t, p)| (t + 0.02, *p)).collect();
        assert!(matches!(ate_rmse(&late, &truth), Err(Error::TooFew { needed: 3, have: 0 })));
        let close: Vec<_> = truth.iter().map(|(t, p)| (t + 0.005, *p)).collect();
        assert_eq!(associate(&close, &truth).len(), 4);
    }
}
