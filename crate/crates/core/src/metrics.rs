//! Pose errors, masked adherence, moment checks and voxel coverage.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::camera::{rotation_angle, CameraPose, Mat3, Vec3};
use crate::geometry::cloud::PointCloud;
use crate::latent::{LatentVideo, VideoMask};

#[derive(Clone, Debug, PartialEq)]
pub struct PoseTrajectory {
    pub poses: Vec<CameraPose>,
}

impl PoseTrajectory {
    pub fn new(poses: Vec<CameraPose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::invalid("pose trajectory is empty"));
        }
        Ok(PoseTrajectory { poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// `R_0^T R_i` for every pose.
    pub fn relative_rotations(&self) -> Vec<Mat3> {
        let r0t = self.poses[0].rotation.transpose();
        self.poses.iter().map(|p| r0t * p.rotation).collect()
    }

    /// `R_0^T (t_i - t_0)` for every pose.
    pub fn relative_translations(&self) -> Vec<Vec3> {
        let p0 = &self.poses[0];
        self.poses.iter().map(|p| p0.rotation.transpose() * (p.translation - p0.translation)).collect()
    }

    /// One line per pose: the rotation row-major, then the translation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.poses {
            let r = &p.rotation;
            let vals = [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]];
            let line: Vec<String> = vals.iter().chain(p.translation.iter()).map(|v| format!("{v:.17e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut poses = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::format("pose trajectory", format!("line {}: bad number `{t}`", i + 1))))
                .collect::<Result<_>>()?;
            if v.len() != 12 {
                return Err(Error::format("pose trajectory", format!("line {}: expected 12 numbers, got {}", i + 1, v.len())));
            }
            let r = Mat3::from_row_slice(&v[..9]);
            poses.push(
                CameraPose::new(r, Vec3::new(v[9], v[10], v[11]))
                    .map_err(|e| Error::format("pose trajectory", format!("line {}: {e}", i + 1)))?,
            );
        }
        Self::new(poses)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn check_pair(a: &PoseTrajectory, b: &PoseTrajectory) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("trajectory lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("pose errors need at least 2 poses"));
    }
    Ok(())
}

/// Mean geodesic angle in degrees between frame-0-relative rotations,
/// averaged over frames 1..n.
pub fn rot_err(a: &PoseTrajectory, b: &PoseTrajectory) -> Result<f64> {
    check_pair(a, b)?;
    let (ra, rb) = (a.relative_rotations(), b.relative_rotations());
    let total: f64 = ra.iter().zip(&rb).skip(1).map(|(x, y)| rotation_angle(&(x.transpose() * y)).to_degrees()).sum();
    Ok(total / (a.len() - 1) as f64)
}

/// Mean distance between frame-0-relative translations, each trajectory
/// scaled by its own largest relative translation, averaged over frames 1..n.
pub fn trans_err(a: &PoseTrajectory, b: &PoseTrajectory) -> Result<f64> {
    check_pair(a, b)?;
    let norm = |t: Vec<Vec3>| {
        let m = t.iter().map(|v| v.norm()).fold(0.0, f64::max);
        t.into_iter().map(|v| if m > 0.0 { v / m } else { v }).collect::<Vec<_>>()
    };
    let (ta, tb) = (norm(a.relative_translations()), norm(b.relative_translations()));
    let total: f64 = ta.iter().zip(&tb).skip(1).map(|(x, y)| (x - y).norm()).sum();
    Ok(total / (a.len() - 1) as f64)
}

/// Mean squared difference over masked entries; the mask covers every channel.
pub fn masked_mse(a: &LatentVideo, b: &LatentVideo, m: &VideoMask) -> Result<f64> {
    a.ensure_same_shape(b)?;
    m.ensure_matches(a.shape())?;
    let c = a.shape().channels;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if m.at_latent_index(i, c) {
            sum += (x - y).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("masked_mse needs a nonzero mask"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentReport {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// `|mean - target| / max(|target|, target std)` per dimension.
    pub mean_rel_dev: Vec<f64>,
    /// `|var - target| / target` per dimension.
    pub var_rel_dev: Vec<f64>,
    pub tol: f64,
    pub pass: bool,
}

pub const MIN_MOMENT_SAMPLES: usize = 1000;

/// Compares empirical moments of `samples` (one vector per sample) with
/// the targets.
pub fn moment_check(samples: &[Vec<f64>], target_mean: &[f64], target_var: &[f64], tol: f64) -> Result<MomentReport> {
    if samples.len() < MIN_MOMENT_SAMPLES {
        return Err(Error::invalid(format!("moment check needs at least {MIN_MOMENT_SAMPLES} samples, got {}", samples.len())));
    }
    let d = target_mean.len();
    if d == 0 || target_var.len() != d || samples.iter().any(|s| s.len() != d) {
        return Err(Error::invalid("sample and target dimensions disagree"));
    }
    if target_var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("target variances must be positive"));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m).powi(2) / (n - 1.0);
        }
    }
    let mean_rel_dev: Vec<f64> =
        (0..d).map(|k| (mean[k] - target_mean[k]).abs() / target_mean[k].abs().max(target_var[k].sqrt())).collect();
    let var_rel_dev: Vec<f64> = (0..d).map(|k| (var[k] - target_var[k]).abs() / target_var[k]).collect();
    let pass = mean_rel_dev.iter().chain(&var_rel_dev).all(|&e| e <= tol);
    Ok(MomentReport { mean, variance: var, mean_rel_dev, var_rel_dev, tol, pass })
}

fn voxel_of(p: &Vec3, origin: &Vec3, voxel: f64) -> (i64, i64, i64) {
    let g = (p - origin) / voxel;
    (g.x.floor() as i64, g.y.floor() as i64, g.z.floor() as i64)
}

/// Fraction of voxels occupied by `gt` that also hold a point of `recon`.
/// The grid is offset half a voxel below the ground-truth bounding box so
/// axis-aligned faces sit at voxel centers.
pub fn coverage(recon: &PointCloud, gt: &PointCloud, voxel: f64) -> Result<f64> {
    if !(voxel > 0.0) {
        return Err(Error::invalid("coverage voxel must be positive"));
    }
    let (lo, _) = gt.bounds().ok_or_else(|| Error::invalid("ground-truth surface is empty"))?;
    let origin = lo - Vec3::repeat(voxel / 2.0);
    let gt_cells: HashSet<_> = gt.positions.iter().map(|p| voxel_of(p, &origin, voxel)).collect();
    let hit: HashSet<_> = recon.positions.iter().map(|p| voxel_of(p, &origin, voxel)).filter(|c| gt_cells.contains(c)).collect();
    Ok(hit.len() as f64 / gt_cells.len() as f64)
}

/// Named values with optional pass/fail, rendered as a table or as
/// `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, f64, Option<bool>)>,
}

impl Report {
    pub fn value(&mut self, name: impl Into<String>, v: f64) {
        self.rows.push((name.into(), v, None));
    }

    pub fn check(&mut self, name: impl Into<String>, v: f64, pass: bool) {
        self.rows.push((name.into(), v, Some(pass)));
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.2 != Some(false))
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<w$}  {:>14}  status\n", "name", "value");
        for (n, v, p) in &self.rows {
            let s = match p {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "-",
            };
            let _ = writeln!(out, "{n:<w$}  {v:>14.6e}  {s}");
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (n, v, p) in &self.rows {
            let _ = writeln!(out, "{n}={v:e}");
            if let Some(p) = p {
                let _ = writeln!(out, "{n}.pass={p}");
            }
        }
        out
    }
}
