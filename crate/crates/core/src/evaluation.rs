//! Trajectory association, closed-form similarity alignment and the ATE /
//! RPE error metrics, plus the timestamped trajectory text format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Default timestamp association window (seconds).
pub const DEFAULT_ASSOCIATION_TOLERANCE: f64 = 0.01;

/// Timestamped camera-to-world poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub stamps: Vec<f64>,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self> {
        if stamps.len() != poses.len() {
            return Err(Error::InvalidParameter(format!(
                "{} timestamps for {} poses",
                stamps.len(),
                poses.len()
            )));
        }
        if let Some(i) = stamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(format!(
                "timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(Trajectory { stamps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Accumulated path length.
    pub fn path_length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].translation - w[0].translation).norm()).sum()
    }

    /// Largest distance between any two positions.
    pub fn diameter(&self) -> f64 {
        let pos = self.positions();
        pos.par_iter()
            .enumerate()
            .map(|(i, a)| pos[i + 1..].iter().map(|b| (a - b).norm()).fold(0.0, f64::max))
            .reduce(|| 0.0, f64::max)
    }

    /// Applies `x ↦ s·R·x + t` to every pose.
    pub fn transformed(&self, alignment: &Alignment) -> Trajectory {
        Trajectory {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(|p| alignment.apply(p)).collect(),
        }
    }

    /// Parses `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment.
    pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory> {
        let mut stamps = Vec::new();
        let mut poses = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(path, lineno + 1, e.to_string()))?;
            if vals.len() != 8 {
                return Err(Error::parse(path, lineno + 1, format!("expected 8 fields, found {}", vals.len())));
            }
            let q = nalgebra::Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            if !(q.norm() > 1e-9) {
                return Err(Error::parse(path, lineno + 1, "zero quaternion"));
            }
            stamps.push(vals[0]);
            poses.push(Pose::from_quaternion(
                nalgebra::UnitQuaternion::from_quaternion(q),
                Vector3::new(vals[1], vals[2], vals[3]),
            ));
        }
        Trajectory::new(stamps, poses).map_err(|e| Error::parse(path, 0, e.to_string()))
    }

    pub fn read_tum(path: &Path) -> Result<Trajectory> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Trajectory::parse_tum(&text, path)
    }

    pub fn to_tum(&self) -> String {
        let mut s = String::new();
        for (t, p) in self.stamps.iter().zip(&self.poses) {
            let q = p.quaternion();
            let _ = writeln!(
                s,
                "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                t, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
            );
        }
        s
    }

    pub fn write_tum(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tum()).map_err(|e| Error::io(path, e))
    }
}

/// Pairs `(est index, gt index)` by nearest timestamp within `tolerance`.
pub fn associate(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (i, &t) in est.stamps.iter().enumerate() {
        let j = gt.stamps.partition_point(|s| *s < t);
        let best = [j.checked_sub(1), (j < gt.stamps.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|a, b| (gt.stamps[*a] - t).abs().total_cmp(&(gt.stamps[*b] - t).abs()));
        if let Some(j) = best {
            if (gt.stamps[j] - t).abs() <= tolerance {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Similarity `x ↦ s·R·x + t` taking estimate coordinates to ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub transform: Pose,
}

impl Alignment {
    pub fn identity() -> Self {
        Alignment {
            scale: 1.0,
            transform: Pose::identity(),
        }
    }

    pub fn apply_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.transform.rotation * x * self.scale + self.transform.translation
    }

    /// Maps a camera-to-world pose.
    pub fn apply(&self, t_w_c: &Pose) -> Pose {
        Pose::new(self.transform.rotation * t_w_c.rotation, self.apply_point(&t_w_c.translation))
    }
}

/// Closed-form least-squares similarity (or rigid) alignment of point sets.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<Alignment> {
    if src.len() != dst.len() {
        return Err(Error::InvalidParameter("point sets differ in length".into()));
    }
    if src.len() < 3 {
        return Err(Error::InvalidParameter(format!("alignment needs at least 3 pairs, got {}", src.len())));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        spread += a * a.transpose();
    }
    cov /= n;
    spread /= n;
    let sv = spread.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate(
            "positions are collinear: rotation about the line is unobservable".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let var_s: f64 = sv.iter().sum();
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Alignment {
        scale,
        transform: Pose::new(rotation, translation),
    })
}

/// Alignment of `est` onto `gt` over timestamp-associated pairs.
pub fn align(est: &Trajectory, gt: &Trajectory, with_scale: bool, tolerance: f64) -> Result<Alignment> {
    let pairs = associate(est, gt, tolerance);
    let src: Vec<_> = pairs.iter().map(|(i, _)| est.poses[*i].translation).collect();
    let dst: Vec<_> = pairs.iter().map(|(_, j)| gt.poses[*j].translation).collect();
    umeyama(&src, &dst, with_scale)
}

/// RMSE of the position differences over associated pairs (no alignment).
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Result<f64> {
    let pairs = associate(est, gt, tolerance);
    if pairs.is_empty() {
        return Err(Error::EmptyInput("associated pose pairs"));
    }
    let sum: f64 = pairs
        .iter()
        .map(|(i, j)| (est.poses[*i].translation - gt.poses[*j].translation).norm_squared())
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Per-pair position errors (metres), in estimate order.
pub fn position_errors(est: &Trajectory, gt: &Trajectory, tolerance: f64) -> Vec<(f64, f64)> {
    associate(est, gt, tolerance)
        .into_iter()
        .map(|(i, j)| (est.stamps[i], (est.poses[i].translation - gt.poses[j].translation).norm()))
        .collect()
}

/// RMSE of relative translation errors over all segments whose ground-truth
/// path length first reaches `segment_length`.
pub fn rpe(est: &Trajectory, gt: &Trajectory, segment_length: f64, tolerance: f64) -> Result<(f64, usize)> {
    if !(segment_length > 0.0) {
        return Err(Error::InvalidParameter(format!("segment length {segment_length} must be positive")));
    }
    let pairs = associate(est, gt, tolerance);
    // accumulated ground-truth path length at every associated pair
    let mut dist = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for (k, (_, j)) in pairs.iter().enumerate() {
        if k > 0 {
            acc += (gt.poses[*j].translation - gt.poses[pairs[k - 1].1].translation).norm();
        }
        dist.push(acc);
    }
    // accumulated sums of equal steps land a few ulps short of the length
    let reach = segment_length * (1.0 - 1e-9);
    let errors: Vec<f64> = (0..pairs.len())
        .into_par_iter()
        .filter_map(|a| {
            let b = a + dist[a..].partition_point(|d| *d - dist[a] < reach);
            if b >= pairs.len() {
                return None;
            }
            let (ei, gi) = pairs[a];
            let (ej, gj) = pairs[b];
            let rel_gt = gt.poses[gi].inverse() * gt.poses[gj];
            let rel_est = est.poses[ei].inverse() * est.poses[ej];
            Some((rel_gt.inverse() * rel_est).translation.norm_squared())
        })
        .collect();
    if errors.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "trajectory has no full segment of {segment_length} m"
        )));
    }
    Ok(((errors.iter().sum::<f64>() / errors.len() as f64).sqrt(), errors.len()))
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub count: usize,
}

pub const METRICS_HEADER: &str = "metric,value,count";

pub fn metrics_csv(metrics: &[Metric]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        let _ = writeln!(s, "{},{:.9},{}", m.name, m.value, m.count);
    }
    s
}

/// Standard evaluation: similarity-aligned ATE (and its scale), unaligned
/// ATE, and RPE at each segment length that fits.
pub fn evaluate(est: &Trajectory, gt: &Trajectory, segments: &[f64], tolerance: f64) -> Result<Vec<Metric>> {
    let pairs = associate(est, gt, tolerance).len();
    if pairs == 0 {
        return Err(Error::EmptyInput("associated pose pairs"));
    }
    let mut out = vec![Metric {
        name: "ate_rmse".into(),
        value: ate_rmse(est, gt, tolerance)?,
        count: pairs,
    }];
    match align(est, gt, true, tolerance) {
        Ok(sim) => {
            out.push(Metric {
                name: "ate_rmse_sim3".into(),
                value: ate_rmse(&est.transformed(&sim), gt, tolerance)?,
                count: pairs,
            });
            out.push(Metric {
                name: "alignment_scale".into(),
                value: sim.scale,
                count: pairs,
            });
        }
        Err(e) => log::warn!("similarity alignment skipped: {e}"),
    }
    for &len in segments {
        match rpe(est, gt, len, tolerance) {
            Ok((value, count)) => out.push(Metric {
                name: format!("rpe_{len}m"),
                value,
                count,
            }),
            Err(e) => log::warn!("RPE at {len} m skipped: {e}"),
        }
    }
    Ok(out)
}
