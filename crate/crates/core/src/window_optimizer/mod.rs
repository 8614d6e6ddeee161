//! Sliding-window joint optimization over keyframe states and the inverse
//! depths of free points, with a Schur-complement solver and a first-estimate
//! marginalization prior.

mod lm;
mod marginalization;
mod normal_equations;

use std::collections::HashMap;
use std::sync::Arc;

use log::debug;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PlaneCoeffs};
use crate::image::IntensitySampler;
use crate::photometric::{FramePhotoState, HostPatch, PhotometricConfig};

pub use lm::{levenberg_marquardt, IterationLog, ITERATION_CSV_HEADER, LeastSquaresProblem, LmConfig, LmReport};
pub use marginalization::{schur_marginalize, MarginalPrior};
pub use normal_equations::{NormalEquations, PointLinearization};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PointStatus {
    Candidate,
    Active,
    Associated,
    Outlier,
}

/// A point hosted in a keyframe.
#[derive(Clone, Debug)]
pub struct TrackedPoint {
    pub id: usize,
    /// Keyframe id of the host.
    pub host: usize,
    pub patch: HostPatch,
    pub inv_depth: f64,
    /// Variance of the inverse depth (1/m²).
    pub inv_depth_var: f64,
    pub status: PointStatus,
    /// World-frame plane of the associated surfel.
    pub plane: Option<PlaneCoeffs>,
    pub surfel: Option<usize>,
    /// Keyframe ids whose residual for this point was rejected.
    pub outlier_targets: Vec<usize>,
}

impl TrackedPoint {
    pub fn new(id: usize, host: usize, patch: HostPatch, inv_depth: f64, inv_depth_var: f64) -> Self {
        TrackedPoint {
            id,
            host,
            patch,
            inv_depth,
            inv_depth_var,
            status: PointStatus::Candidate,
            plane: None,
            surfel: None,
            outlier_targets: Vec::new(),
        }
    }

    /// Points that take part in the window energy.
    pub fn is_optimized(&self) -> bool {
        matches!(self.status, PointStatus::Active | PointStatus::Associated)
    }

    pub fn is_associated(&self) -> bool {
        self.status == PointStatus::Associated
    }
}

#[derive(Clone)]
pub struct Keyframe {
    pub id: usize,
    pub timestamp: f64,
    pub state: FramePhotoState,
    /// Linearization state stored the first time the frame enters the prior.
    pub fej: Option<FramePhotoState>,
    pub image: Arc<dyn IntensitySampler>,
}

impl std::fmt::Debug for Keyframe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Keyframe")
            .field("id", &self.id)
            .field("timestamp", &self.timestamp)
            .field("state", &self.state)
            .field("fej", &self.fej)
            .finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointMarginalization {
    /// Residuals of free points hosted in the removed frame enter the prior
    /// when the point has enough observations; others are discarded.
    Marginalize,
    /// All free points hosted in the removed frame are dropped.
    Discard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    pub max_keyframes: usize,
    pub photometric: PhotometricConfig,
    pub lm: LmConfig,
    /// Weight of the zero prior on each frame's `a` and `b`.
    pub affine_prior_a: f64,
    pub affine_prior_b: f64,
    /// Blocks whose mean |r| exceeds this multiple of the Huber threshold are
    /// excluded after convergence.
    pub outlier_factor: f64,
    pub point_marginalization: PointMarginalization,
    pub min_observations: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            max_keyframes: 7,
            photometric: PhotometricConfig::default(),
            lm: LmConfig::default(),
            affine_prior_a: 1e6,
            affine_prior_b: 1e2,
            outlier_factor: 3.0,
            point_marginalization: PointMarginalization::Marginalize,
            min_observations: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowState {
    pub keyframes: Vec<Keyframe>,
    pub points: Vec<TrackedPoint>,
    pub prior: MarginalPrior,
    pub intrinsics: CameraIntrinsics,
    pub config: WindowConfig,
    /// Whether the surfel constraints fix the gauge; the oldest keyframe is
    /// held fixed while they do not.
    pub anchored: bool,
}

impl WindowState {
    pub fn new(intrinsics: CameraIntrinsics, config: WindowConfig) -> Self {
        WindowState {
            keyframes: Vec::new(),
            points: Vec::new(),
            prior: MarginalPrior::default(),
            intrinsics,
            config,
            anchored: false,
        }
    }

    pub fn keyframe_index(&self, id: usize) -> Option<usize> {
        self.keyframes.iter().position(|k| k.id == id)
    }

    pub fn keyframe(&self, id: usize) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn index_map(&self) -> HashMap<usize, usize> {
        self.keyframes.iter().enumerate().map(|(i, k)| (k.id, i)).collect()
    }

    pub fn add_keyframe(&mut self, kf: Keyframe) -> Result<()> {
        if self.keyframes.len() >= self.config.max_keyframes {
            return Err(Error::InvalidParameter(format!(
                "window already holds {} keyframes",
                self.keyframes.len()
            )));
        }
        if self.keyframe_index(kf.id).is_some() {
            return Err(Error::InvalidParameter(format!("duplicate keyframe id {}", kf.id)));
        }
        self.keyframes.push(kf);
        Ok(())
    }

    pub fn count_status(&self, status: PointStatus) -> usize {
        self.points.iter().filter(|p| p.status == status).count()
    }

    /// Frames whose variables are held constant in the next solve.
    pub fn fixed_frames(&self) -> Vec<bool> {
        let mut fixed = vec![false; self.keyframes.len()];
        if !self.anchored {
            if let Some(f) = fixed.first_mut() {
                *f = true;
            }
        }
        fixed
    }

    /// Checks the structural invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<()> {
        if self.keyframes.len() > self.config.max_keyframes {
            return Err(Error::InvalidParameter("too many keyframes".into()));
        }
        for p in &self.points {
            if p.is_associated() != p.plane.is_some() {
                return Err(Error::InvalidParameter(format!("point {} plane/status mismatch", p.id)));
            }
            if matches!(p.status, PointStatus::Candidate | PointStatus::Active) && !(p.inv_depth > 0.0) {
                return Err(Error::InvalidParameter(format!("point {} has non-positive inverse depth", p.id)));
            }
            if self.keyframe_index(p.host).is_none() {
                return Err(Error::InvalidParameter(format!("point {} hosted outside the window", p.id)));
            }
        }
        self.prior.check_psd(1e-8)
    }

    /// Runs Levenberg-Marquardt on the window, then drops outlier residuals.
    pub fn optimize(&mut self) -> Result<LmReport> {
        let cfg = self.config.lm;
        let report = levenberg_marquardt(self, &cfg)?;
        let removed = self.remove_outlier_residuals();
        debug!(
            "window solve: {} iterations, energy {:.3} -> {:.3}, {} outlier residuals",
            report.iterations.len(),
            report.initial_energy,
            report.final_energy,
            removed
        );
        Ok(report)
    }

    /// Marks (point, target) pairs with mean |r| above the outlier threshold.
    pub fn remove_outlier_residuals(&mut self) -> usize {
        let threshold = self.config.outlier_factor * self.config.photometric.huber;
        let lin = normal_equations::linearize_points(self, false);
        let mut removed = 0;
        for pl in lin {
            for block in &pl.blocks {
                let mean = block.terms.iter().map(|t| t.residual.abs()).sum::<f64>() / block.terms.len() as f64;
                if mean > threshold {
                    let target_id = self.keyframes[block.target].id;
                    self.points[pl.point].outlier_targets.push(target_id);
                    removed += 1;
                }
            }
        }
        removed
    }
}

impl LeastSquaresProblem for WindowState {
    fn linearize(&self) -> Result<NormalEquations> {
        NormalEquations::build(self)
    }

    fn apply(&mut self, frames: &nalgebra::DVector<f64>, depths: &nalgebra::DVector<f64>, ne: &NormalEquations) {
        for (i, kf) in self.keyframes.iter_mut().enumerate() {
            let d = frames.fixed_rows::<8>(8 * i).into_owned();
            kf.state = kf.state.boxplus(&d);
        }
        for (var, &pi) in ne.depth_points.iter().enumerate() {
            let p = &mut self.points[pi];
            debug_assert!(p.status == PointStatus::Active, "only free points carry a depth variable");
            p.inv_depth = (p.inv_depth + depths[var]).max(1e-4);
        }
    }
}
