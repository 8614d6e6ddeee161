//! Frame tracking, keyframe and point management, initialization from the
//! rendered depth map, and the filter/associate lifecycle that moves free
//! points onto surfel planes.

mod candidates;
mod localizer;
mod tracker;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{transform_plane, CameraIntrinsics, PlaneCoeffs, Pose};
use crate::photometric::{FramePhotoState, PATTERN as PATCH_PATTERN};
use crate::renderer::{RenderOptions, RenderedMaps};
use crate::surfel_map::SurfelMap;
use crate::window_optimizer::{PointStatus, TrackedPoint, WindowState};

pub use candidates::select_candidates;
pub use localizer::{ConstraintLogEntry, FrameInput, FrameResult, Localizer, LocalizerConfig};
pub use tracker::{track_frame, FlowStats, ReferencePoint, TrackResult, TrackingReference};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackerConfig {
    pub pyramid_levels: usize,
    /// Target number of candidate points per keyframe.
    pub candidate_density: usize,
    /// Added to the regional median gradient norm to form the selection threshold.
    pub min_gradient_add: f64,
    /// Fraction of candidates that need a rendered depth at initialization.
    pub init_min_coverage: f64,
    /// RMS flow (px) of a pure-translation warp that triggers a keyframe.
    pub kf_translation_flow: f64,
    /// RMS flow (px) of the full warp that triggers a keyframe.
    pub kf_rotation_flow: f64,
    /// `|ln a_th|` that triggers a keyframe.
    pub kf_brightness: f64,
    pub outlier_pixels: f64,
    pub outlier_theta: f64,
    pub associate_pixels: f64,
    pub associate_theta: f64,
    /// Normal disagreement (degrees) above which a stored plane is re-examined.
    pub reassociate_angle_deg: f64,
    /// Point-to-plane offset, in surfel radii, above which a stored plane is re-examined.
    pub reassociate_offset: f64,
    pub tracking_iterations: usize,
    /// Per-pixel RMS residual at the finest level above which tracking is lost.
    pub max_tracking_rms: f64,
    /// Minimum fraction of reference residuals that must stay inside the image.
    pub min_tracking_fraction: f64,
    /// Share of surfel constraints from which the map, rather than a fixed
    /// oldest keyframe, holds the window's gauge.
    pub anchor_ratio: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            pyramid_levels: 4,
            candidate_density: 800,
            min_gradient_add: 3.0,
            init_min_coverage: 0.2,
            kf_translation_flow: 8.0,
            kf_rotation_flow: 16.0,
            kf_brightness: 0.7,
            outlier_pixels: 5.0,
            outlier_theta: 0.5,
            associate_pixels: 2.0,
            associate_theta: 0.2,
            reassociate_angle_deg: 10.0,
            reassociate_offset: 2.0,
            tracking_iterations: 12,
            max_tracking_rms: 30.0,
            min_tracking_fraction: 0.2,
            anchor_ratio: 0.2,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("candidate_density", self.candidate_density as f64),
            ("pyramid_levels", self.pyramid_levels as f64),
            ("kf_translation_flow", self.kf_translation_flow),
            ("kf_rotation_flow", self.kf_rotation_flow),
            ("kf_brightness", self.kf_brightness),
            ("outlier_pixels", self.outlier_pixels),
            ("outlier_theta", self.outlier_theta),
            ("associate_pixels", self.associate_pixels),
            ("associate_theta", self.associate_theta),
            ("reassociate_angle_deg", self.reassociate_angle_deg),
            ("reassociate_offset", self.reassociate_offset),
            ("tracking_iterations", self.tracking_iterations as f64),
            ("max_tracking_rms", self.max_tracking_rms),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive (got {v})")));
            }
        }
        if self.associate_pixels >= self.outlier_pixels || self.associate_theta >= self.outlier_theta {
            return Err(Error::InvalidParameter(
                "association thresholds must be strictly tighter than the outlier thresholds".into(),
            ));
        }
        if self.outlier_theta >= 1.0 {
            return Err(Error::InvalidParameter("outlier_theta must be below 1".into()));
        }
        for (name, v) in [
            ("init_min_coverage", self.init_min_coverage),
            ("min_tracking_fraction", self.min_tracking_fraction),
            ("anchor_ratio", self.anchor_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1] (got {v})")));
            }
        }
        Ok(())
    }
}

/// Relative inverse-depth disagreement `1 − min/max`.
pub fn theta(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi <= 0.0 {
        return 0.0;
    }
    1.0 - lo / hi
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Association {
    Outlier,
    Associate,
    Unchanged,
}

/// Rule table: either outlier criterion alone rejects; both association
/// criteria are needed to associate; anything in between is left alone.
pub fn classify_association(pixel_distance: f64, theta: f64, cfg: &TrackerConfig) -> Association {
    if pixel_distance >= cfg.outlier_pixels || theta >= cfg.outlier_theta {
        Association::Outlier
    } else if pixel_distance < cfg.associate_pixels && theta < cfg.associate_theta {
        Association::Associate
    } else {
        Association::Unchanged
    }
}

/// Inverse depth, in the host frame, of the intersection of the host ray
/// through `p_h` with the world plane `omega_w`.
pub fn surfel_induced_inverse_depth(
    p_h: &Vector2<f64>,
    omega_w: &PlaneCoeffs,
    t_h_w: &Pose,
    k: &CameraIntrinsics,
) -> Result<f64> {
    let omega_h = transform_plane(t_h_w, omega_w);
    if omega_h.d.abs() <= 1e-9 {
        return Err(Error::DegeneratePlane(omega_h.d));
    }
    let xbar = k.normalized(p_h);
    let rho = -omega_h.normal.dot(&xbar) / omega_h.d;
    let clip = RenderOptions::default();
    if !(rho > 0.0) || !(1.0 / rho >= clip.near && 1.0 / rho <= clip.far) {
        return Err(Error::NoIntersection);
    }
    Ok(rho)
}

/// Projects the host pixel at inverse depth `rho` into the frame `t_t_w`.
pub fn project_inverse_depth(
    p_h: &Vector2<f64>,
    rho: f64,
    t_h_w: &Pose,
    t_t_w: &Pose,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>> {
    let x_h = k.backproject(p_h, rho)?;
    let x_t = (*t_t_w * t_h_w.inverse()).transform_point(&x_h);
    k.project(&x_t)
}

/// Current inverse depth of an optimized point: the estimate for free
/// points, the plane intersection for associated ones.
pub fn point_inverse_depth(p: &TrackedPoint, host: &FramePhotoState, k: &CameraIntrinsics) -> Result<f64> {
    match (p.status, &p.plane) {
        (PointStatus::Associated, Some(plane)) => surfel_induced_inverse_depth(&p.patch.center, plane, &host.t_c_w, k),
        _ if p.inv_depth > 0.0 => Ok(p.inv_depth),
        _ => Err(Error::InvalidDepth(p.inv_depth)),
    }
}

/// One point status change, keyed by the keyframe at which it happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatusTransition {
    pub keyframe: usize,
    pub point: usize,
    pub from: PointStatus,
    pub to: PointStatus,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssociationStats {
    pub associated: usize,
    pub reassociated: usize,
    pub outliers: usize,
    pub unchanged: usize,
    /// Points whose projection had no rendered surfel.
    pub no_plane: usize,
}

/// Filters and associates the window's optimized points against maps
/// rendered at the last keyframe's pose.
pub fn filter_and_associate(
    window: &mut WindowState,
    maps: &RenderedMaps,
    map: &SurfelMap,
    cfg: &TrackerConfig,
    log: &mut Vec<StatusTransition>,
) -> Result<AssociationStats> {
    let last = window.keyframes.last().ok_or(Error::EmptyInput("window keyframes"))?;
    let (last_id, t_t_w) = (last.id, last.state.t_c_w);
    let k = window.intrinsics;
    let hosts = window.index_map();
    let states: Vec<FramePhotoState> = window.keyframes.iter().map(|kf| kf.state).collect();
    let mut stats = AssociationStats::default();
    for p in &mut window.points {
        if !p.is_optimized() {
            continue;
        }
        let host = states[hosts[&p.host]];
        let Ok(rho) = point_inverse_depth(p, &host, &k) else {
            continue;
        };
        let Ok(p_t) = project_inverse_depth(&p.patch.center, rho, &host.t_c_w, &t_t_w, &k) else {
            continue;
        };
        let (Ok(Some(plane)), Ok(Some(surfel))) = (maps.plane_at(&p_t), maps.surfel_at(&p_t)) else {
            stats.no_plane += 1;
            continue;
        };
        let radius = map.surfels.get(surfel).map(|s| s.radius).unwrap_or(map.mean_radius());
        if let (PointStatus::Associated, Some(stored)) = (p.status, p.plane) {
            let x_w = host.t_w_c().transform_point(&k.backproject(&p.patch.center, rho)?);
            let angle = stored.normal.dot(&plane.normal).abs().min(1.0).acos().to_degrees();
            let offset = plane.signed_distance(&x_w).abs();
            if angle <= cfg.reassociate_angle_deg && offset <= cfg.reassociate_offset * radius {
                stats.unchanged += 1;
                continue;
            }
        }
        let decision = match surfel_induced_inverse_depth(&p.patch.center, &plane, &host.t_c_w, &k) {
            Ok(rho_new) => match project_inverse_depth(&p.patch.center, rho_new, &host.t_c_w, &t_t_w, &k) {
                Ok(q) => match classify_association((p_t - q).norm(), theta(rho_new, rho), cfg) {
                    // a patch straddling two surfaces cannot take a single plane
                    Association::Associate if !patch_on_plane(maps, &p_t, &plane, radius, cfg) => Association::Unchanged,
                    a => a,
                },
                Err(_) => Association::Unchanged,
            },
            Err(_) => Association::Unchanged,
        };
        let from = p.status;
        match (decision, from) {
            (Association::Outlier, PointStatus::Active) => {
                p.status = PointStatus::Outlier;
                stats.outliers += 1;
            }
            (Association::Associate, _) => {
                if from == PointStatus::Associated {
                    stats.reassociated += 1;
                } else {
                    stats.associated += 1;
                }
                p.status = PointStatus::Associated;
                p.plane = Some(plane);
                p.surfel = Some(surfel);
            }
            // an associated point whose new lookup disagrees keeps its plane
            _ => stats.unchanged += 1,
        }
        if p.status != from {
            log.push(StatusTransition {
                keyframe: last_id,
                point: p.id,
                from,
                to: p.status,
            });
        }
    }
    Ok(stats)
}

/// Whether every pattern pixel around `p` renders a surfel lying on `plane`.
pub fn patch_on_plane(maps: &RenderedMaps, p: &Vector2<f64>, plane: &PlaneCoeffs, radius: f64, cfg: &TrackerConfig) -> bool {
    let cos_max = cfg.reassociate_angle_deg.to_radians().cos();
    PATCH_PATTERN.iter().all(|&(dx, dy)| {
        let (x, y) = ((p.x.round() as i64 + dx as i64), (p.y.round() as i64 + dy as i64));
        if x < 0 || y < 0 || x >= maps.width as i64 || y >= maps.height as i64 {
            return false;
        }
        let i = y as usize * maps.width + x as usize;
        maps.depth[i] > 0.0
            && maps.normal[i].dot(&plane.normal).abs() >= cos_max
            && plane.signed_distance(&maps.vertex[i]).abs() <= cfg.reassociate_offset * radius
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyframeDecision {
    Keep,
    NewKeyframe,
}

pub fn keyframe_decision(flow: &FlowStats, cfg: &TrackerConfig) -> KeyframeDecision {
    if flow.translation > cfg.kf_translation_flow
        || flow.full > cfg.kf_rotation_flow
        || flow.brightness > cfg.kf_brightness
    {
        KeyframeDecision::NewKeyframe
    } else {
        KeyframeDecision::Keep
    }
}

/// Keyframe to remove before inserting a new one into a full window: a
/// frame that hosts almost no optimized points goes first, otherwise the
/// frame maximizing the distance score (far from the newest frame, close to
/// the others). The newest keyframe is never chosen.
pub fn choose_marginalization(window: &WindowState) -> Option<usize> {
    let n = window.keyframes.len();
    if n < 2 {
        return None;
    }
    let total = window.points.iter().filter(|p| p.is_optimized()).count().max(1);
    for kf in &window.keyframes[..n - 1] {
        let hosted = window.points.iter().filter(|p| p.host == kf.id && p.is_optimized()).count();
        if (hosted as f64) < 0.05 * total as f64 / n as f64 {
            return Some(kf.id);
        }
    }
    let centers: Vec<_> = window.keyframes.iter().map(|k| k.state.t_w_c().translation).collect();
    let latest = centers[n - 1];
    (0..n - 1)
        .map(|i| {
            let sum: f64 = (0..n - 1)
                .filter(|&j| j != i)
                .map(|j| 1.0 / ((centers[i] - centers[j]).norm() + 1e-5))
                .sum();
            (i, (centers[i] - latest).norm().sqrt() * sum)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| window.keyframes[i].id)
}
