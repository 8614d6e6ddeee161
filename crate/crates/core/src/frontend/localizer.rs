//! The full pipeline: initialize from the rendered depth map, track every
//! frame, and on each new keyframe optimize the window, render the map at the
//! optimized pose and filter/associate the tracked points.

use std::collections::HashMap;
use std::sync::Arc;

use log::{debug, info};

use super::{
    choose_marginalization, filter_and_associate, keyframe_decision, select_candidates, track_frame,
    AssociationStats, KeyframeDecision, StatusTransition, TrackerConfig, TrackingReference,
};
use crate::degeneracy::{report_window, DegeneracyConfig, DegeneracyReport};
use crate::error::{Error, Result};
use crate::evaluation::Trajectory;
use crate::geometry::{se3_exp, se3_log, CameraIntrinsics, Pose, Twist};
use crate::image::{Image, ImagePyramid};
use crate::photometric::{FramePhotoState, HostPatch, PATTERN};
use crate::renderer::{render_with, RenderOptions, RenderedMaps};
use crate::surfel_map::SurfelMap;
use crate::window_optimizer::{Keyframe, LmReport, PointStatus, TrackedPoint, WindowConfig, WindowState};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LocalizerConfig {
    pub tracker: TrackerConfig,
    pub window: WindowConfig,
    pub degeneracy: DegeneracyConfig,
    pub render: RenderOptions,
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        if self.window.max_keyframes < 2 {
            return Err(Error::InvalidParameter("the window needs at least two keyframes".into()));
        }
        Ok(())
    }
}

pub struct FrameInput {
    pub id: usize,
    pub timestamp: f64,
    pub image: Image,
    pub exposure_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameResult {
    pub id: usize,
    /// Pose estimate at the time the frame was processed.
    pub t_w_c: Pose,
    pub keyframe: bool,
    pub rms: f64,
}

/// Surfel-constraint share of the window after each keyframe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintLogEntry {
    pub keyframe: usize,
    pub timestamp: f64,
    pub surfel: usize,
    pub free: usize,
}

impl ConstraintLogEntry {
    pub const CSV_HEADER: &'static str = "keyframe,timestamp,surfel_constraints,free_constraints,ratio";

    pub fn ratio(&self) -> f64 {
        let total = self.surfel + self.free;
        if total == 0 {
            0.0
        } else {
            self.surfel as f64 / total as f64
        }
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{},{},{:.6}", self.keyframe, self.timestamp, self.surfel, self.free, self.ratio())
    }
}

/// Every frame is stored relative to the keyframe it was tracked against, so
/// the final trajectory picks up later corrections of that keyframe.
#[derive(Clone, Copy, Debug)]
struct FrameRecord {
    timestamp: f64,
    reference: usize,
    t_ref_c: Pose,
}

pub struct Localizer {
    pub config: LocalizerConfig,
    pub map: SurfelMap,
    pub window: WindowState,
    pyramids: HashMap<usize, ImagePyramid>,
    reference: TrackingReference,
    frames: Vec<FrameRecord>,
    /// `T_w_c` of keyframes that have left the window.
    final_poses: HashMap<usize, Pose>,
    last_t_c_w: Pose,
    prev_t_c_w: Option<Pose>,
    next_point: usize,
    pub status_log: Vec<StatusTransition>,
    pub constraint_log: Vec<ConstraintLogEntry>,
    pub degeneracy_log: Vec<(usize, DegeneracyReport)>,
    pub lm_log: Vec<(usize, LmReport)>,
    pub association_log: Vec<(usize, AssociationStats)>,
}

impl Localizer {
    /// Creates the first keyframe at `initial_pose` (`T_w_c`) with points
    /// seeded from the map rendered there.
    pub fn initialize(
        first: &FrameInput,
        initial_pose: Pose,
        map: SurfelMap,
        k: CameraIntrinsics,
        config: LocalizerConfig,
    ) -> Result<Localizer> {
        config.validate()?;
        if first.image.width != k.width || first.image.height != k.height {
            return Err(Error::InvalidParameter(format!(
                "image is {}x{}, camera expects {}x{}",
                first.image.width, first.image.height, k.width, k.height
            )));
        }
        let pyramid = ImagePyramid::new(first.image.clone(), config.tracker.pyramid_levels);
        let maps = render_with(&map, &initial_pose, &k, &config.render);
        let candidates = select_candidates(pyramid.finest(), config.tracker.candidate_density, config.tracker.min_gradient_add);
        if candidates.is_empty() {
            return Err(Error::Initialization("the first image has no usable gradient".into()));
        }
        let covered = candidates.iter().filter(|p| matches!(maps.depth_at(p), Ok(Some(_)))).count();
        let coverage = covered as f64 / candidates.len() as f64;
        if coverage < config.tracker.init_min_coverage {
            return Err(Error::Initialization(format!(
                "rendered depth covers {:.0}% of candidates (need {:.0}%)",
                100.0 * coverage,
                100.0 * config.tracker.init_min_coverage
            )));
        }
        let state = FramePhotoState::new(initial_pose.inverse(), first.exposure_time);
        let mut window = WindowState::new(k, config.window);
        window.add_keyframe(Keyframe {
            id: first.id,
            timestamp: first.timestamp,
            state,
            fej: None,
            image: Arc::new(pyramid.finest().clone()),
        })?;
        let reference = TrackingReference::from_depths(first.id, state, k, &pyramid, &[]);
        let mut loc = Localizer {
            config,
            map,
            window,
            pyramids: HashMap::new(),
            reference,
            frames: vec![FrameRecord {
                timestamp: first.timestamp,
                reference: first.id,
                t_ref_c: Pose::identity(),
            }],
            final_poses: HashMap::new(),
            last_t_c_w: state.t_c_w,
            prev_t_c_w: None,
            next_point: 0,
            status_log: Vec::new(),
            constraint_log: Vec::new(),
            degeneracy_log: Vec::new(),
            lm_log: Vec::new(),
            association_log: Vec::new(),
        };
        loc.seed_points(first.id, &pyramid, &candidates, &maps);
        loc.finish_keyframe(first.id, first.timestamp, pyramid, &maps)?;
        info!(
            "initialized at frame {} with {} points ({:.0}% map coverage)",
            first.id,
            loc.window.points.len(),
            100.0 * coverage
        );
        Ok(loc)
    }

    /// Seeds points hosted in `host` at the candidates with a rendered depth;
    /// the inverse-depth uncertainty follows from the surfel size.
    fn seed_points(&mut self, host: usize, pyramid: &ImagePyramid, candidates: &[nalgebra::Vector2<f64>], maps: &RenderedMaps) {
        let radius = self.map.mean_radius();
        for c in candidates {
            let Ok(Some(depth)) = maps.depth_at(c) else {
                continue;
            };
            let Some(patch) = HostPatch::sample(pyramid.finest(), *c, &PATTERN) else {
                continue;
            };
            let sigma = radius / (depth * depth);
            let mut p = TrackedPoint::new(self.next_point, host, patch, 1.0 / depth, sigma * sigma);
            self.next_point += 1;
            p.status = PointStatus::Active;
            self.status_log.push(StatusTransition {
                keyframe: host,
                point: p.id,
                from: PointStatus::Candidate,
                to: PointStatus::Active,
            });
            self.window.points.push(p);
        }
    }

    /// Associates against maps rendered at the newest keyframe, logs the
    /// diagnostics and rebuilds the tracking reference.
    fn finish_keyframe(&mut self, id: usize, timestamp: f64, pyramid: ImagePyramid, maps: &RenderedMaps) -> Result<()> {
        let stats = filter_and_associate(&mut self.window, maps, &self.map, &self.config.tracker, &mut self.status_log)?;
        self.window.points.retain(|p| p.status != PointStatus::Outlier);
        let report = report_window(&self.window, &self.config.degeneracy);
        // a few associations on a noisy map must not release the gauge
        self.window.anchored = report.classification.is_some()
            && report.nullspace_dim == 0
            && report.surfel_ratio() >= self.config.tracker.anchor_ratio;
        self.constraint_log.push(ConstraintLogEntry {
            keyframe: id,
            timestamp,
            surfel: report.surfel_constraints,
            free: report.free_constraints,
        });
        debug!(
            "keyframe {id}: {} associated, {} outliers, class {:?}, nullspace {}",
            stats.associated, stats.outliers, report.classification, report.nullspace_dim
        );
        self.degeneracy_log.push((id, report));
        self.association_log.push((id, stats));
        self.reference = TrackingReference::build(&self.window, id, &pyramid)?;
        self.pyramids.insert(id, pyramid);
        self.last_t_c_w = self.window.keyframe(id).expect("keyframe in window").state.t_c_w;
        Ok(())
    }

    fn motion_guesses(&self) -> Vec<Pose> {
        let last = self.last_t_c_w;
        let Some(prev) = self.prev_t_c_w else {
            return vec![last];
        };
        let velocity = last * prev.inverse();
        let mut guesses = vec![velocity * last, last];
        if let Ok(xi) = se3_log(&velocity) {
            guesses.push(se3_exp(&Twist(xi.0 * 0.5)) * last);
            guesses.push(se3_exp(&Twist(xi.0 * 2.0)) * last);
        }
        guesses.into_iter().map(|g| g.normalized()).collect()
    }

    /// Tracks one frame and inserts a keyframe when the motion warrants it.
    pub fn process(&mut self, frame: &FrameInput) -> Result<FrameResult> {
        let k = self.window.intrinsics;
        if frame.image.width != k.width || frame.image.height != k.height {
            return Err(Error::TrackingLost {
                frame: frame.id,
                reason: format!("image size {}x{}", frame.image.width, frame.image.height),
            });
        }
        let pyramid = ImagePyramid::new(frame.image.clone(), self.config.tracker.pyramid_levels);
        let guesses = self.motion_guesses();
        let tracked = track_frame(
            &self.reference,
            &pyramid,
            &guesses,
            frame.exposure_time,
            &self.config.tracker,
            &self.config.window,
            frame.id,
        )?;
        // the frame's motion relative to the last processed frame
        self.prev_t_c_w = Some(self.last_t_c_w);
        self.last_t_c_w = tracked.state.t_c_w;
        let new_keyframe = keyframe_decision(&tracked.flow, &self.config.tracker) == KeyframeDecision::NewKeyframe;
        debug!(
            "frame {}: rms {:.2}, flow {:.1}/{:.1} px, brightness {:.2}",
            frame.id, tracked.rms, tracked.flow.translation, tracked.flow.full, tracked.flow.brightness
        );
        if new_keyframe {
            let before = tracked.state.t_c_w;
            self.add_keyframe(frame, pyramid, tracked.state)?;
            // keep the velocity consistent with the optimized keyframe pose
            let after = self.last_t_c_w;
            if let Some(prev) = self.prev_t_c_w.as_mut() {
                *prev = (after * before.inverse() * *prev).normalized();
            }
            self.frames.push(FrameRecord {
                timestamp: frame.timestamp,
                reference: frame.id,
                t_ref_c: Pose::identity(),
            });
        } else {
            self.frames.push(FrameRecord {
                timestamp: frame.timestamp,
                reference: self.reference.keyframe,
                t_ref_c: self.reference.state.t_c_w * tracked.state.t_w_c(),
            });
        }
        Ok(FrameResult {
            id: frame.id,
            t_w_c: self.last_t_c_w.inverse(),
            keyframe: new_keyframe,
            rms: tracked.rms,
        })
    }

    fn add_keyframe(&mut self, frame: &FrameInput, pyramid: ImagePyramid, state: FramePhotoState) -> Result<()> {
        if self.window.keyframes.len() >= self.window.config.max_keyframes {
            let target = choose_marginalization(&self.window).expect("full window has a removable keyframe");
            let pose = self.window.keyframe(target).expect("chosen from the window").state.t_w_c();
            self.final_poses.insert(target, pose);
            self.window.marginalize_frame(target)?;
            self.pyramids.remove(&target);
        }
        self.window.add_keyframe(Keyframe {
            id: frame.id,
            timestamp: frame.timestamp,
            state,
            fej: None,
            image: Arc::new(pyramid.finest().clone()),
        })?;
        let k = self.window.intrinsics;
        let maps = render_with(&self.map, &state.t_w_c(), &k, &self.config.render);
        let candidates = select_candidates(pyramid.finest(), self.config.tracker.candidate_density, self.config.tracker.min_gradient_add);
        self.seed_points(frame.id, &pyramid, &candidates, &maps);
        let report = self.window.optimize()?;
        self.lm_log.push((frame.id, report));
        let optimized = self.window.keyframe(frame.id).expect("just added").state;
        let maps = render_with(&self.map, &optimized.t_w_c(), &k, &self.config.render);
        self.finish_keyframe(frame.id, frame.timestamp, pyramid, &maps)?;
        debug_assert!(self.window.check_invariants().is_ok());
        Ok(())
    }

    /// Current best `T_w_c` of a keyframe.
    fn keyframe_pose(&self, id: usize) -> Option<Pose> {
        self.window
            .keyframe(id)
            .map(|kf| kf.state.t_w_c())
            .or_else(|| self.final_poses.get(&id).copied())
    }

    /// Poses of every processed frame, composed with the latest keyframe estimates.
    pub fn trajectory(&self) -> Result<Trajectory> {
        let mut stamps = Vec::with_capacity(self.frames.len());
        let mut poses = Vec::with_capacity(self.frames.len());
        for f in &self.frames {
            let t_w_ref = self.keyframe_pose(f.reference).ok_or_else(|| {
                Error::InvalidParameter(format!("keyframe {} has no pose", f.reference))
            })?;
            stamps.push(f.timestamp);
            poses.push((t_w_ref * f.t_ref_c).normalized());
        }
        Trajectory::new(stamps, poses)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{make_scene, preset, sample_surfel_map, Preset, RenderImageOptions, Scene};
    use nalgebra::Vector3;

    fn input(scene: &Scene, i: usize) -> FrameInput {
        FrameInput {
            id: i,
            timestamp: scene.spec.stamps[i],
            image: scene.render_frame(i, &RenderImageOptions::default()).image,
            exposure_time: scene.spec.exposures[i].time,
        }
    }

    #[test]
    fn initialization_seeds_map_depths() {
        let scene = make_scene(preset(Preset::BoxRoom, 50, 1)).unwrap();
        let map = sample_surfel_map(&scene, 0.05).unwrap();
        let radius = map.mean_radius();
        let k = *scene.intrinsics();
        let first = input(&scene, 0);
        let pose = scene.spec.trajectory[0];
        let loc = Localizer::initialize(&first, pose, map, k, LocalizerConfig::default()).unwrap();
        assert!(loc.window.points.len() > 300);
        for p in &loc.window.points {
            let hit = scene.cast(&pose, &k, &p.patch.center).unwrap();
            let rho = super::super::point_inverse_depth(p, &loc.window.keyframes[0].state, &k).unwrap();
            let tol = radius / (hit.depth * hit.depth);
            assert!((rho - 1.0 / hit.depth).abs() <= tol, "{} vs {}", rho, 1.0 / hit.depth);
        }
        // the host keyframe is the last keyframe, so every point whose patch
        // stays on one plane associates; the rest straddle plane boundaries
        let associated = loc.window.points.iter().filter(|p| p.is_associated()).count();
        assert!(associated as f64 > 0.8 * loc.window.points.len() as f64);
        assert!(loc.window.points.iter().all(|p| p.is_associated() || p.status == PointStatus::Active));
        let report = &loc.degeneracy_log[0].1;
        assert_eq!(loc.window.anchored, report.nullspace_dim == 0 && report.surfel_ratio() >= 0.2);
        assert_eq!(loc.constraint_log.len(), 1);
    }

    #[test]
    fn facing_empty_space_fails() {
        let scene = make_scene(preset(Preset::SingleWall, 10, 1)).unwrap();
        let map = sample_surfel_map(&scene, 0.1).unwrap();
        let k = *scene.intrinsics();
        // look away from the wall
        let away = crate::synthworld::look_at(&Vector3::zeros(), &Vector3::new(0.0, 0.0, -5.0)).unwrap();
        let textured = input(&scene, 0);
        let err = Localizer::initialize(&textured, away, map, k, LocalizerConfig::default()).err().unwrap();
        assert!(matches!(err, Error::Initialization(_)), "{err}");
    }

    #[test]
    fn stationary_camera_adds_no_keyframes() {
        let scene = make_scene(preset(Preset::BoxRoom, 50, 1)).unwrap();
        let map = sample_surfel_map(&scene, 0.05).unwrap();
        let k = *scene.intrinsics();
        let first = input(&scene, 0);
        let mut loc = Localizer::initialize(&first, scene.spec.trajectory[0], map, k, LocalizerConfig::default()).unwrap();
        for id in 1..6 {
            let f = FrameInput { id, timestamp: id as f64 * 0.05, ..input(&scene, 0) };
            let r = loc.process(&f).unwrap();
            assert!(!r.keyframe);
            assert!((r.t_w_c.translation - scene.spec.trajectory[0].translation).norm() < 1e-6);
        }
        assert_eq!(loc.window.keyframes.len(), 1);
        assert_eq!(loc.trajectory().unwrap().len(), 6);
    }

    #[test]
    fn window_saturates_and_tracks_orbit() {
        let n = 60;
        let scene = make_scene(preset(Preset::BoxRoom, 200, 2)).unwrap();
        let map = sample_surfel_map(&scene, 0.05).unwrap();
        let k = *scene.intrinsics();
        let mut loc = Localizer::initialize(&input(&scene, 0), scene.spec.trajectory[0], map, k, LocalizerConfig::default()).unwrap();
        let mut max_kf = 0;
        for i in 1..n {
            loc.process(&input(&scene, i)).unwrap();
            max_kf = max_kf.max(loc.window.keyframes.len());
            loc.window.check_invariants().unwrap();
        }
        assert_eq!(max_kf, 7);
        let est = loc.trajectory().unwrap();
        for (i, p) in est.poses.iter().enumerate() {
            let err = (p.translation - scene.spec.trajectory[i].translation).norm();
            assert!(err < 0.03, "frame {i}: {err}");
        }
        // association is monotone: associated points never go back
        let mut associated = std::collections::HashSet::new();
        for t in &loc.status_log {
            if t.from == PointStatus::Associated {
                assert_eq!(t.to, PointStatus::Associated);
            }
            if t.to == PointStatus::Associated {
                associated.insert(t.point);
            }
        }
        assert!(!associated.is_empty());
    }
}
