//! Driving the localizer over a frame source, and fully synthetic runs with
//! ground truth.

use std::time::{Duration, Instant};

use log::{info, warn};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{ate_rmse, position_errors, Trajectory};
use crate::frontend::{FrameInput, Localizer, LocalizerConfig};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::surfel_map::SurfelMap;
use crate::synthworld::{make_scene, perturb_map, perturb_pose, preset, sample_surfel_map, RenderImageOptions, Scene};

/// Offsets that derive independent streams from the run seed.
const IMAGE_STREAM: u64 = 0x1000;
const POSE_STREAM: u64 = 0x2000;

pub struct LocalizationOutput {
    /// Poses of every frame processed before the run ended.
    pub trajectory: Trajectory,
    pub localizer: Localizer,
    /// Why the run stopped early, if it did.
    pub failure: Option<Error>,
    pub elapsed: Duration,
}

/// Initializes on frame 0 and processes frames `1..n` until the end or the
/// first failure. Only an initialization failure is returned as `Err`.
pub fn run_localizer(
    n: usize,
    mut frame: impl FnMut(usize) -> Result<FrameInput>,
    map: SurfelMap,
    k: CameraIntrinsics,
    initial_pose: Pose,
    config: LocalizerConfig,
) -> Result<LocalizationOutput> {
    let start = Instant::now();
    if n == 0 {
        return Err(Error::EmptyInput("frame sequence"));
    }
    let first = frame(0).map_err(|e| Error::Frame {
        frame: 0,
        source: Box::new(e),
    })?;
    let mut localizer = Localizer::initialize(&first, initial_pose, map, k, config)?;
    let mut failure = None;
    for i in 1..n {
        let step = frame(i).and_then(|f| localizer.process(&f));
        if let Err(e) = step {
            warn!("stopping at frame {i}: {e}");
            failure = Some(Error::Frame {
                frame: i,
                source: Box::new(e),
            });
            break;
        }
    }
    let trajectory = localizer.trajectory()?;
    Ok(LocalizationOutput {
        trajectory,
        localizer,
        failure,
        elapsed: start.elapsed(),
    })
}

/// Translation error of one keyframe next to its constraint share.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeyframeError {
    pub keyframe: usize,
    pub surfel_ratio: f64,
    pub translation_error: f64,
}

pub struct SyntheticOutcome {
    pub output: LocalizationOutput,
    pub ground_truth: Trajectory,
    pub initial_pose: Pose,
    /// One entry per keyframe insertion, in insertion order.
    pub keyframe_errors: Vec<KeyframeError>,
}

impl SyntheticOutcome {
    /// Whether every frame of the sequence was localized.
    pub fn completed(&self) -> bool {
        self.output.failure.is_none() && self.output.trajectory.len() == self.ground_truth.len()
    }

    /// Unaligned ATE in the map frame.
    pub fn ate(&self, tolerance: f64) -> Result<f64> {
        ate_rmse(&self.output.trajectory, &self.ground_truth, tolerance)
    }

    /// Mean unaligned translation error over the localized frames.
    pub fn mean_translation_error(&self, tolerance: f64) -> f64 {
        let errors = position_errors(&self.output.trajectory, &self.ground_truth, tolerance);
        if errors.is_empty() {
            return f64::INFINITY;
        }
        errors.iter().map(|(_, e)| e).sum::<f64>() / errors.len() as f64
    }
}

pub fn synthetic_scene(cfg: &RunConfig) -> Result<Scene> {
    make_scene(preset(cfg.preset, cfg.frames, cfg.seed))
}

/// The map a synthetic run localizes against: surfels sampled from the
/// scene, with `map_noise` applied when positive.
pub fn synthetic_map(scene: &Scene, cfg: &RunConfig) -> Result<SurfelMap> {
    let map = sample_surfel_map(scene, cfg.voxel)?;
    if cfg.map_noise > 0.0 {
        perturb_map(&map, cfg.map_noise, cfg.seed)
    } else {
        Ok(map)
    }
}

pub fn image_options(cfg: &RunConfig) -> RenderImageOptions {
    RenderImageOptions {
        dither: cfg.dither,
        noise_sigma: cfg.image_noise,
        seed: cfg.seed.wrapping_add(IMAGE_STREAM),
    }
}

/// The configured initial pose (ground truth unless set), perturbed by the
/// configured amounts.
pub fn initial_pose(cfg: &RunConfig, ground_truth: &Pose) -> Pose {
    let base = cfg.initial_pose.unwrap_or(*ground_truth);
    if cfg.init_translation > 0.0 || cfg.init_rotation_deg > 0.0 {
        perturb_pose(
            &base,
            cfg.init_translation,
            cfg.init_rotation_deg.to_radians(),
            cfg.seed.wrapping_add(POSE_STREAM),
        )
    } else {
        base
    }
}

/// Generates the configured scene, renders its images on the fly and
/// localizes against its (possibly noisy) surfel map.
pub fn run_synthetic(cfg: &RunConfig) -> Result<SyntheticOutcome> {
    cfg.validate()?;
    let scene = synthetic_scene(cfg)?;
    let map = synthetic_map(&scene, cfg)?;
    let opts = image_options(cfg);
    let init = initial_pose(cfg, &scene.spec.trajectory[0]);
    let k = *scene.intrinsics();
    let frame = |i: usize| {
        Ok(FrameInput {
            id: i,
            timestamp: scene.spec.stamps[i],
            image: scene.render_frame(i, &opts).image,
            exposure_time: scene.spec.exposures[i].time,
        })
    };
    let output = run_localizer(scene.len(), frame, map, k, init, cfg.localizer)?;
    let ground_truth = scene.ground_truth();
    let keyframe_errors = output
        .localizer
        .constraint_log
        .iter()
        .filter_map(|entry| {
            let est = output.trajectory.poses.get(entry.keyframe)?;
            let gt = ground_truth.poses.get(entry.keyframe)?;
            Some(KeyframeError {
                keyframe: entry.keyframe,
                surfel_ratio: entry.ratio(),
                translation_error: (est.translation - gt.translation).norm(),
            })
        })
        .collect();
    info!(
        "{} run: {} of {} frames in {:.1} s",
        cfg.preset.name(),
        output.trajectory.len(),
        scene.len(),
        output.elapsed.as_secs_f64()
    );
    Ok(SyntheticOutcome {
        output,
        ground_truth,
        initial_pose: init,
        keyframe_errors,
    })
}
