//! Plain-text `key = value` run configuration.
//!
//! Every tunable of an experiment lives here so that a run is reproducible
//! from one file plus the seed. Unknown keys are rejected; `#` starts a
//! comment. The same keys are accepted as `--key value` on the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::frontend::LocalizerConfig;
use crate::geometry::Pose;
use crate::synthworld::Preset;
use crate::window_optimizer::PointMarginalization;

/// Key name and one-line description, in the order they are documented.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "seed for every random draw of a run"),
    ("preset", "synthetic scene: box-room, corridor or single-wall"),
    ("frames", "number of synthetic frames"),
    ("voxel", "surfel map voxel size (m)"),
    ("neighbors", "neighbours used for PCA normals"),
    ("map_noise", "std of Gaussian noise added to surfel positions (m)"),
    ("image_noise", "std of Gaussian image noise (grey levels)"),
    ("dither", "uniform anti-quantization dither (true/false)"),
    ("init_translation", "initial-pose perturbation: translation (m)"),
    ("init_rotation_deg", "initial-pose perturbation: rotation (deg)"),
    ("initial_pose", "tx ty tz qx qy qz qw of the first frame, or `none` for the ground truth"),
    ("association_tolerance", "timestamp association window for evaluation (s)"),
    ("segments", "comma-separated RPE segment lengths (m)"),
    ("degen_window", "frames per window in degen-report"),
    ("degen_stride", "pose stride between frames in degen-report"),
    ("degen_grid", "pixel step of the constraint grid in degen-report"),
    ("pyramid_levels", "tracking pyramid levels"),
    ("candidate_density", "point candidates per keyframe"),
    ("min_gradient_add", "gradient margin above the regional median"),
    ("init_min_coverage", "minimum rendered-depth coverage of candidates at initialization"),
    ("kf_translation_flow", "keyframe threshold: rotation-free flow (px)"),
    ("kf_rotation_flow", "keyframe threshold: full flow (px)"),
    ("kf_brightness", "keyframe threshold: |ln a| between frames"),
    ("outlier_pixels", "outlier if the reprojection gap reaches this (px)"),
    ("outlier_theta", "outlier if the depth disagreement reaches this"),
    ("associate_pixels", "associate if the reprojection gap is below this (px)"),
    ("associate_theta", "associate if the depth disagreement is below this"),
    ("reassociate_angle_deg", "re-examine a stored plane beyond this normal angle (deg)"),
    ("reassociate_offset", "re-examine a stored plane beyond this offset (surfel radii)"),
    ("tracking_iterations", "Gauss-Newton iterations per pyramid level"),
    ("max_tracking_rms", "tracking is lost above this residual RMS"),
    ("min_tracking_fraction", "tracking is lost below this in-view fraction"),
    ("anchor_ratio", "surfel-constraint share from which the map holds the gauge"),
    ("max_keyframes", "keyframes in the sliding window"),
    ("huber", "Huber threshold (grey levels)"),
    ("gradient_c", "gradient weighting constant"),
    ("lm_initial_lambda", "initial Levenberg-Marquardt damping"),
    ("lm_max_iterations", "Levenberg-Marquardt iteration cap"),
    ("lm_min_step", "stop when the step norm falls below this"),
    ("lm_min_relative_decrease", "stop when the relative energy decrease falls below this"),
    ("affine_prior_a", "prior weight on the affine gain a"),
    ("affine_prior_b", "prior weight on the affine offset b"),
    ("outlier_factor", "drop residual blocks with mean |r| above this many Huber thresholds"),
    ("point_marginalization", "free points of a removed keyframe: marginalize or discard"),
    ("min_observations", "observations needed to marginalize a free point"),
    ("near", "render near clip (m)"),
    ("far", "render far clip (m)"),
    ("cull_back_faces", "skip surfels facing away from the camera (true/false)"),
    ("coplanar_ratio", "e3/e1 below which normals count as coplanar"),
    ("normal_tolerance_deg", "angle below which normals count as equal (deg)"),
    ("offset_tolerance", "offset below which planes count as equal (m)"),
    ("rank_tolerance", "relative singular value below which a direction is null"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub frames: usize,
    pub voxel: f64,
    pub neighbors: usize,
    pub map_noise: f64,
    pub image_noise: f64,
    pub dither: bool,
    pub init_translation: f64,
    pub init_rotation_deg: f64,
    pub initial_pose: Option<Pose>,
    pub association_tolerance: f64,
    pub segments: Vec<f64>,
    pub degen_window: usize,
    pub degen_stride: usize,
    pub degen_grid: usize,
    pub localizer: LocalizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            preset: Preset::BoxRoom,
            frames: 200,
            voxel: 0.05,
            neighbors: crate::surfel_map::DEFAULT_NEIGHBORS,
            map_noise: 0.0,
            image_noise: 0.0,
            dither: false,
            init_translation: 0.0,
            init_rotation_deg: 0.0,
            initial_pose: None,
            association_tolerance: 0.01,
            segments: vec![0.5, 1.0],
            degen_window: 7,
            degen_stride: 3,
            degen_grid: 16,
            localizer: LocalizerConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_pose(key: &str, value: &str) -> Result<Option<Pose>> {
    if value == "none" {
        return Ok(None);
    }
    let v: Vec<f64> = value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| parse(key, t))
        .collect::<Result<_>>()?;
    if v.len() != 7 {
        return Err(Error::Config(format!("{key}: expected `tx ty tz qx qy qz qw`, found {} numbers", v.len())));
    }
    let q = Quaternion::new(v[6], v[3], v[4], v[5]);
    if !(q.norm() > 1e-9) {
        return Err(Error::Config(format!("{key}: zero quaternion")));
    }
    Ok(Some(Pose::from_quaternion(
        UnitQuaternion::from_quaternion(q),
        Vector3::new(v[0], v[1], v[2]),
    )))
}

fn format_pose(p: &Option<Pose>) -> String {
    match p {
        None => "none".into(),
        Some(p) => {
            let q = p.quaternion();
            let t = p.translation;
            format!("{} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)
        }
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let tr = &mut self.localizer.tracker;
        let win = &mut self.localizer.window;
        let deg = &mut self.localizer.degeneracy;
        let ren = &mut self.localizer.render;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "preset" => self.preset = value.parse()?,
            "frames" => self.frames = parse(key, value)?,
            "voxel" => self.voxel = parse(key, value)?,
            "neighbors" => self.neighbors = parse(key, value)?,
            "map_noise" => self.map_noise = parse(key, value)?,
            "image_noise" => self.image_noise = parse(key, value)?,
            "dither" => self.dither = parse(key, value)?,
            "init_translation" => self.init_translation = parse(key, value)?,
            "init_rotation_deg" => self.init_rotation_deg = parse(key, value)?,
            "initial_pose" => self.initial_pose = parse_pose(key, value)?,
            "association_tolerance" => self.association_tolerance = parse(key, value)?,
            "segments" => {
                self.segments = value
                    .split(',')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| parse(key, t))
                    .collect::<Result<_>>()?
            }
            "degen_window" => self.degen_window = parse(key, value)?,
            "degen_stride" => self.degen_stride = parse(key, value)?,
            "degen_grid" => self.degen_grid = parse(key, value)?,
            "pyramid_levels" => tr.pyramid_levels = parse(key, value)?,
            "candidate_density" => tr.candidate_density = parse(key, value)?,
            "min_gradient_add" => tr.min_gradient_add = parse(key, value)?,
            "init_min_coverage" => tr.init_min_coverage = parse(key, value)?,
            "kf_translation_flow" => tr.kf_translation_flow = parse(key, value)?,
            "kf_rotation_flow" => tr.kf_rotation_flow = parse(key, value)?,
            "kf_brightness" => tr.kf_brightness = parse(key, value)?,
            "outlier_pixels" => tr.outlier_pixels = parse(key, value)?,
            "outlier_theta" => tr.outlier_theta = parse(key, value)?,
            "associate_pixels" => tr.associate_pixels = parse(key, value)?,
            "associate_theta" => tr.associate_theta = parse(key, value)?,
            "reassociate_angle_deg" => tr.reassociate_angle_deg = parse(key, value)?,
            "reassociate_offset" => tr.reassociate_offset = parse(key, value)?,
            "tracking_iterations" => tr.tracking_iterations = parse(key, value)?,
            "max_tracking_rms" => tr.max_tracking_rms = parse(key, value)?,
            "min_tracking_fraction" => tr.min_tracking_fraction = parse(key, value)?,
            "anchor_ratio" => tr.anchor_ratio = parse(key, value)?,
            "max_keyframes" => win.max_keyframes = parse(key, value)?,
            "huber" => win.photometric.huber = parse(key, value)?,
            "gradient_c" => win.photometric.gradient_c = parse(key, value)?,
            "lm_initial_lambda" => win.lm.initial_lambda = parse(key, value)?,
            "lm_max_iterations" => win.lm.max_iterations = parse(key, value)?,
            "lm_min_step" => win.lm.min_step = parse(key, value)?,
            "lm_min_relative_decrease" => win.lm.min_relative_decrease = parse(key, value)?,
            "affine_prior_a" => win.affine_prior_a = parse(key, value)?,
            "affine_prior_b" => win.affine_prior_b = parse(key, value)?,
            "outlier_factor" => win.outlier_factor = parse(key, value)?,
            "point_marginalization" => {
                win.point_marginalization = match value {
                    "marginalize" => PointMarginalization::Marginalize,
                    "discard" => PointMarginalization::Discard,
                    _ => return Err(Error::Config(format!("{key}: expected marginalize or discard, got {value:?}"))),
                }
            }
            "min_observations" => win.min_observations = parse(key, value)?,
            "near" => ren.near = parse(key, value)?,
            "far" => ren.far = parse(key, value)?,
            "cull_back_faces" => ren.cull_back_faces = parse(key, value)?,
            "coplanar_ratio" => deg.coplanar_ratio = parse(key, value)?,
            "normal_tolerance_deg" => deg.normal_tolerance = parse::<f64>(key, value)?.to_radians(),
            "offset_tolerance" => deg.offset_tolerance = parse(key, value)?,
            "rank_tolerance" => deg.rank_tolerance = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of a key, in the syntax `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let tr = &self.localizer.tracker;
        let win = &self.localizer.window;
        let deg = &self.localizer.degeneracy;
        let ren = &self.localizer.render;
        let s = match key {
            "seed" => self.seed.to_string(),
            "preset" => self.preset.name().to_string(),
            "frames" => self.frames.to_string(),
            "voxel" => self.voxel.to_string(),
            "neighbors" => self.neighbors.to_string(),
            "map_noise" => self.map_noise.to_string(),
            "image_noise" => self.image_noise.to_string(),
            "dither" => self.dither.to_string(),
            "init_translation" => self.init_translation.to_string(),
            "init_rotation_deg" => self.init_rotation_deg.to_string(),
            "initial_pose" => format_pose(&self.initial_pose),
            "association_tolerance" => self.association_tolerance.to_string(),
            "segments" => self.segments.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            "degen_window" => self.degen_window.to_string(),
            "degen_stride" => self.degen_stride.to_string(),
            "degen_grid" => self.degen_grid.to_string(),
            "pyramid_levels" => tr.pyramid_levels.to_string(),
            "candidate_density" => tr.candidate_density.to_string(),
            "min_gradient_add" => tr.min_gradient_add.to_string(),
            "init_min_coverage" => tr.init_min_coverage.to_string(),
            "kf_translation_flow" => tr.kf_translation_flow.to_string(),
            "kf_rotation_flow" => tr.kf_rotation_flow.to_string(),
            "kf_brightness" => tr.kf_brightness.to_string(),
            "outlier_pixels" => tr.outlier_pixels.to_string(),
            "outlier_theta" => tr.outlier_theta.to_string(),
            "associate_pixels" => tr.associate_pixels.to_string(),
            "associate_theta" => tr.associate_theta.to_string(),
            "reassociate_angle_deg" => tr.reassociate_angle_deg.to_string(),
            "reassociate_offset" => tr.reassociate_offset.to_string(),
            "tracking_iterations" => tr.tracking_iterations.to_string(),
            "max_tracking_rms" => tr.max_tracking_rms.to_string(),
            "min_tracking_fraction" => tr.min_tracking_fraction.to_string(),
            "anchor_ratio" => tr.anchor_ratio.to_string(),
            "max_keyframes" => win.max_keyframes.to_string(),
            "huber" => win.photometric.huber.to_string(),
            "gradient_c" => win.photometric.gradient_c.to_string(),
            "lm_initial_lambda" => win.lm.initial_lambda.to_string(),
            "lm_max_iterations" => win.lm.max_iterations.to_string(),
            "lm_min_step" => win.lm.min_step.to_string(),
            "lm_min_relative_decrease" => win.lm.min_relative_decrease.to_string(),
            "affine_prior_a" => win.affine_prior_a.to_string(),
            "affine_prior_b" => win.affine_prior_b.to_string(),
            "outlier_factor" => win.outlier_factor.to_string(),
            "point_marginalization" => match win.point_marginalization {
                PointMarginalization::Marginalize => "marginalize".into(),
                PointMarginalization::Discard => "discard".into(),
            },
            "min_observations" => win.min_observations.to_string(),
            "near" => ren.near.to_string(),
            "far" => ren.far.to_string(),
            "cull_back_faces" => ren.cull_back_faces.to_string(),
            "coplanar_ratio" => deg.coplanar_ratio.to_string(),
            "normal_tolerance_deg" => deg.normal_tolerance.to_degrees().to_string(),
            "offset_tolerance" => deg.offset_tolerance.to_string(),
            "rank_tolerance" => deg.rank_tolerance.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse_text(text: &str, origin: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(origin, lineno + 1, "expected `key = value`"));
            };
            self.set(key.trim(), value)
                .map_err(|e| Error::parse(origin, lineno + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_text(&text, path)
    }

    /// The full configuration as a file that `load` reads back unchanged,
    /// with each key's description as a comment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(s, "# {doc}");
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("documented key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.localizer.validate()?;
        let checks = [
            ("frames", self.frames as f64 >= 2.0),
            ("voxel", self.voxel > 0.0),
            ("neighbors", self.neighbors >= 3),
            ("map_noise", self.map_noise >= 0.0),
            ("image_noise", self.image_noise >= 0.0),
            ("init_translation", self.init_translation >= 0.0),
            ("init_rotation_deg", self.init_rotation_deg >= 0.0),
            ("association_tolerance", self.association_tolerance > 0.0),
            ("segments", self.segments.iter().all(|s| *s > 0.0)),
            ("degen_window", self.degen_window >= 2),
            ("degen_stride", self.degen_stride >= 1),
            ("degen_grid", self.degen_grid >= 1),
        ];
        for (key, ok) in checks {
            if !ok {
                return Err(Error::Config(format!("{key} = {} is out of range", self.get(key).unwrap_or_default())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_documented_key_round_trips() {
        let cfg = RunConfig::default();
        for (key, _) in KEYS {
            let v = cfg.get(key).unwrap_or_else(|| panic!("{key} has no getter"));
            let mut other = RunConfig::default();
            other.set(key, &v).unwrap();
            // degree-valued keys are stored in radians, so compare as text
            assert_eq!(other.to_text(), cfg.to_text(), "{key}");
        }
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse_text(&text, Path::new("defaults")).unwrap().to_text(), text);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse_text("seed = 3\nwindow_size = 5\n", Path::new("run.cfg")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("run.cfg") && msg.contains("record 2") && msg.contains("window_size"), "{msg}");
        assert!(RunConfig::default().set("nope", "1").is_err());
    }

    #[test]
    fn values_parse_with_comments_and_spacing() {
        let text = "# a run\nseed=7   # trailing\n  preset = corridor\nsegments = 1, 2.5\ninitial_pose = 1 2 3 0 0 0 1\n";
        let cfg = RunConfig::parse_text(text, Path::new("x")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.preset, Preset::Corridor);
        assert_eq!(cfg.segments, vec![1.0, 2.5]);
        let p = cfg.initial_pose.unwrap();
        assert_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0));
        assert!((p.rotation - nalgebra::Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn bad_values_are_reported() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("frames", "many").is_err());
        assert!(cfg.set("initial_pose", "1 2 3").is_err());
        assert!(cfg.set("point_marginalization", "keep").is_err());
        cfg.set("associate_pixels", "6").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }
}
