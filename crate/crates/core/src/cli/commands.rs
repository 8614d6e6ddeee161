//! The subcommands, as library functions that read and write files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::experiment::{image_options, initial_pose, run_localizer, synthetic_map, synthetic_scene, LocalizationOutput};
use super::RunConfig;
use crate::degeneracy::{report, ConstraintSet, DegeneracyReport, SurfelConstraint};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, metrics_csv, Metric, Trajectory};
use crate::frontend::{ConstraintLogEntry, FrameInput};
use crate::geometry::CameraIntrinsics;
use crate::image::Image;
use crate::ply;
use crate::renderer::render_with;
use crate::surfel_map::{build_surfel_map, SurfelMap};
use crate::synthworld::{read_camera, read_index, sample_point_cloud};
use crate::window_optimizer::ITERATION_CSV_HEADER;

pub const DEGENERACY_CSV_HEADER: &str =
    "frame,timestamp,classification,nullspace_dim,consistent,ratio_e2_e1,ratio_e3_e1,surfel_constraints,free_constraints";
pub const STATUS_CSV_HEADER: &str = "keyframe,point,from,to";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn degeneracy_row(frame: usize, timestamp: f64, r: &DegeneracyReport) -> String {
    format!(
        "{frame},{timestamp:.6},{},{},{},{:.9},{:.9},{},{}",
        r.classification.map(|c| c.as_str()).unwrap_or("NoSurfels"),
        r.nullspace_dim,
        r.is_consistent(),
        r.ratio_e2_e1,
        r.ratio_e3_e1,
        r.surfel_constraints,
        r.free_constraints
    )
}

/// Builds a surfel map from a point-cloud PLY and writes it as a surfel PLY.
pub fn cmd_build_map(input: &Path, output: &Path, cfg: &RunConfig) -> Result<SurfelMap> {
    let points = ply::read_points(input)?;
    let map = build_surfel_map(&points, cfg.voxel, cfg.neighbors)?;
    map.save(output)?;
    info!("{} points -> {} surfels", points.len(), map.len());
    Ok(map)
}

/// What `cmd_simulate` wrote.
#[derive(Clone, Debug)]
pub struct SimulationSummary {
    pub frames: usize,
    pub surfels: usize,
    pub cloud_points: usize,
}

/// Writes a synthetic dataset: `images/`, `index.txt`, `groundtruth.txt`,
/// `camera.txt`, the (possibly noisy) surfel map `map.ply`, a dense point
/// cloud `cloud.ply` for `build-map`, and the effective `config.txt`.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<SimulationSummary> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let scene = synthetic_scene(cfg)?;
    scene.write_dataset(out_dir, None, &image_options(cfg))?;
    let map = synthetic_map(&scene, cfg)?;
    map.save(&out_dir.join("map.ply"))?;
    let cloud = sample_point_cloud(&scene, cfg.voxel / 2.0)?;
    ply::write_points(&out_dir.join("cloud.ply"), &cloud)?;
    write(&out_dir.join("config.txt"), cfg.to_text())?;
    Ok(SimulationSummary {
        frames: scene.len(),
        surfels: map.len(),
        cloud_points: cloud.len(),
    })
}

/// Inputs of `cmd_localize`.
#[derive(Clone, Debug)]
pub struct LocalizeInputs {
    /// Image index (`frame_id timestamp exposure a b path`); image paths are
    /// relative to its directory.
    pub index: PathBuf,
    pub map: PathBuf,
    pub camera: PathBuf,
    /// Source of the initial pose when the config does not set one.
    pub groundtruth: Option<PathBuf>,
}

impl LocalizeInputs {
    /// The file names `cmd_simulate` writes.
    pub fn from_dataset(dir: &Path) -> Self {
        LocalizeInputs {
            index: dir.join("index.txt"),
            map: dir.join("map.ply"),
            camera: dir.join("camera.txt"),
            groundtruth: Some(dir.join("groundtruth.txt")),
        }
    }
}

/// Localizes an image sequence against a surfel map and writes the
/// trajectory and diagnostics into `out_dir`. A run that stops early still
/// writes everything up to the failing frame; the failure is reported in
/// the returned output.
pub fn cmd_localize(inputs: &LocalizeInputs, cfg: &RunConfig, out_dir: &Path) -> Result<LocalizationOutput> {
    cfg.validate()?;
    let records = read_index(&inputs.index)?;
    let k = read_camera(&inputs.camera)?;
    let map = SurfelMap::load(&inputs.map)?;
    let base = match &inputs.groundtruth {
        _ if cfg.initial_pose.is_some() => cfg.initial_pose.unwrap(),
        Some(gt) => *Trajectory::read_tum(gt)?
            .poses
            .first()
            .ok_or(Error::EmptyInput("ground-truth trajectory"))?,
        None => return Err(Error::Config("no initial pose: set initial_pose or give a ground-truth file".into())),
    };
    let init = initial_pose(&RunConfig { initial_pose: Some(base), ..cfg.clone() }, &base);
    let dir = inputs.index.parent().map(Path::to_path_buf).unwrap_or_default();
    let frame = |i: usize| {
        let r = &records[i];
        let image = Image::read_pgm(&dir.join(&r.path))?;
        Ok(FrameInput {
            id: i,
            timestamp: r.timestamp,
            image,
            exposure_time: r.exposure.time,
        })
    };
    let output = run_localizer(records.len(), frame, map, k, init, cfg.localizer)?;
    write_localization(&output, cfg, out_dir)?;
    Ok(output)
}

/// `trajectory.txt`, `constraint_ratio.csv`, `lm_iterations.csv`,
/// `status.csv`, `degeneracy.csv`, one `degeneracy/keyframe_NNNNNN.txt`
/// per keyframe, and the effective `config.txt`.
pub fn write_localization(output: &LocalizationOutput, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    let loc = &output.localizer;
    output.trajectory.write_tum(&out_dir.join("trajectory.txt"))?;

    let mut ratio = format!("{}\n", ConstraintLogEntry::CSV_HEADER);
    for e in &loc.constraint_log {
        let _ = writeln!(ratio, "{}", e.csv_row());
    }
    write(&out_dir.join("constraint_ratio.csv"), ratio)?;

    let mut lm = Vec::new();
    lm.extend_from_slice(ITERATION_CSV_HEADER.as_bytes());
    lm.push(b'\n');
    for (kf, report) in &loc.lm_log {
        report.write_csv_rows(&mut lm, *kf).map_err(|e| Error::io(out_dir.join("lm_iterations.csv"), e))?;
    }
    write(&out_dir.join("lm_iterations.csv"), lm)?;

    let mut status = format!("{STATUS_CSV_HEADER}\n");
    for t in &loc.status_log {
        let _ = writeln!(
            status,
            "{},{},{},{}",
            t.keyframe,
            t.point,
            format!("{:?}", t.from).to_lowercase(),
            format!("{:?}", t.to).to_lowercase()
        );
    }
    write(&out_dir.join("status.csv"), status)?;

    let reports = out_dir.join("degeneracy");
    create_dir(&reports)?;
    let mut summary = format!("{DEGENERACY_CSV_HEADER}\n");
    for ((id, r), entry) in loc.degeneracy_log.iter().zip(&loc.constraint_log) {
        let _ = writeln!(summary, "{}", degeneracy_row(*id, entry.timestamp, r));
        write(&reports.join(format!("keyframe_{id:06}.txt")), r.to_key_values())?;
    }
    write(&out_dir.join("degeneracy.csv"), summary)?;
    write(&out_dir.join("config.txt"), cfg.to_text())
}

/// Metrics of an estimated trajectory against ground truth.
pub fn cmd_eval(est: &Path, gt: &Path, cfg: &RunConfig) -> Result<Vec<Metric>> {
    let est = Trajectory::read_tum(est)?;
    let gt = Trajectory::read_tum(gt)?;
    evaluate(&est, &gt, &cfg.segments, cfg.association_tolerance)
}

pub fn eval_csv(metrics: &[Metric]) -> String {
    metrics_csv(metrics)
}

/// One degeneracy window of `cmd_degen_report`, named by its newest pose.
#[derive(Clone, Debug)]
pub struct DegeneracyWindow {
    pub frame: usize,
    pub timestamp: f64,
    pub report: DegeneracyReport,
}

/// Gauge analysis of the constraints the map would provide along a
/// trajectory: windows of `degen_window` poses, `degen_stride` apart, each
/// hosting a surfel constraint at every `degen_grid`-th rendered pixel.
pub fn degen_windows(map: &SurfelMap, trajectory: &Trajectory, k: &CameraIntrinsics, cfg: &RunConfig) -> Vec<DegeneracyWindow> {
    let stride = cfg.degen_stride;
    let span = (cfg.degen_window - 1) * stride;
    let step = cfg.degen_grid;
    let mut out = Vec::new();
    for end in (span..trajectory.len()).step_by(stride) {
        let frames: Vec<usize> = (0..cfg.degen_window).map(|j| end - span + j * stride).collect();
        let mut set = ConstraintSet {
            frames: frames.iter().map(|&i| trajectory.poses[i]).collect(),
            ..Default::default()
        };
        for (host, &i) in frames.iter().enumerate() {
            let maps = render_with(map, &trajectory.poses[i], k, &cfg.localizer.render);
            for y in (step / 2..k.height).step_by(step) {
                for x in (step / 2..k.width).step_by(step) {
                    let p = nalgebra::Vector2::new(x as f64, y as f64);
                    if let Ok(Some(plane)) = maps.plane_at(&p) {
                        set.surfel.push(SurfelConstraint {
                            host,
                            xbar: k.normalized(&p),
                            plane,
                        });
                    }
                }
            }
        }
        out.push(DegeneracyWindow {
            frame: end,
            timestamp: trajectory.stamps[end],
            report: report(&set, &cfg.localizer.degeneracy),
        });
    }
    out
}

/// Runs `degen_windows` on files and writes `degeneracy.csv` plus one
/// key-value report per window into `out_dir`.
pub fn cmd_degen_report(map: &Path, trajectory: &Path, camera: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<Vec<DegeneracyWindow>> {
    cfg.validate()?;
    let map = SurfelMap::load(map)?;
    let traj = Trajectory::read_tum(trajectory)?;
    let k = read_camera(camera)?;
    let windows = degen_windows(&map, &traj, &k, cfg);
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "trajectory has {} poses, fewer than one window of {} poses {} apart",
            traj.len(),
            cfg.degen_window,
            cfg.degen_stride
        )));
    }
    create_dir(out_dir)?;
    let mut summary = format!("{DEGENERACY_CSV_HEADER}\n");
    for w in &windows {
        let _ = writeln!(summary, "{}", degeneracy_row(w.frame, w.timestamp, &w.report));
        write(&out_dir.join(format!("window_{:06}.txt", w.frame)), w.report.to_key_values())?;
    }
    write(&out_dir.join("degeneracy.csv"), summary)?;
    Ok(windows)
}

/// Most frequent classification across windows, as written in the CSV.
pub fn dominant_classification(windows: &[DegeneracyWindow]) -> Option<&'static str> {
    let mut counts: Vec<(&'static str, usize)> = Vec::new();
    for w in windows {
        let name = w.report.classification.map(|c| c.as_str()).unwrap_or("NoSurfels");
        match counts.iter_mut().find(|(n, _)| *n == name) {
            Some((_, c)) => *c += 1,
            None => counts.push((name, 1)),
        }
    }
    counts.into_iter().max_by_key(|(_, c)| *c).map(|(n, _)| n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::Preset;

    fn cfg(preset: Preset, frames: usize) -> RunConfig {
        RunConfig {
            preset,
            frames,
            ..RunConfig::default()
        }
    }

    #[test]
    fn degeneracy_windows_match_the_scene_geometry() {
        for (preset, expected) in [
            (Preset::SingleWall, "SinglePlane"),
            (Preset::Corridor, "ParallelPlanes"),
            (Preset::BoxRoom, "WellConstrained"),
        ] {
            let c = cfg(preset, 60);
            let scene = synthetic_scene(&c).unwrap();
            let map = synthetic_map(&scene, &c).unwrap();
            let windows = degen_windows(&map, &scene.ground_truth(), scene.intrinsics(), &c);
            assert!(!windows.is_empty());
            assert_eq!(dominant_classification(&windows), Some(expected), "{}", preset.name());
        }
    }

    #[test]
    fn simulate_then_localize_a_short_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let mut c = cfg(Preset::BoxRoom, 200);
        c.voxel = 0.05;
        let summary = cmd_simulate(&c, &data).unwrap();
        assert_eq!(summary.frames, 200);
        // keep the first 12 frames only
        let index = fs::read_to_string(data.join("index.txt")).unwrap();
        let short: Vec<&str> = index.lines().take(13).collect();
        fs::write(data.join("index.txt"), short.join("\n")).unwrap();

        let out = dir.path().join("out");
        let result = cmd_localize(&LocalizeInputs::from_dataset(&data), &c, &out).unwrap();
        assert!(result.failure.is_none());
        for f in ["trajectory.txt", "constraint_ratio.csv", "lm_iterations.csv", "status.csv", "degeneracy.csv", "config.txt"] {
            assert!(out.join(f).is_file(), "{f}");
        }
        let est = Trajectory::read_tum(&out.join("trajectory.txt")).unwrap();
        assert_eq!(est.len(), 12);
        let metrics = cmd_eval(&out.join("trajectory.txt"), &data.join("groundtruth.txt"), &c).unwrap();
        assert!(metrics[0].value < 0.01, "{metrics:?}");
        let header = fs::read_to_string(out.join("lm_iterations.csv")).unwrap();
        assert!(header.starts_with(ITERATION_CSV_HEADER));
    }

    #[test]
    fn built_map_matches_the_sampled_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(Preset::SingleWall, 2);
        let scene = synthetic_scene(&c).unwrap();
        let cloud = sample_point_cloud(&scene, 0.025).unwrap();
        let input = dir.path().join("cloud.ply");
        ply::write_points(&input, &cloud).unwrap();
        let map = cmd_build_map(&input, &dir.path().join("map.ply"), &c).unwrap();
        // about one surfel per occupied voxel
        let area: f64 = scene.spec.planes.iter().map(|p| p.area()).sum();
        let expected = area / (c.voxel * c.voxel);
        assert!((map.len() as f64 / expected - 1.0).abs() < 0.1, "{} vs {expected}", map.len());
        let again = cmd_build_map(&input, &dir.path().join("map2.ply"), &c).unwrap();
        assert_eq!(
            fs::read(dir.path().join("map.ply")).unwrap(),
            fs::read(dir.path().join("map2.ply")).unwrap()
        );
        assert_eq!(again.len(), map.len());
        assert!(cmd_build_map(&dir.path().join("missing.ply"), &dir.path().join("x.ply"), &c).is_err());
    }
}
