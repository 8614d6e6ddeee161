//! Direct image alignment of one frame against a keyframe whose depths come
//! from the rendered surfel map, starting from the keyframe's pose.

use surfloc::frontend::{select_candidates, track_frame, TrackerConfig, TrackingReference};
use surfloc::image::ImagePyramid;
use surfloc::photometric::FramePhotoState;
use surfloc::renderer::render;
use surfloc::synthworld::{make_scene, preset, sample_surfel_map, Preset, RenderImageOptions};
use surfloc::window_optimizer::WindowConfig;
use surfloc::Result;

fn main() -> Result<()> {
    let scene = make_scene(preset(Preset::BoxRoom, 200, 1))?;
    let map = sample_surfel_map(&scene, 0.05)?;
    let k = *scene.intrinsics();
    let cfg = TrackerConfig::default();
    let opts = RenderImageOptions::default();

    let (r, t) = (0, 1);
    let ref_pose = scene.spec.trajectory[r];
    let ref_pyramid = ImagePyramid::new(scene.render_frame(r, &opts).image, cfg.pyramid_levels);
    let depth = render(&map, &ref_pose, &k);
    let points: Vec<_> = select_candidates(ref_pyramid.finest(), cfg.candidate_density, cfg.min_gradient_add)
        .into_iter()
        .filter_map(|p| depth.depth_at(&p).ok().flatten().map(|d| (p, 1.0 / d)))
        .collect();
    let state = FramePhotoState::new(ref_pose.inverse(), scene.spec.exposures[r].time);
    let reference = TrackingReference::from_depths(r, state, k, &ref_pyramid, &points);
    println!("reference: {} points with map depth", points.len());

    let pyramid = ImagePyramid::new(scene.render_frame(t, &opts).image, cfg.pyramid_levels);
    let result = track_frame(&reference, &pyramid, &[ref_pose.inverse()], scene.spec.exposures[t].time, &cfg, &WindowConfig::default(), t)?;
    let gt = scene.spec.trajectory[t];
    let est = result.state.t_w_c();
    let start_error = (ref_pose.translation - gt.translation).norm();
    println!(
        "frame {t}: translation error {:.4} m (start {:.4} m), rotation error {:.4} deg, rms {:.2}",
        (est.translation - gt.translation).norm(),
        start_error,
        (est.inverse() * gt).rotation_angle().to_degrees(),
        result.rms
    );
    Ok(())
}
