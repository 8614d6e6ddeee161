//! Gauge degeneracy of the constraints each synthetic preset provides,
//! evaluated over sliding windows of ground-truth poses.

use surfloc::cli::{degen_windows, dominant_classification, RunConfig};
use surfloc::synthworld::{make_scene, preset, sample_surfel_map, Preset};
use surfloc::Result;

fn main() -> Result<()> {
    let cfg = RunConfig::default();
    for p in Preset::ALL {
        let scene = make_scene(preset(p, 60, cfg.seed))?;
        let map = sample_surfel_map(&scene, cfg.voxel)?;
        let windows = degen_windows(&map, &scene.ground_truth(), scene.intrinsics(), &cfg);
        let first = &windows[0].report;
        println!(
            "{:<12} {} windows, mostly {}; first window: nullspace {} , e2/e1 {:.3}, e3/e1 {:.3}",
            p.name(),
            windows.len(),
            dominant_classification(&windows).unwrap_or("none"),
            first.nullspace_dim,
            first.ratio_e2_e1,
            first.ratio_e3_e1
        );
    }
    Ok(())
}
