//! Builds a surfel map from a dense point cloud of the box room and checks
//! the estimated normals against the true walls.
//!
//! `cargo run --release --example build_map [voxel]`

use surfloc::surfel_map::build_surfel_map;
use surfloc::synthworld::{make_scene, preset, sample_point_cloud, Preset};
use surfloc::Result;

fn main() -> Result<()> {
    let voxel: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let scene = make_scene(preset(Preset::BoxRoom, 1, 1))?;
    let cloud = sample_point_cloud(&scene, voxel / 3.0)?;
    let map = build_surfel_map(&cloud, voxel, 10)?;
    println!("{} points -> {} surfels (voxel {voxel} m, mean radius {:.4} m)", cloud.len(), map.len(), map.mean_radius());

    // angle between each surfel normal and the nearest wall's normal
    let mut angles = Vec::with_capacity(map.len());
    for s in &map.surfels {
        let wall = scene
            .spec
            .planes
            .iter()
            .min_by(|a, b| a.plane.signed_distance(&s.position).abs().total_cmp(&b.plane.signed_distance(&s.position).abs()))
            .expect("room has walls");
        let angle = s.normal.dot(&wall.plane.normal).abs().min(1.0).acos().to_degrees();
        angles.push(angle);
    }
    angles.sort_by(f64::total_cmp);
    // the tail comes from surfels whose neighbourhood spans a room edge
    println!(
        "normal error: median {:.3} deg, 95th percentile {:.3} deg",
        angles[angles.len() / 2],
        angles[angles.len() * 95 / 100]
    );
    Ok(())
}
