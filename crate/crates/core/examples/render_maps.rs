//! Splats a surfel map into depth, vertex and normal maps for one camera
//! and compares the rendered depth with ray-cast ground truth.
//!
//! `cargo run --release --example render_maps [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::Vector2;
use surfloc::renderer::render;
use surfloc::synthworld::{make_scene, preset, sample_surfel_map, Preset};
use surfloc::Result;

fn main() -> Result<()> {
    let scene = make_scene(preset(Preset::BoxRoom, 8, 1))?;
    let map = sample_surfel_map(&scene, 0.05)?;
    let k = *scene.intrinsics();
    let pose = scene.spec.trajectory[3];

    let start = Instant::now();
    let maps = render(&map, &pose, &k);
    let elapsed = start.elapsed();
    println!(
        "{} surfels -> {} of {} pixels covered in {:.1} ms",
        map.len(),
        maps.valid_count(),
        k.width * k.height,
        elapsed.as_secs_f64() * 1e3
    );

    let mut errors = Vec::new();
    for y in (0..k.height).step_by(4) {
        for x in (0..k.width).step_by(4) {
            let p = Vector2::new(x as f64, y as f64);
            if let (Some(d), Some(hit)) = (maps.depth_at(&p)?, scene.cast(&pose, &k, &p)) {
                errors.push((d - hit.depth).abs());
            }
        }
    }
    errors.sort_by(f64::total_cmp);
    println!(
        "depth error vs ray casting: median {:.4} m, 95th percentile {:.4} m",
        errors[errors.len() / 2],
        errors[errors.len() * 95 / 100]
    );

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        std::fs::create_dir_all(&dir).map_err(|e| surfloc::Error::io(&dir, e))?;
        maps.write_debug(&dir, "frame3")?;
        println!("wrote frame3_depth.pgm, frame3_vertex.bin and frame3_normal.bin to {}", dir.display());
    }
    Ok(())
}
