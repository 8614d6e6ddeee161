//! Transfers pixels between two views of a wall with the plane-induced
//! homography and compares the transferred intensities with the second image.

use nalgebra::Vector3;
use surfloc::geometry::transform_plane;
use surfloc::image::IntensitySampler;
use surfloc::photometric::compute_homography;
use surfloc::synthworld::{make_scene, preset, Exposure, Preset, RenderImageOptions};
use surfloc::Result;

fn main() -> Result<()> {
    let scene = make_scene(preset(Preset::SingleWall, 40, 1))?;
    let k = *scene.intrinsics();
    let wall = scene.spec.planes[0].plane;
    let (a, b) = (0, 5);
    let (pa, pb) = (scene.spec.trajectory[a], scene.spec.trajectory[b]);
    let h = compute_homography(&(pb.inverse() * pa), &transform_plane(&pa.inverse(), &wall), &k)?;
    println!("H (frame {a} -> frame {b}):{h:.4}");

    let view_a = scene.exact_view(pa, Exposure::default());
    let image_b = scene.render_image(&pb, &Exposure::default(), &RenderImageOptions::default());
    let h_inv = h.try_inverse().expect("invertible homography");
    let mut diffs = Vec::new();
    for y in (4..k.height - 4).step_by(2) {
        for x in (4..k.width - 4).step_by(2) {
            if image_b.plane[y * k.width + x] != 0 {
                continue;
            }
            let q = h_inv * Vector3::new(x as f64, y as f64, 1.0);
            if let Some(s) = view_a.sample(q.x / q.z, q.y / q.z) {
                diffs.push((s.value - image_b.image.get(x, y) as f64).abs());
            }
        }
    }
    let within = diffs.iter().filter(|d| **d <= 1.0).count();
    println!(
        "{} of {} transferred pixels within one grey level ({:.2}%)",
        within,
        diffs.len(),
        100.0 * within as f64 / diffs.len() as f64
    );
    Ok(())
}
