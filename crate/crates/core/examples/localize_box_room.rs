//! End-to-end localization on a synthetic scene with ground truth.
//!
//! `cargo run --release --example localize_box_room -- [preset] [frames] [init_translation] [init_rotation_deg] [map_noise]`

use surfloc::cli::{run_synthetic, RunConfig};
use surfloc::evaluation::{evaluate, metrics_csv};
use surfloc::Result;

fn main() -> Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::default();
    let keys = ["preset", "frames", "init_translation", "init_rotation_deg", "map_noise"];
    for (key, value) in keys.iter().zip(std::env::args().skip(1)) {
        cfg.set(key, &value)?;
    }
    let out = run_synthetic(&cfg)?;
    if let Some(e) = &out.output.failure {
        println!("stopped early: {e}");
    }
    let est = &out.output.trajectory;
    println!(
        "{}: {} of {} frames, {} keyframes, {:.1} s",
        cfg.preset.name(),
        est.len(),
        out.ground_truth.len(),
        out.output.localizer.constraint_log.len(),
        out.output.elapsed.as_secs_f64()
    );
    println!("trajectory diameter {:.3} m", out.ground_truth.diameter());
    print!("{}", metrics_csv(&evaluate(est, &out.ground_truth, &cfg.segments, cfg.association_tolerance)?));
    let low: Vec<_> = out.keyframe_errors.iter().filter(|k| k.surfel_ratio <= 0.2).collect();
    println!("{} of {} keyframes with surfel-constraint ratio <= 0.2", low.len(), out.keyframe_errors.len());
    Ok(())
}
