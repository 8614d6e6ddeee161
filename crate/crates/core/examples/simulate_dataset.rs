//! Writes a synthetic dataset that the `surfloc` binary can localize:
//! images, index, ground truth, camera, surfel map and point cloud.
//!
//! `cargo run --release --example simulate_dataset -- <out_dir> [preset] [frames]`

use std::path::PathBuf;

use surfloc::cli::{cmd_simulate, RunConfig};
use surfloc::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "dataset".into()));
    let mut cfg = RunConfig::default();
    if let Some(p) = args.next() {
        cfg.set("preset", &p)?;
    }
    if let Some(n) = args.next() {
        cfg.set("frames", &n)?;
    }
    let summary = cmd_simulate(&cfg, &out)?;
    println!(
        "{}: {} frames, {} surfels, {} cloud points in {}",
        cfg.preset.name(),
        summary.frames,
        summary.surfels,
        summary.cloud_points,
        out.display()
    );
    println!("localize with: surfloc localize --dataset {} --frames {} out", out.display(), cfg.frames);
    Ok(())
}
