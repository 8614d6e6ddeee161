//! Trajectory metrics on an estimate with a known scale error, offset and
//! jitter; the similarity alignment recovers the scale.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use surfloc::evaluation::{evaluate, metrics_csv, Alignment, Trajectory};
use surfloc::geometry::Pose;
use surfloc::synthworld::{preset, Preset};
use surfloc::Result;

fn main() -> Result<()> {
    let spec = preset(Preset::BoxRoom, 200, 1);
    let gt = Trajectory::new(spec.stamps.clone(), spec.trajectory.clone())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let drifted = gt.transformed(&Alignment {
        scale: 1.03,
        transform: Pose::from_translation(Vector3::new(0.05, -0.02, 0.0)),
    });
    let noisy: Vec<Pose> = drifted
        .poses
        .iter()
        .map(|p| {
            let jitter = Vector3::from_fn(|_, _| rng.random_range(-0.005..0.005));
            Pose::new(p.rotation, p.translation + jitter)
        })
        .collect();
    let est = Trajectory::new(drifted.stamps.clone(), noisy)?;
    print!("{}", metrics_csv(&evaluate(&est, &gt, &[0.5, 1.0], 0.01)?));
    Ok(())
}
