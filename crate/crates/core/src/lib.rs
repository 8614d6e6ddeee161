//! Direct photometric localization against a prebuilt surfel map.

pub mod cli;
pub mod degeneracy;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod geometry;
pub mod image;
pub mod photometric;
pub mod ply;
pub mod renderer;
pub mod surfel_map;
pub mod synthworld;
pub mod window_optimizer;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PlaneCoeffs, Pose, Twist};
