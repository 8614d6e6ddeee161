//! Procedural planar scenes with analytic textures, ground-truth camera
//! trajectories, exact per-pixel ray casting and map-noise injection.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::Trajectory;
use crate::geometry::{CameraIntrinsics, PlaneCoeffs, Pose};
use crate::image::{Image, IntensitySampler, Sample};
use crate::surfel_map::{estimate_normals_pca, surfel_radius_for_voxel, Surfel, SurfelMap, DEFAULT_NEIGHBORS};

/// Wavelengths (metres) of the texture octaves, two waves per octave.
const OCTAVES: [(f64, f64); 5] = [(0.2, 9.0), (0.32, 9.0), (0.51, 8.0), (0.82, 7.0), (1.3, 6.0)];
const TEXTURE_MEAN: f64 = 128.0;
/// Intensity of rays that hit no plane.
pub const BACKGROUND: f64 = 0.0;

/// Band-limited random field: a sum of cosines on the plane's 2D coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    waves: Vec<(Vector2<f64>, f64, f64)>,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = Vec::with_capacity(2 * OCTAVES.len());
        for &(wavelength, amp) in &OCTAVES {
            for _ in 0..2 {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / wavelength * rng.random_range(0.85..1.15);
                waves.push((Vector2::new(angle.cos(), angle.sin()) * k, rng.random_range(0.0..std::f64::consts::TAU), amp));
            }
        }
        Texture { waves }
    }

    /// Radiance and its gradient w.r.t. the plane coordinates.
    pub fn eval(&self, uv: &Vector2<f64>) -> (f64, Vector2<f64>) {
        let mut value = TEXTURE_MEAN;
        let mut grad = Vector2::zeros();
        for (k, phase, amp) in &self.waves {
            let arg = k.dot(uv) + phase;
            value += amp * arg.cos();
            grad -= k * (amp * arg.sin());
        }
        (value, grad)
    }

    pub fn amplitude(&self) -> f64 {
        self.waves.iter().map(|w| w.2).sum()
    }
}

/// A bounded textured rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneSpec {
    pub plane: PlaneCoeffs,
    pub center: Vector3<f64>,
    /// In-plane unit axis; the second axis is `normal × axis_u`.
    pub axis_u: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub texture_seed: u64,
}

impl PlaneSpec {
    /// Rectangle centred at `center` with the given normal; `axis_hint` is
    /// projected into the plane to fix the first axis.
    pub fn new(
        center: Vector3<f64>,
        normal: Vector3<f64>,
        axis_hint: Vector3<f64>,
        half_u: f64,
        half_v: f64,
        texture_seed: u64,
    ) -> Result<Self> {
        let plane = PlaneCoeffs::from_point_normal(&center, &normal)?;
        let n = plane.normal;
        let u = axis_hint - n * n.dot(&axis_hint);
        if !(u.norm() > 1e-9) {
            return Err(Error::InvalidParameter("axis hint is parallel to the plane normal".into()));
        }
        Ok(PlaneSpec {
            plane,
            center,
            axis_u: u.normalize(),
            half_u,
            half_v,
            texture_seed,
        })
    }

    pub fn axis_v(&self) -> Vector3<f64> {
        self.plane.normal.cross(&self.axis_u)
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half_u * self.half_v
    }

    pub fn local(&self, x: &Vector3<f64>) -> Vector2<f64> {
        let r = x - self.center;
        Vector2::new(r.dot(&self.axis_u), r.dot(&self.axis_v()))
    }

    pub fn contains_local(&self, uv: &Vector2<f64>) -> bool {
        uv.x.abs() <= self.half_u && uv.y.abs() <= self.half_v
    }
}

/// Per-frame exposure time and true affine brightness parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Exposure {
    pub time: f64,
    pub a: f64,
    pub b: f64,
}

impl Default for Exposure {
    fn default() -> Self {
        Exposure {
            time: 1.0,
            a: 0.0,
            b: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub name: String,
    pub planes: Vec<PlaneSpec>,
    pub stamps: Vec<f64>,
    /// Ground-truth camera-to-world poses.
    pub trajectory: Vec<Pose>,
    pub intrinsics: CameraIntrinsics,
    pub exposures: Vec<Exposure>,
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub textures: Vec<Texture>,
}

/// A ray/scene intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub plane: usize,
    /// Distance along the ray direction `R·K⁻¹p` (its z-depth in the camera).
    pub depth: f64,
    pub point: Vector3<f64>,
}

pub fn make_scene(spec: SceneSpec) -> Result<Scene> {
    spec.intrinsics.validate()?;
    if spec.trajectory.len() != spec.stamps.len() || spec.exposures.len() != spec.stamps.len() {
        return Err(Error::InvalidParameter(
            "trajectory, timestamps and exposures must have equal length".into(),
        ));
    }
    if spec.stamps.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("timestamps must be strictly increasing".into()));
    }
    for (i, p) in spec.planes.iter().enumerate() {
        if !(p.half_u > 0.0 && p.half_v > 0.0) {
            return Err(Error::InvalidParameter(format!("plane {i} has a non-positive extent")));
        }
        for (j, q) in spec.planes.iter().enumerate().take(i) {
            if coincident_overlap(p, q) {
                return Err(Error::InvalidParameter(format!("planes {j} and {i} overlap on the same support")));
            }
        }
    }
    let textures = spec.planes.iter().map(|p| Texture::new(p.texture_seed)).collect();
    Ok(Scene { spec, textures })
}

/// Same support plane and overlapping rectangles (separating-axis test).
fn coincident_overlap(p: &PlaneSpec, q: &PlaneSpec) -> bool {
    let c = p.plane.normal.dot(&q.plane.normal);
    if c.abs() < 1.0 - 1e-9 || (p.plane.d - c.signum() * q.plane.d).abs() > 1e-9 {
        return false;
    }
    let corners = |s: &PlaneSpec| -> [Vector3<f64>; 4] {
        let (u, v) = (s.axis_u * s.half_u, s.axis_v() * s.half_v);
        [s.center + u + v, s.center + u - v, s.center - u - v, s.center - u + v]
    };
    let (cp, cq) = (corners(p), corners(q));
    for axis in [p.axis_u, p.axis_v(), q.axis_u, q.axis_v()] {
        let span = |cs: &[Vector3<f64>; 4]| {
            cs.iter()
                .map(|x| x.dot(&axis))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let ((a0, a1), (b0, b1)) = (span(&cp), span(&cq));
        if a1 <= b0 + 1e-12 || b1 <= a0 + 1e-12 {
            return false;
        }
    }
    true
}

/// A rendered frame: 8-bit intensities, z-depth (NaN on background) and the
/// index of the plane seen at each pixel (`u32::MAX` on background).
#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub image: Image,
    pub depth: Vec<f64>,
    pub plane: Vec<u32>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RenderImageOptions {
    /// Add uniform noise in `[-0.5, 0.5)` before quantization.
    pub dither: bool,
    /// Standard deviation of additive Gaussian intensity noise, in grey
    /// levels, applied before quantization.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Scene {
    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.spec.intrinsics
    }

    pub fn len(&self) -> usize {
        self.spec.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.trajectory.is_empty()
    }

    pub fn ground_truth(&self) -> Trajectory {
        Trajectory {
            stamps: self.spec.stamps.clone(),
            poses: self.spec.trajectory.clone(),
        }
    }

    /// Nearest plane hit by the ray through pixel `p`.
    pub fn cast(&self, t_w_c: &Pose, k: &CameraIntrinsics, p: &Vector2<f64>) -> Option<Hit> {
        let c = t_w_c.translation;
        let v = t_w_c.rotation * k.normalized(p);
        let mut best: Option<Hit> = None;
        for (i, s) in self.spec.planes.iter().enumerate() {
            let nv = s.plane.normal.dot(&v);
            if nv.abs() < 1e-12 {
                continue;
            }
            let mu = -(s.plane.normal.dot(&c) + s.plane.d) / nv;
            if !(mu > 1e-9) || best.is_some_and(|b| b.depth <= mu) {
                continue;
            }
            let x = c + v * mu;
            if s.contains_local(&s.local(&x)) {
                best = Some(Hit {
                    plane: i,
                    depth: mu,
                    point: x,
                });
            }
        }
        best
    }

    /// Pre-quantization intensity `t·e^a·L + b` and its pixel gradient.
    pub fn intensity(&self, t_w_c: &Pose, k: &CameraIntrinsics, p: &Vector2<f64>, e: &Exposure) -> (f64, Vector2<f64>) {
        let Some(hit) = self.cast(t_w_c, k, p) else {
            return (BACKGROUND, Vector2::zeros());
        };
        let s = &self.spec.planes[hit.plane];
        let (l, g_tex) = self.textures[hit.plane].eval(&s.local(&hit.point));
        let gain = e.time * e.a.exp();
        // X(p) = c + μ(p)·v(p); dX/dp = μ (I − v nᵀ / nᵀv) dv/dp
        let v = t_w_c.rotation * k.normalized(p);
        let n = s.plane.normal;
        let proj = (Matrix3::identity() - v * n.transpose() / n.dot(&v)) * hit.depth;
        let dv_du = t_w_c.rotation * Vector3::new(1.0 / k.fx, 0.0, 0.0);
        let dv_dv = t_w_c.rotation * Vector3::new(0.0, 1.0 / k.fy, 0.0);
        let (dxu, dxv) = (proj * dv_du, proj * dv_dv);
        let (au, av) = (s.axis_u, s.axis_v());
        let grad = Vector2::new(
            g_tex.x * au.dot(&dxu) + g_tex.y * av.dot(&dxu),
            g_tex.x * au.dot(&dxv) + g_tex.y * av.dot(&dxv),
        );
        (gain * l + e.b, grad * gain)
    }

    pub fn render_image(&self, t_w_c: &Pose, exposure: &Exposure, opts: &RenderImageOptions) -> SynthFrame {
        let k = self.spec.intrinsics;
        let (w, h) = (k.width, k.height);
        let rows: Vec<(Vec<f32>, Vec<f64>, Vec<u32>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (y as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut vals = Vec::with_capacity(w);
                let mut depth = Vec::with_capacity(w);
                let mut plane = Vec::with_capacity(w);
                for x in 0..w {
                    let p = Vector2::new(x as f64, y as f64);
                    let hit = self.cast(t_w_c, &k, &p);
                    let mut v = match hit {
                        Some(hit) => {
                            let s = &self.spec.planes[hit.plane];
                            let (l, _) = self.textures[hit.plane].eval(&s.local(&hit.point));
                            exposure.time * exposure.a.exp() * l + exposure.b
                        }
                        None => BACKGROUND,
                    };
                    if opts.dither {
                        v += rng.random_range(-0.5..0.5);
                    }
                    if opts.noise_sigma > 0.0 {
                        let n: f64 = rng.sample(rand_distr::StandardNormal);
                        v += opts.noise_sigma * n;
                    }
                    vals.push(v.round().clamp(0.0, 255.0) as f32);
                    depth.push(hit.map_or(f64::NAN, |h| h.depth));
                    plane.push(hit.map_or(u32::MAX, |h| h.plane as u32));
                }
                (vals, depth, plane)
            })
            .collect();
        let mut frame = SynthFrame {
            image: Image::new(w, h),
            depth: Vec::with_capacity(w * h),
            plane: Vec::with_capacity(w * h),
        };
        frame.image.data.clear();
        for (v, d, p) in rows {
            frame.image.data.extend(v);
            frame.depth.extend(d);
            frame.plane.extend(p);
        }
        frame
    }

    /// Renders frame `i` of the trajectory.
    pub fn render_frame(&self, i: usize, opts: &RenderImageOptions) -> SynthFrame {
        let opts = RenderImageOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..*opts
        };
        self.render_image(&self.spec.trajectory[i], &self.spec.exposures[i], &opts)
    }

    /// Continuous, unquantized view with exact gradients.
    pub fn exact_view(&self, t_w_c: Pose, exposure: Exposure) -> ExactView<'_> {
        ExactView {
            scene: self,
            t_w_c,
            exposure,
        }
    }

    /// Writes `images/NNNNNN.pgm`, `index.txt`, `groundtruth.txt`,
    /// `camera.txt` and (when `voxel` is given) `map.ply` into `dir`.
    pub fn write_dataset(&self, dir: &Path, voxel: Option<f64>, opts: &RenderImageOptions) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let records: Vec<FrameRecord> = (0..self.len())
            .map(|i| FrameRecord {
                id: i,
                timestamp: self.spec.stamps[i],
                exposure: self.spec.exposures[i],
                path: PathBuf::from(format!("images/{i:06}.pgm")),
            })
            .collect();
        records.par_iter().try_for_each(|r| {
            self.render_frame(r.id, opts).image.write_pgm(&dir.join(&r.path))
        })?;
        write_index(&dir.join("index.txt"), &records)?;
        self.ground_truth().write_tum(&dir.join("groundtruth.txt"))?;
        write_camera(&dir.join("camera.txt"), &self.spec.intrinsics)?;
        if let Some(voxel) = voxel {
            sample_surfel_map(self, voxel)?.save(&dir.join("map.ply"))?;
        }
        Ok(())
    }
}

/// Analytic image of a scene seen from one pose.
pub struct ExactView<'a> {
    scene: &'a Scene,
    t_w_c: Pose,
    exposure: Exposure,
}

impl IntensitySampler for ExactView<'_> {
    fn width(&self) -> usize {
        self.scene.spec.intrinsics.width
    }

    fn height(&self) -> usize {
        self.scene.spec.intrinsics.height
    }

    fn sample(&self, u: f64, v: f64) -> Option<Sample> {
        if !(u >= 1.0 && v >= 1.0 && u <= self.width() as f64 - 2.0 && v <= self.height() as f64 - 2.0) {
            return None;
        }
        let (value, gradient) =
            self.scene
                .intensity(&self.t_w_c, &self.scene.spec.intrinsics, &Vector2::new(u, v), &self.exposure);
        Some(Sample { value, gradient })
    }
}

/// Surfels on a regular grid of spacing `voxel` over every rectangle, with
/// exact plane normals and radius `voxel·√2/2` so the disks cover each cell.
pub fn sample_surfel_map(scene: &Scene, voxel: f64) -> Result<SurfelMap> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidParameter(format!("voxel size must be positive, got {voxel}")));
    }
    let radius = surfel_radius_for_voxel(voxel);
    let mut surfels = Vec::new();
    for s in &scene.spec.planes {
        let (nu, nv) = ((2.0 * s.half_u / voxel).ceil() as usize, (2.0 * s.half_v / voxel).ceil() as usize);
        let (au, av) = (s.axis_u, s.axis_v());
        for i in 0..nu {
            for j in 0..nv {
                let u = -s.half_u + (i as f64 + 0.5) * voxel;
                let v = -s.half_v + (j as f64 + 0.5) * voxel;
                surfels.push(Surfel {
                    position: s.center + au * u + av * v,
                    normal: s.plane.normal,
                    radius,
                });
            }
        }
    }
    Ok(SurfelMap::new(surfels, voxel))
}

/// Adds i.i.d. Gaussian noise (σ per axis) to the surfel positions and
/// re-estimates every normal by PCA over the noisy positions. Normals keep
/// the side of the original ones; surfels whose neighbourhood is degenerate
/// keep their original normal.
pub fn perturb_map(map: &SurfelMap, sigma: f64, seed: u64) -> Result<SurfelMap> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let positions: Vec<Vector3<f64>> = map
        .surfels
        .iter()
        .map(|s| s.position + Vector3::from_fn(|_, _| normal.sample(&mut rng)))
        .collect();
    let normals = estimate_normals_pca(&positions, DEFAULT_NEIGHBORS, &Vector3::zeros())?;
    let surfels = map
        .surfels
        .iter()
        .zip(positions)
        .zip(normals)
        .map(|((s, position), n)| {
            let normal = match n {
                Some(n) if n.dot(&s.normal) < 0.0 => -n,
                Some(n) => n,
                None => s.normal,
            };
            Surfel {
                position,
                normal,
                radius: s.radius,
            }
        })
        .collect();
    Ok(SurfelMap::new(surfels, map.voxel_size))
}

/// Points on a regular grid of spacing `spacing` over every rectangle: a
/// noise-free stand-in for a lidar point cloud.
pub fn sample_point_cloud(scene: &Scene, spacing: f64) -> Result<Vec<Vector3<f64>>> {
    if !(spacing > 0.0) {
        return Err(Error::InvalidParameter(format!("point spacing must be positive, got {spacing}")));
    }
    let mut points = Vec::new();
    for s in &scene.spec.planes {
        let (nu, nv) = ((2.0 * s.half_u / spacing).ceil() as usize, (2.0 * s.half_v / spacing).ceil() as usize);
        let (au, av) = (s.axis_u, s.axis_v());
        for i in 0..nu {
            for j in 0..nv {
                let u = (-s.half_u + (i as f64 + 0.5) * spacing).min(s.half_u);
                let v = (-s.half_v + (j as f64 + 0.5) * spacing).min(s.half_v);
                points.push(s.center + au * u + av * v);
            }
        }
    }
    Ok(points)
}

/// Moves the camera centre of `t_w_c` by `translation` metres in a random
/// direction and rotates it by `rotation` radians about a random axis.
pub fn perturb_pose(t_w_c: &Pose, translation: f64, rotation: f64, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = || loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    };
    let dir = unit();
    let axis = unit();
    let r = crate::geometry::so3_exp(&(axis * rotation));
    Pose::new(r * t_w_c.rotation, t_w_c.translation + dir * translation).normalized()
}

/// Camera-to-world pose at `center` looking at `target`, image y pointing
/// along world +y as far as possible.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Result<Pose> {
    let z = target - center;
    if !(z.norm() > 1e-12) {
        return Err(Error::InvalidParameter("look-at target equals the camera centre".into()));
    }
    let z = z.normalize();
    let x = Vector3::y().cross(&z);
    if !(x.norm() > 1e-9) {
        return Err(Error::InvalidParameter("viewing direction is vertical".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Ok(Pose::new(Matrix3::from_columns(&[x, y, z]), *center))
}

/// Scene presets: geometry plus a ground-truth trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    /// Closed 6 × 3 × 6 m room; the camera orbits the centre looking across it.
    BoxRoom,
    /// Two parallel walls; the camera walks down the middle.
    Corridor,
    /// One wall; the camera translates parallel to it.
    SingleWall,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::BoxRoom, Preset::Corridor, Preset::SingleWall];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::BoxRoom => "box-room",
            Preset::Corridor => "corridor",
            Preset::SingleWall => "single-wall",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (expected box-room, corridor or single-wall)")))
    }
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(220.0, 220.0, 159.5, 119.5, 320, 240).expect("valid default intrinsics")
}

pub const FRAME_RATE: f64 = 20.0;

/// Gentle deterministic exposure-time variation in `[0.88, 1.12]`.
fn exposure_schedule(n: usize, seed: u64) -> Vec<Exposure> {
    let phase = (seed % 1000) as f64 * 0.01;
    (0..n)
        .map(|i| Exposure {
            time: 1.0 + 0.12 * (0.05 * i as f64 + phase).sin(),
            a: 0.0,
            b: 0.0,
        })
        .collect()
}

fn room_planes(seed: u64) -> Vec<PlaneSpec> {
    let (hx, hy, hz) = (3.0, 1.5, 3.0);
    let p = |c: [f64; 3], n: [f64; 3], a: [f64; 3], hu: f64, hv: f64, i: u64| {
        PlaneSpec::new(Vector3::from(c), Vector3::from(n), Vector3::from(a), hu, hv, seed.wrapping_mul(31).wrapping_add(i))
            .expect("valid preset plane")
    };
    vec![
        p([-hx, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], hz, hy, 1),
        p([hx, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0], hz, hy, 2),
        p([0.0, -hy, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], hx, hz, 3),
        p([0.0, hy, 0.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0], hx, hz, 4),
        p([0.0, 0.0, -hz], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], hx, hy, 5),
        p([0.0, 0.0, hz], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0], hx, hy, 6),
    ]
}

/// Builds a preset scene specification with `frames` frames.
pub fn preset(preset: Preset, frames: usize, seed: u64) -> SceneSpec {
    let k = default_intrinsics();
    let n = frames.max(1);
    let (planes, trajectory): (Vec<PlaneSpec>, Vec<Pose>) = match preset {
        Preset::BoxRoom => {
            let radius = 1.2;
            let poses = (0..n)
                .map(|i| {
                    let th = std::f64::consts::TAU * i as f64 / n as f64;
                    let c = Vector3::new(radius * th.cos(), 0.15 * (2.0 * th).sin(), radius * th.sin());
                    // look past the centre so the view sweeps walls, floor and ceiling
                    let target = Vector3::new(-0.4 * th.sin(), 0.2, 0.4 * th.cos());
                    look_at(&c, &target).expect("valid orbit pose")
                })
                .collect();
            (room_planes(seed), poses)
        }
        Preset::Corridor => {
            let planes = vec![
                PlaneSpec::new(Vector3::new(-1.0, 0.0, 18.0), Vector3::x(), Vector3::z(), 21.0, 1.5, seed * 31 + 1).unwrap(),
                PlaneSpec::new(Vector3::new(1.0, 0.0, 18.0), -Vector3::x(), Vector3::z(), 21.0, 1.5, seed * 31 + 2).unwrap(),
            ];
            let poses = (0..n)
                .map(|i| {
                    let s = i as f64 / n as f64;
                    let z = 8.0 * s;
                    let c = Vector3::new(0.15 * (s * 9.0).sin(), 0.1 * (s * 7.0).sin(), z);
                    let target = Vector3::new(0.6 * (s * 5.0).sin(), 0.0, z + 3.0);
                    look_at(&c, &target).expect("valid corridor pose")
                })
                .collect();
            (planes, poses)
        }
        Preset::SingleWall => {
            let planes =
                vec![PlaneSpec::new(Vector3::new(0.0, 0.0, 4.0), -Vector3::z(), Vector3::x(), 8.0, 5.0, seed * 31 + 1).unwrap()];
            let poses = (0..n)
                .map(|i| {
                    let s = i as f64 / n as f64;
                    let th = std::f64::consts::TAU * s;
                    let c = Vector3::new(1.2 * th.cos(), 0.4 * (2.0 * th).sin(), 1.2 * th.sin());
                    let target = Vector3::new(0.3 * th.sin(), 0.0, 4.0);
                    look_at(&c, &target).expect("valid wall pose")
                })
                .collect();
            (planes, poses)
        }
    };
    SceneSpec {
        name: preset.name().into(),
        planes,
        stamps: (0..n).map(|i| i as f64 / FRAME_RATE).collect(),
        trajectory,
        intrinsics: k,
        exposures: exposure_schedule(n, seed),
    }
}

/// One line of the image index.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub id: usize,
    pub timestamp: f64,
    pub exposure: Exposure,
    /// Relative to the index file's directory.
    pub path: PathBuf,
}

pub const INDEX_HEADER: &str = "# frame_id timestamp exposure a b path";

pub fn write_index(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let mut s = String::from(INDEX_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{} {:.6} {:.9} {:.9} {:.9} {}",
            r.id,
            r.timestamp,
            r.exposure.time,
            r.exposure.a,
            r.exposure.b,
            r.path.display()
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_index(path: &Path) -> Result<Vec<FrameRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::parse(path, lineno + 1, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(path, lineno + 1, format!("{s:?}: {e}")));
        out.push(FrameRecord {
            id: f[0].parse().map_err(|e| Error::parse(path, lineno + 1, format!("frame id: {e}")))?,
            timestamp: num(f[1])?,
            exposure: Exposure {
                time: num(f[2])?,
                a: num(f[3])?,
                b: num(f[4])?,
            },
            path: PathBuf::from(f[5]),
        });
    }
    Ok(out)
}

/// `fx fy cx cy width height` on one line.
pub fn write_camera(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    let s = format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height);
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_camera(path: &Path) -> Result<CameraIntrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_intrinsics(text.trim()).map_err(|m| Error::parse(path, 1, m))
}

/// Parses `fx fy cx cy width height` (whitespace or comma separated).
pub fn parse_intrinsics(s: &str) -> std::result::Result<CameraIntrinsics, String> {
    let f: Vec<&str> = s.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect();
    if f.len() != 6 {
        return Err(format!("expected `fx fy cx cy width height`, found {} fields", f.len()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let int = |s: &str| s.parse::<usize>().map_err(|e| format!("{s:?}: {e}"));
    CameraIntrinsics::new(num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?, int(f[4])?, int(f[5])?).map_err(|e| e.to_string())
}
