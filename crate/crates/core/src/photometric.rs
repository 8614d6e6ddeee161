//! Photometric residuals for free-depth and plane-constrained points, with
//! analytic Jacobians w.r.t. the 8-dim frame states and inverse depth.
//!
//! Frame state: `(T_c_w, a, b)` with the pose updated by left perturbation
//! `exp(δ)·T_c_w`, `δ = (translation, rotation)`. The image model is
//! `I = t·e^a·L + b`, so `I_t ≈ a_th·(I_h − b_h) + b_t` for a shared radiance `L`.

use nalgebra::{Matrix3, RowVector3, SMatrix, SVector, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{skew, transform_plane, CameraIntrinsics, PlaneCoeffs, Pose};
use crate::image::IntensitySampler;

pub type Vector8 = SVector<f64, 8>;
pub type Matrix8 = SMatrix<f64, 8, 8>;

/// Residual pattern (offsets in pixels around the point).
pub const PATTERN: [(i32, i32); 8] = [(0, -2), (-1, -1), (1, -1), (-2, 0), (0, 0), (2, 0), (-1, 1), (0, 2)];
pub const PATTERN_SIZE: usize = PATTERN.len();
/// Single-pixel pattern, used by tracking at coarse levels and by tests.
pub const CENTER_ONLY: [(i32, i32); 1] = [(0, 0)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricConfig {
    /// Huber threshold in intensity levels.
    pub huber: f64,
    /// Gradient-weight constant `c` in `c²/(c² + |∇I|²)`.
    pub gradient_c: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig {
            huber: 9.0,
            gradient_c: 50.0,
        }
    }
}

/// Optimizable per-frame state plus the known exposure time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FramePhotoState {
    pub t_c_w: Pose,
    pub exposure_time: f64,
    pub affine_a: f64,
    pub affine_b: f64,
}

impl FramePhotoState {
    pub fn new(t_c_w: Pose, exposure_time: f64) -> Self {
        FramePhotoState {
            t_c_w,
            exposure_time,
            affine_a: 0.0,
            affine_b: 0.0,
        }
    }

    /// Applies an 8-dim increment `(δξ, δa, δb)`.
    pub fn boxplus(&self, delta: &Vector8) -> FramePhotoState {
        let xi = crate::geometry::Twist(delta.fixed_rows::<6>(0).into_owned());
        FramePhotoState {
            t_c_w: self.t_c_w.perturbed(&xi).normalized(),
            exposure_time: self.exposure_time,
            affine_a: self.affine_a + delta[6],
            affine_b: self.affine_b + delta[7],
        }
    }

    /// Tangent-space difference `self ⊟ reference` (inverse of `boxplus`).
    pub fn boxminus(&self, reference: &FramePhotoState) -> Result<Vector8> {
        let xi = crate::geometry::se3_log(&(self.t_c_w * reference.t_c_w.inverse()))?;
        let mut v = Vector8::zeros();
        v.fixed_rows_mut::<6>(0).copy_from(&xi.0);
        v[6] = self.affine_a - reference.affine_a;
        v[7] = self.affine_b - reference.affine_b;
        Ok(v)
    }

    pub fn t_w_c(&self) -> Pose {
        self.t_c_w.inverse()
    }
}

/// Relative affine brightness `(a_th, b_th)` mapping host intensities into the target.
pub fn affine_pair(host: &FramePhotoState, target: &FramePhotoState) -> (f64, f64) {
    let a = (target.exposure_time * target.affine_a.exp()) / (host.exposure_time * host.affine_a.exp());
    (a, target.affine_b - a * host.affine_b)
}

/// Gradient weight times the Huber IRLS factor.
pub fn robust_weight(r: f64, grad_norm: f64, cfg: &PhotometricConfig) -> f64 {
    gradient_weight(grad_norm * grad_norm, cfg) * huber_weight(r, cfg.huber)
}

#[inline]
pub fn gradient_weight(grad_sq: f64, cfg: &PhotometricConfig) -> f64 {
    let c2 = cfg.gradient_c * cfg.gradient_c;
    c2 / (c2 + grad_sq)
}

#[inline]
pub fn huber_weight(r: f64, gamma: f64) -> f64 {
    let a = r.abs();
    if a <= gamma {
        1.0
    } else {
        gamma / a
    }
}

/// Huber cost scaled so that it equals `r²` in the quadratic region.
#[inline]
pub fn huber_cost(r: f64, gamma: f64) -> f64 {
    let a = r.abs();
    if a <= gamma {
        r * r
    } else {
        2.0 * gamma * a - gamma * gamma
    }
}

/// Plane-induced homography `K (R − t nᵀ / d) K⁻¹` for a plane in host coordinates.
pub fn compute_homography(t_t_h: &Pose, omega_h: &PlaneCoeffs, k: &CameraIntrinsics) -> Result<Matrix3<f64>> {
    if omega_h.d.abs() <= 1e-9 {
        return Err(Error::DegeneratePlane(omega_h.d));
    }
    let m = t_t_h.rotation - t_t_h.translation * omega_h.normal.transpose() / omega_h.d;
    Ok(k.matrix() * m * k.inverse_matrix())
}

/// Host-side data of one point: pattern pixels, their intensities and
/// squared gradient magnitudes (the host image is never re-sampled).
#[derive(Clone, Debug, PartialEq)]
pub struct HostPatch {
    pub center: Vector2<f64>,
    pub pixels: Vec<Vector2<f64>>,
    pub intensities: Vec<f64>,
    pub grad_sq: Vec<f64>,
}

impl HostPatch {
    pub fn sample(image: &dyn IntensitySampler, center: Vector2<f64>, pattern: &[(i32, i32)]) -> Option<HostPatch> {
        let mut patch = HostPatch {
            center,
            pixels: Vec::with_capacity(pattern.len()),
            intensities: Vec::with_capacity(pattern.len()),
            grad_sq: Vec::with_capacity(pattern.len()),
        };
        for &(dx, dy) in pattern {
            let p = center + Vector2::new(dx as f64, dy as f64);
            let s = image.sample(p.x, p.y)?;
            patch.pixels.push(p);
            patch.intensities.push(s.value);
            patch.grad_sq.push(s.gradient.norm_squared());
        }
        Some(patch)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// How the host depth of a point is parameterized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthModel {
    /// Free inverse depth `ρ_h`, shared by the whole patch.
    Inverse(f64),
    /// World-frame plane; every patch pixel intersects its own ray with it.
    Plane(PlaneCoeffs),
}

impl DepthModel {
    pub fn is_surfel(&self) -> bool {
        matches!(self, DepthModel::Plane(_))
    }
}

/// One linearized pattern pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelTerm {
    pub residual: f64,
    /// Gradient-dependent weight (host gradient); Huber is applied on top.
    pub weight: f64,
    pub j_host: Vector8,
    pub j_target: Vector8,
    /// `∂r/∂ρ_h`; zero for plane-constrained points.
    pub j_rho: f64,
    pub target_pixel: Vector2<f64>,
}

/// All pattern pixels of one point observed in one target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub host: usize,
    pub target: usize,
    pub point: usize,
    pub surfel: bool,
    pub terms: Vec<PixelTerm>,
}

impl ResidualBlock {
    /// Inverse-depth Jacobian column; empty for surfel blocks.
    pub fn inverse_depth_jacobian(&self) -> Vec<f64> {
        if self.surfel {
            Vec::new()
        } else {
            self.terms.iter().map(|t| t.j_rho).collect()
        }
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.residual).collect()
    }

    pub fn energy(&self, gamma: f64) -> f64 {
        self.terms.iter().map(|t| t.weight * huber_cost(t.residual, gamma)).sum()
    }
}

/// Quantities shared by all pixels of a (host, target) pair.
#[derive(Clone, Copy, Debug)]
pub struct PairGeometry {
    pub t_t_h: Pose,
    pub t_h_w: Pose,
    pub a_th: f64,
    pub b_th: f64,
    pub host_b: f64,
}

impl PairGeometry {
    pub fn new(host: &FramePhotoState, target: &FramePhotoState) -> Self {
        let (a_th, b_th) = affine_pair(host, target);
        PairGeometry {
            t_t_h: target.t_c_w * host.t_c_w.inverse(),
            t_h_w: host.t_c_w,
            a_th,
            b_th,
            host_b: host.affine_b,
        }
    }
}

/// Host-frame 3D point of a pattern pixel plus the plane data needed for
/// the host-pose derivative of a surfel point.
struct HostPoint {
    x_h: Vector3<f64>,
    plane_h: Option<(PlaneCoeffs, f64)>,
}

fn host_point(xbar: &Vector3<f64>, depth: &DepthModel, t_h_w: &Pose) -> Result<HostPoint> {
    match depth {
        DepthModel::Inverse(rho) => {
            if !(*rho > 0.0) || !rho.is_finite() {
                return Err(Error::InvalidDepth(*rho));
            }
            Ok(HostPoint {
                x_h: xbar / *rho,
                plane_h: None,
            })
        }
        DepthModel::Plane(omega_w) => {
            let omega_h = transform_plane(t_h_w, omega_w);
            let denom = omega_h.normal.dot(xbar);
            if denom.abs() < 1e-12 {
                return Err(Error::NoIntersection);
            }
            let s = -omega_h.d / denom;
            if !(s > 0.0) {
                return Err(Error::NoIntersection);
            }
            Ok(HostPoint {
                x_h: xbar * s,
                plane_h: Some((omega_h, s)),
            })
        }
    }
}

/// Residual and Jacobians of a single host pixel.
#[allow(clippy::too_many_arguments)]
pub fn linearize_pixel(
    p_h: &Vector2<f64>,
    host_intensity: f64,
    host_grad_sq: f64,
    depth: &DepthModel,
    pair: &PairGeometry,
    target_image: &dyn IntensitySampler,
    k: &CameraIntrinsics,
    cfg: &PhotometricConfig,
) -> Result<PixelTerm> {
    let xbar = k.normalized(p_h);
    let hp = host_point(&xbar, depth, &pair.t_h_w)?;
    let r_th = pair.t_t_h.rotation;
    let p = pair.t_t_h.transform_point(&hp.x_h);
    if p.z <= 1e-9 {
        return Err(Error::BehindCamera { z: p.z });
    }
    let uv = k.project_unchecked(&p);
    let s = target_image.sample(uv.x, uv.y).ok_or(Error::OutOfBounds {
        u: uv.x,
        v: uv.y,
        width: target_image.width(),
        height: target_image.height(),
    })?;
    let residual = s.value - pair.a_th * host_intensity - pair.b_th;

    let iz = 1.0 / p.z;
    let dr_dp = RowVector3::new(
        s.gradient.x * k.fx * iz,
        s.gradient.y * k.fy * iz,
        -(s.gradient.x * k.fx * p.x + s.gradient.y * k.fy * p.y) * iz * iz,
    );

    let mut j_target = Vector8::zeros();
    let jt_pose = dr_dp * pose_jacobian(&p);
    j_target.fixed_rows_mut::<6>(0).copy_from(&jt_pose.transpose());
    j_target[6] = -pair.a_th * (host_intensity - pair.host_b);
    j_target[7] = -1.0;

    let mut dp_dhost = -r_th * pose_jacobian(&hp.x_h);
    if let Some((omega_h, s)) = hp.plane_h {
        let denom = omega_h.normal.dot(&xbar);
        let ds_dt = omega_h.normal / denom;
        let ds_dw = -omega_h.normal.cross(&xbar) * (s / denom);
        let rx = r_th * xbar;
        let mut row = nalgebra::Matrix3x6::zeros();
        row.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rx * ds_dt.transpose()));
        row.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rx * ds_dw.transpose()));
        dp_dhost += row;
    }
    let mut j_host = Vector8::zeros();
    j_host.fixed_rows_mut::<6>(0).copy_from(&(dr_dp * dp_dhost).transpose());
    j_host[6] = pair.a_th * (host_intensity - pair.host_b);
    j_host[7] = pair.a_th;

    let j_rho = match depth {
        DepthModel::Inverse(rho) => (dr_dp * (-(r_th * xbar) / (rho * rho)))[0],
        DepthModel::Plane(_) => 0.0,
    };

    Ok(PixelTerm {
        residual,
        weight: gradient_weight(host_grad_sq, cfg),
        j_host,
        j_target,
        j_rho,
        target_pixel: uv,
    })
}

/// `∂(exp(δ)·x)/∂δ` at δ = 0.
#[inline]
fn pose_jacobian(x: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(x)));
    j
}

/// Linearizes a whole patch; any invalid pixel invalidates the block.
#[allow(clippy::too_many_arguments)]
pub fn linearize_block(
    ids: (usize, usize, usize),
    patch: &HostPatch,
    depth: &DepthModel,
    host: &FramePhotoState,
    target: &FramePhotoState,
    target_image: &dyn IntensitySampler,
    k: &CameraIntrinsics,
    cfg: &PhotometricConfig,
) -> Result<ResidualBlock> {
    let pair = PairGeometry::new(host, target);
    let mut terms = Vec::with_capacity(patch.len());
    for i in 0..patch.len() {
        terms.push(linearize_pixel(
            &patch.pixels[i],
            patch.intensities[i],
            patch.grad_sq[i],
            depth,
            &pair,
            target_image,
            k,
            cfg,
        )?);
    }
    Ok(ResidualBlock {
        host: ids.0,
        target: ids.1,
        point: ids.2,
        surfel: depth.is_surfel(),
        terms,
    })
}

/// Free-depth residuals: `p_t ≃ K (R_th x̄_h + t_th ρ_h)`.
pub fn residual_nonsurfel(
    patch: &HostPatch,
    host: &FramePhotoState,
    target: &FramePhotoState,
    inv_depth: f64,
    target_image: &dyn IntensitySampler,
    k: &CameraIntrinsics,
) -> Result<Vec<f64>> {
    if !(inv_depth > 0.0) {
        return Err(Error::InvalidDepth(inv_depth));
    }
    let pair = PairGeometry::new(host, target);
    let mut out = Vec::with_capacity(patch.len());
    for (p_h, i_h) in patch.pixels.iter().zip(&patch.intensities) {
        let xbar = k.normalized(p_h);
        let x_t = pair.t_t_h.rotation * xbar + pair.t_t_h.translation * inv_depth;
        if x_t.z <= 1e-9 * inv_depth {
            return Err(Error::BehindCamera { z: x_t.z });
        }
        out.push(sample_residual(&k.project_unchecked(&x_t), *i_h, &pair, target_image)?);
    }
    Ok(out)
}

/// Plane-constrained residuals through the homography of the world plane
/// expressed in the host frame.
pub fn residual_surfel(
    patch: &HostPatch,
    host: &FramePhotoState,
    target: &FramePhotoState,
    omega_w: &PlaneCoeffs,
    target_image: &dyn IntensitySampler,
    k: &CameraIntrinsics,
) -> Result<Vec<f64>> {
    let pair = PairGeometry::new(host, target);
    let omega_h = transform_plane(&host.t_c_w, omega_w);
    let h = compute_homography(&pair.t_t_h, &omega_h, k)?;
    let mut out = Vec::with_capacity(patch.len());
    for (p_h, i_h) in patch.pixels.iter().zip(&patch.intensities) {
        let xbar = k.normalized(p_h);
        let depth = -omega_h.d / omega_h.normal.dot(&xbar);
        if !(depth > 0.0) {
            return Err(Error::NoIntersection);
        }
        let q = h * Vector3::new(p_h.x, p_h.y, 1.0);
        if q.z <= 0.0 {
            return Err(Error::BehindCamera { z: q.z });
        }
        out.push(sample_residual(&Vector2::new(q.x / q.z, q.y / q.z), *i_h, &pair, target_image)?);
    }
    Ok(out)
}

fn sample_residual(uv: &Vector2<f64>, i_h: f64, pair: &PairGeometry, target_image: &dyn IntensitySampler) -> Result<f64> {
    let s = target_image.sample(uv.x, uv.y).ok_or(Error::OutOfBounds {
        u: uv.x,
        v: uv.y,
        width: target_image.width(),
        height: target_image.height(),
    })?;
    Ok(s.value - pair.a_th * i_h - pair.b_th)
}
