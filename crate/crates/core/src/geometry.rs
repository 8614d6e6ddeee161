//! Rigid-body pose algebra, the pinhole camera and plane coefficients.
//!
//! Poses follow the `T^a_b` convention: a pose maps points expressed in frame
//! `b` into frame `a`. Tangent vectors are ordered `(translation, rotation)`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation angle the closed forms switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Element of se(3) as `(ρ, φ)`: translational part first, rotational second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist(pub Vector6<f64>);

impl Twist {
    pub fn zero() -> Self {
        Twist(Vector6::zeros())
    }

    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Twist(Vector6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into()
    }
}

impl From<Vector6<f64>> for Twist {
    fn from(v: Vector6<f64>) -> Self {
        Twist(v)
    }
}

/// Coefficients `(A, B, C)` of `sinθ/θ`, `(1-cosθ)/θ²`, `(θ-sinθ)/θ³`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let (a, b, _) = rodrigues_coeffs(theta);
    let w = skew(phi);
    Matrix3::identity() + w * a + w * w * b
}

/// Rotation vector of `r`. Fails when the angle is numerically π.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let skew_part = vee(&(r - r.transpose())) * 0.5;
    if theta < SMALL_ANGLE {
        return Ok(skew_part);
    }
    if PI - theta < 1e-10 {
        return Err(Error::IllConditioned(format!(
            "rotation angle {theta} is at π; the logarithm is not unique"
        )));
    }
    if theta < PI - 1e-3 {
        return Ok(skew_part * (theta / theta.sin()));
    }
    // Near π the antisymmetric part vanishes; recover the axis from the symmetric part.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let (mut best, mut col) = (0.0, 0);
    for i in 0..3 {
        if sym[(i, i)] > best {
            best = sym[(i, i)];
            col = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(col).into();
    axis /= axis.norm();
    if axis.dot(&skew_part) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Rigid transform `x' = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.quaternion();
        let t = self.translation;
        write!(
            f,
            "t=[{:.4}, {:.4}, {:.4}] q=[{:.4}, {:.4}, {:.4}, {:.4}]",
            t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose::new(Matrix3::identity(), translation)
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose::new(*q.to_rotation_matrix().matrix(), translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.rotation);
        UnitQuaternion::new_normalize(*UnitQuaternion::from_rotation_matrix(&rot).quaternion())
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Frobenius-norm orthonormality error of the rotation block.
    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthonormality_error() < tol && (self.rotation.determinant() - 1.0).abs() < tol
    }

    /// Re-projects the rotation onto SO(3); used after long chains of compositions.
    pub fn normalized(&self) -> Pose {
        let r = nalgebra::Rotation3::from_matrix(&self.rotation);
        Pose::new(*r.matrix(), self.translation)
    }

    /// `exp(δ) · self`, the left-multiplicative update used throughout the optimizer.
    pub fn perturbed(&self, delta: &Twist) -> Pose {
        se3_exp(delta) * *self
    }

    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let rho = xi.translation();
    let phi = xi.rotation();
    let theta = phi.norm();
    let (a, b, c) = rodrigues_coeffs(theta);
    let w = skew(&phi);
    let w2 = w * w;
    let rotation = Matrix3::identity() + w * a + w2 * b;
    let v = Matrix3::identity() + w * b + w2 * c;
    Pose::new(rotation, v * rho)
}

pub fn se3_log(pose: &Pose) -> Result<Twist> {
    let phi = so3_log(&pose.rotation)?;
    let theta = phi.norm();
    let w = skew(&phi);
    let coeff = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (a, b, _) = rodrigues_coeffs(theta);
        (1.0 - a / (2.0 * b)) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * coeff;
    Ok(Twist::new(v_inv * pose.translation, phi))
}

/// Pinhole intrinsics. Pixel centres sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Intrinsics of pyramid level `level` obtained by repeated 2x2 averaging.
    pub fn at_level(&self, level: usize) -> CameraIntrinsics {
        let mut k = *self;
        for _ in 0..level {
            k = CameraIntrinsics {
                fx: k.fx * 0.5,
                fy: k.fy * 0.5,
                cx: (k.cx + 0.5) * 0.5 - 0.5,
                cy: (k.cy + 0.5) * 0.5 - 0.5,
                width: k.width / 2,
                height: k.height / 2,
            };
        }
        k
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>> {
        if x.z <= 0.0 {
            return Err(Error::BehindCamera { z: x.z });
        }
        Ok(self.project_unchecked(x))
    }

    #[inline]
    pub fn project_unchecked(&self, x: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }

    /// Normalized image coordinates `K⁻¹ [u v 1]ᵀ`.
    #[inline]
    pub fn normalized(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    pub fn backproject(&self, p: &Vector2<f64>, inv_depth: f64) -> Result<Vector3<f64>> {
        if !(inv_depth > 0.0) {
            return Err(Error::InvalidDepth(inv_depth));
        }
        Ok(self.normalized(p) / inv_depth)
    }

    pub fn contains(&self, p: &Vector2<f64>, margin: f64) -> bool {
        p.x >= margin
            && p.y >= margin
            && p.x <= self.width as f64 - 1.0 - margin
            && p.y <= self.height as f64 - 1.0 - margin
    }
}

/// Plane `n·x + d = 0` with unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneCoeffs {
    pub normal: Vector3<f64>,
    pub d: f64,
}

impl PlaneCoeffs {
    /// Normalizes `normal` (and scales `d` accordingly).
    pub fn new(normal: Vector3<f64>, d: f64) -> Result<Self> {
        let norm = normal.norm();
        if !(norm > 1e-12) || !d.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "plane normal {normal:?} is degenerate"
            )));
        }
        Ok(PlaneCoeffs {
            normal: normal / norm,
            d: d / norm,
        })
    }

    pub fn from_point_normal(point: &Vector3<f64>, normal: &Vector3<f64>) -> Result<Self> {
        let n = normal.normalize();
        PlaneCoeffs::new(n, -n.dot(point))
    }

    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) + self.d
    }

    pub fn as_vector(&self) -> nalgebra::Vector4<f64> {
        nalgebra::Vector4::new(self.normal.x, self.normal.y, self.normal.z, self.d)
    }

    /// Same plane with the opposite orientation.
    pub fn flipped(&self) -> PlaneCoeffs {
        PlaneCoeffs {
            normal: -self.normal,
            d: -self.d,
        }
    }
}

/// Expresses a world plane in the frame of `t_h_w`: `ω_h = (T^h_w)^{-T} ω_w`.
pub fn transform_plane(t_h_w: &Pose, omega_w: &PlaneCoeffs) -> PlaneCoeffs {
    let n = t_h_w.rotation * omega_w.normal;
    let d = omega_w.d - t_h_w.translation.dot(&n);
    let norm = n.norm();
    PlaneCoeffs {
        normal: n / norm,
        d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Matrix exponential by scaling and squaring with a truncated Taylor series.
    fn expm_oracle(m: &Matrix4<f64>) -> Matrix4<f64> {
        let s = 12;
        let scaled = m / f64::powi(2.0, s);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..20 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..s {
            sum = sum * sum;
        }
        sum
    }

    fn hat(xi: &Twist) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&xi.rotation()));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.translation());
        m
    }

    fn twist_strategy(max_rot: f64) -> impl Strategy<Value = Twist> {
        (
            prop::array::uniform3(-2.0..2.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            0.0..max_rot,
        )
            .prop_map(|(t, axis, angle)| {
                let a = Vector3::from(axis);
                let a = if a.norm() < 1e-3 { Vector3::z() } else { a.normalize() };
                Twist::new(Vector3::from(t), a * angle)
            })
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(se3_exp(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn exp_quarter_turn_matches_matrix_exponential() {
        let xi = Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0));
        let pose = se3_exp(&xi);
        let oracle = expm_oracle(&hat(&xi));
        assert!((pose.matrix() - oracle).norm() < 1e-12);
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((pose.rotation - expected).norm() < 1e-12);
        assert!(pose.translation.norm() < 1e-15);
    }

    #[test]
    fn exp_matches_oracle_for_general_twist() {
        let xi = Twist::new(Vector3::new(0.3, -1.2, 0.7), Vector3::new(0.4, 1.1, -0.6));
        assert!((se3_exp(&xi).matrix() - expm_oracle(&hat(&xi))).norm() < 1e-11);
    }

    #[test]
    fn log_special_cases() {
        assert_eq!(se3_log(&Pose::identity()).unwrap(), Twist::zero());
        let t = se3_log(&Pose::from_translation(Vector3::new(0.0, 0.0, 1.0))).unwrap();
        assert!((t.0 - Vector6::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0)).norm() < 1e-15);
        let half_turn = se3_exp(&Twist::new(Vector3::zeros(), Vector3::new(PI, 0.0, 0.0)));
        assert!(matches!(se3_log(&half_turn), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn log_near_pi_uses_symmetric_branch() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        let xi = Twist::new(Vector3::new(0.1, 0.2, 0.3), axis * (PI - 1e-4));
        let back = se3_log(&se3_exp(&xi)).unwrap();
        assert!((back.0 - xi.0).norm() < 1e-7);
    }

    #[test]
    fn small_angle_series_is_continuous() {
        let phi = Vector3::new(3e-9, -2e-9, 1e-9);
        let xi = Twist::new(Vector3::new(1.0, 2.0, 3.0), phi);
        let back = se3_log(&se3_exp(&xi)).unwrap();
        assert!((back.0 - xi.0).norm() < 1e-14);
    }

    #[test]
    fn project_examples() {
        let unit = CameraIntrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        };
        assert_eq!(unit.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap(), Vector2::zeros());
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let p = k.project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(100.0, 50.0));
        assert!(matches!(
            k.project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn backproject_examples() {
        let k = CameraIntrinsics::new(100.0, 80.0, 50.0, 40.0, 100, 80).unwrap();
        let x = k.backproject(&Vector2::new(50.0, 40.0), 0.5).unwrap();
        assert_eq!(x, Vector3::new(0.0, 0.0, 2.0));
        let p = Vector2::new(70.0, 10.0);
        assert_eq!(k.backproject(&p, 1.0).unwrap(), k.normalized(&p));
        assert!(matches!(k.backproject(&p, 0.0), Err(Error::InvalidDepth(_))));
        assert!(k.backproject(&p, -1.0).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 5.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn transform_plane_examples() {
        let omega = PlaneCoeffs::new(Vector3::z(), -5.0).unwrap();
        assert_eq!(transform_plane(&Pose::identity(), &omega), omega);
        let t = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let moved = transform_plane(&t, &omega);
        assert!((moved.normal - Vector3::z()).norm() < 1e-15);
        assert!((moved.d + 6.0).abs() < 1e-15);

        // Oracle: move three points of the world plane and refit.
        let pts = [
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(0.0, 1.0, 5.0),
        ]
        .map(|x| t.transform_point(&x));
        let n = (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).normalize();
        let d = -n.dot(&pts[0]);
        assert!((n - moved.normal).norm() < 1e-12 && (d - moved.d).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn log_inverts_exp(xi in twist_strategy(3.0)) {
            let back = se3_log(&se3_exp(&xi)).unwrap();
            prop_assert!((back.0 - xi.0).norm() < 1e-9);
        }

        #[test]
        fn exp_inverts_log(xi in twist_strategy(3.0)) {
            let pose = se3_exp(&xi);
            let again = se3_exp(&se3_log(&pose).unwrap());
            prop_assert!((again.matrix() - pose.matrix()).norm() < 1e-9);
            prop_assert!(pose.is_valid(1e-9));
            let ident = pose * pose.inverse();
            prop_assert!((ident.matrix() - Matrix4::identity()).norm() < 1e-9);
        }

        #[test]
        fn project_backproject_round_trip(
            x in -3.0..3.0f64, y in -3.0..3.0f64, z in 0.1..20.0f64
        ) {
            let k = CameraIntrinsics::new(320.0, 310.0, 319.5, 239.5, 640, 480).unwrap();
            let pt = Vector3::new(x, y, z);
            let p = k.project(&pt).unwrap();
            let back = k.backproject(&p, 1.0 / z).unwrap();
            prop_assert!((back - pt).norm() < 1e-9 * (1.0 + pt.norm()));
        }

        #[test]
        fn transform_plane_preserves_incidence(
            xi in twist_strategy(3.0),
            n in prop::array::uniform3(-1.0..1.0f64),
            d in -10.0..10.0f64,
            u in -5.0..5.0f64, v in -5.0..5.0f64,
        ) {
            let n = Vector3::from(n);
            prop_assume!(n.norm() > 1e-2);
            let plane = PlaneCoeffs::new(n, d).unwrap();
            // a point on the plane: foot of origin plus in-plane offsets
            let e1 = plane.normal.cross(&Vector3::new(0.3, 0.5, 0.8)).normalize();
            let e2 = plane.normal.cross(&e1);
            let x_w = -plane.normal * plane.d + e1 * u + e2 * v;
            let pose = se3_exp(&xi);
            let moved = transform_plane(&pose, &plane);
            prop_assert!(moved.signed_distance(&pose.transform_point(&x_w)).abs() < 1e-9);
        }

        #[test]
        fn transform_plane_composes(
            a in twist_strategy(3.0), b in twist_strategy(3.0),
            n in prop::array::uniform3(-1.0..1.0f64), d in -10.0..10.0f64,
        ) {
            let n = Vector3::from(n);
            prop_assume!(n.norm() > 1e-2);
            let plane = PlaneCoeffs::new(n, d).unwrap();
            let (t1, t2) = (se3_exp(&a), se3_exp(&b));
            let chained = transform_plane(&t2, &transform_plane(&t1, &plane));
            let direct = transform_plane(&(t2 * t1), &plane);
            prop_assert!((chained.as_vector() - direct.as_vector()).norm() < 1e-9);
        }
    }

    #[test]
    fn transform_plane_incidence_thousand_samples() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let xi = Twist(Vector6::from_fn(|_, _| rng.random_range(-1.5..1.5)));
            let n = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if n.norm() < 1e-2 {
                continue;
            }
            let plane = PlaneCoeffs::new(n, rng.random_range(-5.0..5.0)).unwrap();
            let pose = se3_exp(&xi);
            let e1 = plane.normal.cross(&Vector3::new(0.2, -0.7, 0.4)).normalize();
            let x_w = -plane.normal * plane.d + e1 * rng.random_range(-3.0..3.0);
            let moved = transform_plane(&pose, &plane);
            assert!(moved.signed_distance(&pose.transform_point(&x_w)).abs() < 1e-9);
        }
    }
}
