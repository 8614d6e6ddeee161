//! Observability of the global similarity gauge `(λ, R̄, t̄)` under surfel
//! constraints, and the plane-configuration classification used in reports.
//!
//! Gauge parameters are ordered `(s, t̄, ω)` with `λ = 1 + s` and `R̄ = exp(ω)`;
//! a world point maps to `λ·R̄·X + t̄`.

use std::fmt;
use std::fmt::Write as _;

use nalgebra::{DMatrix, Matrix2x3, Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{skew, so3_exp, PlaneCoeffs, Pose};
use crate::window_optimizer::{PointStatus, WindowState};

pub const GAUGE_DIM: usize = 7;
type GaugeRow = SMatrix<f64, 2, GAUGE_DIM>;

/// A scale and rigid transform applied to the whole trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaugeState {
    pub scale: f64,
    pub transform: Pose,
}

impl GaugeState {
    pub fn identity() -> Self {
        GaugeState {
            scale: 1.0,
            transform: Pose::identity(),
        }
    }

    /// Gauge from the 7-vector `(s, t̄, ω)`.
    pub fn from_params(p: &[f64; GAUGE_DIM]) -> Result<Self> {
        let scale = 1.0 + p[0];
        if !(scale > 0.0) {
            return Err(Error::InvalidParameter(format!("gauge scale {scale} must be positive")));
        }
        Ok(GaugeState {
            scale,
            transform: Pose::new(so3_exp(&Vector3::new(p[4], p[5], p[6])), Vector3::new(p[1], p[2], p[3])),
        })
    }

    /// Applies the gauge to a camera-to-world pose.
    pub fn apply(&self, t_w_c: &Pose) -> Pose {
        Pose::new(
            self.transform.rotation * t_w_c.rotation,
            self.transform.rotation * t_w_c.translation * self.scale + self.transform.translation,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Classification {
    SinglePlane,
    ParallelPlanes,
    CoplanarNormals,
    WellConstrained,
}

impl Classification {
    /// Gauge nullspace dimension of a generic configuration of this class.
    pub fn expected_nullspace_dim(&self) -> usize {
        match self {
            Classification::SinglePlane => 4,
            Classification::ParallelPlanes => 3,
            Classification::CoplanarNormals => 1,
            Classification::WellConstrained => 0,
        }
    }

    /// Expected dimension once concurrency is taken into account: when every
    /// plane passes through one common point, scaling about that point maps
    /// each plane onto itself and adds one unobservable direction. Single and
    /// parallel configurations are unaffected (scale is already free, or no
    /// common point exists).
    pub fn expected_nullspace_dim_with(&self, common_point: bool) -> usize {
        match self {
            Classification::CoplanarNormals | Classification::WellConstrained if common_point => {
                self.expected_nullspace_dim() + 1
            }
            _ => self.expected_nullspace_dim(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::SinglePlane => "SinglePlane",
            Classification::ParallelPlanes => "ParallelPlanes",
            Classification::CoplanarNormals => "CoplanarNormals",
            Classification::WellConstrained => "WellConstrained",
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegeneracyConfig {
    /// Threshold on `e3/e1` below which normals count as coplanar.
    pub coplanar_ratio: f64,
    /// Angular tolerance (radians) for equal normals.
    pub normal_tolerance: f64,
    /// Offset tolerance (metres) for equal planes.
    pub offset_tolerance: f64,
    /// Relative singular-value threshold for the nullspace.
    pub rank_tolerance: f64,
}

impl Default for DegeneracyConfig {
    fn default() -> Self {
        DegeneracyConfig {
            coplanar_ratio: 1e-3,
            normal_tolerance: 3f64.to_radians(),
            offset_tolerance: 0.05,
            rank_tolerance: 1e-8,
        }
    }
}

/// A point whose host depth comes from a world plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfelConstraint {
    /// Index into the frame list.
    pub host: usize,
    /// Normalized host ray `K⁻¹ p_h`.
    pub xbar: Vector3<f64>,
    pub plane: PlaneCoeffs,
}

/// A point with a free inverse depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeConstraint {
    pub host: usize,
    pub xbar: Vector3<f64>,
    pub inv_depth: f64,
}

/// Frames (`T_w_c`) and the constraints observed between them; every
/// constraint is observed by all frames other than its host.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConstraintSet {
    pub frames: Vec<Pose>,
    pub surfel: Vec<SurfelConstraint>,
    pub free: Vec<FreeConstraint>,
}

impl ConstraintSet {
    pub fn from_window(window: &WindowState) -> Self {
        let k = &window.intrinsics;
        let index = window.index_map();
        let mut set = ConstraintSet {
            frames: window.keyframes.iter().map(|kf| kf.state.t_w_c()).collect(),
            ..Default::default()
        };
        for p in &window.points {
            let Some(&host) = index.get(&p.host) else { continue };
            let xbar = k.normalized(&p.patch.center);
            match (p.status, p.plane) {
                (PointStatus::Associated, Some(plane)) => set.surfel.push(SurfelConstraint { host, xbar, plane }),
                (PointStatus::Active, _) => set.free.push(FreeConstraint {
                    host,
                    xbar,
                    inv_depth: p.inv_depth,
                }),
                _ => {}
            }
        }
        set
    }

    pub fn normals(&self) -> Vec<Vector3<f64>> {
        self.surfel.iter().map(|c| c.plane.normal).collect()
    }

    pub fn planes(&self) -> Vec<PlaneCoeffs> {
        self.surfel.iter().map(|c| c.plane).collect()
    }

    /// Target-frame normalized projections of every observation under the
    /// gauge; the measurement function whose Jacobian defines observability.
    pub fn measurements(&self, gauge: &GaugeState) -> Vec<[f64; 2]> {
        let frames: Vec<Pose> = self.frames.iter().map(|f| gauge.apply(f)).collect();
        let mut out = Vec::new();
        for c in &self.surfel {
            let host = &frames[c.host];
            let v = host.rotation * c.xbar;
            let mu = -(c.plane.normal.dot(&host.translation) + c.plane.d) / c.plane.normal.dot(&v);
            let x = host.translation + v * mu;
            for (t, target) in frames.iter().enumerate() {
                if t != c.host {
                    let y = target.inverse().transform_point(&x);
                    out.push([y.x / y.z, y.y / y.z]);
                }
            }
        }
        for c in &self.free {
            // relative translation scales with λ while the depth scales with 1/λ
            let host = &frames[c.host];
            let rho = c.inv_depth / gauge.scale;
            let x = host.transform_point(&(c.xbar / rho));
            for (t, target) in frames.iter().enumerate() {
                if t != c.host {
                    let y = target.inverse().transform_point(&x);
                    out.push([y.x / y.z, y.y / y.z]);
                }
            }
        }
        out
    }

    /// Analytic Jacobian of [`measurements`](Self::measurements) w.r.t. the
    /// gauge parameters at the identity gauge.
    pub fn gauge_jacobian(&self) -> DMatrix<f64> {
        let mut rows: Vec<GaugeRow> = Vec::new();
        let dc = |c: &Vector3<f64>| {
            let mut m = SMatrix::<f64, 3, GAUGE_DIM>::zeros();
            m.fixed_view_mut::<3, 1>(0, 0).copy_from(c);
            m.fixed_view_mut::<3, 3>(0, 1).copy_from(&Matrix3::identity());
            m.fixed_view_mut::<3, 3>(0, 4).copy_from(&(-skew(c)));
            m
        };
        let project = |target: &Pose, x: &Vector3<f64>, dx: &SMatrix<f64, 3, GAUGE_DIM>| -> GaugeRow {
            let rt = target.rotation.transpose();
            let y = rt * (x - target.translation);
            let mut dy_in = dx - dc(&target.translation);
            // rotation of the target frame: −ω × (X − c_t)
            let rel = x - target.translation;
            let mut rot = dy_in.fixed_view_mut::<3, 3>(0, 4);
            rot += skew(&rel);
            let dy = rt * dy_in;
            let (qx, qy) = (y.x / y.z, y.y / y.z);
            let p = Matrix2x3::new(1.0, 0.0, -qx, 0.0, 1.0, -qy) / y.z;
            p * dy
        };
        for c in &self.surfel {
            let host = &self.frames[c.host];
            let (n, d) = (c.plane.normal, c.plane.d);
            let v = host.rotation * c.xbar;
            let nv = n.dot(&v);
            let mu = -(n.dot(&host.translation) + d) / nv;
            let x = host.translation + v * mu;
            // dX = (I − v nᵀ / nᵀv)(dc + μ dv), dv = −[v]× ω
            let mut src = dc(&host.translation);
            let mut rot = src.fixed_view_mut::<3, 3>(0, 4);
            rot -= skew(&v) * mu;
            let dx = (Matrix3::identity() - v * n.transpose() / nv) * src;
            for (t, target) in self.frames.iter().enumerate() {
                if t != c.host {
                    rows.push(project(target, &x, &dx));
                }
            }
        }
        for c in &self.free {
            // the point moves rigidly with its host and scales with λ, so its
            // derivative is that of a world point carried along by the gauge
            let host = &self.frames[c.host];
            let x = host.transform_point(&(c.xbar / c.inv_depth));
            let dx = dc(&x);
            for (t, target) in self.frames.iter().enumerate() {
                if t != c.host {
                    rows.push(project(target, &x, &dx));
                }
            }
        }
        let mut j = DMatrix::zeros(2 * rows.len(), GAUGE_DIM);
        for (i, r) in rows.iter().enumerate() {
            j.view_mut((2 * i, 0), (2, GAUGE_DIM)).copy_from(r);
        }
        j
    }
}

/// Eigenvalues of `(1/N) Σ n nᵀ`, sorted descending, with the eigenvector of
/// the smallest one.
pub fn normal_scatter(normals: &[Vector3<f64>]) -> Result<([f64; 3], Vector3<f64>)> {
    if normals.is_empty() {
        return Err(Error::EmptyInput("normals"));
    }
    let mut m = Matrix3::zeros();
    for n in normals {
        m += n * n.transpose();
    }
    m /= normals.len() as f64;
    let eig = m.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let e = [
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]].max(0.0),
        eig.eigenvalues[order[2]].max(0.0),
    ];
    Ok((e, eig.eigenvectors.column(order[2]).into_owned()))
}

pub fn normal_scatter_eigs(normals: &[Vector3<f64>]) -> Result<[f64; 3]> {
    Ok(normal_scatter(normals)?.0)
}

/// Classifies the plane configuration of a set of surfel constraints.
pub fn classify(planes: &[PlaneCoeffs], cfg: &DegeneracyConfig) -> Result<Classification> {
    let first = planes.first().ok_or(Error::EmptyInput("surfel constraints"))?;
    let cos_tol = cfg.normal_tolerance.cos();
    let aligned: Option<Vec<f64>> = planes
        .iter()
        .map(|p| {
            let c = p.normal.dot(&first.normal);
            if c >= cos_tol {
                Some(p.d)
            } else if c <= -cos_tol {
                Some(-p.d)
            } else {
                None
            }
        })
        .collect();
    if let Some(offsets) = aligned {
        let (lo, hi) = offsets
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
        return Ok(if hi - lo <= cfg.offset_tolerance {
            Classification::SinglePlane
        } else {
            Classification::ParallelPlanes
        });
    }
    let normals: Vec<Vector3<f64>> = planes.iter().map(|p| p.normal).collect();
    let (e, _) = normal_scatter(&normals)?;
    Ok(if e[2] / e[0] < cfg.coplanar_ratio {
        Classification::CoplanarNormals
    } else {
        Classification::WellConstrained
    })
}

/// Whether all planes pass through one point, within `tol` metres (RMS of
/// the point-to-plane distances of the least-squares intersection).
pub fn planes_share_point(planes: &[PlaneCoeffs], tol: f64) -> bool {
    if planes.is_empty() {
        return false;
    }
    let a = DMatrix::from_fn(planes.len(), 3, |r, c| planes[r].normal[c]);
    let b = nalgebra::DVector::from_fn(planes.len(), |r, _| -planes[r].d);
    let svd = a.clone().svd(true, true);
    let Ok(x) = svd.solve(&b, 1e-9) else {
        return false;
    };
    let res = &a * x - b;
    (res.norm_squared() / planes.len() as f64).sqrt() <= tol
}

/// Dimension and orthonormal basis (columns) of the gauge nullspace.
pub fn gauge_nullspace(set: &ConstraintSet, cfg: &DegeneracyConfig) -> (usize, DMatrix<f64>) {
    let mut j = set.gauge_jacobian();
    if j.nrows() < GAUGE_DIM {
        j = j.resize_vertically(GAUGE_DIM, 0.0);
    }
    let svd = j.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sv = &svd.singular_values;
    let max = sv.max();
    let idx: Vec<usize> = (0..GAUGE_DIM).filter(|i| max == 0.0 || sv[*i] < cfg.rank_tolerance * max).collect();
    let mut basis = DMatrix::zeros(GAUGE_DIM, idx.len());
    for (c, &i) in idx.iter().enumerate() {
        basis.set_column(c, &v_t.row(i).transpose());
    }
    (idx.len(), basis)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyReport {
    /// `None` when the window holds no surfel constraint.
    pub classification: Option<Classification>,
    pub nullspace_dim: usize,
    pub nullspace_basis: DMatrix<f64>,
    pub eigenvalues: [f64; 3],
    pub ratio_e2_e1: f64,
    pub ratio_e3_e1: f64,
    /// Direction orthogonal to all normals when they are coplanar.
    pub n_omega: Option<Vector3<f64>>,
    /// All constraint planes pass through one point, leaving scale free.
    pub common_point: bool,
    pub surfel_constraints: usize,
    pub free_constraints: usize,
}

impl DegeneracyReport {
    pub fn surfel_ratio(&self) -> f64 {
        let total = self.surfel_constraints + self.free_constraints;
        if total == 0 {
            0.0
        } else {
            self.surfel_constraints as f64 / total as f64
        }
    }

    /// Whether the nullspace dimension matches the value expected for the
    /// class and plane concurrency.
    pub fn is_consistent(&self) -> bool {
        match self.classification {
            None => self.nullspace_dim == GAUGE_DIM,
            Some(c) => c.expected_nullspace_dim_with(self.common_point) == self.nullspace_dim,
        }
    }

    /// One `key=value` per line.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let class = self.classification.map(|c| c.as_str()).unwrap_or("NoSurfels");
        let _ = writeln!(s, "classification={class}");
        let _ = writeln!(s, "nullspace_dim={}", self.nullspace_dim);
        let _ = writeln!(s, "consistent={}", self.is_consistent());
        let _ = writeln!(s, "e1={:.9}", self.eigenvalues[0]);
        let _ = writeln!(s, "e2={:.9}", self.eigenvalues[1]);
        let _ = writeln!(s, "e3={:.9}", self.eigenvalues[2]);
        let _ = writeln!(s, "ratio_e2_e1={:.9}", self.ratio_e2_e1);
        let _ = writeln!(s, "ratio_e3_e1={:.9}", self.ratio_e3_e1);
        if let Some(n) = self.n_omega {
            let _ = writeln!(s, "n_omega={:.6},{:.6},{:.6}", n.x, n.y, n.z);
        }
        let _ = writeln!(s, "common_point={}", self.common_point);
        let _ = writeln!(s, "surfel_constraints={}", self.surfel_constraints);
        let _ = writeln!(s, "free_constraints={}", self.free_constraints);
        let _ = writeln!(s, "surfel_ratio={:.6}", self.surfel_ratio());
        for c in 0..self.nullspace_basis.ncols() {
            let col: Vec<String> = self.nullspace_basis.column(c).iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "nullspace_{c}={}", col.join(","));
        }
        s
    }
}

pub fn report(set: &ConstraintSet, cfg: &DegeneracyConfig) -> DegeneracyReport {
    let (nullspace_dim, nullspace_basis) = gauge_nullspace(set, cfg);
    let planes = set.planes();
    let classification = classify(&planes, cfg).ok();
    let (eigenvalues, smallest) = normal_scatter(&set.normals()).unwrap_or(([0.0; 3], Vector3::zeros()));
    let ratio = |e: f64| if eigenvalues[0] > 0.0 { e / eigenvalues[0] } else { 0.0 };
    DegeneracyReport {
        classification,
        nullspace_dim,
        nullspace_basis,
        eigenvalues,
        ratio_e2_e1: ratio(eigenvalues[1]),
        ratio_e3_e1: ratio(eigenvalues[2]),
        n_omega: (classification == Some(Classification::CoplanarNormals)).then_some(smallest),
        common_point: planes_share_point(&planes, cfg.offset_tolerance),
        surfel_constraints: set.surfel.len(),
        free_constraints: set.free.len(),
    }
}

pub fn report_window(window: &WindowState, cfg: &DegeneracyConfig) -> DegeneracyReport {
    report(&ConstraintSet::from_window(window), cfg)
}
