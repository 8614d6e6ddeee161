//! Prior surfel map: construction from a point cloud, storage and neighbour queries.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ply;

pub const DEFAULT_NEIGHBORS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub radius: f64,
}

impl Surfel {
    pub fn is_valid(&self) -> bool {
        (self.normal.norm() - 1.0).abs() < 1e-6 && self.radius > 0.0 && self.position.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfelMap {
    pub surfels: Vec<Surfel>,
    /// Downsampling voxel the map was built with (metadata only).
    pub voxel_size: f64,
}

impl SurfelMap {
    pub fn new(surfels: Vec<Surfel>, voxel_size: f64) -> Self {
        SurfelMap {
            surfels,
            voxel_size,
        }
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn mean_radius(&self) -> f64 {
        if self.surfels.is_empty() {
            return 0.0;
        }
        self.surfels.iter().map(|s| s.radius).sum::<f64>() / self.surfels.len() as f64
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.surfels.iter().map(|s| s.position).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ply::write_surfels(path, self)
    }

    pub fn load(path: &Path) -> Result<SurfelMap> {
        ply::read_surfels(path)
    }
}

/// Replaces the points of each occupied voxel by their centroid.
/// Output is ordered by voxel key, so it is independent of input order.
pub fn voxel_downsample(points: &[Vector3<f64>], voxel: f64) -> Result<Vec<Vector3<f64>>> {
    if !(voxel > 0.0) {
        return Err(Error::InvalidParameter(format!("voxel size must be positive, got {voxel}")));
    }
    let mut cells: BTreeMap<[i64; 3], (Vector3<f64>, usize)> = BTreeMap::new();
    for p in points {
        let key = [
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        ];
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    Ok(cells.into_values().map(|(sum, n)| sum / n as f64).collect())
}

/// Uniform-grid index answering exact k-nearest-neighbour queries.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    min: [i64; 3],
    max: [i64; 3],
    cells: std::collections::HashMap<[i64; 3], Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn new(points: &'a [Vector3<f64>], cell: f64) -> Self {
        let mut cells: std::collections::HashMap<[i64; 3], Vec<usize>> =
            std::collections::HashMap::new();
        let mut min = [i64::MAX; 3];
        let mut max = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = Self::key_of(p, cell);
            for a in 0..3 {
                min[a] = min[a].min(key[a]);
                max[a] = max[a].max(key[a]);
            }
            cells.entry(key).or_default().push(i);
        }
        GridIndex {
            points,
            cell,
            min,
            max,
            cells,
        }
    }

    fn key_of(p: &Vector3<f64>, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Indices of the `k` nearest points (the query point included if indexed),
    /// sorted by distance then index.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<usize> {
        if self.points.is_empty() || k == 0 {
            return Vec::new();
        }
        let c = Self::key_of(q, self.cell);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let reach = (0..3)
            .map(|a| (c[a] - self.min[a]).abs().max((self.max[a] - c[a]).abs()))
            .max()
            .unwrap_or(0);
        for r in 0..=reach {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let key = [c[0] + dx, c[1] + dy, c[2] + dz];
                        let Some(ids) = self.cells.get(&key) else { continue };
                        for &i in ids {
                            let d2 = (self.points[i] - q).norm_squared();
                            if best.len() < k || (d2, i) < best[best.len() - 1] {
                                let pos = best
                                    .binary_search_by(|e| e.partial_cmp(&(d2, i)).unwrap())
                                    .unwrap_or_else(|e| e);
                                best.insert(pos, (d2, i));
                                best.truncate(k);
                            }
                        }
                    }
                }
            }
            if best.len() == k {
                let bound = r as f64 * self.cell;
                if best[k - 1].0 <= bound * bound {
                    break;
                }
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}

/// Per-point PCA normals from `k` nearest neighbours; `None` marks points with
/// too few neighbours or a rank-deficient neighbourhood. Normals are oriented
/// towards `viewpoint`.
pub fn estimate_normals_pca(
    points: &[Vector3<f64>],
    k: usize,
    viewpoint: &Vector3<f64>,
) -> Result<Vec<Option<Vector3<f64>>>> {
    if k < 3 {
        return Err(Error::InvalidParameter(format!("k must be at least 3, got {k}")));
    }
    if points.len() < k {
        return Ok(vec![None; points.len()]);
    }
    let cell = suggested_cell(points);
    let index = GridIndex::new(points, cell);
    Ok(points
        .par_iter()
        .map(|p| {
            let nn = index.knn(p, k);
            if nn.len() < k {
                return None;
            }
            let mean = nn.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / k as f64;
            let mut cov = Matrix3::zeros();
            for &i in &nn {
                let d = points[i] - mean;
                cov += d * d.transpose();
            }
            cov /= k as f64;
            let eig = SymmetricEigen::new(cov);
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
            let (lo, mid, hi) = (
                eig.eigenvalues[order[0]],
                eig.eigenvalues[order[1]],
                eig.eigenvalues[order[2]],
            );
            if !(hi > 0.0) || mid <= 1e-10 * hi || !lo.is_finite() {
                return None;
            }
            let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
            n.normalize_mut();
            if n.dot(&(viewpoint - p)) < 0.0 {
                n = -n;
            }
            Some(n)
        })
        .collect())
}

/// Grid cell size giving a handful of points per occupied cell.
fn suggested_cell(points: &[Vector3<f64>]) -> f64 {
    let (mut lo, mut hi) = (points[0], points[0]);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    let dims: Vec<f64> = ext.iter().copied().filter(|e| *e > 1e-9).collect();
    let cell = match dims.len() {
        0 => 1.0,
        n => {
            let vol: f64 = dims.iter().product();
            (vol * 4.0 / points.len() as f64).powf(1.0 / n as f64)
        }
    };
    cell.max(1e-6)
}

pub fn surfel_radius_for_voxel(voxel: f64) -> f64 {
    voxel * std::f64::consts::SQRT_2 / 2.0
}

/// Downsample, estimate PCA normals facing `viewpoint`, and assign the
/// footprint radius. Points whose normal is undefined are dropped.
pub fn build_surfel_map_with_viewpoint(
    points: &[Vector3<f64>],
    voxel: f64,
    k: usize,
    viewpoint: &Vector3<f64>,
) -> Result<SurfelMap> {
    if points.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    let reduced = voxel_downsample(points, voxel)?;
    let normals = estimate_normals_pca(&reduced, k, viewpoint)?;
    let radius = surfel_radius_for_voxel(voxel);
    let surfels: Vec<Surfel> = reduced
        .iter()
        .zip(normals)
        .filter_map(|(p, n)| {
            n.map(|normal| Surfel {
                position: *p,
                normal,
                radius,
            })
        })
        .collect();
    if surfels.is_empty() {
        return Err(Error::Degenerate(
            "no point has a well-defined normal".into(),
        ));
    }
    Ok(SurfelMap::new(surfels, voxel))
}

pub fn build_surfel_map(points: &[Vector3<f64>], voxel: f64, k: usize) -> Result<SurfelMap> {
    build_surfel_map_with_viewpoint(points, voxel, k, &Vector3::zeros())
}
