//! CPU rasterization of the surfel map into depth, vertex and normal maps.
//!
//! Every surfel is an oriented disk. Pixels are tested with an exact ray/disk
//! intersection inside the disk's projected bounding box and resolved with a
//! z-buffer; equal depths go to the lower surfel index.

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PlaneCoeffs, Pose};
use crate::image::write_pgm16;
use crate::surfel_map::SurfelMap;

pub const VERTEX_MAGIC: &[u8; 4] = b"SVTX";
pub const NORMAL_MAGIC: &[u8; 4] = b"SNRM";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub near: f64,
    pub far: f64,
    pub cull_back_faces: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            near: 0.1,
            far: 100.0,
            cull_back_faces: false,
        }
    }
}

/// Per-pixel rendering of the map. A pixel is valid iff `depth > 0`; the
/// vertex and normal rasters share that mask.
#[derive(Clone, Debug)]
pub struct RenderedMaps {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub vertex: Vec<Vector3<f64>>,
    pub normal: Vec<Vector3<f64>>,
    /// Index of the winning surfel, `u32::MAX` where nothing was hit.
    pub surfel: Vec<u32>,
}

impl RenderedMaps {
    fn empty(width: usize, height: usize) -> Self {
        RenderedMaps {
            width,
            height,
            depth: vec![0.0; width * height],
            vertex: vec![Vector3::zeros(); width * height],
            normal: vec![Vector3::zeros(); width * height],
            surfel: vec![u32::MAX; width * height],
        }
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.depth[y * self.width + x] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    fn index(&self, p: &Vector2<f64>) -> Result<usize> {
        let (x, y) = (p.x.round(), p.y.round());
        if !(x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64) {
            return Err(Error::OutOfBounds {
                u: p.x,
                v: p.y,
                width: self.width,
                height: self.height,
            });
        }
        Ok(y as usize * self.width + x as usize)
    }

    /// Camera-frame depth at the pixel nearest to `p`.
    pub fn depth_at(&self, p: &Vector2<f64>) -> Result<Option<f64>> {
        let i = self.index(p)?;
        Ok((self.depth[i] > 0.0).then_some(self.depth[i]))
    }

    /// World-frame plane through the surfel rendered at the pixel nearest to `p`.
    pub fn plane_at(&self, p: &Vector2<f64>) -> Result<Option<PlaneCoeffs>> {
        let i = self.index(p)?;
        if self.depth[i] <= 0.0 {
            return Ok(None);
        }
        let n = self.normal[i];
        Ok(Some(PlaneCoeffs {
            normal: n,
            d: -n.dot(&self.vertex[i]),
        }))
    }

    pub fn surfel_at(&self, p: &Vector2<f64>) -> Result<Option<usize>> {
        let i = self.index(p)?;
        Ok((self.surfel[i] != u32::MAX).then_some(self.surfel[i] as usize))
    }

    /// Writes `<prefix>_depth.pgm` (16-bit millimetres) and the vertex/normal
    /// float rasters `<prefix>_vertex.bin`, `<prefix>_normal.bin`.
    pub fn write_debug(&self, dir: &Path, prefix: &str) -> Result<()> {
        let mm: Vec<u16> = self
            .depth
            .iter()
            .map(|d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16)
            .collect();
        write_pgm16(&dir.join(format!("{prefix}_depth.pgm")), self.width, self.height, &mm)?;
        self.write_raster(&dir.join(format!("{prefix}_vertex.bin")), VERTEX_MAGIC, &self.vertex)?;
        self.write_raster(&dir.join(format!("{prefix}_normal.bin")), NORMAL_MAGIC, &self.normal)
    }

    fn write_raster(&self, path: &Path, magic: &[u8; 4], data: &[Vector3<f64>]) -> Result<()> {
        let mut out = Vec::with_capacity(8 + data.len() * 12);
        out.extend_from_slice(magic);
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        for (v, d) in data.iter().zip(&self.depth) {
            for c in v.iter() {
                let f = if *d > 0.0 { *c as f32 } else { f32::NAN };
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads a vertex/normal debug raster back: `(magic, width, height, values)`.
pub fn read_debug_raster(path: &Path) -> Result<([u8; 4], usize, usize, Vec<[f32; 3]>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::parse(path, 0, "raster header truncated"));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    let w = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let h = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let body = &bytes[8..];
    if body.len() != w * h * 12 {
        return Err(Error::parse(path, 0, "raster size does not match header"));
    }
    let vals = body
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]);
            [f(0), f(4), f(8)]
        })
        .collect();
    Ok((magic, w, h, vals))
}

struct Splat {
    index: u32,
    center: Vector3<f64>,
    normal: Vector3<f64>,
    radius_sq: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn splat_bounds(
    center: &Vector3<f64>,
    normal: &Vector3<f64>,
    radius: f64,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
) -> Option<(usize, usize, usize, usize)> {
    let ext = Vector3::from_fn(|a, _| radius * (1.0 - normal[a] * normal[a]).max(0.0).sqrt());
    let (lo, hi) = (center - ext, center + ext);
    if hi.z <= opts.near || lo.z >= opts.far {
        return None;
    }
    // Only the part of the box in front of the near plane can produce hits;
    // with every corner at positive depth the projected hull is bounded by
    // the projected corners.
    let lo_z = lo.z.max(opts.near);
    let (w, h) = (k.width as f64, k.height as f64);
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for corner in 0..8 {
        let c = Vector3::new(
            if corner & 1 == 0 { lo.x } else { hi.x },
            if corner & 2 == 0 { lo.y } else { hi.y },
            if corner & 4 == 0 { lo_z } else { hi.z },
        );
        let p = k.project_unchecked(&c);
        umin = umin.min(p.x);
        umax = umax.max(p.x);
        vmin = vmin.min(p.y);
        vmax = vmax.max(p.y);
    }
    let x0 = umin.ceil().max(0.0);
    let x1 = umax.floor().min(w - 1.0);
    let y0 = vmin.ceil().max(0.0);
    let y1 = vmax.floor().min(h - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

pub fn render(map: &SurfelMap, t_w_c: &Pose, k: &CameraIntrinsics) -> RenderedMaps {
    render_with(map, t_w_c, k, &RenderOptions::default())
}

pub fn render_with(
    map: &SurfelMap,
    t_w_c: &Pose,
    k: &CameraIntrinsics,
    opts: &RenderOptions,
) -> RenderedMaps {
    let (w, h) = (k.width, k.height);
    let t_c_w = t_w_c.inverse();
    let splats: Vec<Splat> = map
        .surfels
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let center = t_c_w.transform_point(&s.position);
            let normal = t_c_w.rotation * s.normal;
            if opts.cull_back_faces && normal.dot(&center) >= 0.0 {
                return None;
            }
            let (x0, x1, y0, y1) = splat_bounds(&center, &normal, s.radius, k, opts)?;
            Some(Splat {
                index: i as u32,
                center,
                normal,
                radius_sq: s.radius * s.radius,
                x0,
                x1,
                y0,
                y1,
            })
        })
        .collect();

    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); h];
    for (si, s) in splats.iter().enumerate() {
        for row in &mut rows[s.y0..=s.y1] {
            row.push(si as u32);
        }
    }

    let mut out = RenderedMaps::empty(w, h);
    let mut best: Vec<(f64, u32)> = vec![(f64::INFINITY, u32::MAX); w * h];
    best.par_chunks_mut(w).enumerate().for_each(|(y, row_best)| {
        let dy = (y as f64 - k.cy) / k.fy;
        for &si in &rows[y] {
            let s = &splats[si as usize];
            let offset = s.normal.dot(&s.center);
            for x in s.x0..=s.x1 {
                let ray = Vector3::new((x as f64 - k.cx) / k.fx, dy, 1.0);
                let denom = s.normal.dot(&ray);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let z = offset / denom;
                if z <= opts.near || z >= opts.far {
                    continue;
                }
                if (ray * z - s.center).norm_squared() > s.radius_sq {
                    continue;
                }
                let slot = &mut row_best[x];
                if z < slot.0 || (z == slot.0 && s.index < slot.1) {
                    *slot = (z, s.index);
                }
            }
        }
    });
    for (i, (z, idx)) in best.into_iter().enumerate() {
        if idx != u32::MAX {
            let s = &map.surfels[idx as usize];
            out.depth[i] = z;
            out.vertex[i] = s.position;
            out.normal[i] = s.normal;
            out.surfel[i] = idx;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surfel_map::Surfel;
    use rand::{Rng, SeedableRng};

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 49.5, 39.5, 100, 80).unwrap()
    }

    fn disk(position: Vector3<f64>, normal: Vector3<f64>, radius: f64) -> Surfel {
        Surfel {
            position,
            normal: normal.normalize(),
            radius,
        }
    }

    #[test]
    fn single_disk_on_axis() {
        let map = SurfelMap::new(vec![disk(Vector3::new(0.0, 0.0, 2.0), -Vector3::z(), 0.5)], 0.5);
        let k = camera();
        let maps = render(&map, &Pose::identity(), &k);
        // analytic footprint: |ray_xy| * 2 <= 0.5 → pixel radius 25 px
        for y in 0..k.height {
            for x in 0..k.width {
                let (dx, dy) = ((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy);
                let inside = (dx * dx + dy * dy).sqrt() * 2.0 <= 0.5;
                assert_eq!(maps.is_valid(x, y), inside, "pixel {x},{y}");
                if inside {
                    assert!((maps.depth[y * k.width + x] - 2.0).abs() < 1e-6);
                }
            }
        }
        let c = Vector2::new(k.cx, k.cy);
        assert!((maps.depth_at(&c).unwrap().unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn looking_away_sees_nothing() {
        let map = SurfelMap::new(vec![disk(Vector3::new(0.0, 0.0, 2.0), -Vector3::z(), 0.5)], 0.5);
        let away = Pose::new(
            nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
            Vector3::zeros(),
        );
        let maps = render(&map, &away, &camera());
        assert_eq!(maps.valid_count(), 0);
        assert_eq!(maps.depth_at(&Vector2::new(10.0, 10.0)).unwrap(), None);
        assert_eq!(maps.plane_at(&Vector2::new(10.0, 10.0)).unwrap(), None);
    }

    #[test]
    fn fronto_parallel_plane_depth() {
        let voxel = 0.1;
        let r = crate::surfel_map::surfel_radius_for_voxel(voxel);
        let mut surfels = Vec::new();
        for i in -60..60 {
            for j in -50..50 {
                let p = Vector3::new((i as f64 + 0.5) * voxel, (j as f64 + 0.5) * voxel, 5.0);
                surfels.push(disk(p, -Vector3::z(), r));
            }
        }
        let map = SurfelMap::new(surfels, voxel);
        let maps = render(&map, &Pose::identity(), &camera());
        assert_eq!(maps.valid_count(), 100 * 80);
        assert!(maps.depth.iter().all(|d| (d - 5.0).abs() < 1e-9));
    }

    #[test]
    fn tilted_plane_matches_ray_plane_depth() {
        let voxel = 0.05;
        let r = crate::surfel_map::surfel_radius_for_voxel(voxel);
        let n = Vector3::new(0.0, -0.4, -1.0).normalize();
        let plane = PlaneCoeffs::from_point_normal(&Vector3::new(0.0, 0.0, 4.0), &n).unwrap();
        let e1 = Vector3::x();
        let e2 = n.cross(&e1);
        let mut surfels = Vec::new();
        for i in -80..80 {
            for j in -80..80 {
                let p = Vector3::new(0.0, 0.0, 4.0) + e1 * ((i as f64 + 0.5) * voxel) + e2 * ((j as f64 + 0.5) * voxel);
                surfels.push(disk(p, n, r));
            }
        }
        let map = SurfelMap::new(surfels, voxel);
        let k = camera();
        let maps = render(&map, &Pose::identity(), &k);
        let mut checked = 0;
        for y in 0..k.height {
            for x in 0..k.width {
                if let Some(z) = maps.depth_at(&Vector2::new(x as f64, y as f64)).unwrap() {
                    let ray = k.normalized(&Vector2::new(x as f64, y as f64));
                    let z_true = -plane.d / plane.normal.dot(&ray);
                    assert!((z - z_true).abs() / z_true < 0.005);
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, k.width * k.height);
    }

    #[test]
    fn zbuffer_matches_bruteforce_and_is_order_independent() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let surfels: Vec<Surfel> = (0..100)
            .map(|_| {
                let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.8..0.8), rng.random_range(1.5..4.0));
                let n = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0);
                disk(p, n, rng.random_range(0.05..0.4))
            })
            .collect();
        let k = camera();
        let map = SurfelMap::new(surfels.clone(), 0.1);
        let maps = render(&map, &Pose::identity(), &k);
        let mut hits2 = 0;
        for y in 0..k.height {
            for x in 0..k.width {
                let ray = k.normalized(&Vector2::new(x as f64, y as f64));
                let hits: Vec<f64> = surfels
                    .iter()
                    .filter_map(|s| {
                        let z = s.normal.dot(&s.position) / s.normal.dot(&ray);
                        (z > 0.1 && z < 100.0 && (ray * z - s.position).norm() <= s.radius).then_some(z)
                    })
                    .collect();
                if hits.len() >= 2 {
                    hits2 += 1;
                }
                let want = hits.iter().cloned().fold(f64::INFINITY, f64::min);
                let got = maps.depth[y * k.width + x];
                if want.is_finite() {
                    assert!((got - want).abs() < 1e-12);
                } else {
                    assert_eq!(got, 0.0);
                }
            }
        }
        assert!(hits2 > 100);
        let mut reversed = surfels;
        reversed.reverse();
        let maps_rev = render(&SurfelMap::new(reversed, 0.1), &Pose::identity(), &k);
        assert_eq!(maps.depth, maps_rev.depth);
        assert_eq!(maps.vertex, maps_rev.vertex);
    }

    #[test]
    fn plane_lookup_and_bounds() {
        let map = SurfelMap::new(vec![disk(Vector3::new(0.0, 0.0, 5.0), -Vector3::z(), 1.0)], 1.0);
        let k = camera();
        let maps = render(&map, &Pose::identity(), &k);
        let c = Vector2::new(k.cx, k.cy);
        let plane = maps.plane_at(&c).unwrap().unwrap();
        assert!((plane.d - 5.0).abs() < 1e-15);
        assert_eq!(plane.signed_distance(&Vector3::new(0.0, 0.0, 5.0)), 0.0);
        assert!(matches!(maps.plane_at(&Vector2::new(-3.0, 0.0)), Err(Error::OutOfBounds { .. })));
        assert!(maps.depth_at(&Vector2::new(0.0, 80.0)).is_err());
    }

    #[test]
    fn back_face_culling_flag() {
        let map = SurfelMap::new(vec![disk(Vector3::new(0.0, 0.0, 2.0), Vector3::z(), 0.5)], 0.5);
        let k = camera();
        assert!(render(&map, &Pose::identity(), &k).valid_count() > 0);
        let opts = RenderOptions {
            cull_back_faces: true,
            ..Default::default()
        };
        assert_eq!(render_with(&map, &Pose::identity(), &k, &opts).valid_count(), 0);
    }

    #[test]
    fn debug_dump_layout() {
        let map = SurfelMap::new(vec![disk(Vector3::new(0.0, 0.0, 2.0), -Vector3::z(), 0.5)], 0.5);
        let k = camera();
        let maps = render(&map, &Pose::identity(), &k);
        let dir = tempfile::tempdir().unwrap();
        maps.write_debug(dir.path(), "kf").unwrap();
        let (magic, w, h, vals) = read_debug_raster(&dir.path().join("kf_normal.bin")).unwrap();
        assert_eq!((&magic, w, h), (NORMAL_MAGIC, 100, 80));
        let centre = vals[40 * 100 + 50];
        assert_eq!(centre, [0.0, 0.0, -1.0]);
        assert!(vals[0][0].is_nan());
        let depth = crate::image::Image::read_pgm(&dir.path().join("kf_depth.pgm")).unwrap();
        assert_eq!(depth.get(50, 40), 2000.0);
    }
}
