//! Gauss-Newton system of the window energy in block form:
//! frame block (8 per keyframe), diagonal inverse-depth block, and the
//! dense coupling between them.

use nalgebra::{DMatrix, DVector, SMatrix};
use rayon::prelude::*;

use super::{PointStatus, WindowState};
use crate::error::{Error, Result};
use crate::photometric::{huber_cost, huber_weight, linearize_block, DepthModel, ResidualBlock, Vector8};

type Matrix8 = SMatrix<f64, 8, 8>;

/// Linearized residual blocks of one point.
#[derive(Clone, Debug)]
pub struct PointLinearization {
    pub point: usize,
    pub host: usize,
    pub surfel: bool,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
pub struct NormalEquations {
    pub num_frames: usize,
    pub hff: DMatrix<f64>,
    pub bf: DVector<f64>,
    pub hdd: DVector<f64>,
    pub bd: DVector<f64>,
    /// `8·num_frames × num_depths` frame/depth coupling.
    pub hfd: DMatrix<f64>,
    /// Window point index of each inverse-depth variable.
    pub depth_points: Vec<usize>,
    pub fixed: Vec<bool>,
    pub energy_surfel: f64,
    pub energy_non: f64,
    pub energy_prior: f64,
    pub num_residuals: usize,
}

/// Linearizes all optimized points at the current keyframe states (or at
/// their first estimates when `at_fej`).
pub(crate) fn linearize_points(window: &WindowState, at_fej: bool) -> Vec<PointLinearization> {
    let index = window.index_map();
    let cfg = &window.config.photometric;
    let k = &window.intrinsics;
    window
        .points
        .par_iter()
        .enumerate()
        .filter(|(_, p)| p.is_optimized())
        .filter_map(|(pi, p)| {
            let host = *index.get(&p.host)?;
            Some(linearize_point(window, pi, host, at_fej, cfg, k))
        })
        .collect()
}

pub(crate) fn linearize_point(
    window: &WindowState,
    pi: usize,
    host: usize,
    at_fej: bool,
    cfg: &crate::photometric::PhotometricConfig,
    k: &crate::geometry::CameraIntrinsics,
) -> PointLinearization {
    let p = &window.points[pi];
    let state = |i: usize| {
        let kf = &window.keyframes[i];
        if at_fej {
            kf.fej.unwrap_or(kf.state)
        } else {
            kf.state
        }
    };
    let depth = match (p.status, p.plane) {
        (PointStatus::Associated, Some(plane)) => DepthModel::Plane(plane),
        _ => DepthModel::Inverse(p.inv_depth),
    };
    let mut blocks = Vec::new();
    for (t, kf) in window.keyframes.iter().enumerate() {
        if t == host || p.outlier_targets.contains(&kf.id) {
            continue;
        }
        if let Ok(b) = linearize_block((host, t, pi), &p.patch, &depth, &state(host), &state(t), kf.image.as_ref(), k, cfg) {
            blocks.push(b);
        }
    }
    PointLinearization {
        point: pi,
        host,
        surfel: depth.is_surfel(),
        blocks,
    }
}

impl NormalEquations {
    pub fn zeros(num_frames: usize, num_depths: usize) -> Self {
        let nf = 8 * num_frames;
        NormalEquations {
            num_frames,
            hff: DMatrix::zeros(nf, nf),
            bf: DVector::zeros(nf),
            hdd: DVector::zeros(num_depths),
            bd: DVector::zeros(num_depths),
            hfd: DMatrix::zeros(nf, num_depths),
            depth_points: Vec::with_capacity(num_depths),
            fixed: vec![false; num_frames],
            energy_surfel: 0.0,
            energy_non: 0.0,
            energy_prior: 0.0,
            num_residuals: 0,
        }
    }

    pub fn num_depths(&self) -> usize {
        self.hdd.len()
    }

    pub fn energy(&self) -> f64 {
        self.energy_surfel + self.energy_non + self.energy_prior
    }

    /// Assembles the system at the window's current state.
    pub fn build(window: &WindowState) -> Result<NormalEquations> {
        let lin = linearize_points(window, false);
        let depth_points: Vec<usize> = lin
            .iter()
            .filter(|pl| !pl.surfel && !pl.blocks.is_empty())
            .map(|pl| pl.point)
            .collect();
        let mut ne = NormalEquations::zeros(window.keyframes.len(), depth_points.len());
        let gamma = window.config.photometric.huber;
        let mut var = 0;
        for pl in &lin {
            if pl.blocks.is_empty() {
                continue;
            }
            let depth_var = if pl.surfel {
                None
            } else {
                debug_assert_eq!(window.points[pl.point].status, PointStatus::Active);
                ne.depth_points.push(pl.point);
                var += 1;
                Some(var - 1)
            };
            for block in &pl.blocks {
                ne.add_block(block, depth_var, gamma);
            }
        }
        ne.add_affine_prior(window);
        ne.add_marginal_prior(window)?;
        ne.fixed = window.fixed_frames();
        if !ne.energy().is_finite() {
            return Err(Error::NonFinite(format!("window energy {}", ne.energy())));
        }
        Ok(ne)
    }

    /// Adds one residual block, IRLS-weighted at its current residuals.
    pub fn add_block(&mut self, block: &ResidualBlock, depth_var: Option<usize>, gamma: f64) {
        let (h, t) = (8 * block.host, 8 * block.target);
        let mut hhh = Matrix8::zeros();
        let mut hht = Matrix8::zeros();
        let mut htt = Matrix8::zeros();
        let mut bh = Vector8::zeros();
        let mut bt = Vector8::zeros();
        let mut hd_h = Vector8::zeros();
        let mut hd_t = Vector8::zeros();
        let (mut hdd, mut bd) = (0.0, 0.0);
        for term in &block.terms {
            let e = term.weight * huber_cost(term.residual, gamma);
            if block.surfel {
                self.energy_surfel += e;
            } else {
                self.energy_non += e;
            }
            let w = term.weight * huber_weight(term.residual, gamma);
            hhh.ger(w, &term.j_host, &term.j_host, 1.0);
            hht.ger(w, &term.j_host, &term.j_target, 1.0);
            htt.ger(w, &term.j_target, &term.j_target, 1.0);
            bh.axpy(w * term.residual, &term.j_host, 1.0);
            bt.axpy(w * term.residual, &term.j_target, 1.0);
            if depth_var.is_some() {
                hd_h.axpy(w * term.j_rho, &term.j_host, 1.0);
                hd_t.axpy(w * term.j_rho, &term.j_target, 1.0);
                hdd += w * term.j_rho * term.j_rho;
                bd += w * term.j_rho * term.residual;
            }
        }
        self.num_residuals += block.terms.len();
        let mut add = |r: usize, c: usize, m: &Matrix8| {
            let mut view = self.hff.view_mut((r, c), (8, 8));
            view += m;
        };
        add(h, h, &hhh);
        add(t, t, &htt);
        add(h, t, &hht);
        add(t, h, &hht.transpose());
        {
            let mut v = self.bf.rows_mut(h, 8);
            v += bh;
        }
        {
            let mut v = self.bf.rows_mut(t, 8);
            v += bt;
        }
        if let Some(d) = depth_var {
            self.hdd[d] += hdd;
            self.bd[d] += bd;
            let mut col = self.hfd.view_mut((h, d), (8, 1));
            col += hd_h;
            let mut col = self.hfd.view_mut((t, d), (8, 1));
            col += hd_t;
        }
    }

    fn add_affine_prior(&mut self, window: &WindowState) {
        let (wa, wb) = (window.config.affine_prior_a, window.config.affine_prior_b);
        for (i, kf) in window.keyframes.iter().enumerate() {
            let (a, b) = (kf.state.affine_a, kf.state.affine_b);
            self.hff[(8 * i + 6, 8 * i + 6)] += wa;
            self.hff[(8 * i + 7, 8 * i + 7)] += wb;
            self.bf[8 * i + 6] += wa * a;
            self.bf[8 * i + 7] += wb * b;
            self.energy_prior += wa * a * a + wb * b * b;
        }
    }

    fn add_marginal_prior(&mut self, window: &WindowState) -> Result<()> {
        if window.prior.is_empty() {
            return Ok(());
        }
        let (h, b, e) = window.prior.expand(window)?;
        self.hff += h;
        self.bf += b;
        self.energy_prior += e;
        Ok(())
    }

    /// Dense `(H, b)` over `[frames; depths]`, for verification.
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (nf, nd) = (self.hff.nrows(), self.num_depths());
        let mut h = DMatrix::zeros(nf + nd, nf + nd);
        let mut b = DVector::zeros(nf + nd);
        h.view_mut((0, 0), (nf, nf)).copy_from(&self.hff);
        h.view_mut((0, nf), (nf, nd)).copy_from(&self.hfd);
        h.view_mut((nf, 0), (nd, nf)).copy_from(&self.hfd.transpose());
        for i in 0..nd {
            h[(nf + i, nf + i)] = self.hdd[i];
        }
        b.rows_mut(0, nf).copy_from(&self.bf);
        b.rows_mut(nf, nd).copy_from(&self.bd);
        (h, b)
    }

    /// Solves `(H + λ·diag(H)) δ = −b` with the depths eliminated by the
    /// Schur complement. Returns `None` if the reduced system is not
    /// positive definite.
    pub fn solve(&self, lambda: f64) -> Option<(DVector<f64>, DVector<f64>)> {
        let nf = self.hff.nrows();
        let nd = self.num_depths();
        let eps = 1e-9;
        let hdd: DVector<f64> = self.hdd.map(|v| v * (1.0 + lambda) + eps);
        let mut hred = self.hff.clone();
        for i in 0..nf {
            hred[(i, i)] += lambda * self.hff[(i, i)] + eps;
        }
        let mut bred = self.bf.clone();
        if nd > 0 {
            let inv: DVector<f64> = hdd.map(|v| 1.0 / v);
            let scaled = DMatrix::from_fn(nf, nd, |r, c| self.hfd[(r, c)] * inv[c]);
            hred -= &scaled * self.hfd.transpose();
            bred -= &scaled * &self.bd;
        }
        for (f, fixed) in self.fixed.iter().enumerate() {
            if *fixed {
                for i in 8 * f..8 * f + 8 {
                    hred.row_mut(i).fill(0.0);
                    hred.column_mut(i).fill(0.0);
                    hred[(i, i)] = 1.0;
                    bred[i] = 0.0;
                }
            }
        }
        let hred = (&hred + hred.transpose()) * 0.5;
        let chol = hred.cholesky()?;
        let df = -chol.solve(&bred);
        let dd = DVector::from_fn(nd, |i, _| -(self.bd[i] + self.hfd.column(i).dot(&df)) / hdd[i]);
        if df.iter().chain(dd.iter()).all(|v| v.is_finite()) {
            Some((df, dd))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::PlaneWorld;
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn ground_truth_gradient_vanishes() {
        for associated in [false, true] {
            let w = PlaneWorld::window(4, associated);
            let ne = NormalEquations::build(&w).unwrap();
            assert!(ne.num_residuals > 1000);
            assert!(ne.bf.norm() < 1e-6 * ne.num_residuals as f64, "{}", ne.bf.norm());
            assert!(ne.bd.norm() < 1e-6 * ne.num_residuals as f64);
            if associated {
                assert!(ne.energy_surfel < 1e-12 && ne.num_depths() < w.points.len());
            } else {
                assert_eq!(ne.energy_surfel, 0.0);
            }
        }
    }

    #[test]
    fn free_points_leave_seven_dim_gauge() {
        let mut w = PlaneWorld::window(4, false);
        w.config.affine_prior_a = 0.0;
        w.config.affine_prior_b = 0.0;
        let ne = NormalEquations::build(&w).unwrap();
        let (h, _) = ne.to_dense();
        let sv = h.singular_values();
        let max = sv.max();
        let null = sv.iter().filter(|s| **s < 1e-9 * max).count();
        assert!(null >= 7, "nullspace {null}");
    }

    #[test]
    fn duplicated_blocks_double_the_system() {
        let w = PlaneWorld::window(3, false);
        let lin = linearize_points(&w, false);
        let block = &lin.iter().find(|p| !p.blocks.is_empty()).unwrap().blocks[0];
        let mut once = NormalEquations::zeros(3, 1);
        once.add_block(block, Some(0), 9.0);
        let mut twice = NormalEquations::zeros(3, 1);
        twice.add_block(block, Some(0), 9.0);
        twice.add_block(block, Some(0), 9.0);
        assert_eq!(twice.hff, &once.hff * 2.0);
        assert_eq!(twice.bf, &once.bf * 2.0);
        assert_eq!(twice.hfd, &once.hfd * 2.0);
        assert_eq!(twice.hdd, &once.hdd * 2.0);
    }

    #[test]
    fn surfel_points_carry_no_depth_variable() {
        let w = PlaneWorld::window(3, true);
        let ne = NormalEquations::build(&w).unwrap();
        for &pi in &ne.depth_points {
            assert_eq!(w.points[pi].status, PointStatus::Active);
        }
        let associated = w.points.iter().filter(|p| p.is_associated()).count();
        assert!(associated > 0 && ne.num_depths() + associated <= w.points.len());
    }

    fn random_system(seed: u64, nf: usize, nd: usize) -> NormalEquations {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 8 * nf + nd;
        // H = JᵀJ with a depth block that is diagonal by construction: each
        // residual row touches at most one depth.
        let rows = 3 * n;
        let mut j = DMatrix::zeros(rows, n);
        for r in 0..rows {
            for c in 0..8 * nf {
                j[(r, c)] = rng.random_range(-1.0..1.0);
            }
            if nd > 0 {
                j[(r, 8 * nf + r % nd)] = rng.random_range(0.5..2.0);
            }
        }
        let res = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let h = j.transpose() * &j;
        let b = j.transpose() * res;
        let mut ne = NormalEquations::zeros(nf, nd);
        let f = 8 * nf;
        ne.hff.copy_from(&h.view((0, 0), (f, f)));
        ne.hfd.copy_from(&h.view((0, f), (f, nd)));
        for i in 0..nd {
            ne.hdd[i] = h[(f + i, f + i)];
            ne.bd[i] = b[f + i];
        }
        ne.bf.copy_from(&b.rows(0, f));
        ne
    }

    #[test]
    fn schur_solve_matches_dense_solve() {
        for (seed, nf, nd) in [(1, 2, 10), (2, 7, 140), (3, 4, 0), (4, 5, 100)] {
            let ne = random_system(seed, nf, nd);
            let (df, dd) = ne.solve(0.0).unwrap();
            let (h, b) = ne.to_dense();
            let mut hreg = h.clone();
            for i in 0..hreg.nrows() {
                hreg[(i, i)] += 1e-9;
            }
            let x = -hreg.lu().solve(&b).unwrap();
            let mut got = DVector::zeros(x.len());
            got.rows_mut(0, df.len()).copy_from(&df);
            got.rows_mut(df.len(), dd.len()).copy_from(&dd);
            assert!((got - &x).norm() <= 1e-8 * x.norm().max(1.0));
        }
    }
}
