use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use super::normal_equations::{linearize_point, PointLinearization};
use super::{NormalEquations, PointMarginalization, WindowState};
use crate::error::{Error, Result};

/// Quadratic prior `δᵀHδ + 2bᵀδ` over the tangent offsets `δ = x ⊟ x_fej`
/// of the listed keyframes (8 variables each, in list order).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MarginalPrior {
    pub frame_ids: Vec<usize>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl MarginalPrior {
    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    /// Prior Hessian, gradient and energy scattered into the window's frame
    /// ordering, evaluated at the current keyframe states.
    pub fn expand(&self, window: &WindowState) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
        let nf = 8 * window.keyframes.len();
        let pos: Vec<usize> = self
            .frame_ids
            .iter()
            .map(|id| {
                window
                    .keyframe_index(*id)
                    .ok_or_else(|| Error::InvalidParameter(format!("prior frame {id} not in window")))
            })
            .collect::<Result<_>>()?;
        let mut delta = DVector::zeros(8 * pos.len());
        for (i, &p) in pos.iter().enumerate() {
            let kf = &window.keyframes[p];
            let fej = kf
                .fej
                .ok_or_else(|| Error::InvalidParameter(format!("prior frame {} lacks a first estimate", kf.id)))?;
            delta.rows_mut(8 * i, 8).copy_from(&kf.state.boxminus(&fej)?);
        }
        let hd = &self.h * &delta;
        let energy = delta.dot(&hd) + 2.0 * self.b.dot(&delta);
        let grad = &self.b + hd;
        let mut h = DMatrix::zeros(nf, nf);
        let mut b = DVector::zeros(nf);
        for (i, &pi) in pos.iter().enumerate() {
            b.rows_mut(8 * pi, 8).copy_from(&grad.rows(8 * i, 8));
            for (j, &pj) in pos.iter().enumerate() {
                h.view_mut((8 * pi, 8 * pj), (8, 8)).copy_from(&self.h.view((8 * i, 8 * j), (8, 8)));
            }
        }
        Ok((h, b, energy))
    }

    /// Smallest eigenvalue must be ≥ −tol relative to the largest.
    pub fn check_psd(&self, tol: f64) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let asym = (&self.h - self.h.transpose()).amax();
        let eig = self.h.clone().symmetric_eigenvalues();
        let scale = eig.amax().max(1.0);
        if asym > tol * scale || eig.min() < -tol * scale {
            return Err(Error::IllConditioned(format!(
                "prior not symmetric PSD: asymmetry {asym:.3e}, min eigenvalue {:.3e}",
                eig.min()
            )));
        }
        Ok(())
    }
}

/// Schur complement of `(H, b)` onto `keep`, eliminating `marg`. A singular
/// eliminated block is regularized with `1e-9·I`.
pub fn schur_marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    keep: &[usize],
    marg: &[usize],
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let hkk = h.select_rows(keep).select_columns(keep);
    let hkm = h.select_rows(keep).select_columns(marg);
    let hmm = h.select_rows(marg).select_columns(marg);
    let bk = b.select_rows(keep);
    let bm = b.select_rows(marg);
    let hmm = (&hmm + hmm.transpose()) * 0.5;
    let chol = match hmm.clone().cholesky() {
        Some(c) => c,
        None => {
            warn!("singular marginalized block, regularizing");
            let reg = hmm + DMatrix::identity(marg.len(), marg.len()) * 1e-9;
            reg.cholesky()
                .ok_or_else(|| Error::IllConditioned("marginalized block is indefinite".into()))?
        }
    };
    let x = chol.solve(&hkm.transpose());
    let hn = hkk - &hkm * &x;
    let bn = bk - x.transpose() * bm;
    Ok(((&hn + hn.transpose()) * 0.5, bn))
}

/// Residual blocks of one point with Jacobians at the first estimates and
/// residuals at the current states. Blocks valid at only one of the two
/// linearization points are left out.
fn linearize_for_prior(window: &WindowState, pi: usize, host: usize) -> PointLinearization {
    let cfg = &window.config.photometric;
    let k = &window.intrinsics;
    let mut lin = linearize_point(window, pi, host, true, cfg, k);
    let current = linearize_point(window, pi, host, false, cfg, k);
    lin.blocks.retain_mut(|block| {
        let Some(cur) = current.blocks.iter().find(|c| c.target == block.target) else {
            return false;
        };
        for (term, c) in block.terms.iter_mut().zip(&cur.terms) {
            term.residual = c.residual;
        }
        true
    });
    lin
}

impl WindowState {
    /// Folds every residual that involves keyframe `frame_id` into the prior
    /// and removes the frame and its points from the window.
    pub fn marginalize_frame(&mut self, frame_id: usize) -> Result<()> {
        let m = self
            .keyframe_index(frame_id)
            .ok_or_else(|| Error::InvalidParameter(format!("keyframe {frame_id} not in window")))?;
        for kf in &mut self.keyframes {
            if kf.fej.is_none() {
                kf.fej = Some(kf.state);
            }
        }
        let nk = self.keyframes.len();
        let gamma = self.config.photometric.huber;
        let (prior_h, prior_b, _) = if self.prior.is_empty() {
            (DMatrix::zeros(8 * nk, 8 * nk), DVector::zeros(8 * nk), 0.0)
        } else {
            // evaluated at the first estimates: δ = 0
            let mut at_fej = self.clone();
            for kf in &mut at_fej.keyframes {
                kf.state = kf.fej.unwrap_or(kf.state);
            }
            self.prior.expand(&at_fej)?
        };
        // residual information accumulates at the current states and is
        // shifted to the first estimates once complete
        let mut h = DMatrix::zeros(8 * nk, 8 * nk);
        let mut b = DVector::zeros(8 * nk);
        let (mut kept, mut dropped) = (0, 0);
        for pi in 0..self.points.len() {
            let p = &self.points[pi];
            if p.host != frame_id || !p.is_optimized() {
                continue;
            }
            let lin = linearize_for_prior(self, pi, m);
            if lin.blocks.is_empty() {
                continue;
            }
            if lin.surfel {
                let mut ne = NormalEquations::zeros(nk, 0);
                for block in &lin.blocks {
                    ne.add_block(block, None, gamma);
                }
                h += ne.hff;
                b += ne.bf;
                kept += 1;
            } else if self.config.point_marginalization == PointMarginalization::Marginalize
                && lin.blocks.len() >= self.config.min_observations
            {
                let mut ne = NormalEquations::zeros(nk, 1);
                for block in &lin.blocks {
                    ne.add_block(block, Some(0), gamma);
                }
                let hdd = ne.hdd[0] + 1e-9;
                let col = ne.hfd.column(0);
                h += ne.hff - col * col.transpose() / hdd;
                b += ne.bf - col * (ne.bd[0] / hdd);
                kept += 1;
            } else {
                dropped += 1;
            }
        }
        let mut delta = DVector::zeros(8 * nk);
        for (i, kf) in self.keyframes.iter().enumerate() {
            let fej = kf.fej.expect("first estimates set above");
            delta.rows_mut(8 * i, 8).copy_from(&kf.state.boxminus(&fej)?);
        }
        b -= &h * delta;
        h += prior_h;
        b += prior_b;
        let marg: Vec<usize> = (8 * m..8 * m + 8).collect();
        let keep: Vec<usize> = (0..8 * nk).filter(|i| !marg.contains(i)).collect();
        let (hn, bn) = schur_marginalize(&h, &b, &keep, &marg)?;

        // compact: drop frames with no prior information at all
        let remaining: Vec<usize> = self.keyframes.iter().filter(|k| k.id != frame_id).map(|k| k.id).collect();
        let mut ids = Vec::new();
        let mut idx = Vec::new();
        for (i, id) in remaining.iter().enumerate() {
            let rows = 8 * i..8 * i + 8;
            let nonzero = rows.clone().any(|r| bn[r] != 0.0 || hn.row(r).iter().any(|v| *v != 0.0));
            if nonzero {
                ids.push(*id);
                idx.extend(rows);
            }
        }
        self.prior = MarginalPrior {
            frame_ids: ids,
            h: hn.select_rows(&idx).select_columns(&idx),
            b: bn.select_rows(&idx),
        };
        self.keyframes.remove(m);
        self.points.retain(|p| p.host != frame_id);
        for p in &mut self.points {
            p.outlier_targets.retain(|t| *t != frame_id);
        }
        debug!("marginalized keyframe {frame_id}: {kept} points into prior, {dropped} dropped");
        Ok(())
    }
}
