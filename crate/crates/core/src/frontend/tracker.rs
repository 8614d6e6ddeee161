//! Coarse-to-fine direct alignment of a new frame against the semi-dense
//! depth of the latest keyframe.

use std::collections::HashSet;

use log::trace;
use nalgebra::{Matrix6, Vector2};
use rayon::prelude::*;

use super::{point_inverse_depth, TrackerConfig};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::{ImagePyramid, IntensitySampler};
use crate::photometric::{
    affine_pair, huber_cost, huber_weight, linearize_pixel, DepthModel, FramePhotoState, HostPatch, Matrix8,
    PairGeometry, PhotometricConfig, Vector8, PATTERN,
};
use crate::window_optimizer::{WindowConfig, WindowState};

#[derive(Clone, Debug)]
pub struct ReferencePoint {
    /// Pixel at the point's pyramid level.
    pub pixel: Vector2<f64>,
    pub inv_depth: f64,
    pub patch: HostPatch,
}

/// Reference points of one keyframe, resampled at every pyramid level.
#[derive(Clone, Debug)]
pub struct TrackingReference {
    pub keyframe: usize,
    pub state: FramePhotoState,
    pub intrinsics: CameraIntrinsics,
    pub levels: Vec<Vec<ReferencePoint>>,
}

impl TrackingReference {
    /// Projects every optimized window point into keyframe `keyframe`.
    pub fn build(window: &WindowState, keyframe: usize, pyramid: &ImagePyramid) -> Result<Self> {
        let k = window.intrinsics;
        let reference = window
            .keyframe(keyframe)
            .ok_or_else(|| Error::InvalidParameter(format!("keyframe {keyframe} not in window")))?;
        let t_r_w = reference.state.t_c_w;
        let hosts = window.index_map();
        let mut points = Vec::new();
        for p in window.points.iter().filter(|p| p.is_optimized()) {
            let host = window.keyframes[hosts[&p.host]].state;
            let Ok(rho) = point_inverse_depth(p, &host, &k) else {
                continue;
            };
            let x_r = (t_r_w * host.t_w_c()).transform_point(&(k.normalized(&p.patch.center) / rho));
            if x_r.z <= 1e-3 {
                continue;
            }
            points.push((k.project_unchecked(&x_r), 1.0 / x_r.z));
        }
        Ok(Self::from_depths(keyframe, reference.state, k, pyramid, &points))
    }

    /// Reference from full-resolution pixels with known inverse depths.
    pub fn from_depths(
        keyframe: usize,
        state: FramePhotoState,
        k: CameraIntrinsics,
        pyramid: &ImagePyramid,
        points: &[(Vector2<f64>, f64)],
    ) -> Self {
        let levels = (0..pyramid.levels.len())
            .map(|l| {
                let scale = 0.5f64.powi(l as i32);
                let mut seen = HashSet::new();
                points
                    .iter()
                    .filter_map(|(p, rho)| {
                        let q = (p.add_scalar(0.5)) * scale - Vector2::repeat(0.5);
                        if !seen.insert((q.x.round() as i64, q.y.round() as i64)) {
                            return None;
                        }
                        let patch = HostPatch::sample(&pyramid.levels[l], q, &PATTERN)?;
                        Some(ReferencePoint {
                            pixel: q,
                            inv_depth: *rho,
                            patch,
                        })
                    })
                    .collect()
            })
            .collect();
        TrackingReference {
            keyframe,
            state,
            intrinsics: k,
            levels,
        }
    }

    pub fn len(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Optical flow and brightness change of `target` relative to the reference.
    pub fn flow(&self, target: &FramePhotoState) -> FlowStats {
        let k = self.intrinsics;
        let t_n_r = target.t_c_w * self.state.t_c_w.inverse();
        let (mut sum_t, mut sum_f, mut n) = (0.0, 0.0, 0usize);
        for p in self.levels.first().into_iter().flatten() {
            let x_r = k.normalized(&p.pixel) / p.inv_depth;
            let full = t_n_r.transform_point(&x_r);
            let trans = x_r + t_n_r.translation;
            if full.z <= 0.0 || trans.z <= 0.0 {
                continue;
            }
            sum_f += (k.project_unchecked(&full) - p.pixel).norm_squared();
            sum_t += (k.project_unchecked(&trans) - p.pixel).norm_squared();
            n += 1;
        }
        let n = n.max(1) as f64;
        FlowStats {
            translation: (sum_t / n).sqrt(),
            full: (sum_f / n).sqrt(),
            brightness: affine_pair(&self.state, target).0.ln().abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowStats {
    /// RMS pixel displacement with the rotation removed.
    pub translation: f64,
    /// RMS pixel displacement of the full warp.
    pub full: f64,
    /// `|ln a_th|` between the reference and the frame.
    pub brightness: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackResult {
    pub state: FramePhotoState,
    /// Per-pixel RMS of the residuals at the finest level.
    pub rms: f64,
    /// Fraction of finest-level residuals that were inside the image.
    pub valid_fraction: f64,
    pub flow: FlowStats,
}

#[derive(Clone, Copy)]
struct Accumulator {
    h: Matrix8,
    b: Vector8,
    energy: f64,
    residual_sq: f64,
    valid: usize,
    total: usize,
}

impl Accumulator {
    fn zero() -> Self {
        Accumulator {
            h: Matrix8::zeros(),
            b: Vector8::zeros(),
            energy: 0.0,
            residual_sq: 0.0,
            valid: 0,
            total: 0,
        }
    }

    fn merge(mut self, o: Accumulator) -> Self {
        self.h += o.h;
        self.b += o.b;
        self.energy += o.energy;
        self.residual_sq += o.residual_sq;
        self.valid += o.valid;
        self.total += o.total;
        self
    }
}

struct Problem<'a> {
    points: &'a [ReferencePoint],
    image: &'a dyn IntensitySampler,
    k: CameraIntrinsics,
    reference: FramePhotoState,
    photometric: PhotometricConfig,
    prior: (f64, f64),
}

const POINT_CHUNK: usize = 64;

impl Problem<'_> {
    fn accumulate(&self, state: &FramePhotoState) -> Accumulator {
        let pair = PairGeometry::new(&self.reference, state);
        let gamma = self.photometric.huber;
        // residuals that leave the image cost as much as a gross outlier, so
        // that pushing points out of view does not lower the energy
        let out_of_view = huber_cost(3.0 * gamma, gamma);
        // fixed chunks merged in order keep the sums independent of the
        // thread schedule, so reruns are bit-identical
        let partial: Vec<Accumulator> = self
            .points
            .par_chunks(POINT_CHUNK)
            .map(|chunk| {
                let mut acc = Accumulator::zero();
                for p in chunk {
                    let depth = DepthModel::Inverse(p.inv_depth);
                    for i in 0..p.patch.len() {
                        acc.total += 1;
                        match linearize_pixel(
                            &p.patch.pixels[i],
                            p.patch.intensities[i],
                            p.patch.grad_sq[i],
                            &depth,
                            &pair,
                            self.image,
                            &self.k,
                            &self.photometric,
                        ) {
                            Ok(t) => {
                                let w = t.weight * huber_weight(t.residual, gamma);
                                acc.h.ger(w, &t.j_target, &t.j_target, 1.0);
                                acc.b.axpy(w * t.residual, &t.j_target, 1.0);
                                acc.energy += t.weight * huber_cost(t.residual, gamma);
                                acc.residual_sq += t.residual * t.residual;
                                acc.valid += 1;
                            }
                            Err(_) => acc.energy += out_of_view,
                        }
                    }
                }
                acc
            })
            .collect();
        let mut acc = partial.into_iter().fold(Accumulator::zero(), Accumulator::merge);
        let (wa, wb) = self.prior;
        acc.h[(6, 6)] += wa;
        acc.h[(7, 7)] += wb;
        acc.b[6] += wa * state.affine_a;
        acc.b[7] += wb * state.affine_b;
        acc.energy += wa * state.affine_a.powi(2) + wb * state.affine_b.powi(2);
        acc
    }

    fn solve(acc: &Accumulator, lambda: f64) -> Option<Vector8> {
        let mut h = acc.h;
        for i in 0..8 {
            h[(i, i)] += lambda * h[(i, i)] + 1e-12;
        }
        h.cholesky().map(|c| -c.solve(&acc.b))
    }

    /// Levenberg-Marquardt at one level; returns the refined state and the
    /// accumulator at that state.
    fn optimize(&self, mut state: FramePhotoState, iterations: usize) -> (FramePhotoState, Accumulator) {
        let mut acc = self.accumulate(&state);
        let mut lambda = 1e-3;
        let mut it = 0;
        while it < iterations {
            let Some(delta) = Self::solve(&acc, lambda) else {
                lambda *= 4.0;
                it += 1;
                continue;
            };
            let candidate = state.boxplus(&delta);
            let cand = self.accumulate(&candidate);
            if cand.energy < acc.energy {
                let rel = (acc.energy - cand.energy) / acc.energy.max(f64::MIN_POSITIVE);
                state = candidate;
                acc = cand;
                lambda = (lambda * 0.5).max(1e-7);
                if delta.norm() < 1e-8 || rel < 1e-7 {
                    break;
                }
            } else {
                lambda *= 4.0;
                if lambda > 1e6 || delta.norm() < 1e-10 {
                    break;
                }
            }
            it += 1;
        }
        (state, acc)
    }
}

/// Tracks a frame against `reference` from each initial pose guess in turn,
/// keeping the best result. Fails when the images carry no gradient, too
/// many residuals leave the image, or the remaining residual is too large.
pub fn track_frame(
    reference: &TrackingReference,
    pyramid: &ImagePyramid,
    guesses: &[Pose],
    exposure_time: f64,
    cfg: &TrackerConfig,
    window: &WindowConfig,
    frame: usize,
) -> Result<TrackResult> {
    let lost = |reason: String| Error::TrackingLost { frame, reason };
    if reference.is_empty() {
        return Err(lost("no reference points".into()));
    }
    let levels = reference.levels.len().min(pyramid.levels.len());
    let mut best: Option<TrackResult> = None;
    for guess in guesses {
        let mut state = FramePhotoState {
            t_c_w: guess.normalized(),
            exposure_time,
            affine_a: reference.state.affine_a,
            affine_b: reference.state.affine_b,
        };
        let mut finest = None;
        for l in (0..levels).rev() {
            let problem = Problem {
                points: &reference.levels[l],
                image: &pyramid.levels[l],
                k: reference.intrinsics.at_level(l),
                reference: reference.state,
                photometric: window.photometric,
                prior: (window.affine_prior_a, window.affine_prior_b),
            };
            if problem.points.is_empty() {
                continue;
            }
            let (s, acc) = problem.optimize(state, cfg.tracking_iterations * if l == 0 { 2 } else { 1 });
            state = s;
            if l == 0 {
                finest = Some(acc);
            }
        }
        let acc = finest.expect("level 0 has points");
        let pose_block: Matrix6<f64> = acc.h.fixed_view::<6, 6>(0, 0).into_owned();
        let eig = pose_block.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 1e-9) || lo < 1e-10 * hi {
            return Err(lost("no image gradient constrains the pose".into()));
        }
        let result = TrackResult {
            state,
            rms: (acc.residual_sq / acc.valid.max(1) as f64).sqrt(),
            valid_fraction: acc.valid as f64 / acc.total.max(1) as f64,
            flow: reference.flow(&state),
        };
        trace!(
            "frame {frame}: rms {:.2}, valid {:.2}, flow {:.2}/{:.2}",
            result.rms,
            result.valid_fraction,
            result.flow.translation,
            result.flow.full
        );
        let good = result.valid_fraction >= cfg.min_tracking_fraction && result.rms <= 0.5 * cfg.max_tracking_rms;
        if best.is_none_or(|b| result.rms < b.rms) {
            best = Some(result);
        }
        if good {
            break;
        }
    }
    let best = best.expect("at least one guess");
    if best.valid_fraction < cfg.min_tracking_fraction {
        return Err(lost(format!("only {:.0}% of residuals in view", 100.0 * best.valid_fraction)));
    }
    if !(best.rms <= cfg.max_tracking_rms) {
        return Err(lost(format!("residual RMS {:.1} exceeds {:.1}", best.rms, cfg.max_tracking_rms)));
    }
    Ok(best)
}
