use nalgebra::Vector2;

use crate::image::GradientImage;

/// Side of the square regions over which the median gradient is taken.
const REGION: usize = 32;
/// Distance kept from the border so that the residual pattern and its
/// bilinear taps stay inside the image.
const BORDER: usize = 4;

/// Region-adaptive gradient selection: the image is cut into blocks sized so
/// that there are about `density` of them, and each block contributes its
/// strongest pixel when that pixel's gradient norm exceeds the median of its
/// surrounding region plus `min_add`.
pub fn select_candidates(image: &GradientImage, density: usize, min_add: f64) -> Vec<Vector2<f64>> {
    let (w, h) = (image.image.width, image.image.height);
    if density == 0 || w <= 2 * BORDER || h <= 2 * BORDER {
        return Vec::new();
    }
    let grad = |x: usize, y: usize| image.gradient_sq(x, y).sqrt();

    let (rw, rh) = (w.div_ceil(REGION), h.div_ceil(REGION));
    let mut thresholds = vec![0.0; rw * rh];
    for ry in 0..rh {
        for rx in 0..rw {
            let mut values: Vec<f64> = (ry * REGION..((ry + 1) * REGION).min(h))
                .flat_map(|y| (rx * REGION..((rx + 1) * REGION).min(w)).map(move |x| (x, y)))
                .map(|(x, y)| grad(x, y))
                .collect();
            let mid = values.len() / 2;
            let (_, median, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
            thresholds[ry * rw + rx] = *median + min_add;
        }
    }

    let area = ((w - 2 * BORDER) * (h - 2 * BORDER)) as f64;
    let block = ((area / density as f64).sqrt().round() as usize).max(1);
    let mut out = Vec::new();
    for by in (BORDER..h - BORDER).step_by(block) {
        for bx in (BORDER..w - BORDER).step_by(block) {
            let mut best: Option<(usize, usize, f64)> = None;
            for y in by..(by + block).min(h - BORDER) {
                for x in bx..(bx + block).min(w - BORDER) {
                    let g = grad(x, y);
                    if g > thresholds[(y / REGION) * rw + x / REGION] && best.is_none_or(|b| g > b.2) {
                        best = Some((x, y, g));
                    }
                }
            }
            if let Some((x, y, _)) = best {
                out.push(Vector2::new(x as f64, y as f64));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn textured(w: usize, h: usize) -> GradientImage {
        GradientImage::new(Image::from_fn(w, h, |x, y| {
            let (x, y) = (x as f32, y as f32);
            128.0 + 40.0 * (x * 0.31).sin() * (y * 0.23).cos() + 25.0 * (x * 0.11 + y * 0.17).sin()
        }))
    }

    #[test]
    fn constant_image_has_no_candidates() {
        let img = GradientImage::new(Image::from_fn(160, 120, |_, _| 90.0));
        assert!(select_candidates(&img, 500, 3.0).is_empty());
    }

    #[test]
    fn checkerboard_candidates_lie_on_edges() {
        let img = GradientImage::new(Image::from_fn(160, 120, |x, y| if (x / 16 + y / 16) % 2 == 0 { 40.0 } else { 200.0 }));
        let pts = select_candidates(&img, 400, 3.0);
        assert!(pts.len() > 50);
        for p in &pts {
            // central differences are non-zero only next to a square boundary
            let (x, y) = (p.x as usize, p.y as usize);
            let near = |c: usize| c % 16 == 0 || c % 16 == 15;
            assert!(near(x) || near(y), "({x}, {y}) is not on an edge");
            assert!(img.gradient_sq(x, y) > 0.0);
        }
    }

    #[test]
    fn doubling_density_doubles_count() {
        let img = textured(320, 240);
        let n1 = select_candidates(&img, 400, 2.0).len() as f64;
        let n2 = select_candidates(&img, 800, 2.0).len() as f64;
        let ratio = n2 / n1;
        assert!((ratio - 2.0).abs() <= 0.4, "{n1} -> {n2}");
    }

    #[test]
    fn candidates_respect_the_border() {
        let img = textured(100, 80);
        for p in select_candidates(&img, 2000, 1.0) {
            assert!(p.x >= BORDER as f64 && p.y >= BORDER as f64);
            assert!(p.x < (100 - BORDER) as f64 && p.y < (80 - BORDER) as f64);
        }
    }
}
