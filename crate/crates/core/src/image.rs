//! Grayscale rasters, gradient pyramids and the sampling interface the
//! photometric code is written against.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub gradient: Vector2<f64>,
}

/// Continuous-coordinate intensity lookup. Pixel centres are at integer coordinates.
pub trait IntensitySampler: Send + Sync {
    fn width(&self) -> usize;
    fn height(&self) -> usize;
    /// Intensity and its image-space gradient at `(u, v)`, `None` outside the
    /// interpolation domain.
    fn sample(&self, u: f64, v: f64) -> Option<Sample>;
}

/// Single-channel `f32` raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// 2x2 box downsampling.
    pub fn half(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        Image::from_fn(w, h, |x, y| {
            0.25 * (self.get(2 * x, 2 * y)
                + self.get(2 * x + 1, 2 * y)
                + self.get(2 * x, 2 * y + 1)
                + self.get(2 * x + 1, 2 * y + 1))
        })
    }

    pub fn read_pgm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|m| Error::parse(path, 0, m))
    }

    /// Writes an 8-bit binary PGM, rounding and clamping to `[0, 255]`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    let bpp = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bpp;
    if bytes.len() < pos + need {
        return Err(format!(
            "truncated PGM data: expected {need} bytes, found {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let raster = &bytes[pos..pos + need];
    let data = if bpp == 1 {
        raster.iter().map(|&b| b as f32).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32)
            .collect()
    };
    Ok(Image {
        width,
        height,
        data,
    })
}

/// Writes a 16-bit big-endian binary PGM.
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// One pyramid level: intensities plus central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradientImage {
    pub image: Image,
    pub grad_x: Vec<f32>,
    pub grad_y: Vec<f32>,
}

impl GradientImage {
    pub fn new(image: Image) -> Self {
        let (w, h) = (image.width, image.height);
        let mut grad_x = vec![0.0; w * h];
        let mut grad_y = vec![0.0; w * h];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let i = y * w + x;
                grad_x[i] = 0.5 * (image.data[i + 1] - image.data[i - 1]);
                grad_y[i] = 0.5 * (image.data[i + w] - image.data[i - w]);
            }
        }
        GradientImage {
            image,
            grad_x,
            grad_y,
        }
    }

    pub fn gradient_sq(&self, x: usize, y: usize) -> f64 {
        let i = y * self.image.width + x;
        let (gx, gy) = (self.grad_x[i] as f64, self.grad_y[i] as f64);
        gx * gx + gy * gy
    }
}

impl IntensitySampler for GradientImage {
    fn width(&self) -> usize {
        self.image.width
    }

    fn height(&self) -> usize {
        self.image.height
    }

    /// Bilinear interpolation of intensity and of the precomputed gradients.
    /// Valid on `[1, w-2] x [1, h-2]` where all four gradient taps are central.
    #[inline]
    fn sample(&self, u: f64, v: f64) -> Option<Sample> {
        let w = self.image.width;
        let h = self.image.height;
        if !(u >= 1.0 && v >= 1.0 && u <= (w as f64) - 2.0 && v <= (h as f64) - 2.0) {
            return None;
        }
        let x0 = (u.floor() as usize).min(w - 3);
        let y0 = (v.floor() as usize).min(h - 3);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let i = y0 * w + x0;
        let weights = [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ];
        let idx = [i, i + 1, i + w, i + w + 1];
        let mut value = 0.0;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for (wt, &k) in weights.iter().zip(&idx) {
            value += wt * self.image.data[k] as f64;
            gx += wt * self.grad_x[k] as f64;
            gy += wt * self.grad_y[k] as f64;
        }
        Some(Sample {
            value,
            gradient: Vector2::new(gx, gy),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ImagePyramid {
    pub levels: Vec<GradientImage>,
}

impl ImagePyramid {
    pub fn new(image: Image, num_levels: usize) -> Self {
        let mut levels = Vec::with_capacity(num_levels);
        let mut current = image;
        for l in 0..num_levels.max(1) {
            if l > 0 {
                current = current.half();
            }
            levels.push(GradientImage::new(current.clone()));
        }
        ImagePyramid { levels }
    }

    pub fn finest(&self) -> &GradientImage {
        &self.levels[0]
    }
}

/// Analytic image: the closure returns intensity and its exact gradient.
pub struct FnImage<F> {
    pub width: usize,
    pub height: usize,
    pub f: F,
}

impl<F> IntensitySampler for FnImage<F>
where
    F: Fn(f64, f64) -> (f64, Vector2<f64>) + Send + Sync,
{
    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn sample(&self, u: f64, v: f64) -> Option<Sample> {
        if !(u >= 1.0 && v >= 1.0 && u <= self.width as f64 - 2.0 && v <= self.height as f64 - 2.0)
        {
            return None;
        }
        let (value, gradient) = (self.f)(u, v);
        Some(Sample { value, gradient })
    }
}

/// Smooth sum-of-sinusoids test image with exact derivatives.
pub fn smooth_test_image(
    width: usize,
    height: usize,
    seed: u64,
) -> FnImage<impl Fn(f64, f64) -> (f64, Vector2<f64>) + Send + Sync> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|i| {
            let wavelength = 12.0 + 10.0 * i as f64;
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let k = std::f64::consts::TAU / wavelength;
            let amp = 6.0 + 2.0 * i as f64;
            (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..6.28), amp)
        })
        .collect();
    FnImage {
        width,
        height,
        f: move |u: f64, v: f64| {
            let mut value = 128.0;
            let mut g = Vector2::zeros();
            for &(kx, ky, phase, amp) in &waves {
                let arg = kx * u + ky * v + phase;
                value += amp * arg.sin();
                g += Vector2::new(kx, ky) * (amp * arg.cos());
            }
            (value, g)
        },
    }
}
