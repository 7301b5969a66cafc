//! Random resized crop and horizontal flip on HWC rasters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source area.
    pub scale: (f64, f64),
    /// Crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio: (f64, f64),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale: (0.08, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Whole image, no flip.
    pub fn identity() -> Self {
        AugmentConfig {
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            flip_prob: 0.0,
        }
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Crop window `(y0, x0, crop_h, crop_w)`, falling back to the whole image
/// when ten attempts fail to fit.
pub fn sample_crop(
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.scale.0, cfg.scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let y0 = rng.random_range(0..=h - ch);
            let x0 = rng.random_range(0..=w - cw);
            return (y0, x0, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resize of the window `(y0, x0, ch, cw)` of an `h x w x c` raster
/// to `out x out x c`, with half-pixel centers.
pub fn resize_bilinear(
    pixels: &[f64],
    (h, w, c): (usize, usize, usize),
    (y0, x0, ch, cw): (usize, usize, usize, usize),
    out: usize,
) -> Vec<f64> {
    debug_assert_eq!(pixels.len(), h * w * c);
    let src = |start: usize, len: usize, o: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (start + lo, start + hi, s - lo as f64)
    };
    let mut result = Vec::with_capacity(out * out * c);
    for oy in 0..out {
        let (ya, yb, fy) = src(y0, ch, oy);
        for ox in 0..out {
            let (xa, xb, fx) = src(x0, cw, ox);
            for k in 0..c {
                let at = |y: usize, x: usize| pixels[(y * w + x) * c + k];
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bottom = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                result.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    result
}

pub fn flip_horizontal(pixels: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels.len());
    for y in 0..h {
        for x in (0..w).rev() {
            let at = (y * w + x) * c;
            out.extend_from_slice(&pixels[at..at + c]);
        }
    }
    out
}

/// Seeded random resized crop to `out_size x out_size`, then a random flip.
pub fn augment(
    pixels: &[f64],
    (h, w, c): (usize, usize, usize),
    seed_value: u64,
    out_size: usize,
    cfg: &AugmentConfig,
) -> Vec<f64> {
    let mut rng = seed::rng(seed_value);
    let window = sample_crop(h, w, cfg, &mut rng);
    let resized = resize_bilinear(pixels, (h, w, c), window, out_size);
    if rng.random::<f64>() < cfg.flip_prob {
        flip_horizontal(&resized, out_size, out_size, c)
    } else {
        resized
    }
}
