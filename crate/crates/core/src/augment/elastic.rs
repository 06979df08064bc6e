use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{gate, sample_bilinear};
use crate::dataio::CellImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticConfig {
    /// Displacement magnitude applied to the smoothed unit-variance noise.
    pub alpha_elastic: f64,
    /// Standard deviation of the smoothing kernel, in pixels.
    pub sigma_smooth: f64,
    pub prob: f64,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        Self {
            alpha_elastic: 1200.0,
            sigma_smooth: 40.0,
            prob: 0.5,
        }
    }
}

fn kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of an `h × w` field with a unit-sum kernel of
/// half-width `ceil(3σ)` and edge replication, so constant fields are fixed.
pub fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = kernel(sigma);
    let half = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let xx = (x as i64 + j as i64 - half).clamp(0, w as i64 - 1) as usize;
                acc += kv * field[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let yy = (y as i64 + j as i64 - half).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// One displacement component: `α · G_σ * N(0, 1)`.
pub fn displacement_field<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    alpha: f64,
    sigma: f64,
    rng: &mut R,
) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut f = gaussian_blur(&noise, h, w, sigma);
    f.iter_mut().for_each(|v| *v *= alpha);
    f
}

/// Elastic deformation applied with probability `cfg.prob`.
pub fn elastic_deform<R: Rng + ?Sized>(
    image: &CellImage,
    cfg: &ElasticConfig,
    rng: &mut R,
) -> CellImage {
    if !gate(rng, cfg.prob) {
        return image.clone();
    }
    let (h, w) = (image.height(), image.width());
    let dx = displacement_field(h, w, cfg.alpha_elastic, cfg.sigma_smooth, rng);
    let dy = displacement_field(h, w, cfg.alpha_elastic, cfg.sigma_smooth, rng);
    warp(image, &dx, &dy)
}

/// Samples every channel at `(y + dy, x + dx)`.
pub(crate) fn warp(image: &CellImage, dx: &[f64], dy: &[f64]) -> CellImage {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut pixels = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sy = (y as f64 + dy[i]) as f32;
            let sx = (x as f64 + dx[i]) as f32;
            sample_bilinear(image, sy, sx, &mut pixels[i * c..(i + 1) * c]);
        }
    }
    CellImage::from_parts(h, w, image.kinds().to_vec(), pixels)
}
