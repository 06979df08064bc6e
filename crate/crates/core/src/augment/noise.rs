use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::CellImage;
use crate::error::{Error, Result};

/// Shot, dark-current and read-noise levels for intensities in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_shot: f64,
    pub sigma_dark: f64,
    pub sigma_read: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_shot: 0.1,
            sigma_dark: 0.05,
            sigma_read: 0.01,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_shot > 0.0 && self.sigma_shot.is_finite()) {
            return Err(Error::Config(format!("sigma_shot must be > 0, got {}", self.sigma_shot)));
        }
        if !(self.sigma_dark >= 0.0 && self.sigma_read >= 0.0) {
            return Err(Error::Config("sigma_dark and sigma_read must be >= 0".into()));
        }
        Ok(())
    }
}

#[inline]
fn noisy_value<R: Rng + ?Sized>(v: f32, cfg: &NoiseConfig, rng: &mut R) -> f64 {
    let rate = f64::from(v) / cfg.sigma_shot;
    let photons = if rate > 0.0 {
        Poisson::new(rate).expect("finite positive rate").sample(rng)
    } else {
        0.0
    };
    let read = if cfg.sigma_read > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        z * cfg.sigma_read
    } else {
        0.0
    };
    photons * cfg.sigma_shot + cfg.sigma_dark + read
}

/// Pre-clip noisy intensities `Poisson(I/σ_shot)·σ_shot + σ_dark + N(0, σ_read²)`,
/// one value per pixel and channel in storage order.
pub fn microscope_noise_unclipped<R: Rng + ?Sized>(
    image: &CellImage,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(image.pixels().iter().map(|&v| noisy_value(v, cfg, rng)).collect())
}

/// Microscope noise model, clipped back into `[0, 1]`.
pub fn microscope_noise<R: Rng + ?Sized>(
    image: &CellImage,
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<CellImage> {
    cfg.validate()?;
    let mut out = image.clone();
    for p in out.pixels_mut() {
        *p = (noisy_value(*p, cfg, rng) as f32).clamp(0.0, 1.0);
    }
    Ok(out)
}
