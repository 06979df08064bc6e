use rand::Rng;
use serde::{Deserialize, Serialize};

use super::uniform;
use crate::dataio::CellImage;

/// Per-channel brightness/contrast jitter strengths. Zero disables the
/// corresponding effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitterConfig {
    pub alpha_b: f64,
    pub alpha_c: f64,
}

impl Default for ColorJitterConfig {
    fn default() -> Self {
        Self {
            alpha_b: 0.3,
            alpha_c: 0.3,
        }
    }
}

/// Draws independent brightness `β_c ~ U(max(0, 1-α_b), 1+α_b)` and contrast
/// `γ_c ~ U(max(0, 1-α_c), 1+α_c)` for every channel and applies them.
pub fn channel_color_jitter<R: Rng + ?Sized>(
    image: &CellImage,
    cfg: &ColorJitterConfig,
    rng: &mut R,
) -> CellImage {
    let c = image.channels();
    let mut betas = Vec::with_capacity(c);
    let mut gammas = Vec::with_capacity(c);
    for _ in 0..c {
        betas.push(uniform(rng, (1.0 - cfg.alpha_b).max(0.0), 1.0 + cfg.alpha_b));
        gammas.push(uniform(rng, (1.0 - cfg.alpha_c).max(0.0), 1.0 + cfg.alpha_c));
    }
    apply_jitter_factors(image, &betas, &gammas)
}

/// Brightness scaling, then contrast scaling about the mean of the
/// brightness-adjusted channel, then clipping to `[0, 1]`.
pub fn apply_jitter_factors(image: &CellImage, betas: &[f64], gammas: &[f64]) -> CellImage {
    let c = image.channels();
    assert_eq!(betas.len(), c);
    assert_eq!(gammas.len(), c);
    if betas.iter().chain(gammas).all(|&f| f == 1.0) {
        return image.clone();
    }
    let n = (image.height() * image.width()) as f64;
    let mut means = vec![0.0f64; c];
    for px in image.pixels().chunks_exact(c) {
        for ch in 0..c {
            means[ch] += f64::from(px[ch]) * betas[ch];
        }
    }
    means.iter_mut().for_each(|m| *m /= n);

    let mut out = image.clone();
    for px in out.pixels_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            let b = f64::from(px[ch]) * betas[ch];
            let v = (b - means[ch]) * gammas[ch] + means[ch];
            px[ch] = (v as f32).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::test_util::*;
    use crate::dataio::ChannelKind;

    #[test]
    fn zero_strength_is_exact_identity() {
        let img = random_image(1, 16, 16, 5);
        let cfg = ColorJitterConfig { alpha_b: 0.0, alpha_c: 0.0 };
        let out = channel_color_jitter(&img, &cfg, &mut crate::rng::stream(0, &[]));
        assert_eq!(out, img);
    }

    #[test]
    fn forced_factors_match_hand_arithmetic() {
        let img = CellImage::new(1, 3, vec![ChannelKind::Fluorescent], vec![0.0, 0.5, 1.0]).unwrap();
        let out = apply_jitter_factors(&img, &[1.2], &[0.8]);
        // brightness [0, 0.6, 1.2], mean 0.6, contrast [0.12, 0.6, 1.08], clip
        for (got, want) in out.pixels().iter().zip([0.12f32, 0.6, 1.0]) {
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_channel_is_a_contrast_fixed_point() {
        for (k, beta, gamma) in [(0.3f32, 1.3, 0.7), (0.9, 1.4, 1.6), (0.1, 0.2, 1.9)] {
            let img = CellImage::filled(8, 8, vec![ChannelKind::Brightfield], k);
            let out = apply_jitter_factors(&img, &[beta], &[gamma]);
            let want = ((f64::from(k) * beta) as f32).clamp(0.0, 1.0);
            assert!(out.pixels().iter().all(|&v| (v - want).abs() <= 1e-6));
        }
    }

    #[test]
    fn channels_draw_independent_factors() {
        let img = CellImage::filled(8, 8, vec![ChannelKind::Fluorescent; 5], 0.5);
        let cfg = ColorJitterConfig { alpha_b: 0.5, alpha_c: 0.0 };
        let out = channel_color_jitter(&img, &cfg, &mut crate::rng::stream(3, &[]));
        let means = out.channel_means();
        let distinct = means.windows(2).filter(|w| (w[0] - w[1]).abs() > 1e-6).count();
        assert!(distinct >= 3, "{means:?}");
        assert_valid(&out);
    }
}
