//! Stochastic augmentations for multi-channel microscopy images and the
//! construction of training views.
//!
//! Every operation is a pure function of `(input, config, rng state)` and maps
//! valid images (finite, in `[0, 1]`) to valid images of the same channel
//! layout.

mod elastic;
mod jitter;
mod mask;
mod noise;
mod rotate;
mod views;

pub use elastic::{displacement_field, elastic_deform, gaussian_blur, ElasticConfig};
pub use jitter::{apply_jitter_factors, channel_color_jitter, ColorJitterConfig};
pub use mask::{sample_block_mask, PatchMask};
pub use noise::{microscope_noise, microscope_noise_unclipped, NoiseConfig};
pub use rotate::{random_rotate, rotate, AngleSource};
pub use views::{
    center_resize, make_views, random_resized_crop, resize_region, sample_sibling, AugmentConfig,
    CropConfig, ViewProvenance, ViewSet,
};

use rand::Rng;

use crate::dataio::CellImage;

/// Samples all channels of `img` at fractional `(y, x)` with bilinear
/// interpolation. Coordinates outside the image are clamped to the edge.
/// Integer coordinates reproduce stored values exactly.
#[inline]
pub(crate) fn sample_bilinear(img: &CellImage, y: f32, x: f32, out: &mut [f32]) {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let y = y.clamp(0.0, (h - 1) as f32);
    let x = x.clamp(0.0, (w - 1) as f32);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f32;
    let fx = x - x0 as f32;
    let px = img.pixels();
    let i00 = (y0 * w + x0) * c;
    let i01 = (y0 * w + x1) * c;
    let i10 = (y1 * w + x0) * c;
    let i11 = (y1 * w + x1) * c;
    if fx == 0.0 && fy == 0.0 {
        out.copy_from_slice(&px[i00..i00 + c]);
        return;
    }
    for ch in 0..c {
        let top = px[i00 + ch] * (1.0 - fx) + px[i01 + ch] * fx;
        let bot = px[i10 + ch] * (1.0 - fx) + px[i11 + ch] * fx;
        out[ch] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
    }
}

/// Uniform draw on `[lo, hi)`; returns `lo` without consuming randomness when
/// the interval is degenerate.
#[inline]
pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Bernoulli gate that consumes no randomness for `p <= 0` or `p >= 1`.
#[inline]
pub(crate) fn gate<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.random_bool(p)
    }
}
