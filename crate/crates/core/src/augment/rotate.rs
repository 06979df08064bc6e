use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_bilinear, uniform};
use crate::dataio::CellImage;

/// Where rotation angles come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleSource {
    /// `θ ~ U[0°, 360°)`.
    Uniform,
    /// One of 0°, 90°, 180°, 270°, uniformly.
    RightAngles,
    Fixed(f64),
}

pub fn random_rotate<R: Rng + ?Sized>(
    image: &CellImage,
    source: AngleSource,
    rng: &mut R,
) -> CellImage {
    let deg = match source {
        AngleSource::Uniform => uniform(rng, 0.0, 360.0),
        AngleSource::RightAngles => 90.0 * f64::from(rng.random_range(0..4u8)),
        AngleSource::Fixed(d) => d,
    };
    rotate(image, deg)
}

/// Counter-clockwise rotation about the image center. Multiples of 90° are
/// exact index permutations (90° and 270° need a square image); other
/// angles use bilinear resampling with edge clamping.
pub fn rotate(image: &CellImage, degrees: f64) -> CellImage {
    let deg = degrees.rem_euclid(360.0);
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let quarter = (deg / 90.0).round();
    if (deg - quarter * 90.0).abs() < 1e-9 && (quarter as i64 % 2 == 0 || h == w) {
        let q = quarter as i64 % 4;
        if q == 0 {
            return image.clone();
        }
        let mut pixels = vec![0.0f32; h * w * c];
        for i in 0..h {
            for j in 0..w {
                let (si, sj) = match q {
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                let dst = (i * w + j) * c;
                let src = (si * w + sj) * c;
                pixels[dst..dst + c].copy_from_slice(&image.pixels()[src..src + c]);
            }
        }
        return CellImage::from_parts(h, w, image.kinds().to_vec(), pixels);
    }

    let (sin, cos) = deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut pixels = vec![0.0f32; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let xo = j as f64 - cx;
            let yo = i as f64 - cy;
            let xs = cos * xo - sin * yo + cx;
            let ys = sin * xo + cos * yo + cy;
            let dst = (i * w + j) * c;
            sample_bilinear(image, ys as f32, xs as f32, &mut pixels[dst..dst + c]);
        }
    }
    CellImage::from_parts(h, w, image.kinds().to_vec(), pixels)
}
