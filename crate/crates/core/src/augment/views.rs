use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    channel_color_jitter, elastic_deform, gate, microscope_noise, random_rotate,
    sample_bilinear, sample_block_mask, uniform, AngleSource, ColorJitterConfig, ElasticConfig,
    NoiseConfig, PatchMask,
};
use crate::dataio::{CellImage, SiteKey};
use crate::error::{Error, Result};

/// Random-resized-crop parameters: area fraction and aspect-ratio ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            scale: (0.5, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

impl CropConfig {
    pub fn full() -> Self {
        Self {
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
        }
    }
}

/// The view-generation pipeline: crop → rotate → elastic → jitter → noise,
/// each stage gated by its own probability, plus block masking of the
/// anchor view's patch grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub output_size: usize,
    pub patch_size: usize,
    pub crop: CropConfig,
    pub rotate_prob: f64,
    pub angle_source: AngleSource,
    pub elastic: ElasticConfig,
    pub jitter: ColorJitterConfig,
    pub jitter_prob: f64,
    pub noise: NoiseConfig,
    pub noise_prob: f64,
    pub mask_ratio: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            output_size: 64,
            patch_size: 8,
            crop: CropConfig::default(),
            rotate_prob: 0.5,
            angle_source: AngleSource::Uniform,
            // Scaled to 64-pixel images; the 518-pixel defaults live in
            // `ElasticConfig::default()`.
            elastic: ElasticConfig {
                alpha_elastic: 30.0,
                sigma_smooth: 4.0,
                prob: 0.3,
            },
            jitter: ColorJitterConfig::default(),
            jitter_prob: 0.8,
            noise: NoiseConfig::default(),
            noise_prob: 0.2,
            mask_ratio: (0.1, 0.5),
        }
    }
}

impl AugmentConfig {
    /// Random-resized-crop only; every cell-specific stage disabled.
    pub fn crop_only(&self) -> Self {
        Self {
            rotate_prob: 0.0,
            elastic: ElasticConfig {
                prob: 0.0,
                ..self.elastic
            },
            jitter_prob: 0.0,
            noise_prob: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.output_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "output_size {} not divisible by patch_size {}",
                self.output_size, self.patch_size
            )));
        }
        let (s0, s1) = self.crop.scale;
        let (r0, r1) = self.crop.ratio;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0 && 0.0 < r0 && r0 <= r1) {
            return Err(Error::Config(format!("bad crop config {:?}", self.crop)));
        }
        for p in [self.rotate_prob, self.elastic.prob, self.jitter_prob, self.noise_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        self.noise.validate()
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.output_size / self.patch_size;
        (g, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewProvenance {
    pub anchor: SiteKey,
    pub sibling: SiteKey,
}

/// Training views of one example: the anchor view, its patch mask (the
/// masked copy is the anchor with these patches replaced inside the
/// encoder) and the augmented sibling-site view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub v1: CellImage,
    pub v1_mask: PatchMask,
    pub v2: CellImage,
    pub provenance: Option<ViewProvenance>,
}

/// Bilinear resize of the region `(top, left, height, width)` to `size × size`
/// using pixel-center alignment.
pub fn resize_region(
    image: &CellImage,
    region: (f64, f64, f64, f64),
    size: usize,
) -> CellImage {
    let (top, left, rh, rw) = region;
    let c = image.channels();
    let sy = rh / size as f64;
    let sx = rw / size as f64;
    let mut pixels = vec![0.0f32; size * size * c];
    for oy in 0..size {
        let y = top + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..size {
            let x = left + (ox as f64 + 0.5) * sx - 0.5;
            let dst = (oy * size + ox) * c;
            sample_bilinear(image, y as f32, x as f32, &mut pixels[dst..dst + c]);
        }
    }
    CellImage::from_parts(size, size, image.kinds().to_vec(), pixels)
}

/// Deterministic inference transform: largest centered square, resized.
pub fn center_resize(image: &CellImage, size: usize) -> CellImage {
    let (h, w) = (image.height(), image.width());
    if h == size && w == size {
        return image.clone();
    }
    let side = h.min(w) as f64;
    let top = (h as f64 - side) / 2.0;
    let left = (w as f64 - side) / 2.0;
    resize_region(image, (top, left, side, side), size)
}

pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &CellImage,
    cfg: &CropConfig,
    size: usize,
    rng: &mut R,
) -> CellImage {
    let (h, w) = (image.height() as f64, image.width() as f64);
    let area = h * w;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.scale.0, cfg.scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round();
        let ch = (target / aspect).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let top = uniform(rng, 0.0, h - ch + 1.0).floor();
            let left = uniform(rng, 0.0, w - cw + 1.0).floor();
            return resize_region(image, (top, left, ch, cw), size);
        }
    }
    center_resize(image, size)
}

fn pipeline<R: Rng + ?Sized>(image: &CellImage, cfg: &AugmentConfig, rng: &mut R) -> Result<CellImage> {
    let mut img = random_resized_crop(image, &cfg.crop, cfg.output_size, rng);
    if gate(rng, cfg.rotate_prob) {
        img = random_rotate(&img, cfg.angle_source, rng);
    }
    img = elastic_deform(&img, &cfg.elastic, rng);
    if gate(rng, cfg.jitter_prob) {
        img = channel_color_jitter(&img, &cfg.jitter, rng);
    }
    if gate(rng, cfg.noise_prob) {
        img = microscope_noise(&img, &cfg.noise, rng)?;
    }
    Ok(img)
}

/// Builds the anchor view, its block mask and the sibling view. When keys
/// are supplied they must name two different sites of the same well and
/// channel set.
pub fn make_views<R: Rng + ?Sized>(
    site: &CellImage,
    sibling: &CellImage,
    cfg: &AugmentConfig,
    provenance: Option<ViewProvenance>,
    rng: &mut R,
) -> Result<ViewSet> {
    if !site.same_shape(sibling) {
        return Err(Error::Shape(format!(
            "site {}x{}x{} vs sibling {}x{}x{}",
            site.height(),
            site.width(),
            site.channels(),
            sibling.height(),
            sibling.width(),
            sibling.channels()
        )));
    }
    if let Some(p) = &provenance {
        let (a, b) = (&p.anchor, &p.sibling);
        if a.plate_id != b.plate_id
            || a.well_position != b.well_position
            || a.channel_set != b.channel_set
            || a.site_index == b.site_index
        {
            return Err(Error::Config(format!(
                "sibling {b:?} is not a different site of the anchor's well {a:?}"
            )));
        }
    }
    let v1 = pipeline(site, cfg, rng)?;
    let v2 = pipeline(sibling, cfg, rng)?;
    let v1_mask = sample_block_mask(cfg.grid(), cfg.mask_ratio, rng)?;
    Ok(ViewSet {
        v1,
        v1_mask,
        v2,
        provenance,
    })
}

/// Uniform draw of a sibling index from the `n_sites - 1` other sites.
pub fn sample_sibling<R: Rng + ?Sized>(n_sites: usize, anchor: usize, rng: &mut R) -> usize {
    assert!(n_sites >= 2 && anchor < n_sites);
    let j = rng.random_range(0..n_sites - 1);
    if j >= anchor {
        j + 1
    } else {
        j
    }
}
