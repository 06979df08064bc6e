//! Synthetic plate/well/site datasets with perturbation-specific phenotypes.
//!
//! Each perturbation gets a [`PhenotypeSignature`]: per-channel base
//! intensities, a cell density and a cell size distribution. Cells are drawn as
//! soft elliptical blobs (filled compartments on some channels, membrane-like
//! rings on others). Pixel intensities are `base · line · plate · illumination
//! · (1 + contrast · (m − m̄))` where `m` is the blob field of the channel and
//! `m̄` its image mean, so the channel mean of a nuisance-free image equals
//! `base · line` exactly.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    write_image, write_manifest, CellImage, ChannelKind, ChannelSet, DatasetManifest, SiteRecord,
};
use crate::error::{Error, Result};
use crate::rng::{hash_str, stream};

pub const N_FLUORESCENT: usize = 5;
pub const N_BRIGHTFIELD: usize = 3;
const N_CHANNELS: usize = N_FLUORESCENT + N_BRIGHTFIELD;

const BASE_RANGE: (f64, f64) = (0.1, 0.55);
const MIN_BASE_SEPARATION: f64 = 0.1;
const LINE_MODULATION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cell_lines: usize,
    pub n_plates_per_line: usize,
    pub n_well_positions: usize,
    pub n_perturbations: usize,
    pub sites_per_well: usize,
    /// `[height, width]`.
    pub image_size: [usize; 2],
    pub seed: u64,
    /// Scales plate gain, illumination gradients, cell-count jitter and pixel
    /// noise. At 0 every site of a well is identical.
    pub nuisance_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cell_lines: 2,
            n_plates_per_line: 2,
            n_well_positions: 16,
            n_perturbations: 8,
            sites_per_well: 9,
            image_size: [64, 64],
            seed: 0,
            nuisance_strength: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_cell_lines < 1 {
            bad.push("n_cell_lines must be >= 1".to_string());
        }
        if self.n_plates_per_line < 1 {
            bad.push("n_plates_per_line must be >= 1".to_string());
        }
        if self.n_well_positions < 2 {
            bad.push("n_well_positions must be >= 2".to_string());
        }
        if self.n_well_positions > 26 * 12 {
            bad.push("n_well_positions must be <= 312".to_string());
        }
        if self.n_perturbations < 2 {
            bad.push("n_perturbations must be >= 2".to_string());
        }
        if self.n_perturbations > self.n_well_positions {
            bad.push(format!(
                "n_perturbations ({}) exceeds n_well_positions ({})",
                self.n_perturbations, self.n_well_positions
            ));
        }
        if !matches!(self.sites_per_well, 9 | 16) {
            bad.push(format!("sites_per_well must be 9 or 16, got {}", self.sites_per_well));
        }
        if self.image_size.iter().any(|&s| s < 8) {
            bad.push(format!("image_size {:?} must be at least 8x8", self.image_size));
        }
        if !(self.nuisance_strength >= 0.0 && self.nuisance_strength.is_finite()) {
            bad.push(format!("nuisance_strength = {} must be >= 0", self.nuisance_strength));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn n_plates(&self) -> usize {
        self.n_cell_lines * self.n_plates_per_line
    }
}

/// Phenotype shared by every well of one perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeSignature {
    /// 5 fluorescent then 3 brightfield base intensities.
    pub base_intensity: Vec<f64>,
    /// Per-channel texture contrast.
    pub contrast: Vec<f64>,
    /// Expected cells per 1000 pixels.
    pub blob_density: f64,
    /// Mean and standard deviation of the cell radius in pixels at 64×64.
    pub radius_mean: f64,
    pub radius_std: f64,
    /// Minor/major axis ratio range lower bound.
    pub min_aspect: f64,
}

/// Per-cell-line multiplicative shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLineEffect {
    pub channel_factor: Vec<f64>,
    pub radius_factor: f64,
}

pub fn well_position_name(index: usize) -> String {
    let row = (b'A' + (index / 12) as u8) as char;
    format!("{row}{:02}", index % 12 + 1)
}

pub fn perturbation_name(index: usize) -> String {
    format!("P{index:02}")
}

pub fn cell_line_name(line: usize) -> String {
    format!("CL{line}")
}

pub fn plate_name(line: usize, plate: usize) -> String {
    format!("CL{line}-PL{plate:02}")
}

/// Perturbation assigned to a well position; identical on every plate.
pub fn perturbation_of(position: usize, n_perturbations: usize) -> usize {
    position % n_perturbations
}

fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Samples one signature per perturbation. Base intensities are redrawn
/// until every pair differs by at least 0.1 in some fluorescent channel and
/// in some brightfield channel.
pub fn sample_signatures(n_perturbations: usize, seed: u64) -> Result<Vec<PhenotypeSignature>> {
    let mut rng = stream(seed, &[hash_str("signatures")]);
    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(n_perturbations);
    let mut attempts = 0usize;
    while bases.len() < n_perturbations {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(format!(
                "cannot place {n_perturbations} separable phenotypes in the intensity range"
            )));
        }
        let cand: Vec<f64> = (0..N_CHANNELS).map(|_| rng.random_range(BASE_RANGE.0..BASE_RANGE.1)).collect();
        let separated = bases.iter().all(|b| {
            chebyshev(&b[..N_FLUORESCENT], &cand[..N_FLUORESCENT]) >= MIN_BASE_SEPARATION
                && chebyshev(&b[N_FLUORESCENT..], &cand[N_FLUORESCENT..]) >= MIN_BASE_SEPARATION
        });
        if separated {
            bases.push(cand);
        }
    }
    Ok(bases
        .into_iter()
        .map(|base_intensity| PhenotypeSignature {
            base_intensity,
            contrast: (0..N_CHANNELS).map(|_| rng.random_range(0.3..0.6)).collect(),
            blob_density: rng.random_range(1.5..4.0),
            radius_mean: rng.random_range(3.0..6.5),
            radius_std: rng.random_range(0.3..1.2),
            min_aspect: rng.random_range(0.45..0.95),
        })
        .collect())
}

pub fn sample_cell_line_effects(n_lines: usize, seed: u64) -> Vec<CellLineEffect> {
    (0..n_lines)
        .map(|l| {
            let mut rng = stream(seed, &[hash_str("cell_line"), l as u64]);
            CellLineEffect {
                channel_factor: (0..N_CHANNELS)
                    .map(|_| rng.random_range(1.0 - LINE_MODULATION..1.0 + LINE_MODULATION))
                    .collect(),
                radius_factor: rng.random_range(0.85..1.15),
            }
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Profile {
    Solid(f64),
    Ring(f64),
}

/// Compartment drawn on each channel: nucleus, cytoplasm, membrane, organelle
/// spots, whole cell; then brightfield outline, body and nucleus shadow.
const PROFILES: [Profile; N_CHANNELS] = [
    Profile::Solid(0.45),
    Profile::Solid(1.0),
    Profile::Ring(1.0),
    Profile::Solid(0.7),
    Profile::Solid(0.85),
    Profile::Ring(1.05),
    Profile::Solid(1.0),
    Profile::Solid(0.5),
];

impl Profile {
    fn value(self, r: f64) -> f64 {
        match self {
            Profile::Solid(s) => 1.0 / (1.0 + (6.0 * (r / s - 1.0)).exp()),
            Profile::Ring(s) => (-((r / s - 1.0) / 0.18).powi(2)).exp(),
        }
    }

    fn extent(self) -> f64 {
        match self {
            Profile::Solid(s) => 1.8 * s,
            Profile::Ring(s) => 1.6 * s,
        }
    }
}

struct Cell {
    cy: f64,
    cx: f64,
    major: f64,
    minor: f64,
    cos: f64,
    sin: f64,
    brightness: f64,
}

/// Everything needed to render one site.
pub struct SiteSpec<'a> {
    pub signature: &'a PhenotypeSignature,
    pub line: &'a CellLineEffect,
    pub plate_gain: &'a [f64],
    pub height: usize,
    pub width: usize,
    pub nuisance: f64,
}

/// Renders all 8 channels of one site as `(fluorescent, brightfield)`.
pub fn render_site<R: Rng>(spec: &SiteSpec, placement: &mut R, nuisance_rng: &mut R) -> (CellImage, CellImage) {
    let (h, w) = (spec.height, spec.width);
    let sig = spec.signature;
    let s = spec.nuisance;
    let scale = (h.min(w) as f64) / 64.0;

    let jitter = if s > 0.0 { 1.0 + s * nuisance_rng.random_range(-0.3..0.3) } else { 1.0 };
    let expected = sig.blob_density * (h * w) as f64 / 1000.0;
    let n_cells = ((expected * jitter).round() as usize).max(1);
    let radius = Normal::new(sig.radius_mean * spec.line.radius_factor * scale, sig.radius_std * scale)
        .expect("positive std");
    let cells: Vec<Cell> = (0..n_cells)
        .map(|_| {
            let major = radius.sample(placement).max(1.5 * scale);
            let aspect = placement.random_range(sig.min_aspect..1.0);
            let theta = placement.random_range(0.0..std::f64::consts::PI);
            Cell {
                cy: placement.random_range(0.0..h as f64),
                cx: placement.random_range(0.0..w as f64),
                major,
                minor: major * aspect,
                cos: theta.cos(),
                sin: theta.sin(),
                brightness: placement.random_range(0.7..1.0),
            }
        })
        .collect();

    let mut fields = vec![vec![0.0f64; h * w]; N_CHANNELS];
    for cell in &cells {
        for (c, field) in fields.iter_mut().enumerate() {
            let profile = PROFILES[c];
            let reach = cell.major * profile.extent() + 1.0;
            let y0 = (cell.cy - reach).floor().max(0.0) as usize;
            let y1 = ((cell.cy + reach).ceil() as usize).min(h - 1);
            let x0 = (cell.cx - reach).floor().max(0.0) as usize;
            let x1 = ((cell.cx + reach).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dy = y as f64 + 0.5 - cell.cy;
                    let dx = x as f64 + 0.5 - cell.cx;
                    let u = (dx * cell.cos + dy * cell.sin) / cell.major;
                    let v = (-dx * cell.sin + dy * cell.cos) / cell.minor;
                    let val = cell.brightness * profile.value((u * u + v * v).sqrt());
                    let f = &mut field[y * w + x];
                    *f = f.max(val);
                }
            }
        }
    }

    let (gy, gx) = if s > 0.0 {
        let a: f64 = nuisance_rng.random_range(0.0..std::f64::consts::TAU);
        (0.2 * s * a.sin(), 0.2 * s * a.cos())
    } else {
        (0.0, 0.0)
    };
    let noise = Normal::new(0.0, 0.01 * s.max(f64::MIN_POSITIVE)).expect("positive std");
    let mut pixels = vec![0.0f32; h * w * N_CHANNELS];
    let level: Vec<f64> = (0..N_CHANNELS)
        .map(|c| sig.base_intensity[c] * spec.line.channel_factor[c] * spec.plate_gain[c])
        .collect();
    let means: Vec<f64> = fields.iter().map(|f| f.iter().sum::<f64>() / (h * w) as f64).collect();
    for y in 0..h {
        let ry = (y as f64 + 0.5) / h as f64 - 0.5;
        for x in 0..w {
            let rx = (x as f64 + 0.5) / w as f64 - 0.5;
            let illum = 1.0 + gy * ry + gx * rx;
            for c in 0..N_CHANNELS {
                let m = fields[c][y * w + x];
                let mut v = level[c] * illum * (1.0 + sig.contrast[c] * (m - means[c]));
                if s > 0.0 {
                    v += noise.sample(nuisance_rng);
                }
                pixels[(y * w + x) * N_CHANNELS + c] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    let mut kinds = vec![ChannelKind::Fluorescent; N_FLUORESCENT];
    kinds.extend([ChannelKind::Brightfield; N_BRIGHTFIELD]);
    let full = CellImage::from_parts(h, w, kinds, pixels);
    (full.select_channels(0..N_FLUORESCENT), full.select_channels(N_FLUORESCENT..N_CHANNELS))
}

/// Per-plate, per-channel gain; all ones when `nuisance` is 0.
pub fn plate_gain(seed: u64, plate_id: &str, nuisance: f64) -> Vec<f64> {
    let mut rng = stream(seed, &[hash_str("plate_gain"), hash_str(plate_id)]);
    (0..N_CHANNELS)
        .map(|_| {
            let u: f64 = rng.random_range(-0.08..0.08);
            1.0 + nuisance * u
        })
        .collect()
}

fn image_rel_path(plate: &str, well: &str, site: usize, set: ChannelSet) -> String {
    let tag = match set {
        ChannelSet::Fluorescent => "fl",
        ChannelSet::Brightfield => "bf",
        ChannelSet::All => "all",
    };
    format!("images/{plate}/{well}_s{site:02}_{tag}.cpim")
}

/// Writes images and `manifest.jsonl` under `out_dir` and returns the manifest.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let signatures = sample_signatures(cfg.n_perturbations, cfg.seed)?;
    let lines = sample_cell_line_effects(cfg.n_cell_lines, cfg.seed);

    let mut sites = Vec::new();
    for l in 0..cfg.n_cell_lines {
        for p in 0..cfg.n_plates_per_line {
            for pos in 0..cfg.n_well_positions {
                for site in 0..cfg.sites_per_well {
                    sites.push((l, p, pos, site));
                }
            }
        }
    }
    for l in 0..cfg.n_cell_lines {
        for p in 0..cfg.n_plates_per_line {
            let dir = out_dir.join("images").join(plate_name(l, p));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }

    let records: Vec<Vec<SiteRecord>> = sites
        .par_iter()
        .map(|&(l, p, pos, site)| -> Result<Vec<SiteRecord>> {
            let plate = plate_name(l, p);
            let well = well_position_name(pos);
            let pert = perturbation_of(pos, cfg.n_perturbations);
            let gain = plate_gain(cfg.seed, &plate, cfg.nuisance_strength);
            let (plate_h, well_h) = (hash_str(&plate), hash_str(&well));
            let mut placement = if cfg.nuisance_strength > 0.0 {
                stream(cfg.seed, &[hash_str("placement"), plate_h, well_h, site as u64])
            } else {
                stream(cfg.seed, &[hash_str("placement"), plate_h, well_h])
            };
            let mut nuisance = stream(cfg.seed, &[hash_str("nuisance"), plate_h, well_h, site as u64]);
            let spec = SiteSpec {
                signature: &signatures[pert],
                line: &lines[l],
                plate_gain: &gain,
                height: cfg.image_size[0],
                width: cfg.image_size[1],
                nuisance: cfg.nuisance_strength,
            };
            let (fl, bf) = render_site(&spec, &mut placement, &mut nuisance);
            let mut out = Vec::with_capacity(2);
            for (img, set) in [(fl, ChannelSet::Fluorescent), (bf, ChannelSet::Brightfield)] {
                let rel = image_rel_path(&plate, &well, site, set);
                write_image(&img, out_dir.join(&rel))?;
                out.push(SiteRecord {
                    plate_id: plate.clone(),
                    well_position: well.clone(),
                    site_index: site as u32,
                    cell_line: cell_line_name(l),
                    perturbation: perturbation_name(pert),
                    image_path: rel,
                    channel_set: set,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut manifest = DatasetManifest::new(records.into_iter().flatten().collect(), out_dir)?;
    manifest.metadata.insert("generator".into(), "synthgen".into());
    manifest.metadata.insert(
        "synth_config".into(),
        serde_json::to_string(cfg).expect("config serializes"),
    );
    write_manifest(&manifest, out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
