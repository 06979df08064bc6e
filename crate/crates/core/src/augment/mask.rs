use rand::Rng;

use super::uniform;
use crate::error::{Error, Result};

/// Row-major boolean mask over the patch grid; `true` marks a masked patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    pub masked: Vec<bool>,
}

impl PatchMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            masked: vec![false; rows * cols],
        }
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.masked.len() as f64
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }
}

const MIN_BLOCK: usize = 4;
const BLOCK_ATTEMPTS: usize = 10;

/// Block-wise masking: a target count is drawn from the ratio range, then
/// random rectangles (aspect ratio log-uniform in `[0.3, 1/0.3]`) are added
/// until the target is met exactly. Blocks that would overshoot are shrunk;
/// if no block fits, single patches fill the remainder.
pub fn sample_block_mask<R: Rng + ?Sized>(
    grid: (usize, usize),
    ratio_range: (f64, f64),
    rng: &mut R,
) -> Result<PatchMask> {
    let (rows, cols) = grid;
    let (lo, hi) = ratio_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!("mask ratio range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
    }
    let n = rows * cols;
    if n == 0 {
        return Err(Error::Config("empty patch grid".into()));
    }
    let t_min = (lo * n as f64 - 1e-9).ceil() as usize;
    let t_max = (hi * n as f64 + 1e-9).floor() as usize;
    if t_min > t_max {
        return Err(Error::Config(format!(
            "no masked count on a {rows}x{cols} grid has a ratio in [{lo}, {hi}]"
        )));
    }
    let target = ((uniform(rng, lo, hi) * n as f64).round() as usize).clamp(t_min, t_max);

    let mut mask = PatchMask::empty(rows, cols);
    let mut count = 0usize;
    let log_aspect = (0.3f64.ln(), (1.0f64 / 0.3).ln());
    while count < target {
        let remaining = target - count;
        let mut progressed = false;
        for _ in 0..BLOCK_ATTEMPTS {
            let max_area = remaining.max(1);
            let area = uniform(rng, MIN_BLOCK.min(max_area) as f64, max_area as f64 + 1.0).floor();
            let aspect = uniform(rng, log_aspect.0, log_aspect.1).exp();
            let bh = ((area * aspect).sqrt().round() as usize).clamp(1, rows);
            let bw = ((area / aspect).sqrt().round() as usize).clamp(1, cols);
            let top = rng.random_range(0..=rows - bh);
            let left = rng.random_range(0..=cols - bw);
            let fresh: Vec<usize> = (top..top + bh)
                .flat_map(|r| (left..left + bw).map(move |c| r * cols + c))
                .filter(|&i| !mask.masked[i])
                .collect();
            if fresh.is_empty() || fresh.len() > remaining {
                continue;
            }
            for i in &fresh {
                mask.masked[*i] = true;
            }
            count += fresh.len();
            progressed = true;
            break;
        }
        if !progressed {
            let free: Vec<usize> = (0..n).filter(|&i| !mask.masked[i]).collect();
            let pick = free[rng.random_range(0..free.len())];
            mask.masked[pick] = true;
            count += 1;
        }
    }
    Ok(mask)
}
