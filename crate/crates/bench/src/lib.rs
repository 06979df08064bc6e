//! Shared fixtures for the benchmarks.

use sslprof_core::{CellImage, ChannelKind};

/// A smooth five-channel fluorescent image with a per-seed phase.
pub fn fluorescent_image(size: usize, seed: u32) -> CellImage {
    let phase = seed as f32 * 0.37;
    CellImage::from_fn(size, size, vec![ChannelKind::Fluorescent; 5], |y, x, c| {
        let t = (y as f32 * 0.21 + x as f32 * 0.13 + c as f32 + phase).sin();
        0.3 + 0.2 * t
    })
}
