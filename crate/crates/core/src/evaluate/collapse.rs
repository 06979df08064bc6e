use nalgebra::DMatrix;
use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dimension counts as dead when its standard deviation is below this.
pub const DEAD_DIM_STD: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseDiagnostics {
    pub per_dim_std: Vec<f64>,
    /// Fraction of dimensions with std below [`DEAD_DIM_STD`].
    pub dead_fraction: f64,
    /// Singular values of the centered matrix above 1% of the largest,
    /// divided by `min(n, d)`.
    pub singular_fraction: f64,
    pub collapsed: bool,
}

pub fn embedding_collapse_check(x: &ArrayView2<f32>) -> Result<CollapseDiagnostics> {
    let (n, d) = x.dim();
    if n < 2 || d == 0 {
        return Err(Error::Eval(format!("collapse check needs >= 2 rows and >= 1 column, got {n}x{d}")));
    }
    let xf = x.mapv(f64::from);
    let mean = xf.mean_axis(Axis(0)).expect("rows");
    let centered = &xf - &mean;
    let per_dim_std: Vec<f64> = centered
        .axis_iter(Axis(1))
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt())
        .collect();
    let dead = per_dim_std.iter().filter(|&&s| s < DEAD_DIM_STD).count();
    let dead_fraction = dead as f64 / d as f64;

    let m = DMatrix::from_fn(n, d, |i, j| centered[[i, j]]);
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let above = if max > 0.0 { sv.iter().filter(|&&s| s > 0.01 * max).count() } else { 0 };
    Ok(CollapseDiagnostics {
        per_dim_std,
        dead_fraction,
        singular_fraction: above as f64 / n.min(d) as f64,
        collapsed: dead_fraction > 0.5,
    })
}
