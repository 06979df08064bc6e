//! From site embeddings to well representations: CLS/patch fusion, grid
//! resampling of 16-site wells to 3×3, well merging, cross-plate alignment and
//! fusion of the fluorescent and brightfield models.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingKey, EmbeddingLevel, EmbeddingTable, Provenance, WellKey};
use crate::error::{Error, Result};

/// Which part of a `[CLS ‖ mean patch]` site vector to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteMode {
    #[default]
    Concat,
    ClsOnly,
    PatchOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    #[default]
    Concat,
    Average,
}

/// Sample positions used when resampling a 4×4 site grid to 3×3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAlignment {
    /// `{0, 1.5, 3}`: the four corner sites are kept exactly.
    #[default]
    Corner,
    /// Output cell centers mapped onto input cell centers.
    Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    pub site_mode: SiteMode,
    pub merge_mode: MergeMode,
    pub grid_alignment: GridAlignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    /// Weight kept on the original vector; 1 disables alignment.
    pub alpha_align: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self { alpha_align: 0.5 }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.alpha_align) {
            Ok(())
        } else {
            Err(Error::Config(format!("alpha_align = {} must be in [0, 1]", self.alpha_align)))
        }
    }
}

/// `[cls ‖ mean(patches)]`.
pub fn site_representation(cls: &ArrayView1<f32>, patches: &ArrayView2<f32>) -> Result<Array1<f32>> {
    if patches.nrows() == 0 {
        return Err(Error::Shape("site representation needs at least one patch".into()));
    }
    if patches.ncols() != cls.len() {
        return Err(Error::Shape(format!(
            "cls has {} features, patches have {}",
            cls.len(),
            patches.ncols()
        )));
    }
    let mean = patches.mapv(f64::from).mean_axis(Axis(0)).expect("nonempty");
    let mut out = Array1::zeros(2 * cls.len());
    out.slice_mut(s![..cls.len()]).assign(cls);
    out.slice_mut(s![cls.len()..]).assign(&mean.mapv(|v| v as f32));
    Ok(out)
}

/// Keeps the requested half of `[CLS ‖ mean patch]` site vectors.
pub fn select_site_part(vectors: &ArrayView2<f32>, mode: SiteMode) -> Result<Array2<f32>> {
    let d = vectors.ncols();
    if mode != SiteMode::Concat && d % 2 != 0 {
        return Err(Error::Shape(format!("site vectors of odd dimension {d} cannot be split")));
    }
    Ok(match mode {
        SiteMode::Concat => vectors.to_owned(),
        SiteMode::ClsOnly => vectors.slice(s![.., ..d / 2]).to_owned(),
        SiteMode::PatchOnly => vectors.slice(s![.., d / 2..]).to_owned(),
    })
}

fn sample_coords(alignment: GridAlignment) -> [f64; 3] {
    match alignment {
        GridAlignment::Corner => [0.0, 1.5, 3.0],
        GridAlignment::Cell => [0.5 * 4.0 / 3.0 - 0.5, 1.5, 2.5 * 4.0 / 3.0 - 0.5],
    }
}

/// Maps row-major site vectors (9 or 16 rows) to 9 rows. Nine sites pass
/// through; sixteen are treated as a 4×4 grid and bilinearly resampled.
pub fn well_grid_resample(sites: &ArrayView2<f32>, alignment: GridAlignment) -> Result<Array2<f32>> {
    match sites.nrows() {
        9 => Ok(sites.to_owned()),
        16 => {
            let coords = sample_coords(alignment);
            let mut out = Array2::zeros((9, sites.ncols()));
            for (i, &r) in coords.iter().enumerate() {
                let r0 = (r.floor() as usize).min(2);
                let fr = r - r0 as f64;
                for (j, &c) in coords.iter().enumerate() {
                    let c0 = (c.floor() as usize).min(2);
                    let fc = c - c0 as f64;
                    let corners = [
                        (r0, c0, (1.0 - fr) * (1.0 - fc)),
                        (r0, c0 + 1, (1.0 - fr) * fc),
                        (r0 + 1, c0, fr * (1.0 - fc)),
                        (r0 + 1, c0 + 1, fr * fc),
                    ];
                    let mut row = out.row_mut(i * 3 + j);
                    for (k, v) in row.iter_mut().enumerate() {
                        let acc: f64 = corners
                            .iter()
                            .filter(|&&(_, _, w)| w != 0.0)
                            .map(|&(a, b, w)| w * f64::from(sites[[a * 4 + b, k]]))
                            .sum();
                        *v = acc as f32;
                    }
                }
            }
            Ok(out)
        }
        n => Err(Error::Shape(format!("a well needs 9 or 16 sites, got {n}"))),
    }
}

/// Row-major concatenation (dimension `9d`) or mean (dimension `d`).
pub fn merge_well(nine: &ArrayView2<f32>, mode: MergeMode) -> Result<Array1<f32>> {
    if nine.nrows() != 9 {
        return Err(Error::Shape(format!("merge needs 9 site vectors, got {}", nine.nrows())));
    }
    Ok(match mode {
        MergeMode::Concat => nine.iter().copied().collect(),
        MergeMode::Average => nine
            .mapv(f64::from)
            .mean_axis(Axis(0))
            .expect("nine rows")
            .mapv(|v| v as f32),
    })
}

/// Groups a site-level table into wells (sites ordered by index) and builds
/// one merged vector per well.
pub fn aggregate_wells(sites: &EmbeddingTable, cfg: &AggregateConfig) -> Result<EmbeddingTable> {
    if sites.level != EmbeddingLevel::Site {
        return Err(Error::Shape("aggregation needs a site-level table".into()));
    }
    let parts = select_site_part(&sites.vectors.view(), cfg.site_mode)?;
    let mut groups: BTreeMap<WellKey, Vec<(u32, usize)>> = BTreeMap::new();
    for (row, key) in sites.keys.iter().enumerate() {
        let site = key.site_index.expect("site-level keys carry a site index");
        groups.entry(key.well_key()).or_default().push((site, row));
    }
    let mut keys = Vec::with_capacity(groups.len());
    let mut rows = Vec::with_capacity(groups.len());
    for (well, mut members) in groups {
        members.sort_unstable();
        let n = members.len();
        if members.iter().enumerate().any(|(i, &(s, _))| s as usize != i) {
            return Err(Error::Shape(format!(
                "well {}/{} has site indices {:?}, expected 0..{n}",
                well.plate_id,
                well.well_position,
                members.iter().map(|m| m.0).collect::<Vec<_>>()
            )));
        }
        let idx: Vec<usize> = members.iter().map(|m| m.1).collect();
        let grid = well_grid_resample(&parts.select(Axis(0), &idx).view(), cfg.grid_alignment)?;
        rows.push(merge_well(&grid.view(), cfg.merge_mode)?);
        keys.push(EmbeddingKey::well(&well.plate_id, &well.well_position));
    }
    let dim = rows.first().map_or(0, Array1::len);
    let mut vectors = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in vectors.outer_iter_mut().zip(&rows) {
        dst.assign(src);
    }
    EmbeddingTable::new(keys, vectors, EmbeddingLevel::Well)
}

/// Shrinks each well vector toward the mean of its well position across
/// plates: `z ← α·z + (1−α)·μ_w`.
pub fn cross_plate_align(table: &EmbeddingTable, cfg: &AlignmentConfig) -> Result<EmbeddingTable> {
    cfg.validate()?;
    if table.level != EmbeddingLevel::Well {
        return Err(Error::Shape("alignment needs a well-level table".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (row, key) in table.keys.iter().enumerate() {
        groups.entry(&key.well_position).or_default().push(row);
    }
    let alpha = cfg.alpha_align;
    let mut out = table.clone();
    for rows in groups.values() {
        let block = table.vectors.select(Axis(0), rows).mapv(f64::from);
        let mu = block.mean_axis(Axis(0)).expect("nonempty group");
        for (&r, z) in rows.iter().zip(block.outer_iter()) {
            let mut dst = out.vectors.row_mut(r);
            for ((d, &zv), &m) in dst.iter_mut().zip(&z).zip(&mu) {
                *d = (alpha * zv + (1.0 - alpha) * m) as f32;
            }
        }
    }
    out.provenance.aligned = true;
    Ok(out)
}

/// `[fluorescent ‖ brightfield]` per well; the key sets must match exactly.
pub fn fuse_channel_models(fluor: &EmbeddingTable, bright: &EmbeddingTable) -> Result<EmbeddingTable> {
    if fluor.level != EmbeddingLevel::Well || bright.level != EmbeddingLevel::Well {
        return Err(Error::Shape("fusion needs well-level tables".into()));
    }
    if fluor.provenance.fused || bright.provenance.fused {
        return Err(Error::Shape("tables are already fused".into()));
    }
    let index: BTreeMap<&EmbeddingKey, usize> = bright.keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
    let fl_keys: BTreeSet<&EmbeddingKey> = fluor.keys.iter().collect();
    let missing_bright: Vec<String> = fluor
        .keys
        .iter()
        .filter(|k| !index.contains_key(k))
        .map(|k| format!("{}/{}", k.plate_id, k.well_position))
        .collect();
    let missing_fluor: Vec<String> = bright
        .keys
        .iter()
        .filter(|k| !fl_keys.contains(k))
        .map(|k| format!("{}/{}", k.plate_id, k.well_position))
        .collect();
    if !missing_bright.is_empty() || !missing_fluor.is_empty() {
        return Err(Error::KeyMismatch(format!(
            "wells missing from brightfield table: {missing_bright:?}; missing from fluorescent table: {missing_fluor:?}"
        )));
    }
    let (d1, d2) = (fluor.dim(), bright.dim());
    let mut vectors = Array2::zeros((fluor.len(), d1 + d2));
    for (i, key) in fluor.keys.iter().enumerate() {
        vectors.slice_mut(s![i, ..d1]).assign(&fluor.vectors.row(i));
        vectors.slice_mut(s![i, d1..]).assign(&bright.vectors.row(index[key]));
    }
    let mut out = EmbeddingTable::new(fluor.keys.clone(), vectors, EmbeddingLevel::Well)?;
    out.provenance = Provenance {
        aligned: fluor.provenance.aligned && bright.provenance.aligned,
        fused: true,
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn grid16(f: impl Fn(usize, usize) -> f32) -> Array2<f32> {
        Array2::from_shape_fn((16, 1), |(i, _)| f(i / 4, i % 4))
    }

    #[test]
    fn site_representation_examples() {
        let v = site_representation(&array![1.0, 2.0].view(), &array![[0.0, 0.0], [2.0, 4.0]].view()).unwrap();
        assert_eq!(v, array![1.0, 2.0, 1.0, 2.0]);
        let v = site_representation(&array![1.0].view(), &array![[7.0]].view()).unwrap();
        assert_eq!(v, array![1.0, 7.0]);
        assert!(site_representation(&array![1.0].view(), &Array2::zeros((0, 1)).view()).is_err());
        let both = array![[1.0, 2.0, 3.0, 4.0]];
        assert_eq!(select_site_part(&both.view(), SiteMode::ClsOnly).unwrap(), array![[1.0, 2.0]]);
        assert_eq!(select_site_part(&both.view(), SiteMode::PatchOnly).unwrap(), array![[3.0, 4.0]]);
    }

    #[test]
    fn nine_sites_pass_through() {
        let x = Array2::from_shape_fn((9, 3), |(i, j)| (i * 3 + j) as f32);
        assert_eq!(well_grid_resample(&x.view(), GridAlignment::Corner).unwrap(), x);
        assert!(well_grid_resample(&Array2::zeros((10, 3)).view(), GridAlignment::Corner).is_err());
    }

    #[test]
    fn constant_field_stays_constant() {
        let x = Array2::from_shape_fn((16, 4), |(_, j)| j as f32 + 0.25);
        for a in [GridAlignment::Corner, GridAlignment::Cell] {
            let y = well_grid_resample(&x.view(), a).unwrap();
            for row in y.outer_iter() {
                assert_eq!(row, x.row(0));
            }
        }
    }

    #[test]
    fn column_ramp_matches_bilinear_arithmetic() {
        let y = well_grid_resample(&grid16(|_, c| c as f32).view(), GridAlignment::Corner).unwrap();
        for r in 0..3 {
            for (c, expect) in [0.0, 1.5, 3.0].into_iter().enumerate() {
                assert!((y[[r * 3 + c, 0]] - expect).abs() < 1e-6);
            }
        }
        // corners are kept exactly
        let x = grid16(|r, c| (r * 10 + c) as f32 * 0.37);
        let y = well_grid_resample(&x.view(), GridAlignment::Corner).unwrap();
        assert_eq!(y[[0, 0]], x[[0, 0]]);
        assert_eq!(y[[2, 0]], x[[3, 0]]);
        assert_eq!(y[[6, 0]], x[[12, 0]]);
        assert_eq!(y[[8, 0]], x[[15, 0]]);
        // the center averages the middle 2×2 block
        let mid = (x[[5, 0]] + x[[6, 0]] + x[[9, 0]] + x[[10, 0]]) / 4.0;
        assert!((y[[4, 0]] - mid).abs() < 1e-6);
    }

    #[test]
    fn merge_modes() {
        let x = Array2::from_shape_fn((9, 2), |(i, j)| (i * 2 + j) as f32);
        let c = merge_well(&x.view(), MergeMode::Concat).unwrap();
        assert_eq!(c.len(), 18);
        assert_eq!(c.slice(s![4..6]), x.row(2));
        let v = array![0.5f32, -1.0];
        let copies = Array2::from_shape_fn((9, 2), |(_, j)| v[j]);
        assert_eq!(merge_well(&copies.view(), MergeMode::Average).unwrap(), v);
        assert!(merge_well(&x.slice(s![..8, ..]), MergeMode::Concat).is_err());
    }

    fn well_table(rows: &[(&str, &str, f32)]) -> EmbeddingTable {
        let keys = rows.iter().map(|r| EmbeddingKey::well(r.0, r.1)).collect();
        let vectors = Array2::from_shape_fn((rows.len(), 1), |(i, _)| rows[i].2);
        EmbeddingTable::new(keys, vectors, EmbeddingLevel::Well).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let t = well_table(&[("p1", "A01", 0.0), ("p2", "A01", 2.0), ("p1", "A02", 5.0)]);
        let a = cross_plate_align(&t, &AlignmentConfig { alpha_align: 0.5 }).unwrap();
        assert_eq!(a.vectors.column(0).to_vec(), vec![0.5, 1.5, 5.0]);
        assert!(a.provenance.aligned);
        let id = cross_plate_align(&t, &AlignmentConfig { alpha_align: 1.0 }).unwrap();
        assert_eq!(id.vectors, t.vectors);
        let full = cross_plate_align(&t, &AlignmentConfig { alpha_align: 0.0 }).unwrap();
        assert_eq!(full.vectors.column(0).to_vec(), vec![1.0, 1.0, 5.0]);
        assert!(cross_plate_align(&t, &AlignmentConfig { alpha_align: 1.5 }).is_err());
    }

    #[test]
    fn fusion_contract() {
        let f = well_table(&[("p1", "A01", 1.0), ("p1", "A02", 2.0)]);
        let b = well_table(&[("p1", "A02", 20.0), ("p1", "A01", 10.0)]);
        let fused = fuse_channel_models(&f, &b).unwrap();
        assert_eq!(fused.vectors, array![[1.0, 10.0], [2.0, 20.0]]);
        assert!(fused.provenance.fused);
        assert!(fuse_channel_models(&fused, &b).is_err());
        let short = well_table(&[("p1", "A01", 1.0)]);
        let Err(Error::KeyMismatch(msg)) = fuse_channel_models(&f, &short) else { panic!() };
        assert!(msg.contains("p1/A02"));
    }

    #[test]
    fn aggregation_ignores_record_order() {
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for plate in ["p1", "p2"] {
            for site in 0..16u32 {
                keys.push(EmbeddingKey::site(plate, "A01", site));
                vals.extend([site as f32, -(site as f32), plate.len() as f32 + site as f32, 1.0]);
            }
        }
        let t = EmbeddingTable::new(keys.clone(), Array2::from_shape_vec((32, 4), vals).unwrap(), EmbeddingLevel::Site).unwrap();
        let order: Vec<usize> = (0..32).rev().collect();
        let shuffled = EmbeddingTable::new(
            order.iter().map(|&i| keys[i].clone()).collect(),
            t.vectors.select(Axis(0), &order),
            EmbeddingLevel::Site,
        )
        .unwrap();
        let cfg = AggregateConfig::default();
        let a = aggregate_wells(&t, &cfg).unwrap();
        assert_eq!(a, aggregate_wells(&shuffled, &cfg).unwrap());
        assert_eq!(a.dim(), 9 * 4);
        let cls = aggregate_wells(&t, &AggregateConfig { site_mode: SiteMode::ClsOnly, ..cfg }).unwrap();
        assert_eq!(cls.dim(), 9 * 2);
    }

    proptest! {
        #[test]
        fn resample_is_linear(
            x in proptest::collection::vec(-1.0f32..1.0, 32),
            y in proptest::collection::vec(-1.0f32..1.0, 32),
            a in -2.0f32..2.0,
            b in -2.0f32..2.0,
        ) {
            let x = Array2::from_shape_vec((16, 2), x).unwrap();
            let y = Array2::from_shape_vec((16, 2), y).unwrap();
            let lhs = well_grid_resample(&(&x * a + &y * b).view(), GridAlignment::Corner).unwrap();
            let rhs = well_grid_resample(&x.view(), GridAlignment::Corner).unwrap() * a
                + well_grid_resample(&y.view(), GridAlignment::Corner).unwrap() * b;
            for (p, q) in lhs.iter().zip(&rhs) {
                prop_assert!((p - q).abs() < 1e-5);
            }
        }

        #[test]
        fn alignment_preserves_position_means_and_shrinks_spread(
            vals in proptest::collection::vec(-5.0f32..5.0, 6),
            alpha in 0.0f64..1.0,
        ) {
            let rows: Vec<(String, f32)> = (0..6).map(|i| (format!("p{}", i % 3), vals[i])).collect();
            let positions = ["A01", "A01", "A01", "A02", "A02", "A02"];
            let spec: Vec<(&str, &str, f32)> = rows.iter().zip(positions).map(|(r, p)| (r.0.as_str(), p, r.1)).collect();
            let t = well_table(&spec);
            let a = cross_plate_align(&t, &AlignmentConfig { alpha_align: alpha }).unwrap();
            for block in [0..3, 3..6] {
                let before: Vec<f64> = t.vectors.slice(s![block.clone(), 0]).iter().map(|&v| f64::from(v)).collect();
                let after: Vec<f64> = a.vectors.slice(s![block, 0]).iter().map(|&v| f64::from(v)).collect();
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let var = |v: &[f64]| { let m = mean(v); v.iter().map(|x| (x - m).powi(2)).sum::<f64>() };
                prop_assert!((mean(&before) - mean(&after)).abs() < 1e-5);
                if var(&before) > 1e-6 {
                    prop_assert!(var(&after) < var(&before));
                }
            }
        }
    }
}
