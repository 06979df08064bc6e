//! kNN perturbation classification from well representations, stratified
//! K-fold, cross-cell-line transfer and embedding diagnostics.

mod collapse;
mod knn;
pub mod plot;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use collapse::{embedding_collapse_check, CollapseDiagnostics, DEAD_DIM_STD};
pub use knn::{distance, knn_predict, Metric};

use crate::dataio::{DatasetManifest, EmbeddingLevel, EmbeddingTable, WellKey};
use crate::error::{Error, Result};
use crate::rng::{hash_str, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Within,
    Cross,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub metric: Metric,
    pub n_folds: usize,
    pub seed: u64,
    pub mode: EvalMode,
    /// Subtract each cell line's mean vector before classification.
    pub center_per_line: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            metric: Metric::Cosine,
            n_folds: 5,
            seed: 0,
            mode: EvalMode::Both,
            center_per_line: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::Config(format!("n_folds = {} must be >= 2", self.n_folds)));
        }
        Ok(())
    }
}

/// `true label → predicted label → count`.
pub type Confusion = BTreeMap<String, BTreeMap<String, usize>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold_accuracies: Vec<f64>,
    pub fold_sizes: Vec<usize>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub train_line: String,
    pub test_line: String,
    pub accuracy: f64,
    pub n_test: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub collapse: CollapseDiagnostics,
    pub intra_well_consistency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub n_wells: usize,
    pub n_classes: usize,
    pub chance: f64,
    /// Per cell line K-fold results.
    pub within: BTreeMap<String, FoldReport>,
    /// Mean of the per-line mean accuracies.
    pub within_mean_accuracy: Option<f64>,
    pub cross: Vec<TransferResult>,
    pub cross_mean_accuracy: Option<f64>,
    pub diagnostics: Diagnostics,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Stratified fold index per sample. Members of each class are shuffled with
/// a stream keyed on `(seed, class)` and dealt round-robin, continuing from
/// where the previous class stopped so fold sizes stay balanced. Classes with
/// fewer members than folds are absent from some test folds; a class with a
/// single member cannot be both fitted and tested and is an error.
pub fn stratified_folds(labels: &[String], n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(Error::Config(format!("n_folds = {n_folds} must be >= 2")));
    }
    if labels.len() < n_folds {
        return Err(Error::Eval(format!("{} samples cannot fill {n_folds} folds", labels.len())));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if let Some((class, m)) = by_class.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Eval(format!(
            "class {class:?} has {} sample(s); stratified folds need at least 2 per class",
            m.len()
        )));
    }
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for (class, mut members) in by_class {
        members.shuffle(&mut stream(seed, &[hash_str("folds"), hash_str(class)]));
        for i in members {
            folds[i] = next % n_folds;
            next += 1;
        }
    }
    Ok(folds)
}

fn predict_all(
    train: &ArrayView2<f32>,
    train_labels: &[String],
    test: &ArrayView2<f32>,
    k: usize,
    metric: Metric,
) -> Result<Vec<String>> {
    let k = k.min(train.nrows());
    test.outer_iter()
        .map(|q| knn_predict(train, train_labels, &q, k, metric))
        .collect()
}

fn confusion(truth: &[String], pred: &[String]) -> Confusion {
    let mut c = Confusion::new();
    for (t, p) in truth.iter().zip(pred) {
        *c.entry(t.clone()).or_default().entry(p.clone()).or_default() += 1;
    }
    c
}

fn accuracy(truth: &[String], pred: &[String]) -> f64 {
    truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

/// Stratified K-fold kNN accuracy over the rows of `vectors`. When the
/// training part of a fold has fewer than `k` rows, `k` shrinks to fit.
pub fn kfold_eval(vectors: &ArrayView2<f32>, labels: &[String], cfg: &EvalConfig) -> Result<FoldReport> {
    cfg.validate()?;
    if labels.len() != vectors.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), vectors.nrows())));
    }
    let folds = stratified_folds(labels, cfg.n_folds, cfg.seed)?;
    let mut fold_accuracies = Vec::with_capacity(cfg.n_folds);
    let mut fold_sizes = Vec::with_capacity(cfg.n_folds);
    let mut all_truth = Vec::new();
    let mut all_pred = Vec::new();
    for f in 0..cfg.n_folds {
        let test: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == f).collect();
        let train: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] != f).collect();
        let train_x = vectors.select(Axis(0), &train);
        let train_y: Vec<String> = train.iter().map(|&i| labels[i].clone()).collect();
        let test_y: Vec<String> = test.iter().map(|&i| labels[i].clone()).collect();
        let pred = predict_all(&train_x.view(), &train_y, &vectors.select(Axis(0), &test).view(), cfg.k, cfg.metric)?;
        fold_accuracies.push(accuracy(&test_y, &pred));
        fold_sizes.push(test.len());
        all_truth.extend(test_y);
        all_pred.extend(pred);
    }
    let (mean_accuracy, std_accuracy) = mean_std(&fold_accuracies);
    Ok(FoldReport {
        fold_accuracies,
        fold_sizes,
        mean_accuracy,
        std_accuracy,
        confusion: confusion(&all_truth, &all_pred),
    })
}

/// Fits on every well of one line and tests on every well of another, for
/// each ordered pair of lines.
pub fn cross_cell_line_eval(
    lines: &BTreeMap<String, (Array2<f32>, Vec<String>)>,
    cfg: &EvalConfig,
) -> Result<Vec<TransferResult>> {
    cfg.validate()?;
    if lines.len() < 2 {
        return Err(Error::Eval(format!("cross-line evaluation needs >= 2 cell lines, got {}", lines.len())));
    }
    let mut out = Vec::new();
    for (a, (xa, ya)) in lines {
        for (b, (xb, yb)) in lines {
            if a == b {
                continue;
            }
            let sa: BTreeSet<&String> = ya.iter().collect();
            if !yb.iter().any(|l| sa.contains(l)) {
                return Err(Error::Eval(format!("cell lines {a} and {b} share no perturbation labels")));
            }
            let pred = predict_all(&xa.view(), ya, &xb.view(), cfg.k, cfg.metric)?;
            out.push(TransferResult {
                train_line: a.clone(),
                test_line: b.clone(),
                accuracy: accuracy(yb, &pred),
                n_test: yb.len(),
                confusion: confusion(yb, &pred),
            });
        }
    }
    Ok(out)
}

/// Mean over wells of the mean pairwise cosine similarity between the
/// well's site vectors.
pub fn intra_well_consistency(sites: &EmbeddingTable) -> Result<f64> {
    if sites.level != EmbeddingLevel::Site {
        return Err(Error::Eval("intra-well consistency needs a site-level table".into()));
    }
    let mut wells: BTreeMap<WellKey, Vec<usize>> = BTreeMap::new();
    for (i, k) in sites.keys.iter().enumerate() {
        wells.entry(k.well_key()).or_default().push(i);
    }
    if wells.is_empty() {
        return Err(Error::Eval("empty site table".into()));
    }
    let mut total = 0.0;
    for (well, rows) in &wells {
        if rows.len() < 2 {
            return Err(Error::Eval(format!(
                "well {}/{} has a single site",
                well.plate_id, well.well_position
            )));
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for (a, &i) in rows.iter().enumerate() {
            for &j in &rows[a + 1..] {
                sum += 1.0 - distance(&sites.vectors.row(i), &sites.vectors.row(j), Metric::Cosine);
                pairs += 1;
            }
        }
        total += sum / pairs as f64;
    }
    Ok(total / wells.len() as f64)
}

fn center_rows(x: &mut Array2<f32>) {
    if let Some(mean) = x.mapv(f64::from).mean_axis(Axis(0)) {
        let mean = mean.mapv(|v| v as f32);
        *x -= &mean;
    }
}

/// Full evaluation of a well-level table against manifest labels
/// (perturbation as class, cell line as grouping).
pub fn evaluate_wells(
    table: &EmbeddingTable,
    manifest: &DatasetManifest,
    sites: Option<&EmbeddingTable>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if table.level != EmbeddingLevel::Well {
        return Err(Error::Eval("evaluation needs a well-level table".into()));
    }
    let labels = manifest.well_labels();
    // rows in key order so fold assignment does not depend on table order
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| table.keys[a].cmp(&table.keys[b]));
    let mut lines: BTreeMap<String, (Vec<usize>, Vec<String>)> = BTreeMap::new();
    for i in order {
        let key = &table.keys[i];
        let (pert, line) = labels.get(&key.well_key()).ok_or_else(|| {
            Error::KeyMismatch(format!(
                "well {}/{} is not in the manifest",
                key.plate_id, key.well_position
            ))
        })?;
        let e = lines.entry(line.clone()).or_default();
        e.0.push(i);
        e.1.push(pert.clone());
    }
    let per_line: BTreeMap<String, (Array2<f32>, Vec<String>)> = lines
        .into_iter()
        .map(|(line, (rows, y))| {
            let mut x = table.vectors.select(Axis(0), &rows);
            if cfg.center_per_line {
                center_rows(&mut x);
            }
            (line, (x, y))
        })
        .collect();
    let classes: BTreeSet<&String> = per_line.values().flat_map(|(_, y)| y).collect();
    let n_classes = classes.len();

    let mut within = BTreeMap::new();
    if cfg.mode != EvalMode::Cross {
        for (line, (x, y)) in &per_line {
            within.insert(line.clone(), kfold_eval(&x.view(), y, cfg)?);
        }
    }
    let cross = if cfg.mode != EvalMode::Within && per_line.len() >= 2 {
        cross_cell_line_eval(&per_line, cfg)?
    } else {
        Vec::new()
    };
    let within_mean_accuracy =
        (!within.is_empty()).then(|| within.values().map(|r| r.mean_accuracy).sum::<f64>() / within.len() as f64);
    let cross_mean_accuracy =
        (!cross.is_empty()).then(|| cross.iter().map(|r| r.accuracy).sum::<f64>() / cross.len() as f64);
    Ok(EvalReport {
        config: *cfg,
        n_wells: table.len(),
        n_classes,
        chance: 1.0 / n_classes as f64,
        within,
        within_mean_accuracy,
        cross,
        cross_mean_accuracy,
        diagnostics: Diagnostics {
            collapse: embedding_collapse_check(&table.vectors.view())?,
            intra_well_consistency: sites.map(intra_well_consistency).transpose()?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::EmbeddingKey;
    use rand::Rng;

    fn labels(n_classes: usize, per: usize) -> Vec<String> {
        (0..n_classes * per).map(|i| format!("c{}", i % n_classes)).collect()
    }

    fn one_hot(y: &[String], n_classes: usize) -> Array2<f32> {
        Array2::from_shape_fn((y.len(), n_classes), |(i, j)| {
            f32::from(y[i] == format!("c{j}"))
        })
    }

    #[test]
    fn folds_partition_and_stratify() {
        let y = labels(8, 4);
        let f = stratified_folds(&y, 5, 3).unwrap();
        let mut sizes = [0; 5];
        for &k in &f {
            sizes[k] += 1;
        }
        assert_eq!(sizes.iter().sum::<usize>(), 32);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        // no class appears twice in one fold when it has fewer members than folds
        for c in 0..8 {
            let mut seen = BTreeSet::new();
            for (i, l) in y.iter().enumerate() {
                if *l == format!("c{c}") {
                    assert!(seen.insert(f[i]));
                }
            }
        }
        let mut y1 = y.clone();
        y1.push("lonely".into());
        let Err(Error::Eval(msg)) = stratified_folds(&y1, 5, 0) else { panic!() };
        assert!(msg.contains("lonely"));
    }

    #[test]
    fn leave_one_out_style_partition() {
        let y = labels(3, 2);
        let f = stratified_folds(&y, 6, 0).unwrap();
        let mut s = f.clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn separable_embeddings_score_one() {
        let y = labels(4, 5);
        let r = kfold_eval(&one_hot(&y, 4).view(), &y, &EvalConfig { k: 3, ..Default::default() }).unwrap();
        assert!(r.fold_accuracies.iter().all(|&a| a == 1.0));
        assert_eq!(r.mean_accuracy, 1.0);
        assert_eq!(r.fold_sizes.iter().sum::<usize>(), 20);
    }

    #[test]
    fn shuffled_labels_are_at_chance() {
        let n_classes = 4;
        let mut rng = crate::rng::stream(9, &[]);
        let x = Array2::from_shape_simple_fn((80, 6), || rng.random::<f32>());
        let mut accs = Vec::new();
        for seed in 0..20 {
            let mut y = labels(n_classes, 20);
            y.shuffle(&mut stream(seed, &[1]));
            let cfg = EvalConfig { seed, ..Default::default() };
            accs.push(kfold_eval(&x.view(), &y, &cfg).unwrap().mean_accuracy);
        }
        let (m, _) = mean_std(&accs);
        // binomial standard error of the 20-seed mean over 80 predictions each
        let p = 1.0 / n_classes as f64;
        let se = (p * (1.0 - p) / (80.0 * 20.0)).sqrt();
        assert!((m - p).abs() < 3.0 * se, "mean {m}, chance {p}, se {se}");
    }

    #[test]
    fn report_mean_is_mean_of_folds() {
        let y = labels(3, 6);
        let mut rng = crate::rng::stream(2, &[]);
        let x = Array2::from_shape_fn((18, 4), |(i, j)| {
            (i % 3 == j) as u8 as f32 + 0.8 * rng.random::<f32>()
        });
        let r = kfold_eval(&x.view(), &y, &EvalConfig::default()).unwrap();
        assert_eq!(r.mean_accuracy, r.fold_accuracies.iter().sum::<f64>() / 5.0);
    }

    #[test]
    fn cross_line_transfer() {
        let y = labels(4, 3);
        let mut rng = crate::rng::stream(4, &[]);
        let a = &one_hot(&y, 4) + &Array2::from_shape_simple_fn((12, 4), || 0.3 * rng.random::<f32>());
        let mut lines = BTreeMap::new();
        lines.insert("A".to_string(), (a.clone(), y.clone()));
        lines.insert("B".to_string(), (a.clone(), y.clone()));
        let cfg = EvalConfig { k: 1, ..Default::default() };
        let r = cross_cell_line_eval(&lines, &cfg).unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|t| t.accuracy == 1.0));

        // a constant offset disappears after per-line centering
        let cfg = EvalConfig { k: 3, metric: Metric::Cosine, ..Default::default() };
        let mut ca = a.clone();
        center_rows(&mut ca);
        let mut cb = &a + 5.0;
        center_rows(&mut cb);
        let base = predict_all(&ca.view(), &y, &ca.view(), 3, cfg.metric).unwrap();
        let moved = predict_all(&ca.view(), &y, &cb.view(), 3, cfg.metric).unwrap();
        assert_eq!(accuracy(&y, &base), accuracy(&y, &moved));

        let one = vec!["x".to_string(); 3];
        let mut single = BTreeMap::new();
        single.insert("A".to_string(), (a.slice(ndarray::s![..3, ..]).to_owned(), one.clone()));
        single.insert("B".to_string(), (a.slice(ndarray::s![3..6, ..]).to_owned(), one));
        assert!(cross_cell_line_eval(&single, &cfg).unwrap().iter().all(|t| t.accuracy == 1.0));

        let mut disjoint = single.clone();
        disjoint.get_mut("B").unwrap().1 = vec!["z".to_string(); 3];
        assert!(cross_cell_line_eval(&disjoint, &cfg).is_err());
    }

    fn site_table(vectors: Vec<Vec<f32>>, sites_per_well: usize) -> EmbeddingTable {
        let n = vectors.len();
        let d = vectors[0].len();
        let keys = (0..n)
            .map(|i| EmbeddingKey::site("p", &format!("W{}", i / sites_per_well), (i % sites_per_well) as u32))
            .collect();
        EmbeddingTable::new(
            keys,
            Array2::from_shape_vec((n, d), vectors.concat()).unwrap(),
            EmbeddingLevel::Site,
        )
        .unwrap()
    }

    #[test]
    fn consistency_examples() {
        let same = site_table(vec![vec![1.0, 2.0]; 6], 3);
        assert!((intra_well_consistency(&same).unwrap() - 1.0).abs() < 1e-12);
        let ortho = site_table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2);
        assert!(intra_well_consistency(&ortho).unwrap().abs() < 1e-12);
        // three sites at 0°, 60°, 90°: cosines 0.5, 0, cos 30°
        let t = site_table(
            vec![vec![1.0, 0.0], vec![0.5, 3f32.sqrt() / 2.0], vec![0.0, 1.0]],
            3,
        );
        let expect = (0.5 + 0.0 + (3f64.sqrt() / 2.0)) / 3.0;
        assert!((intra_well_consistency(&t).unwrap() - expect).abs() < 1e-6);
        let single = site_table(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1);
        assert!(intra_well_consistency(&single).is_err());
    }
}
