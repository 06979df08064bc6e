use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Config(format!("unknown metric {other:?} (cosine | euclidean)"))),
        }
    }
}

fn norm(v: &ArrayView1<f32>) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Cosine distance `1 − cos` (zero vectors have similarity 0) or Euclidean
/// distance, accumulated in f64.
pub fn distance(a: &ArrayView1<f32>, b: &ArrayView1<f32>, metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum::<f64>()
            .sqrt(),
        Metric::Cosine => {
            let (na, nb) = (norm(a), norm(b));
            if na == 0.0 || nb == 0.0 {
                return 1.0;
            }
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
            1.0 - dot / (na * nb)
        }
    }
}

/// Majority vote among the `k` nearest training rows. Equal distances are
/// ordered by row index; vote ties go to the label with the smallest summed
/// distance, then to the lexicographically smallest label.
pub fn knn_predict(
    train: &ArrayView2<f32>,
    labels: &[String],
    query: &ArrayView1<f32>,
    k: usize,
    metric: Metric,
) -> Result<String> {
    if train.nrows() == 0 {
        return Err(Error::Eval("kNN needs a nonempty training set".into()));
    }
    if labels.len() != train.nrows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), train.nrows())));
    }
    if train.ncols() != query.len() {
        return Err(Error::Shape(format!("query dim {} vs train dim {}", query.len(), train.ncols())));
    }
    if k == 0 || k > train.nrows() {
        return Err(Error::Eval(format!("k = {k} must be in 1..={}", train.nrows())));
    }
    let mut d: Vec<(f64, usize)> = train
        .outer_iter()
        .enumerate()
        .map(|(i, row)| (distance(&row, query, metric), i))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for &(dist, i) in &d[..k] {
        let e = votes.entry(labels[i].as_str()).or_default();
        e.0 += 1;
        e.1 += dist;
    }
    let best = votes
        .into_iter()
        .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.total_cmp(&b.1 .1)).then(a.0.cmp(b.0)))
        .expect("k >= 1");
    Ok(best.0.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn l(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exact_match_with_k1() {
        let x = array![[0.0f32, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let y = l(&["a", "b", "c"]);
        for i in 0..3 {
            assert_eq!(knn_predict(&x.view(), &y, &x.row(i), 1, Metric::Euclidean).unwrap(), y[i]);
            assert_eq!(knn_predict(&x.view(), &y, &x.row(i), 1, Metric::Cosine).unwrap(), y[i]);
        }
    }

    #[test]
    fn brute_force_example() {
        let x = array![[0.0f32, 0.0], [0.0, 0.1], [5.0, 5.0]];
        let y = l(&["a", "a", "b"]);
        let q = array![0.2f32, 0.0];
        assert_eq!(knn_predict(&x.view(), &y, &q.view(), 3, Metric::Euclidean).unwrap(), "a");
    }

    #[test]
    fn tie_breaks() {
        // one vote each: the closer label wins
        let x = array![[1.0f32], [3.0]];
        let q = array![1.5f32];
        assert_eq!(knn_predict(&x.view(), &l(&["z", "a"]), &q.view(), 2, Metric::Euclidean).unwrap(), "z");
        // equal votes and distances: lexicographic
        let q = array![2.0f32];
        assert_eq!(knn_predict(&x.view(), &l(&["z", "a"]), &q.view(), 2, Metric::Euclidean).unwrap(), "a");
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let x = Array2::from_shape_fn((12, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f32 - 1.7);
        let y: Vec<String> = (0..12).map(|i| format!("c{}", i % 3)).collect();
        let q = array![0.3f32, -1.0, 2.0];
        let a = knn_predict(&x.view(), &y, &q.view(), 5, Metric::Cosine).unwrap();
        let xs = &x * 4.5;
        let qs = &q * 4.5;
        assert_eq!(knn_predict(&xs.view(), &y, &qs.view(), 5, Metric::Cosine).unwrap(), a);
    }

    #[test]
    fn errors() {
        let x = Array2::<f32>::zeros((0, 2));
        assert!(knn_predict(&x.view(), &[], &array![0.0f32, 0.0].view(), 1, Metric::Cosine).is_err());
        let x = array![[1.0f32, 0.0]];
        assert!(knn_predict(&x.view(), &l(&["a"]), &array![0.0f32, 0.0].view(), 2, Metric::Cosine).is_err());
    }
}
