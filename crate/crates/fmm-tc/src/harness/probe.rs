//! Representation probes: cheap classifiers over frozen features, used to
//! compare learned representations against raw connectivity.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::FmmModel;
use crate::numerics::Graph;

use super::cv::stratified_kfold;
use super::metrics::{compute_metrics, Metrics};
use super::train::PreparedSubject;

/// Fused (or single-stream) features from a trained model, one row per
/// subject in input order.
pub fn fused_features(
    model: &FmmModel<f32>,
    subjects: &[PreparedSubject],
) -> Result<Vec<Vec<f64>>> {
    let mut g: Graph<f32> = Graph::new();
    let binding = model.bind(&mut g);
    let mut out = Vec::with_capacity(subjects.len());
    for s in subjects {
        let fwd = model.forward(&mut g, &binding, Some(&s.tokens), Some(&s.fc))?;
        out.push(g.value(fwd.feature).data().iter().map(|&v| f64::from(v)).collect());
    }
    Ok(out)
}

/// Strict upper triangle of each connectivity matrix, flattened row-major.
pub fn raw_fc_features(subjects: &[PreparedSubject]) -> Vec<Vec<f64>> {
    subjects
        .iter()
        .map(|s| {
            let n = s.fc.n();
            let mut row = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    row.push(s.fc.at(i, j));
                }
            }
            row
        })
        .collect()
}

/// Project rows onto their top principal components. Output width is
/// min(components, n_samples - 1, input width).
pub fn pca_features(rows: &[Vec<f64>], components: usize) -> Result<Vec<Vec<f64>>> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples for PCA".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca", "ragged feature rows"));
    }
    let n = rows.len();
    let c = components.min(n - 1).min(d);
    let mut centered = DMatrix::zeros(n, d);
    let mut mean = vec![0.0; d];
    for row in rows {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v / n as f64;
        }
    }
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            centered[(i, j)] = v - mean[j];
        }
    }
    let svd = centered.clone().svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Graph("svd did not produce V^T".into()))?;
    let projected = centered * vt.rows(0, c).transpose();
    Ok((0..n)
        .map(|i| (0..c).map(|j| projected[(i, j)]).collect())
        .collect())
}

fn check_probe_inputs(features: &[Vec<f64>], labels: &[u8]) -> Result<()> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(Error::shape("probe", "ragged or empty feature rows"));
    }
    Ok(())
}

fn probe_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let ids: Vec<(String, u8)> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| (format!("{i:06}"), l))
        .collect();
    let folds = stratified_kfold(&ids, k, seed)?;
    Ok(folds
        .into_iter()
        .map(|fold| {
            fold.into_iter()
                .map(|id| id.parse::<usize>().expect("synthetic id"))
                .collect()
        })
        .collect())
}

/// Ridge regression probe on +-1 targets with an unpenalized-free bias
/// column, lambda = 1. Scores pass through a sigmoid; metrics are pooled
/// over the cross-validation folds.
pub fn linear_probe(
    features: &[Vec<f64>],
    labels: &[u8],
    k: usize,
    seed: u64,
) -> Result<Metrics> {
    check_probe_inputs(features, labels)?;
    let folds = probe_folds(labels, k, seed)?;
    let d = features[0].len();
    let lambda = 1.0;

    let mut pooled_scores = vec![0.0; labels.len()];
    for fold in &folds {
        let test: Vec<usize> = fold.clone();
        let train: Vec<usize> = (0..labels.len()).filter(|i| !test.contains(i)).collect();
        let x = DMatrix::from_fn(train.len(), d + 1, |r, c| {
            if c == d {
                1.0
            } else {
                features[train[r]][c]
            }
        });
        let y = DVector::from_fn(train.len(), |r, _| {
            if labels[train[r]] == 1 {
                1.0
            } else {
                -1.0
            }
        });
        let mut gram = x.transpose() * &x;
        for i in 0..=d {
            gram[(i, i)] += lambda;
        }
        let rhs = x.transpose() * y;
        let w = gram
            .cholesky()
            .ok_or_else(|| Error::Graph("ridge system is not positive definite".into()))?
            .solve(&rhs);
        for &i in &test {
            let mut z = w[d];
            for (j, &v) in features[i].iter().enumerate() {
                z += w[j] * v;
            }
            pooled_scores[i] = 1.0 / (1.0 + (-z).exp());
        }
    }
    compute_metrics(&pooled_scores, labels)
}

/// k-nearest-neighbor probe (Euclidean, k = 5, distance ties broken by the
/// lower subject index). The score is the positive fraction among the
/// neighbors; metrics are pooled over folds.
pub fn knn_probe(
    features: &[Vec<f64>],
    labels: &[u8],
    k_folds: usize,
    seed: u64,
) -> Result<Metrics> {
    check_probe_inputs(features, labels)?;
    let folds = probe_folds(labels, k_folds, seed)?;
    let k_neighbors = 5usize;

    let mut pooled_scores = vec![0.0; labels.len()];
    for fold in &folds {
        let test: Vec<usize> = fold.clone();
        let train: Vec<usize> = (0..labels.len()).filter(|i| !test.contains(i)).collect();
        for &i in &test {
            let mut dists: Vec<(f64, usize)> = train
                .iter()
                .map(|&j| {
                    let d2: f64 = features[i]
                        .iter()
                        .zip(&features[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d2, j)
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let take = k_neighbors.min(dists.len());
            let pos = dists[..take]
                .iter()
                .filter(|&&(_, j)| labels[j] == 1)
                .count();
            pooled_scores[i] = pos as f64 / take as f64;
        }
    }
    compute_metrics(&pooled_scores, labels)
}
