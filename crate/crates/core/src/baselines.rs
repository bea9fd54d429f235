//! Reference imputers: column mean / modal class, and k-nearest-neighbour
//! donors under an overlap-normalized Euclidean distance.

use std::cmp::Ordering;

use crate::dataio::{ColumnStats, TabularDataset};
use crate::error::{Error, Result};
use crate::missingness::MaskMatrix;

pub const DEFAULT_K_NN: usize = 5;

fn check_shapes(ds: &TabularDataset, mask: &MaskMatrix, stats: &ColumnStats) -> Result<()> {
    if mask.shape() != (ds.n_rows(), ds.n_cols()) {
        return Err(Error::dim(
            "imputer mask",
            format!("{:?} for a {}×{} dataset", mask.shape(), ds.n_rows(), ds.n_cols()),
        ));
    }
    if stats.columns.len() != ds.n_cols() {
        return Err(Error::dim(
            "imputer statistics",
            format!("{} columns for a dataset with {}", stats.columns.len(), ds.n_cols()),
        ));
    }
    Ok(())
}

/// Fills every cell missing in `mask` with the column statistic of `stats`
/// (fitted on observed training cells). `ds` is on the z-scored scale.
pub fn mean_impute(ds: &TabularDataset, mask: &MaskMatrix, stats: &ColumnStats) -> Result<TabularDataset> {
    check_shapes(ds, mask, stats)?;
    let mut out = ds.clone();
    for i in 0..ds.n_rows() {
        for j in 0..ds.n_cols() {
            if !mask.is_observed(i, j) {
                out.values.set(i, j, stats.normalized_fill(j));
            }
        }
    }
    Ok(out)
}

/// Distance between rows `a` and `b` over the columns observed in both:
/// `sqrt(d / overlap · Σ δ²)` with `δ` the numeric difference or a 0/1
/// categorical mismatch. `None` when no column overlaps.
pub fn overlap_distance(ds: &TabularDataset, mask: &MaskMatrix, a: usize, b: usize) -> Option<f64> {
    let d = ds.n_cols();
    let mut sum = 0.0;
    let mut overlap = 0usize;
    for j in 0..d {
        if mask.is_observed(a, j) && mask.is_observed(b, j) {
            let (x, y) = (ds.values.get(a, j), ds.values.get(b, j));
            let delta = if ds.columns[j].is_categorical() {
                if x == y {
                    0.0
                } else {
                    1.0
                }
            } else {
                x - y
            };
            sum += delta * delta;
            overlap += 1;
        }
    }
    (overlap > 0).then(|| (sum * d as f64 / overlap as f64).sqrt())
}

/// Most frequent class among `labels`, smallest class on ties.
fn majority(labels: impl Iterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes.max(1)];
    for c in labels {
        counts[c] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// k-NN imputation. For each missing cell `(i, j)` the donors are the other
/// rows observing column `j` and sharing at least one observed column with
/// row `i`, ordered by distance then row index; the `k_nn` nearest give the
/// mean (numeric) or majority class (categorical). Without donors the
/// column statistic of `stats` is used.
pub fn knn_impute(ds: &TabularDataset, mask: &MaskMatrix, k_nn: usize, stats: &ColumnStats) -> Result<TabularDataset> {
    if k_nn == 0 {
        return Err(Error::Contract("k_nn must be at least 1".into()));
    }
    check_shapes(ds, mask, stats)?;
    let (n, d) = (ds.n_rows(), ds.n_cols());
    let mut out = ds.clone();
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        if (0..d).all(|j| mask.is_observed(i, j)) {
            continue;
        }
        ranked.clear();
        ranked.extend((0..n).filter(|&r| r != i).filter_map(|r| overlap_distance(ds, mask, i, r).map(|dist| (dist, r))));
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        for j in 0..d {
            if mask.is_observed(i, j) {
                continue;
            }
            let donors: Vec<usize> = ranked
                .iter()
                .filter(|&&(_, r)| mask.is_observed(r, j))
                .take(k_nn)
                .map(|&(_, r)| r)
                .collect();
            let v = if donors.is_empty() {
                stats.normalized_fill(j)
            } else if ds.columns[j].is_categorical() {
                majority(
                    donors.iter().map(|&r| ds.values.get(r, j) as usize),
                    ds.columns[j].cardinality(),
                ) as f64
            } else {
                donors.iter().map(|&r| ds.values.get(r, j)).sum::<f64>() / donors.len() as f64
            };
            out.values.set(i, j, v);
        }
    }
    Ok(out)
}
