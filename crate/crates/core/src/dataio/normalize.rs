use serde::{Deserialize, Serialize};

use super::TabularDataset;
use crate::missingness::MaskMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnStat {
    Numerical { mean: f64, std: f64 },
    Categorical { mode: usize },
}

/// Per-column statistics used for z-scoring, its inverse, and mean/mode fill.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub columns: Vec<ColumnStat>,
}

const MIN_STD: f64 = 1e-12;

impl ColumnStats {
    /// Fits on cells that are present in `ds` and, when given, marked
    /// observed in `mask`. Standard deviations use denominator `N`; a
    /// degenerate column gets σ = 1. A column with no observed cells gets
    /// mean 0 / class 0.
    pub fn fit(ds: &TabularDataset, mask: Option<&MaskMatrix>) -> Self {
        let n = ds.n_rows();
        let columns = ds
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let observed = (0..n)
                    .filter(|&i| !ds.is_missing(i, j) && mask.is_none_or(|m| m.is_observed(i, j)));
                if c.is_categorical() {
                    let mut counts = vec![0usize; c.cardinality()];
                    for i in observed {
                        counts[ds.values.get(i, j) as usize] += 1;
                    }
                    if counts.iter().all(|&k| k == 0) {
                        log::warn!("column `{}` has no observed cells; mode set to 0", c.name);
                    }
                    // first maximum wins ties
                    let mode = counts
                        .iter()
                        .enumerate()
                        .fold(
                            (0, 0),
                            |best, (k, &cnt)| if cnt > best.1 { (k, cnt) } else { best },
                        )
                        .0;
                    ColumnStat::Categorical { mode }
                } else {
                    let vals: Vec<f64> = observed.map(|i| ds.values.get(i, j)).collect();
                    if vals.is_empty() {
                        log::warn!("column `{}` has no observed cells; mean set to 0", c.name);
                        return ColumnStat::Numerical {
                            mean: 0.0,
                            std: 1.0,
                        };
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / vals.len() as f64;
                    let std = var.sqrt();
                    ColumnStat::Numerical {
                        mean,
                        std: if std < MIN_STD { 1.0 } else { std },
                    }
                }
            })
            .collect();
        ColumnStats { columns }
    }

    /// z-scores numerical columns; categorical columns and missing cells are
    /// left as they are.
    pub fn apply(&self, ds: &TabularDataset) -> TabularDataset {
        let mut out = ds.clone();
        for (j, s) in self.columns.iter().enumerate() {
            if let ColumnStat::Numerical { mean, std } = *s {
                for i in 0..out.n_rows() {
                    let v = out.values.get(i, j);
                    out.values.set(i, j, (v - mean) / std);
                }
            }
        }
        out
    }

    pub fn invert(&self, ds: &TabularDataset) -> TabularDataset {
        let mut out = ds.clone();
        for (j, s) in self.columns.iter().enumerate() {
            if let ColumnStat::Numerical { mean, std } = *s {
                for i in 0..out.n_rows() {
                    let v = out.values.get(i, j);
                    out.values.set(i, j, v * std + mean);
                }
            }
        }
        out
    }

    /// Fill value for a column on the z-scored scale: 0 for numerical
    /// columns, the modal class for categorical ones.
    pub fn normalized_fill(&self, j: usize) -> f64 {
        match self.columns[j] {
            ColumnStat::Numerical { .. } => 0.0,
            ColumnStat::Categorical { mode } => mode as f64,
        }
    }

    /// Fill value on the original scale.
    pub fn raw_fill(&self, j: usize) -> f64 {
        match self.columns[j] {
            ColumnStat::Numerical { mean, .. } => mean,
            ColumnStat::Categorical { mode } => mode as f64,
        }
    }
}

/// Fits statistics on the observed cells of `ds` and returns the z-scored
/// dataset alongside them.
pub fn normalize(ds: &TabularDataset, mask: Option<&MaskMatrix>) -> (TabularDataset, ColumnStats) {
    let stats = ColumnStats::fit(ds, mask);
    (stats.apply(ds), stats)
}
