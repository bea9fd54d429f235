//! Mixed-type tabular datasets: loading, normalization and splitting.
//!
//! A [`TabularDataset`] keeps columns in file order. Numerical cells hold
//! floats, categorical cells hold class indices stored as `f64`, and a `NaN`
//! cell marks a value missing in the source file.

mod load;
mod normalize;
mod split;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use load::{load_csv, write_csv, SchemaColumn, SchemaFile};
pub use normalize::{normalize, ColumnStats};
pub use split::{split, Split};

use crate::error::{Error, Result};
use crate::ndmath::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numerical,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    /// Category labels in index order; empty for numerical columns.
    #[serde(default)]
    pub labels: Vec<String>,
}

impl ColumnSchema {
    pub fn numerical(name: impl Into<String>) -> Self {
        ColumnSchema {
            name: name.into(),
            kind: ColumnKind::Numerical,
            labels: Vec::new(),
        }
    }

    pub fn categorical(name: impl Into<String>, labels: Vec<String>) -> Self {
        ColumnSchema {
            name: name.into(),
            kind: ColumnKind::Categorical,
            labels,
        }
    }

    /// Number of classes `C_d` (zero for numerical columns).
    pub fn cardinality(&self) -> usize {
        self.labels.len()
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == ColumnKind::Categorical
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    pub name: String,
    pub columns: Vec<ColumnSchema>,
    /// `N × d`, file column order, `NaN` = missing.
    pub values: Tensor,
    pub targets: Vec<usize>,
    pub target_name: String,
    pub class_labels: Vec<String>,
}

impl TabularDataset {
    /// Validates the invariants and builds the dataset.
    pub fn new(
        name: impl Into<String>,
        columns: Vec<ColumnSchema>,
        values: Tensor,
        targets: Vec<usize>,
        target_name: impl Into<String>,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let ds = TabularDataset {
            name: name.into(),
            columns,
            values,
            targets,
            target_name: target_name.into(),
            class_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.values.shape();
        if n == 0 {
            return Err(Error::Schema("dataset has no rows".into()));
        }
        if d != self.columns.len() {
            return Err(Error::Schema(format!(
                "{d} value columns for {} schema columns",
                self.columns.len()
            )));
        }
        if self.targets.len() != n {
            return Err(Error::Schema(format!(
                "{} targets for {n} rows",
                self.targets.len()
            )));
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t >= self.class_labels.len()) {
            return Err(Error::Schema(format!(
                "target {t} outside {} classes",
                self.class_labels.len()
            )));
        }
        for (j, c) in self.columns.iter().enumerate() {
            if !c.is_categorical() {
                continue;
            }
            if c.cardinality() < 2 {
                return Err(Error::Schema(format!(
                    "categorical column `{}` has fewer than 2 classes",
                    c.name
                )));
            }
            for i in 0..n {
                let v = self.values.get(i, j);
                if !v.is_nan() && (v < 0.0 || v.fract() != 0.0 || v as usize >= c.cardinality()) {
                    return Err(Error::Schema(format!(
                        "row {i}, column `{}`: class index {v} outside [0, {})",
                        c.name,
                        c.cardinality()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Indices of numerical columns (`d_n` of them), in file order.
    pub fn numeric_columns(&self) -> Vec<usize> {
        (0..self.n_cols())
            .filter(|&j| !self.columns[j].is_categorical())
            .collect()
    }

    /// Indices of categorical columns (`d_c` of them), in file order.
    pub fn categorical_columns(&self) -> Vec<usize> {
        (0..self.n_cols())
            .filter(|&j| self.columns[j].is_categorical())
            .collect()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.categorical_columns()
            .into_iter()
            .map(|j| self.columns[j].cardinality())
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> TabularDataset {
        TabularDataset {
            name: self.name.clone(),
            columns: self.columns.clone(),
            values: self.values.select_rows(rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
            target_name: self.target_name.clone(),
            class_labels: self.class_labels.clone(),
        }
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.values.get(i, j).is_nan()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_out_of_range_class() {
        let cols = vec![ColumnSchema::categorical("c", vec!["a".into(), "b".into()])];
        let values = Tensor::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let r = TabularDataset::new("x", cols, values, vec![0, 0], "y", vec!["p".into()]);
        assert!(matches!(r, Err(Error::Schema(_))));
    }

    #[test]
    fn validate_rejects_empty() {
        let r = TabularDataset::new(
            "x",
            vec![ColumnSchema::numerical("a")],
            Tensor::zeros(0, 1),
            vec![],
            "y",
            vec!["p".into()],
        );
        assert!(r.is_err());
    }
}
