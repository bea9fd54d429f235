use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::TabularDataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Mcar,
    Mar,
    Mnar,
    /// Batch-level masking applied during training.
    Surrogate,
    /// Mask read from data or from disk.
    Observed,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
            Mechanism::Mnar => "mnar",
            Mechanism::Surrogate => "surrogate",
            Mechanism::Observed => "observed",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            "mnar" => Ok(Mechanism::Mnar),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

/// Binary `N × d` observedness matrix: `true` = observed, `false` = missing.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    pub mechanism: Mechanism,
    /// Requested missing rate (the measured one is [`missing_fraction`](Self::missing_fraction)).
    pub rate: f64,
}

impl MaskMatrix {
    pub fn all_observed(rows: usize, cols: usize) -> Self {
        MaskMatrix {
            rows,
            cols,
            bits: vec![true; rows * cols],
            mechanism: Mechanism::Observed,
            rate: 0.0,
        }
    }

    /// Cells present in `ds` (non-`NaN`) are observed.
    pub fn from_dataset(ds: &TabularDataset) -> Self {
        MaskMatrix {
            rows: ds.n_rows(),
            cols: ds.n_cols(),
            bits: ds.values.data().iter().map(|v| !v.is_nan()).collect(),
            mechanism: Mechanism::Observed,
            rate: 0.0,
        }
    }

    pub(crate) fn from_bits(
        rows: usize,
        cols: usize,
        bits: Vec<bool>,
        mechanism: Mechanism,
        rate: f64,
    ) -> Self {
        debug_assert_eq!(bits.len(), rows * cols);
        MaskMatrix {
            rows,
            cols,
            bits,
            mechanism,
            rate,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, observed: bool) {
        self.bits[i * self.cols + j] = observed;
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.missing_count() as f64 / self.bits.len() as f64
        }
    }

    pub fn column_missing_count(&self, j: usize) -> usize {
        (0..self.rows).filter(|&i| !self.is_observed(i, j)).count()
    }

    /// Cell-wise AND: observed only where both are.
    pub fn and(&self, other: &MaskMatrix) -> Result<MaskMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "mask and",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(MaskMatrix {
            rows: self.rows,
            cols: self.cols,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a && *b)
                .collect(),
            mechanism: self.mechanism,
            rate: self.rate,
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> MaskMatrix {
        let mut bits = Vec::with_capacity(rows.len() * self.cols);
        for &i in rows {
            bits.extend_from_slice(&self.bits[i * self.cols..(i + 1) * self.cols]);
        }
        MaskMatrix {
            rows: rows.len(),
            cols: self.cols,
            bits,
            mechanism: self.mechanism,
            rate: self.rate,
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> MaskMatrix {
        let mut bits = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            bits.extend(cols.iter().map(|&j| self.is_observed(i, j)));
        }
        MaskMatrix {
            rows: self.rows,
            cols: cols.len(),
            bits,
            mechanism: self.mechanism,
            rate: self.rate,
        }
    }

    /// Returns a copy of `ds` with every masked cell set to `NaN`.
    pub fn apply(&self, ds: &TabularDataset) -> Result<TabularDataset> {
        if self.shape() != ds.values.shape() {
            return Err(Error::dim(
                "mask apply",
                format!("mask {:?} vs dataset {:?}", self.shape(), ds.values.shape()),
            ));
        }
        let mut out = ds.clone();
        for (v, &b) in out.values.data_mut().iter_mut().zip(&self.bits) {
            if !b {
                *v = f64::NAN;
            }
        }
        Ok(out)
    }

    /// Writes one line per row of comma-separated `0`/`1`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::with_capacity(self.bits.len() * 2);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j > 0 {
                    text.push(',');
                }
                text.push(if self.is_observed(i, j) { '1' } else { '0' });
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<MaskMatrix> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut bits = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for (r, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if *cols.get_or_insert(fields.len()) != fields.len() {
                return Err(Error::Parse {
                    row: r + 1,
                    column: "*".into(),
                    detail: format!("expected {} fields, got {}", cols.unwrap(), fields.len()),
                });
            }
            for (j, f) in fields.iter().enumerate() {
                bits.push(match *f {
                    "1" => true,
                    "0" => false,
                    other => {
                        return Err(Error::Parse {
                            row: r + 1,
                            column: j.to_string(),
                            detail: format!("mask cell {other:?} is not 0/1"),
                        })
                    }
                });
            }
            rows += 1;
        }
        let cols = cols.unwrap_or(0);
        let mut m = MaskMatrix::from_bits(rows, cols, bits, Mechanism::Observed, 0.0);
        m.rate = m.missing_fraction();
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut m = MaskMatrix::all_observed(3, 4);
        m.set(0, 1, false);
        m.set(2, 3, false);
        let f = tempfile::NamedTempFile::new().unwrap();
        m.write_csv(f.path()).unwrap();
        let back = MaskMatrix::read_csv(f.path()).unwrap();
        assert_eq!(back.shape(), (3, 4));
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(back.is_observed(i, j), m.is_observed(i, j));
            }
        }
        assert!((back.rate - 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_binary_cell() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "1,0\n1,2\n").unwrap();
        assert!(MaskMatrix::read_csv(f.path()).is_err());
    }
}
