//! One results-CSV row per run; undefined metrics are written as `NA`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESULT_COLUMNS: [&str; 11] = [
    "dataset",
    "mechanism",
    "rate",
    "method",
    "seed",
    "rmse",
    "mae",
    "cat_accuracy",
    "downstream_accuracy",
    "train_seconds",
    "infer_seconds",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub mechanism: String,
    pub rate: f64,
    pub method: String,
    pub seed: u64,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub cat_accuracy: Option<f64>,
    pub downstream_accuracy: Option<f64>,
    pub train_seconds: Option<f64>,
    pub infer_seconds: Option<f64>,
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn parse(field: &str, row: usize, column: &str) -> Result<Option<f64>> {
    if field == "NA" {
        return Ok(None);
    }
    field.parse::<f64>().map(Some).map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        detail: e.to_string(),
    })
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rmse", self.rmse),
            ("mae", self.mae),
            ("cat_accuracy", self.cat_accuracy),
            ("downstream_accuracy", self.downstream_accuracy),
        ] {
            if v.is_some_and(|x| !x.is_finite()) {
                return Err(Error::Contract(format!("metric {name} is not finite")));
            }
        }
        for (name, v) in [("cat_accuracy", self.cat_accuracy), ("downstream_accuracy", self.downstream_accuracy)] {
            if v.is_some_and(|x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Contract(format!("{name} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.mechanism.clone(),
            self.rate.to_string(),
            self.method.clone(),
            self.seed.to_string(),
            fmt(self.rmse),
            fmt(self.mae),
            fmt(self.cat_accuracy),
            fmt(self.downstream_accuracy),
            fmt(self.train_seconds),
            fmt(self.infer_seconds),
        ]
    }

    /// Same run identity and metrics, timings ignored.
    pub fn same_outcome(&self, other: &MetricReport) -> bool {
        MetricReport {
            train_seconds: None,
            infer_seconds: None,
            ..self.clone()
        } == MetricReport {
            train_seconds: None,
            infer_seconds: None,
            ..other.clone()
        }
    }
}

/// Writes `reports` (header included), replacing the file.
pub fn write_results(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULT_COLUMNS)?;
    for r in reports {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULT_COLUMNS {
        return Err(Error::Schema(format!(
            "{} has header {header:?}, expected {RESULT_COLUMNS:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let f = |k: usize| parse(&rec[k], row, RESULT_COLUMNS[k]);
        let rate = f(2)?.ok_or_else(|| Error::Parse {
            row,
            column: "rate".into(),
            detail: "rate is required".into(),
        })?;
        let seed = rec[4].parse().map_err(|e: std::num::ParseIntError| Error::Parse {
            row,
            column: "seed".into(),
            detail: e.to_string(),
        })?;
        out.push(MetricReport {
            dataset: rec[0].to_string(),
            mechanism: rec[1].to_string(),
            rate,
            method: rec[3].to_string(),
            seed,
            rmse: f(5)?,
            mae: f(6)?,
            cat_accuracy: f(7)?,
            downstream_accuracy: f(8)?,
            train_seconds: f(9)?,
            infer_seconds: f(10)?,
        });
    }
    Ok(out)
}
