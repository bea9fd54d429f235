//! Experiment plumbing: each step reads and writes artifacts in a run
//! directory `<root>/<dataset>/<mechanism>/<rate>/<method>/<seed>/`, so any
//! step can be rerun from what its predecessors left on disk.

mod bench;
mod config;

pub use bench::{cmd_benchmark, cmd_report, BenchmarkOutcome, ReportSummary, TimingStat};
pub use config::{DatasetSource, ExperimentConfig, Method, OUTPUT_ENV};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::baselines::{knn_impute, mean_impute};
use crate::dataio::{split, write_csv, ColumnStats, Split, TabularDataset};
use crate::ensemble::ensemble_impute_grouped;
use crate::error::{Error, Result};
use crate::evaluation::{cat_accuracy, downstream_accuracy, mae, rmse, write_results, ForestConfig, MetricReport};
use crate::missingness::{corrupt, MaskMatrix};
use crate::seeds;
use crate::training::{train, History, TrainedModel};

/// Artifact locations inside one run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let source = cfg.source()?;
        Ok(RunPaths {
            dir: cfg
                .output_root()
                .join(source.name())
                .join(cfg.mechanism.to_string())
                .join(cfg.rate.to_string())
                .join(cfg.method.to_string())
                .join(cfg.seed.to_string()),
        })
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn mask(&self) -> PathBuf {
        self.dir.join("mask.csv")
    }
    pub fn split(&self) -> PathBuf {
        self.dir.join("split.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }
    pub fn history(&self) -> PathBuf {
        self.dir.join("history.json")
    }
    pub fn imputer(&self) -> PathBuf {
        self.dir.join("imputer.json")
    }
    pub fn imputed(&self) -> PathBuf {
        self.dir.join("imputed.csv")
    }
    pub fn impute_meta(&self) -> PathBuf {
        self.dir.join("impute.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Fitted baseline imputer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputerArtifact {
    pub method: Method,
    pub k_nn: usize,
    pub stats: ColumnStats,
    pub train_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputeMeta {
    pub infer_seconds: f64,
    pub ensemble: usize,
    pub passes: usize,
}

/// Ground truth, corruption and split of one run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub truth: TabularDataset,
    pub mask: MaskMatrix,
    pub split: Split,
    pub corrupted: TabularDataset,
    /// Fitted on observed cells of the training rows.
    pub stats: ColumnStats,
}

impl Prepared {
    pub fn load(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Self> {
        let truth = cfg.source()?.load()?;
        let mask = MaskMatrix::read_csv(ensure(paths.mask())?)?;
        if mask.shape() != truth.values.shape() {
            return Err(Error::dim(
                "run mask",
                format!("{:?} for a dataset of {:?}", mask.shape(), truth.values.shape()),
            ));
        }
        let split: Split = read_json(&paths.split())?;
        let corrupted = mask.apply(&truth)?;
        let stats = ColumnStats::fit(&corrupted.subset(&split.train), Some(&mask.select_rows(&split.train)));
        Ok(Prepared {
            truth,
            mask,
            split,
            corrupted,
            stats,
        })
    }
}

fn ensure(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

/// Simulates missingness over the whole dataset and draws the split.
/// Corruption and split depend on the dataset, mechanism, rate and seed
/// only, so every method of a run sees the same missing cells.
pub fn cmd_corrupt(cfg: &ExperimentConfig) -> Result<RunPaths> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg)?;
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    let truth = cfg.source()?.load()?;
    let mask = corrupt(&truth, cfg.mechanism, cfg.rate, seeds::derive(cfg.seed, "corrupt", 0))?;
    let corrupted = mask.apply(&truth)?;
    let sp = split(&corrupted, cfg.train_fraction, seeds::derive(cfg.seed, "split", 0))?;
    mask.write_csv(paths.mask())?;
    write_json(&paths.split(), &sp)?;
    write_json(&paths.config(), cfg)?;
    Ok(paths)
}

/// Trains the model (learned methods) or fits the imputer statistics.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunPaths> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg)?;
    let p = Prepared::load(cfg, &paths)?;
    if cfg.method.sampler().is_none() {
        let start = Instant::now();
        let stats = ColumnStats::fit(&p.corrupted.subset(&p.split.train), Some(&p.mask.select_rows(&p.split.train)));
        let artifact = ImputerArtifact {
            method: cfg.method,
            k_nn: cfg.k_nn,
            stats,
            train_seconds: start.elapsed().as_secs_f64(),
        };
        write_json(&paths.imputer(), &artifact)?;
        return Ok(paths);
    }
    let train_rows = p.stats.apply(&p.corrupted.subset(&p.split.train));
    let val_rows = p.stats.apply(&p.corrupted.subset(&p.split.validation));
    let result = train(
        &cfg.train_config(),
        &train_rows,
        &p.mask.select_rows(&p.split.train),
        &val_rows,
        &p.mask.select_rows(&p.split.validation),
    );
    let (mut trained, history) = match result {
        Ok(r) => r,
        Err(Error::Diverged { reason, checkpoint }) => {
            if let Some(c) = &checkpoint {
                c.save(paths.dir.join("checkpoint.diverged.json"))?;
            }
            return Err(Error::Diverged { reason, checkpoint });
        }
        Err(e) => return Err(e),
    };
    trained.stats = Some(p.stats.clone());
    trained.save(paths.checkpoint())?;
    history.save(paths.history())?;
    Ok(paths)
}

/// Fills every initially missing cell of the full dataset and exports it
/// on the original scale.
pub fn cmd_impute(cfg: &ExperimentConfig) -> Result<RunPaths> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg)?;
    let p = Prepared::load(cfg, &paths)?;
    let full = p.stats.apply(&p.corrupted);
    let start = Instant::now();
    let (imputed, ensemble, passes) = match cfg.method {
        Method::Mean | Method::Knn => {
            let a: ImputerArtifact = read_json(&paths.imputer())?;
            let out = if a.method == Method::Knn {
                knn_impute(&full, &p.mask, a.k_nn, &a.stats)?
            } else {
                mean_impute(&full, &p.mask, &a.stats)?
            };
            (out, 1, 1)
        }
        _ => {
            let trained = TrainedModel::load(paths.checkpoint())?;
            let tc = &trained.train_config;
            // training and validation rows are ensembled in separate batches
            let (imputed, passes) = ensemble_impute_grouped(
                &trained.model,
                &full,
                &p.mask,
                &[&p.split.train, &p.split.validation],
                cfg.ensemble,
                tc.batch_size,
                tc.tau_end,
                seeds::derive(cfg.seed, "ensemble", 0),
            )?;
            (imputed, cfg.ensemble, passes)
        }
    };
    let infer_seconds = start.elapsed().as_secs_f64();
    write_csv(&p.stats.invert(&imputed), paths.imputed())?;
    write_json(
        &paths.impute_meta(),
        &ImputeMeta {
            infer_seconds,
            ensemble,
            passes,
        },
    )?;
    Ok(paths)
}

/// Reads an imputed CSV written by [`cmd_impute`], mapping labels through
/// the columns of `like`.
pub fn read_imputed(path: &Path, like: &TabularDataset) -> Result<TabularDataset> {
    let path = ensure(path.to_path_buf())?;
    let mut r = csv::Reader::from_path(&path)?;
    let mut out = like.clone();
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if i >= like.n_rows() || rec.len() != like.n_cols() + 1 {
            return Err(Error::Schema(format!("{} does not match the dataset shape", path.display())));
        }
        for (j, c) in like.columns.iter().enumerate() {
            let cell = &rec[j];
            let v = if cell.is_empty() {
                f64::NAN
            } else if c.is_categorical() {
                c.labels.iter().position(|l| l == cell).ok_or_else(|| Error::Parse {
                    row: i + 1,
                    column: c.name.clone(),
                    detail: format!("unknown label `{cell}`"),
                })? as f64
            } else {
                cell.parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                    row: i + 1,
                    column: c.name.clone(),
                    detail: e.to_string(),
                })?
            };
            out.values.set(i, j, v);
        }
        n += 1;
    }
    if n != like.n_rows() {
        return Err(Error::Schema(format!("{} has {n} rows, expected {}", path.display(), like.n_rows())));
    }
    Ok(out)
}

/// Scores the imputation on the validation rows (z-scored with training
/// statistics) and writes a one-row results CSV.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg)?;
    let p = Prepared::load(cfg, &paths)?;
    let imputed = p.stats.apply(&read_imputed(&paths.imputed(), &p.truth)?);
    let truth = p.stats.apply(&p.truth);
    let val = &p.split.validation;
    let (t, x, m) = (truth.subset(val), imputed.subset(val), p.mask.select_rows(val));
    let forest = ForestConfig {
        seed: seeds::derive(cfg.seed, "forest", 0),
        ..cfg.forest.clone()
    };
    let train_seconds = if cfg.method.sampler().is_some() {
        read_json::<History>(&paths.history())?.train_seconds
    } else {
        read_json::<ImputerArtifact>(&paths.imputer())?.train_seconds
    };
    let meta: ImputeMeta = read_json(&paths.impute_meta())?;
    let report = MetricReport {
        dataset: cfg.source()?.name(),
        mechanism: cfg.mechanism.to_string(),
        rate: cfg.rate,
        method: cfg.method.to_string(),
        seed: cfg.seed,
        rmse: rmse(&t, &x, &m)?,
        mae: mae(&t, &x, &m)?,
        cat_accuracy: cat_accuracy(&t, &x, &m)?,
        downstream_accuracy: Some(downstream_accuracy(&imputed.subset(&p.split.train), &x, &forest)?),
        train_seconds: Some(train_seconds),
        infer_seconds: Some(meta.infer_seconds),
    };
    report.validate()?;
    write_results(paths.metrics(), std::slice::from_ref(&report))?;
    Ok(report)
}

/// corrupt → train → impute → evaluate.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<MetricReport> {
    cmd_corrupt(cfg)?;
    cmd_train(cfg)?;
    cmd_impute(cfg)?;
    cmd_evaluate(cfg)
}
