use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{load_csv, synthetic, SchemaFile, TabularDataset};
use crate::error::{Error, Result};
use crate::evaluation::ForestConfig;
use crate::missingness::Mechanism;
use crate::model::SamplerKind;
use crate::training::TrainConfig;

/// Environment variable overriding [`ExperimentConfig::output`].
pub const OUTPUT_ENV: &str = "EGG_GAE_OUTPUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Egg,
    Kegg,
    NnAblation,
    Mean,
    Knn,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Egg, Method::Kegg, Method::NnAblation, Method::Mean, Method::Knn];

    /// Graph sampler for the learned methods.
    pub fn sampler(self) -> Option<SamplerKind> {
        match self {
            Method::Egg => Some(SamplerKind::Egg),
            Method::Kegg => Some(SamplerKind::Kegg),
            Method::NnAblation => Some(SamplerKind::Identity),
            Method::Mean | Method::Knn => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Egg => "egg",
            Method::Kegg => "kegg",
            Method::NnAblation => "nn_ablation",
            Method::Mean => "mean",
            Method::Knn => "knn",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected egg, kegg, nn_ablation, mean or knn)")))
    }
}

/// Where a dataset comes from: a CSV path (schema sidecar alongside or
/// given explicitly) or `synthetic:N:D[:C[:SEED]]`.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Csv { path: PathBuf, schema: PathBuf },
    Synthetic { rows: usize, numeric: usize, categorical: usize, seed: u64 },
}

impl DatasetSource {
    pub fn parse(text: &str, schema: Option<&Path>) -> Result<Self> {
        if let Some(rest) = text.strip_prefix("synthetic:") {
            let parts: Vec<usize> = rest
                .split(':')
                .map(|p| p.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("bad synthetic dataset `{text}`: {e}")))?;
            if !(2..=4).contains(&parts.len()) || parts[0] < 4 || parts[1] == 0 {
                return Err(Error::Config(format!(
                    "synthetic dataset must be synthetic:ROWS:NUMERIC[:CATEGORICAL[:SEED]] with ROWS ≥ 4, got `{text}`"
                )));
            }
            return Ok(DatasetSource::Synthetic {
                rows: parts[0],
                numeric: parts[1],
                categorical: parts.get(2).copied().unwrap_or(0),
                seed: parts.get(3).copied().unwrap_or(0) as u64,
            });
        }
        let path = PathBuf::from(text);
        let schema = schema.map(Path::to_path_buf).unwrap_or_else(|| path.with_extension("schema.json"));
        Ok(DatasetSource::Csv { path, schema })
    }

    pub fn load(&self) -> Result<TabularDataset> {
        match self {
            DatasetSource::Synthetic {
                rows,
                numeric,
                categorical,
                seed,
            } => {
                let mut ds = if *categorical == 0 {
                    synthetic::two_cluster(*rows, *numeric, *seed)
                } else {
                    synthetic::two_cluster_mixed(*rows, *numeric, *categorical, *seed)
                };
                ds.name = self.name();
                Ok(ds)
            }
            DatasetSource::Csv { path, schema } => {
                for p in [path, schema] {
                    if !p.exists() {
                        return Err(Error::MissingArtifact(p.clone()));
                    }
                }
                let mut ds = load_csv(path, &SchemaFile::read(schema)?)?;
                ds.name = sanitize(&ds.name);
                Ok(ds)
            }
        }
    }

    /// Directory-safe dataset name.
    pub fn name(&self) -> String {
        match self {
            DatasetSource::Synthetic {
                rows,
                numeric,
                categorical,
                seed,
            } => format!("synthetic{rows}x{numeric}c{categorical}s{seed}"),
            DatasetSource::Csv { schema, path } => {
                let named = SchemaFile::read(schema).ok().and_then(|s| s.name);
                sanitize(&named.unwrap_or_else(|| {
                    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                }))
            }
        }
    }
}

fn sanitize(s: &str) -> String {
    let out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if out.is_empty() {
        "dataset".into()
    } else {
        out
    }
}

/// One experiment (or, through the list fields, a benchmark grid).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// CSV path or `synthetic:N:D[:C[:SEED]]`.
    pub dataset: String,
    pub schema: Option<PathBuf>,
    pub mechanism: Mechanism,
    pub rate: f64,
    pub method: Method,
    pub train: TrainConfig,
    /// Ensemble size for learned methods.
    pub ensemble: usize,
    pub k_nn: usize,
    pub forest: ForestConfig,
    pub train_fraction: f64,
    pub output: PathBuf,
    pub seed: u64,
    /// Repetitions; benchmark seeds are `seed, seed + 1, …`.
    pub runs: usize,
    /// Benchmark grid axes; an empty list means the single value above.
    pub datasets: Vec<String>,
    pub mechanisms: Vec<Mechanism>,
    pub rates: Vec<f64>,
    pub methods: Vec<Method>,
    /// Concurrent benchmark runs.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "synthetic:600:6".into(),
            schema: None,
            mechanism: Mechanism::Mcar,
            rate: 0.2,
            method: Method::Egg,
            train: TrainConfig::default(),
            ensemble: 5,
            k_nn: crate::baselines::DEFAULT_K_NN,
            forest: ForestConfig::default(),
            train_fraction: 0.7,
            output: PathBuf::from("runs"),
            seed: 0,
            runs: 1,
            datasets: Vec::new(),
            mechanisms: Vec::new(),
            rates: Vec::new(),
            methods: Vec::new(),
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for &r in std::iter::once(&self.rate).chain(&self.rates) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("rate must lie in [0, 1), got {r}")));
            }
        }
        for &m in std::iter::once(&self.mechanism).chain(&self.mechanisms) {
            if !matches!(m, Mechanism::Mcar | Mechanism::Mar | Mechanism::Mnar) {
                return Err(Error::Config(format!("mechanism must be mcar, mar or mnar, got {m}")));
            }
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.ensemble == 0 || self.k_nn == 0 {
            return Err(Error::Config("ensemble and k_nn must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction)));
        }
        self.train.validate()
    }

    /// Output root, honouring the environment override.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV).map(PathBuf::from).unwrap_or_else(|| self.output.clone())
    }

    pub fn source(&self) -> Result<DatasetSource> {
        DatasetSource::parse(&self.dataset, self.schema.as_deref())
    }

    /// Cartesian product of the grid axes (dataset, mechanism, rate,
    /// method, seed), in that nesting order.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let or = |v: &Vec<String>, d: &String| if v.is_empty() { vec![d.clone()] } else { v.clone() };
        let datasets = or(&self.datasets, &self.dataset);
        let mechanisms = if self.mechanisms.is_empty() { vec![self.mechanism] } else { self.mechanisms.clone() };
        let rates = if self.rates.is_empty() { vec![self.rate] } else { self.rates.clone() };
        let methods = if self.methods.is_empty() { vec![self.method] } else { self.methods.clone() };
        let mut out = Vec::new();
        for d in &datasets {
            for &mech in &mechanisms {
                for &rate in &rates {
                    for &method in &methods {
                        for r in 0..self.runs as u64 {
                            out.push(ExperimentConfig {
                                dataset: d.clone(),
                                mechanism: mech,
                                rate,
                                method,
                                seed: self.seed + r,
                                runs: 1,
                                datasets: Vec::new(),
                                mechanisms: Vec::new(),
                                rates: Vec::new(),
                                methods: Vec::new(),
                                ..self.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Training configuration with the method's sampler and the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            sampler: self.method.sampler().unwrap_or(self.train.sampler),
            seed: crate::seeds::derive(self.seed, "train", 0),
            ..self.train.clone()
        }
    }
}
