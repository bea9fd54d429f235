//! `egg-gae` command-line runner: corrupt, train, impute, evaluate,
//! benchmark and report.
//!
//! Settings come from an optional JSON config; flags override single keys
//! and `--set a.b=value` overrides any nested key. Failures exit nonzero
//! with one line `error[<kind>]: <message>` on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use egg_gae::experiment::{
    cmd_benchmark, cmd_corrupt, cmd_evaluate, cmd_impute, cmd_report, cmd_train, run_pipeline, ExperimentConfig,
};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(name = "egg-gae", version, about = "Graph-based imputation of tabular data with missing values")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate missingness and draw the train/validation split.
    Corrupt(ConfigArgs),
    /// Train the model or fit the baseline imputer.
    Train(ConfigArgs),
    /// Impute the initially missing cells and export a CSV.
    Impute(ConfigArgs),
    /// Score the imputation and write a results row.
    Evaluate(ConfigArgs),
    /// corrupt, train, impute and evaluate in one go.
    Run(ConfigArgs),
    /// Run the configured grid and write results.csv under the output root.
    Benchmark(ConfigArgs),
    /// Aggregate a results CSV into wins, rankings and timings.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON experiment config; unspecified keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV path or synthetic:ROWS:NUMERIC[:CATEGORICAL[:SEED]].
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// mcar, mar or mnar.
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long)]
    rate: Option<f64>,
    /// egg, kegg, nn_ablation, mean or knn.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Output root (the EGG_GAE_OUTPUT environment variable wins).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long = "k_nn", alias = "k-nn")]
    k_nn: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long = "max_epochs", alias = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "learning_rate", alias = "learning-rate")]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Comma-separated grid axes for `benchmark`.
    #[arg(long, value_delimiter = ',')]
    datasets: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    mechanisms: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Override any key by dotted path, e.g. `train.weights.gamma=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Results CSV (default: results.csv under the output root).
    #[arg(long)]
    results: Option<PathBuf>,
    /// Where summary.json and report.txt go (default: next to the CSV).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Parses `raw` as JSON, falling back to a plain string.
fn json_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &str, value: Value) -> anyhow::Result<()> {
    let mut at = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (k, key) in keys.iter().enumerate() {
        let obj = at
            .as_object_mut()
            .ok_or_else(|| anyhow!("cannot set `{path}`: `{}` is not an object", keys[..k].join(".")))?;
        if k + 1 == keys.len() {
            if !obj.contains_key(*key) {
                return Err(anyhow!("unknown config key `{path}`"));
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        at = obj.get_mut(*key).ok_or_else(|| anyhow!("unknown config key `{path}`"))?;
    }
    Ok(())
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        let mut v = serde_json::to_value(&base)?;
        let mut pairs: Vec<(String, Value)> = Vec::new();
        let mut put = |k: &str, val: Option<Value>| {
            if let Some(val) = val {
                pairs.push((k.to_string(), val));
            }
        };
        put("dataset", self.dataset.clone().map(Value::from));
        put("schema", self.schema.as_ref().map(|p| Value::from(p.display().to_string())));
        put("mechanism", self.mechanism.as_ref().map(|s| Value::from(s.to_ascii_lowercase())));
        put("rate", self.rate.map(Value::from));
        put("method", self.method.as_ref().map(|s| Value::from(s.to_ascii_lowercase())));
        put("seed", self.seed.map(Value::from));
        put("runs", self.runs.map(Value::from));
        put("output", self.output.as_ref().map(|p| Value::from(p.display().to_string())));
        put("ensemble", self.ensemble.map(Value::from));
        put("k_nn", self.k_nn.map(Value::from));
        put("workers", self.workers.map(Value::from));
        put("train.max_epochs", self.max_epochs.map(Value::from));
        put("train.batch_size", self.batch_size.map(Value::from));
        put("train.learning_rate", self.learning_rate.map(Value::from));
        put("train.patience", self.patience.map(Value::from));
        put("train.hidden", self.hidden.map(Value::from));
        let lower = |xs: &[String]| Value::from(xs.iter().map(|s| s.to_ascii_lowercase()).collect::<Vec<_>>());
        put("datasets", (!self.datasets.is_empty()).then(|| Value::from(self.datasets.clone())));
        put("mechanisms", (!self.mechanisms.is_empty()).then(|| lower(&self.mechanisms)));
        put("rates", (!self.rates.is_empty()).then(|| Value::from(self.rates.clone())));
        put("methods", (!self.methods.is_empty()).then(|| lower(&self.methods)));
        for s in &self.set {
            let (k, raw) = s.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
            pairs.push((k.trim().to_string(), json_value(raw.trim())));
        }
        for (k, val) in pairs {
            set_path(&mut v, &k, val)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Corrupt(a) => {
            let p = cmd_corrupt(&a.resolve()?)?;
            println!("{}", p.dir.display());
        }
        Command::Train(a) => {
            let p = cmd_train(&a.resolve()?)?;
            println!("{}", p.dir.display());
        }
        Command::Impute(a) => {
            let p = cmd_impute(&a.resolve()?)?;
            println!("{}", p.imputed().display());
        }
        Command::Evaluate(a) => println!("{}", serde_json::to_string(&cmd_evaluate(&a.resolve()?)?)?),
        Command::Run(a) => println!("{}", serde_json::to_string(&run_pipeline(&a.resolve()?)?)?),
        Command::Benchmark(a) => {
            let out = cmd_benchmark(&a.resolve()?)?;
            for f in &out.failures {
                eprintln!(
                    "warning: run {}/{}/{}/{}/{} failed: {}",
                    f.dataset, f.mechanism, f.rate, f.method, f.seed, f.error
                );
            }
            println!("{}", out.results.display());
        }
        Command::Report(a) => {
            let results = match a.results {
                Some(p) => p,
                None => a.config.resolve()?.output_root().join("results.csv"),
            };
            print!("{}", cmd_report(&results, a.out.as_deref())?.text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<egg_gae::Error>().map_or("cli", egg_gae::Error::kind);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_keys() {
        let a = ConfigArgs {
            rate: Some(0.4),
            method: Some("KNN".into()),
            max_epochs: Some(7),
            set: vec!["train.weights.gamma=1".into(), "train.sampler=\"kegg\"".into()],
            ..Default::default()
        };
        let cfg = a.resolve().unwrap();
        assert_eq!(cfg.rate, 0.4);
        assert_eq!(cfg.method, egg_gae::experiment::Method::Knn);
        assert_eq!(cfg.train.max_epochs, 7);
        assert_eq!(cfg.train.weights.gamma, 1.0);
        assert_eq!(cfg.train.sampler, egg_gae::model::SamplerKind::Kegg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let a = ConfigArgs {
            set: vec!["train.nope=1".into()],
            ..Default::default()
        };
        assert!(a.resolve().is_err());
        let a = ConfigArgs {
            rate: Some(1.5),
            ..Default::default()
        };
        assert!(a.resolve().is_err());
    }

    #[test]
    fn bare_strings_are_accepted_by_set() {
        assert_eq!(json_value("mar"), Value::from("mar"));
        assert_eq!(json_value("0.5"), Value::from(0.5));
    }
}
