use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{run_pipeline, write_json, ExperimentConfig, RunPaths};
use crate::error::{Error, Result};
use crate::evaluation::{
    count_of_wins, read_results, unified_average_ranking, write_results, MetricReport, Ranking, Wins,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub dataset: String,
    pub mechanism: String,
    pub rate: f64,
    pub method: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct BenchmarkOutcome {
    /// Successful runs, in grid order.
    pub reports: Vec<MetricReport>,
    pub failures: Vec<RunFailure>,
    pub results: PathBuf,
}

/// Runs the expanded grid on `cfg.workers` threads and writes
/// `results.csv` (plus `failures.json` when some runs failed) under the
/// output root. Rows follow grid order whatever the completion order.
pub fn cmd_benchmark(cfg: &ExperimentConfig) -> Result<BenchmarkOutcome> {
    cfg.validate()?;
    let grid = cfg.expand();
    let slots: Vec<Mutex<Option<Result<MetricReport>>>> = grid.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = cfg.workers.clamp(1, grid.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = grid.get(k) else { break };
                log::info!(
                    "run {}/{}: {} {} {} {} seed {}",
                    k + 1,
                    grid.len(),
                    run.dataset,
                    run.mechanism,
                    run.rate,
                    run.method,
                    run.seed
                );
                let r = run_pipeline(run);
                *slots[k].lock().expect("result slot") = Some(r);
            });
        }
    });

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (run, slot) in grid.iter().zip(slots) {
        match slot.into_inner().expect("result slot").expect("every run executed") {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::warn!("run failed: {e}");
                let dataset = run.source().map(|s| s.name()).unwrap_or_else(|_| run.dataset.clone());
                if let Ok(p) = RunPaths::new(run) {
                    if std::fs::create_dir_all(&p.dir).is_ok() {
                        let _ = std::fs::write(p.dir.join("error.txt"), e.to_string());
                    }
                }
                failures.push(RunFailure {
                    dataset,
                    mechanism: run.mechanism.to_string(),
                    rate: run.rate,
                    method: run.method.to_string(),
                    seed: run.seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let root = cfg.output_root();
    let results = root.join("results.csv");
    write_results(&results, &reports)?;
    let failures_path = root.join("failures.json");
    if failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path).map_err(|e| Error::io(&failures_path, e))?;
        }
    } else {
        write_json(&failures_path, &failures)?;
    }
    Ok(BenchmarkOutcome {
        reports,
        failures,
        results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStat {
    pub runs: usize,
    pub mean_train_seconds: Option<f64>,
    pub mean_infer_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: usize,
    pub wins: Wins,
    pub ranking: Ranking,
    pub timing: BTreeMap<String, TimingStat>,
}

impl ReportSummary {
    pub fn from_reports(reports: &[MetricReport]) -> Self {
        let mut timing = BTreeMap::new();
        let mut by_method: BTreeMap<&str, Vec<&MetricReport>> = BTreeMap::new();
        for r in reports {
            by_method.entry(&r.method).or_default().push(r);
        }
        for (m, rs) in by_method {
            let mean = |f: fn(&MetricReport) -> Option<f64>| {
                let v: Vec<f64> = rs.iter().filter_map(|r| f(r)).collect();
                (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
            };
            timing.insert(
                m.to_string(),
                TimingStat {
                    runs: rs.len(),
                    mean_train_seconds: mean(|r| r.train_seconds),
                    mean_infer_seconds: mean(|r| r.infer_seconds),
                },
            );
        }
        ReportSummary {
            runs: reports.len(),
            wins: count_of_wins(reports),
            ranking: unified_average_ranking(reports),
            timing,
        }
    }

    pub fn text(&self) -> String {
        let mut s = format!("runs: {}\n\ncount of wins\n{}\n", self.runs, self.wins.table());
        s.push_str(&format!("unified average ranking\n{}", self.ranking.table()));
        for n in &self.ranking.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s.push_str(&format!("\n{:<16} {:>6} {:>14} {:>14}\n", "method", "runs", "train_s", "infer_s"));
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        for (m, t) in &self.timing {
            s.push_str(&format!(
                "{m:<16} {:>6} {:>14} {:>14}\n",
                t.runs,
                f(t.mean_train_seconds),
                f(t.mean_infer_seconds)
            ));
        }
        s
    }
}

/// Aggregates a results CSV into `summary.json` and `report.txt` inside
/// `out_dir` (default: next to the CSV).
pub fn cmd_report(results: &Path, out_dir: Option<&Path>) -> Result<ReportSummary> {
    let reports = read_results(results)?;
    let summary = ReportSummary::from_reports(&reports);
    let dir = out_dir
        .map(Path::to_path_buf)
        .or_else(|| results.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    write_json(&dir.join("summary.json"), &summary)?;
    let text_path = dir.join("report.txt");
    std::fs::write(&text_path, summary.text()).map_err(|e| Error::io(&text_path, e))?;
    Ok(summary)
}
