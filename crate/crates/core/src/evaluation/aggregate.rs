//! Cross-run aggregation: count of wins per method and the unified average
//! ranking over datasets, metrics and noise levels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::MetricReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Rmse,
    Mae,
    CatAccuracy,
    DownstreamAccuracy,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Rmse, Metric::Mae, Metric::CatAccuracy, Metric::DownstreamAccuracy];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Mae => "mae",
            Metric::CatAccuracy => "cat_accuracy",
            Metric::DownstreamAccuracy => "downstream_accuracy",
        }
    }

    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::Rmse | Metric::Mae)
    }

    pub fn value(self, r: &MetricReport) -> Option<f64> {
        match self {
            Metric::Rmse => r.rmse,
            Metric::Mae => r.mae,
            Metric::CatAccuracy => r.cat_accuracy,
            Metric::DownstreamAccuracy => r.downstream_accuracy,
        }
    }
}

/// `(dataset, mechanism, rate)`.
type GroupKey = (String, String, String);

/// Per group and method, the metric averaged over seeds (defined runs only).
fn grouped(reports: &[MetricReport], metric: Metric) -> BTreeMap<GroupKey, BTreeMap<String, f64>> {
    let mut sums: BTreeMap<GroupKey, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for r in reports {
        if let Some(v) = metric.value(r) {
            let key = (r.dataset.clone(), r.mechanism.clone(), r.rate.to_string());
            let e = sums.entry(key).or_default().entry(r.method.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(k, m)| (k, m.into_iter().map(|(name, (s, c))| (name, s / c as f64)).collect()))
        .collect()
}

fn methods(reports: &[MetricReport]) -> BTreeSet<String> {
    reports.iter().map(|r| r.method.clone()).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Wins {
    pub total: BTreeMap<String, usize>,
    pub by_metric: BTreeMap<String, BTreeMap<String, usize>>,
}

impl Wins {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let metrics: Vec<&String> = self.by_metric.keys().collect();
        let _ = write!(s, "{:<16}", "method");
        for m in &metrics {
            let _ = write!(s, " {m:>20}");
        }
        let _ = writeln!(s, " {:>8}", "total");
        for (method, total) in &self.total {
            let _ = write!(s, "{method:<16}");
            for m in &metrics {
                let _ = write!(s, " {:>20}", self.by_metric[*m].get(method).copied().unwrap_or(0));
            }
            let _ = writeln!(s, " {total:>8}");
        }
        s
    }
}

/// For every `(dataset, mechanism, rate)` group and metric with at least
/// two methods, credits every method attaining the best value.
pub fn count_of_wins(reports: &[MetricReport]) -> Wins {
    let all = methods(reports);
    let mut wins = Wins {
        total: all.iter().map(|m| (m.clone(), 0)).collect(),
        by_metric: BTreeMap::new(),
    };
    for metric in Metric::ALL {
        let mut tally: BTreeMap<String, usize> = all.iter().map(|m| (m.clone(), 0)).collect();
        let mut any = false;
        for vals in grouped(reports, metric).values() {
            if vals.len() < 2 {
                continue;
            }
            any = true;
            let best = if metric.lower_is_better() {
                vals.values().copied().fold(f64::INFINITY, f64::min)
            } else {
                vals.values().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            for (m, &v) in vals {
                if v == best {
                    *tally.get_mut(m).expect("method registered") += 1;
                    *wins.total.get_mut(m).expect("method registered") += 1;
                }
            }
        }
        if any {
            wins.by_metric.insert(metric.name().to_string(), tally);
        }
    }
    wins
}

/// Ranks (1 = best) with tied values sharing the average of their ranks.
pub fn average_ranks(values: &[f64], lower_is_better: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if lower_is_better {
            o
        } else {
            o.reverse()
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let r = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankStat {
    pub mean: f64,
    pub std: f64,
    /// Number of `(metric, noise level)` cells the method was ranked in.
    pub cells: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub methods: BTreeMap<String, RankStat>,
    /// Exclusions made while ranking.
    pub notes: Vec<String>,
}

impl Ranking {
    pub fn table(&self) -> String {
        let mut rows: Vec<(&String, &RankStat)> = self.methods.iter().collect();
        rows.sort_by(|a, b| a.1.mean.total_cmp(&b.1.mean).then(a.0.cmp(b.0)));
        let mut s = format!("{:<16} {:>10} {:>10} {:>6}\n", "method", "mean_rank", "std", "cells");
        for (m, r) in rows {
            let _ = writeln!(s, "{m:<16} {:>10.4} {:>10.4} {:>6}", r.mean, r.std, r.cells);
        }
        s
    }
}

/// Ranks methods per dataset within each `(metric, mechanism, rate)` cell,
/// averages the ranks over datasets, then reports each method's mean and
/// population standard deviation over cells. Methods absent from a
/// dataset/cell are excluded there and noted.
pub fn unified_average_ranking(reports: &[MetricReport]) -> Ranking {
    let all = methods(reports);
    let mut per_cell: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut notes = Vec::new();
    for metric in Metric::ALL {
        // (mechanism, rate) -> method -> ranks over datasets
        let mut cells: BTreeMap<(String, String), BTreeMap<String, Vec<f64>>> = BTreeMap::new();
        for ((dataset, mech, rate), vals) in grouped(reports, metric) {
            if vals.len() < 2 {
                continue;
            }
            for m in all.iter().filter(|m| !vals.contains_key(*m)) {
                notes.push(format!(
                    "{m} has no {} for {dataset}/{mech}/{rate}; excluded there",
                    metric.name()
                ));
            }
            let names: Vec<&String> = vals.keys().collect();
            let v: Vec<f64> = vals.values().copied().collect();
            let ranks = average_ranks(&v, metric.lower_is_better());
            let cell = cells.entry((mech, rate)).or_default();
            for (name, r) in names.into_iter().zip(ranks) {
                cell.entry(name.clone()).or_default().push(r);
            }
        }
        for per_method in cells.into_values() {
            for (m, ranks) in per_method {
                per_cell
                    .entry(m)
                    .or_default()
                    .push(ranks.iter().sum::<f64>() / ranks.len() as f64);
            }
        }
    }
    let methods = per_cell
        .into_iter()
        .map(|(m, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            (
                m,
                RankStat {
                    mean,
                    std: var.sqrt(),
                    cells: v.len(),
                },
            )
        })
        .collect();
    Ranking { methods, notes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(dataset: &str, rate: f64, method: &str, rmse: f64, acc: Option<f64>) -> MetricReport {
        MetricReport {
            dataset: dataset.into(),
            mechanism: "mcar".into(),
            rate,
            method: method.into(),
            rmse: Some(rmse),
            downstream_accuracy: acc,
            ..Default::default()
        }
    }

    #[test]
    fn strict_winner_takes_all() {
        let r = vec![
            rep("a", 0.1, "x", 0.5, Some(0.9)),
            rep("a", 0.1, "y", 0.7, Some(0.8)),
            rep("b", 0.1, "x", 0.4, Some(0.7)),
            rep("b", 0.1, "y", 0.6, Some(0.6)),
        ];
        let w = count_of_wins(&r);
        assert_eq!(w.total["x"], 4);
        assert_eq!(w.total["y"], 0);
        assert_eq!(w.by_metric["rmse"]["x"], 2);
        assert!(!w.by_metric.contains_key("mae"));
    }

    #[test]
    fn ties_credit_everyone() {
        let r = vec![rep("a", 0.1, "x", 0.5, None), rep("a", 0.1, "y", 0.5, None)];
        let w = count_of_wins(&r);
        assert_eq!(w.total["x"], 1);
        assert_eq!(w.total["y"], 1);
    }

    #[test]
    fn seeds_are_averaged_before_comparison() {
        let mut r = vec![rep("a", 0.1, "x", 0.2, None), rep("a", 0.1, "y", 0.5, None)];
        let mut second = rep("a", 0.1, "x", 1.0, None);
        second.seed = 1;
        r.push(second);
        assert_eq!(count_of_wins(&r).total["y"], 1);
    }

    #[test]
    fn average_rank_ties() {
        assert_eq!(average_ranks(&[0.3, 0.1, 0.3, 0.5], true), vec![2.5, 1.0, 2.5, 4.0]);
        assert_eq!(average_ranks(&[0.3, 0.1, 0.3, 0.5], false), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn dominant_method_ranks_first_with_zero_spread() {
        let r = vec![
            rep("a", 0.1, "x", 0.5, Some(0.9)),
            rep("a", 0.1, "y", 0.7, Some(0.8)),
            rep("a", 0.3, "x", 0.6, Some(0.8)),
            rep("a", 0.3, "y", 0.9, Some(0.5)),
        ];
        let k = unified_average_ranking(&r);
        assert_eq!(k.methods["x"], RankStat { mean: 1.0, std: 0.0, cells: 4 });
        assert_eq!(k.methods["y"], RankStat { mean: 2.0, std: 0.0, cells: 4 });
    }

    #[test]
    fn full_tie_gives_average_rank() {
        let r = vec![rep("a", 0.1, "x", 0.5, None), rep("a", 0.1, "y", 0.5, None)];
        let k = unified_average_ranking(&r);
        assert_eq!(k.methods["x"].mean, 1.5);
        assert_eq!(k.methods["y"].mean, 1.5);
    }

    #[test]
    fn absent_method_is_noted() {
        let r = vec![
            rep("a", 0.1, "x", 0.5, None),
            rep("a", 0.1, "y", 0.7, None),
            rep("b", 0.1, "x", 0.5, None),
            rep("b", 0.1, "y", 0.4, None),
            rep("b", 0.1, "z", 0.3, None),
        ];
        let k = unified_average_ranking(&r);
        assert_eq!(k.notes.len(), 1);
        assert!(k.notes[0].starts_with("z"));
        // x: (1 + 3) / 2, y: (2 + 2) / 2, z: 1
        assert_eq!(k.methods["x"].mean, 2.0);
        assert_eq!(k.methods["y"].mean, 2.0);
        assert_eq!(k.methods["z"].mean, 1.0);
    }
}
