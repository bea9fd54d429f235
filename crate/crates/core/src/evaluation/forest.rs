//! Bagged CART classification forest (gini splits, bootstrap rows, random
//! feature subsets per split) for downstream accuracy on imputed data.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::TabularDataset;
use crate::error::{Error, Result};
use crate::ndmath::Tensor;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means `round(√p)`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 12,
            max_features: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

/// Numerical columns as-is, categorical columns one-hot encoded.
pub fn encode_features(ds: &TabularDataset) -> Result<Tensor> {
    let widths: Vec<usize> = ds
        .columns
        .iter()
        .map(|c| if c.is_categorical() { c.cardinality() } else { 1 })
        .collect();
    let p: usize = widths.iter().sum();
    let mut out = Tensor::zeros(ds.n_rows(), p);
    for i in 0..ds.n_rows() {
        let mut at = 0;
        for (j, &w) in widths.iter().enumerate() {
            let v = ds.values.get(i, j);
            if !v.is_finite() {
                return Err(Error::Contract(format!(
                    "forest input has a missing value at row {i}, column `{}`",
                    ds.columns[j].name
                )));
            }
            if ds.columns[j].is_categorical() {
                out.set(i, at + v as usize, 1.0);
            } else {
                out.set(i, at, v);
            }
            at += w;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf {
        class: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { class } => return class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Builder<'a, R: Rng> {
    x: &'a Tensor,
    y: &'a [usize],
    classes: usize,
    max_depth: usize,
    mtry: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
}

impl<R: Rng> Builder<'_, R> {
    /// Best `(feature, threshold, weighted impurity)` over a random subset
    /// of features; thresholds are midpoints between distinct values.
    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64, f64)> {
        let p = self.x.cols();
        let n = rows.len();
        let mut total = vec![0usize; self.classes];
        for &r in rows {
            total[self.y[r]] += 1;
        }
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted = rows.to_vec();
        for f in sample(self.rng, p, self.mtry.min(p)).into_iter() {
            sorted.sort_by(|&a, &b| self.x.get(a, f).total_cmp(&self.x.get(b, f)).then(a.cmp(&b)));
            let mut left = vec![0usize; self.classes];
            for k in 0..n - 1 {
                left[self.y[sorted[k]]] += 1;
                let (lo, hi) = (self.x.get(sorted[k], f), self.x.get(sorted[k + 1], f));
                if lo == hi {
                    continue;
                }
                let right: Vec<usize> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let nl = k + 1;
                let imp = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                if best.is_none_or(|b| imp < b.2) {
                    best = Some((f, lo + (hi - lo) / 2.0, imp));
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let mut counts = vec![0usize; self.classes];
        for &r in rows {
            counts[self.y[r]] += 1;
        }
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf {
            class: majority(&counts),
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || rows.len() < 2 {
            return id;
        }
        let Some((feature, threshold, _)) = self.best_split(rows) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x.get(i, feature) <= threshold);
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<Tree>,
    pub classes: usize,
    pub features: usize,
}

impl RandomForest {
    /// Fits the forest; tree `t` draws from its own seed stream.
    pub fn fit(x: &Tensor, y: &[usize], classes: usize, cfg: &ForestConfig) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || y.len() != n {
            return Err(Error::dim("forest fit", format!("{n} rows, {} labels", y.len())));
        }
        if cfg.n_trees == 0 || cfg.max_depth == 0 {
            return Err(Error::Config("forest needs n_trees ≥ 1 and max_depth ≥ 1".into()));
        }
        if let Some(&c) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Contract(format!("label {c} outside {classes} classes")));
        }
        if !x.is_finite() {
            return Err(Error::Contract("forest input has non-finite values".into()));
        }
        if y.iter().all(|&c| c == y[0]) {
            log::warn!("single-class training target; the forest predicts class {} everywhere", y[0]);
        }
        let mtry = cfg
            .max_features
            .unwrap_or_else(|| (p as f64).sqrt().round() as usize)
            .clamp(1, p.max(1));
        let trees = (0..cfg.n_trees)
            .map(|t| {
                let mut rng = seeds::rng(cfg.seed, "forest_tree", t as u64);
                let rows: Vec<usize> = if cfg.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut b = Builder {
                    x,
                    y,
                    classes,
                    max_depth: cfg.max_depth,
                    mtry,
                    rng: &mut rng,
                    nodes: Vec::new(),
                };
                b.grow(&rows, 0);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(RandomForest {
            trees,
            classes,
            features: p,
        })
    }

    /// Majority vote over trees, smallest class on ties.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.cols() != self.features {
            return Err(Error::dim(
                "forest predict",
                format!("{} features, fitted on {}", x.cols(), self.features),
            ));
        }
        Ok((0..x.rows())
            .map(|i| {
                let mut votes = vec![0usize; self.classes];
                for t in &self.trees {
                    votes[t.predict_row(x.row(i))] += 1;
                }
                majority(&votes)
            })
            .collect())
    }
}

/// Fits on the imputed training rows and returns the accuracy on the
/// imputed evaluation rows.
pub fn downstream_accuracy(train: &TabularDataset, eval: &TabularDataset, cfg: &ForestConfig) -> Result<f64> {
    let forest = RandomForest::fit(&encode_features(train)?, &train.targets, train.num_classes(), cfg)?;
    let pred = forest.predict(&encode_features(eval)?)?;
    let hits = pred.iter().zip(&eval.targets).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / eval.n_rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthetic, ColumnSchema};

    #[test]
    fn separable_blobs_are_learned() {
        let ds = synthetic::two_cluster(400, 4, 1);
        let train = ds.subset(&(0..300).collect::<Vec<_>>());
        let test = ds.subset(&(300..400).collect::<Vec<_>>());
        let acc = downstream_accuracy(&train, &test, &ForestConfig::default()).unwrap();
        assert!(acc > 0.95, "{acc}");
    }

    #[test]
    fn stump_reproduces_majority_mapping() {
        // feature 0 decides the label 90% of the time; feature 1 is noise
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let b = (i % 2) as f64;
            rows.push(vec![b, ((i * 7) % 5) as f64]);
            y.push(if i % 10 == 0 { 1 - i % 2 } else { i % 2 });
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let cfg = ForestConfig {
            n_trees: 1,
            max_depth: 1,
            max_features: Some(2),
            bootstrap: false,
            seed: 0,
        };
        let f = RandomForest::fit(&x, &y, 2, &cfg).unwrap();
        assert_eq!(f.trees[0].depth(), 1);
        let probe = Tensor::from_rows(&[vec![0.0, 3.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(f.predict(&probe).unwrap(), vec![0, 1]);
    }

    #[test]
    fn same_seed_same_forest() {
        let ds = synthetic::two_cluster_mixed(120, 3, 2, 5);
        let x = encode_features(&ds).unwrap();
        let cfg = ForestConfig {
            n_trees: 10,
            seed: 4,
            ..Default::default()
        };
        let a = RandomForest::fit(&x, &ds.targets, 2, &cfg).unwrap();
        let b = RandomForest::fit(&x, &ds.targets, 2, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.trees.iter().all(|t| t.depth() <= 12));
    }

    #[test]
    fn single_class_gives_constant_predictor() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let f = RandomForest::fit(&x, &[1, 1, 1], 3, &ForestConfig::default()).unwrap();
        assert_eq!(f.predict(&x).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn one_hot_layout() {
        let ds = TabularDataset::new(
            "t",
            vec![
                ColumnSchema::numerical("x"),
                ColumnSchema::categorical("c", vec!["a".into(), "b".into(), "c".into()]),
            ],
            Tensor::from_rows(&[vec![0.5, 2.0], vec![-1.0, 0.0]]).unwrap(),
            vec![0, 0],
            "y",
            vec!["p".into()],
        )
        .unwrap();
        let x = encode_features(&ds).unwrap();
        assert_eq!(x.row(0), &[0.5, 0.0, 0.0, 1.0]);
        assert_eq!(x.row(1), &[-1.0, 1.0, 0.0, 0.0]);
    }
}
