//! Ensembled imputation: every row is predicted in several stochastic
//! batches (different neighbours, different sampled edges) and the
//! predictions are averaged.

use rand::seq::SliceRandom;

use crate::dataio::TabularDataset;
use crate::error::{Error, Result};
use crate::missingness::{preprocess_batch, MaskMatrix};
use crate::model::{forward, ForwardOptions, Model, Predictions};
use crate::ndmath::{Tape, Tensor};
use crate::seeds;

/// Seed of the Gumbel stream for batch `batch` of pass `pass`.
pub fn ensemble_pass_seed(seed: u64, pass: usize, batch: usize) -> u64 {
    seeds::derive(seeds::derive(seed, "ensemble_pass", pass as u64), "batch", batch as u64)
}

/// One eval-mode forward pass over `rows` of the normalized dataset `ds`,
/// with nothing hidden beyond the initial mask. Output rows follow `rows`.
pub fn impute_once(
    model: &Model,
    ds: &TabularDataset,
    initial: &MaskMatrix,
    rows: &[usize],
    tau: f64,
    seed: u64,
) -> Result<Predictions> {
    let visible = MaskMatrix::all_observed(rows.len(), ds.n_cols());
    let batch = preprocess_batch(ds, rows, initial, &visible)?;
    let mut tape = Tape::new();
    let vars = model.bind_frozen(&mut tape);
    let mut rng = seeds::rng(seed, "gumbel", 0);
    let out = forward(&mut tape, model, &vars, &batch, ForwardOptions::eval(tau), &mut rng)?;
    Ok(Predictions::from_output(&tape, &out))
}

/// Running sums of per-row predictions.
#[derive(Clone, Debug)]
pub struct EnsembleAccumulator {
    pub counts: Vec<usize>,
    pub numeric: Tensor,
    pub categorical: Vec<Tensor>,
    pub task: Tensor,
}

impl EnsembleAccumulator {
    pub fn new(n: usize, numeric: usize, cardinalities: &[usize], classes: usize) -> Self {
        EnsembleAccumulator {
            counts: vec![0; n],
            numeric: Tensor::zeros(n, numeric),
            categorical: cardinalities.iter().map(|&c| Tensor::zeros(n, c)).collect(),
            task: Tensor::zeros(n, classes),
        }
    }

    pub fn add(&mut self, rows: &[usize], p: &Predictions) {
        fn acc(dst: &mut Tensor, r: usize, src: &[f64]) {
            for (d, s) in dst.row_mut(r).iter_mut().zip(src) {
                *d += s;
            }
        }
        for (b, &r) in rows.iter().enumerate() {
            self.counts[r] += 1;
            acc(&mut self.numeric, r, p.numeric.row(b));
            for (dst, src) in self.categorical.iter_mut().zip(&p.categorical) {
                acc(dst, r, src.row(b));
            }
            acc(&mut self.task, r, p.task.row(b));
        }
    }

    /// Sums from another accumulator over the same rows (order-independent).
    pub fn merge(&mut self, other: &EnsembleAccumulator) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::dim("ensemble merge", "row counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.numeric.add_assign_unchecked(&other.numeric);
        for (a, b) in self.categorical.iter_mut().zip(&other.categorical) {
            a.add_assign_unchecked(b);
        }
        self.task.add_assign_unchecked(&other.task);
        Ok(())
    }

    /// Per-row means.
    pub fn mean(&self) -> Predictions {
        let avg = |t: &Tensor| Tensor::from_fn(t.rows(), t.cols(), |i, j| t.get(i, j) / self.counts[i] as f64);
        Predictions {
            numeric: avg(&self.numeric),
            categorical: self.categorical.iter().map(avg).collect(),
            task: avg(&self.task),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
        .0
}

#[derive(Clone, Debug)]
pub struct EnsembleResult {
    /// `ds` with initially missing cells filled (normalized scale).
    pub imputed: TabularDataset,
    /// Averaged predictions per row.
    pub mean: Predictions,
    /// Task class with the highest averaged probability.
    pub task_predictions: Vec<usize>,
    pub passes: usize,
}

/// Ensembled imputation of the normalized dataset `ds`.
///
/// Each pass shuffles the rows (natural order when one batch covers
/// them all) and partitions them into batches of `batch_size`, so `E` passes
/// give every row exactly `E` predictions. Only cells missing in `initial`
/// are replaced; categorical cells take the argmax of the averaged softmax.
pub fn ensemble_impute(
    model: &Model,
    ds: &TabularDataset,
    initial: &MaskMatrix,
    ensemble: usize,
    batch_size: usize,
    tau: f64,
    seed: u64,
) -> Result<EnsembleResult> {
    if ensemble == 0 {
        return Err(Error::Contract("ensemble size must be at least 1".into()));
    }
    let n = ds.n_rows();
    let batch_size = batch_size.clamp(1, n.max(1));
    let cfg = &model.config;
    let mut acc = EnsembleAccumulator::new(n, cfg.numeric, &cfg.cardinalities, cfg.num_classes);
    let cap = 50 * ensemble;
    let mut passes = 0;
    while acc.counts.iter().any(|&c| c < ensemble) {
        if passes >= cap {
            return Err(Error::Contract(format!("ensembling did not cover every row within {cap} passes")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        if n > batch_size {
            order.shuffle(&mut seeds::rng(seed, "ensemble_order", passes as u64));
        }
        for (b, rows) in order.chunks(batch_size).enumerate() {
            let p = impute_once(model, ds, initial, rows, tau, ensemble_pass_seed(seed, passes, b))?;
            acc.add(rows, &p);
        }
        passes += 1;
    }

    let mean = acc.mean();
    let mut imputed = ds.clone();
    let num_cols = ds.numeric_columns();
    let cat_cols = ds.categorical_columns();
    for i in 0..n {
        for (k, &j) in num_cols.iter().enumerate() {
            if !initial.is_observed(i, j) {
                imputed.values.set(i, j, mean.numeric.get(i, k));
            }
        }
        for (k, &j) in cat_cols.iter().enumerate() {
            if !initial.is_observed(i, j) {
                imputed.values.set(i, j, argmax(mean.categorical[k].row(i)) as f64);
            }
        }
    }
    let task_predictions = (0..n).map(|i| argmax(mean.task.row(i))).collect();
    Ok(EnsembleResult {
        imputed,
        mean,
        task_predictions,
        passes,
    })
}

/// [`ensemble_impute`] run separately on each row group, so batches never mix
/// rows from different groups (e.g. training and validation rows). Groups
/// must partition the rows; the result holds every row in original order.
/// Returns the imputed dataset and the total number of passes.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_impute_grouped(
    model: &Model,
    ds: &TabularDataset,
    initial: &MaskMatrix,
    groups: &[&[usize]],
    ensemble: usize,
    batch_size: usize,
    tau: f64,
    seed: u64,
) -> Result<(TabularDataset, usize)> {
    let n = ds.n_rows();
    let mut seen = vec![false; n];
    for &i in groups.iter().flat_map(|g| g.iter()) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Contract(format!("row {i} is out of range or in more than one group")));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Contract("row groups do not cover every row".into()));
    }
    let mut imputed = ds.clone();
    let mut passes = 0;
    for (g, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let part = ds.subset(rows);
        let r = ensemble_impute(
            model,
            &part,
            &initial.select_rows(rows),
            ensemble,
            batch_size,
            tau,
            seeds::derive(seed, "ensemble_group", g as u64),
        )?;
        for (k, &i) in rows.iter().enumerate() {
            for j in 0..ds.n_cols() {
                imputed.values.set(i, j, r.imputed.values.get(k, j));
            }
        }
        passes += r.passes;
    }
    Ok((imputed, passes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{normalize, synthetic};
    use crate::missingness::corrupt_mcar;
    use crate::model::{ModelConfig, SamplerKind};

    fn setup(n: usize) -> (Model, TabularDataset, MaskMatrix) {
        let raw = synthetic::two_cluster_mixed(n, 3, 1, 4);
        let (ds, _) = normalize(&raw, None);
        let mask = corrupt_mcar(&ds, 0.25, 1).unwrap();
        let mut cfg = ModelConfig::for_dataset(&ds);
        cfg.hidden = 12;
        cfg.prototypes = 2;
        cfg.sampler = SamplerKind::Egg;
        cfg.projector_gain = 0.3;
        (Model::new(cfg, 3).unwrap(), ds, mask)
    }

    #[test]
    fn single_batch_single_pass_equals_one_forward() {
        let (model, ds, mask) = setup(20);
        let r = ensemble_impute(&model, &ds, &mask, 1, 300, 0.2, 9).unwrap();
        let rows: Vec<usize> = (0..20).collect();
        let once = impute_once(&model, &ds, &mask, &rows, 0.2, ensemble_pass_seed(9, 0, 0)).unwrap();
        assert_eq!(r.mean, once);
        assert_eq!(r.passes, 1);
    }

    #[test]
    fn observed_cells_pass_through_and_probabilities_sum_to_one() {
        let (model, ds, mask) = setup(30);
        let r = ensemble_impute(&model, &ds, &mask, 5, 8, 0.2, 1).unwrap();
        assert_eq!(r.passes, 5);
        for i in 0..30 {
            for j in 0..4 {
                if mask.is_observed(i, j) {
                    assert_eq!(r.imputed.values.get(i, j).to_bits(), ds.values.get(i, j).to_bits());
                } else {
                    assert!(r.imputed.values.get(i, j).is_finite());
                }
            }
            let s: f64 = r.mean.task.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let s: f64 = r.mean.categorical[0].row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_predictions_average_to_themselves() {
        let p = Predictions {
            numeric: Tensor::from_rows(&[vec![0.1, -0.3]]).unwrap(),
            categorical: vec![Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap()],
            task: Tensor::from_rows(&[vec![0.6, 0.4]]).unwrap(),
        };
        let mut acc = EnsembleAccumulator::new(1, 2, &[2], 2);
        for _ in 0..4 {
            acc.add(&[0], &p);
        }
        let m = acc.mean();
        for (a, b) in m.numeric.data().iter().zip(p.numeric.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((m.task.get(0, 0) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_output_and_row_alignment() {
        let (model, ds, mask) = setup(10);
        let a = impute_once(&model, &ds, &mask, &[3, 1, 7], 0.2, 5).unwrap();
        let b = impute_once(&model, &ds, &mask, &[3, 1, 7], 0.2, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.numeric.rows(), 3);
        assert_eq!(a.task.rows(), 3);
    }

    #[test]
    fn merge_is_order_independent() {
        let (model, ds, mask) = setup(12);
        let rows: Vec<usize> = (0..12).collect();
        let p1 = impute_once(&model, &ds, &mask, &rows, 0.2, 1).unwrap();
        let p2 = impute_once(&model, &ds, &mask, &rows, 0.2, 2).unwrap();
        let cfg = &model.config;
        let mk = |p: &Predictions| {
            let mut a = EnsembleAccumulator::new(12, cfg.numeric, &cfg.cardinalities, cfg.num_classes);
            a.add(&rows, p);
            a
        };
        let mut x = mk(&p1);
        x.merge(&mk(&p2)).unwrap();
        let mut y = mk(&p2);
        y.merge(&mk(&p1)).unwrap();
        assert_eq!(x.mean(), y.mean());
    }

    #[test]
    fn groups_do_not_see_each_other() {
        let (model, ds, mask) = setup(12);
        let (a, b): (Vec<usize>, Vec<usize>) = (0..12).partition(|i| i % 3 == 0);
        let (out, passes) = ensemble_impute_grouped(&model, &ds, &mask, &[&a, &b], 2, 3, 0.2, 4).unwrap();
        assert!(passes >= 4);
        // changing rows of the second group leaves the first group's imputations alone
        let mut other = ds.clone();
        for &i in &b {
            for j in 0..ds.n_cols() {
                if mask.is_observed(i, j) && !ds.columns[j].is_categorical() {
                    other.values.set(i, j, 3.0);
                }
            }
        }
        let (out2, _) = ensemble_impute_grouped(&model, &other, &mask, &[&a, &b], 2, 3, 0.2, 4).unwrap();
        for &i in &a {
            assert_eq!(out.values.row(i), out2.values.row(i));
        }
        assert!(ensemble_impute_grouped(&model, &ds, &mask, &[&a], 2, 3, 0.2, 4).is_err());
        assert!(ensemble_impute_grouped(&model, &ds, &mask, &[&a, &a, &b], 2, 3, 0.2, 4).is_err());
    }
}
