//! Loss terms and their weighted combination.
//!
//! Imputation losses are taken over cells the surrogate mask hides
//! (`M = 0`): those are the only cells with a ground truth the model did not
//! see.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::{MaskMatrix, MiniBatch};
use crate::model::ForwardOutput;
use crate::ndmath::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Task cross-entropy.
    #[serde(default = "one")]
    pub alpha: f64,
    /// Numerical + categorical imputation.
    #[serde(default = "one")]
    pub beta: f64,
    /// Homophily penalty.
    #[serde(default = "gamma")]
    pub gamma: f64,
    /// Triplet regularizer; 0 disables it.
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "margin")]
    pub margin: f64,
}

fn one() -> f64 {
    1.0
}
fn gamma() -> f64 {
    0.1
}
fn margin() -> f64 {
    0.05
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            eta: 0.0,
            margin: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Mean squared error over cells with `mask = false` and a known truth;
/// 0 when there are none. `pred`, `truth` and `mask` are all `n × d_n`.
pub fn numeric_imputation_loss(tape: &mut Tape, pred: Var, truth: &Tensor, mask: &MaskMatrix) -> Result<Var> {
    if tape.shape(pred) != truth.shape() || truth.shape() != mask.shape() {
        return Err(Error::dim(
            "numeric_imputation_loss",
            format!("pred {:?}, truth {:?}, mask {:?}", tape.shape(pred), truth.shape(), mask.shape()),
        ));
    }
    let mut cells = Vec::new();
    let mut targets = Vec::new();
    for i in 0..truth.rows() {
        for j in 0..truth.cols() {
            if !mask.is_observed(i, j) && !truth.get(i, j).is_nan() {
                cells.push((i, j));
                targets.push(truth.get(i, j));
            }
        }
    }
    if cells.is_empty() {
        return Ok(zero(tape));
    }
    let picked = tape.pick(pred, &cells)?;
    let t = tape.constant(Tensor::from_vec(cells.len(), 1, targets)?);
    let diff = tape.sub(picked, t)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Summed negative log-likelihood of `labels[r]` under row `rows[r]` of
/// `logits`.
fn nll(tape: &mut Tape, logits: Var, rows: &[usize], labels: &[usize]) -> Result<Var> {
    let ls = tape.row_log_softmax(logits);
    let cells: Vec<(usize, usize)> = rows.iter().zip(labels).map(|(&i, &c)| (i, c)).collect();
    let picked = tape.pick(ls, &cells)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Mean cross-entropy over every hidden categorical cell, pooled across
/// columns. `truth` is `n × d_c` (class indices, `NaN` when unknown) and
/// `mask` is the matching mask slice.
pub fn categorical_imputation_loss(
    tape: &mut Tape,
    logits: &[Var],
    truth: &Tensor,
    mask: &MaskMatrix,
) -> Result<Var> {
    if logits.len() != truth.cols() || truth.shape() != mask.shape() {
        return Err(Error::dim(
            "categorical_imputation_loss",
            format!("{} heads, truth {:?}, mask {:?}", logits.len(), truth.shape(), mask.shape()),
        ));
    }
    let mut parts = Vec::new();
    let mut count = 0;
    for (k, &lg) in logits.iter().enumerate() {
        let (n, c) = tape.shape(lg);
        if n != truth.rows() {
            return Err(Error::dim("categorical_imputation_loss", format!("head {k} has {n} rows")));
        }
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = truth.get(i, k);
            if !mask.is_observed(i, k) && !y.is_nan() {
                if y as usize >= c {
                    return Err(Error::Contract(format!("class {y} out of range for head {k} with {c} classes")));
                }
                rows.push(i);
                labels.push(y as usize);
            }
        }
        if !rows.is_empty() {
            count += rows.len();
            parts.push(nll(tape, lg, &rows, &labels)?);
        }
    }
    if count == 0 {
        return Ok(zero(tape));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Mean cross-entropy of the task head over all rows.
pub fn task_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = tape.shape(logits);
    if labels.len() != n {
        return Err(Error::dim("task_loss", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
    }
    let rows: Vec<usize> = (0..n).collect();
    let s = nll(tape, logits, &rows, labels)?;
    Ok(tape.scale(s, 1.0 / n as f64))
}

/// `Σ_blocks Σ_ij Ā_ij Ã_ij / n²` with `Ā_ij = 1[y_i ≠ y_j]` over the `n`
/// labelled rows; prototype rows (indices `≥ n`) carry no penalty.
pub fn homophily_loss(tape: &mut Tape, relaxed: &[Var], labels: &[usize]) -> Result<Var> {
    let n = labels.len();
    if relaxed.is_empty() || n == 0 {
        return Ok(zero(tape));
    }
    let mut total: Option<Var> = None;
    for &a in relaxed {
        let (m, c) = tape.shape(a);
        if m != c || m < n {
            return Err(Error::dim("homophily_loss", format!("relaxed adjacency {m}×{c} for {n} rows")));
        }
        let ideal = Tensor::from_fn(m, m, |i, j| {
            if i < n && j < n && labels[i] != labels[j] {
                1.0
            } else {
                0.0
            }
        });
        let ideal = tape.constant(ideal);
        let prod = tape.hadamard(ideal, a)?;
        let s = tape.sum(prod);
        let s = tape.scale(s, 1.0 / (n * n) as f64);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one block"))
}

/// Distances below this are clamped before inverse weighting.
pub const TRIPLET_DISTANCE_CUTOFF: f64 = 0.1;

/// Margin triplet loss on the first `labels.len()` rows of `hg`.
///
/// Every row anchors one triplet: a positive drawn uniformly from the other
/// rows of its class and a negative drawn with probability `∝ 1/max(d, c)`
/// where `d` is the anchor-negative distance and `c` the cutoff, so nearer
/// negatives are preferred without any one dominating. Loss is the mean of
/// `max(0, ‖a−p‖² − ‖a−n‖² + margin)`; 0 when no triplet exists.
pub fn triplet_regularizer(
    tape: &mut Tape,
    hg: Var,
    labels: &[usize],
    margin: f64,
    rng: &mut impl Rng,
) -> Result<Var> {
    let n = labels.len();
    let rows = tape.shape(hg).0;
    if rows < n {
        return Err(Error::dim("triplet_regularizer", format!("{rows} rows for {n} labels")));
    }
    let first = labels.first().copied();
    if n < 3 || labels.iter().all(|&y| Some(y) == first) {
        return Ok(zero(tape));
    }
    let h = if rows > n { tape.slice_rows(hg, 0, n)? } else { hg };
    let d2 = tape.pairwise_sq_dist(h);
    let dist = tape.value(d2).map(f64::sqrt);

    let mut pos_cells = Vec::new();
    let mut neg_cells = Vec::new();
    for a in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != a && labels[j] == labels[a]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[a]).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let p = positives[rng.random_range(0..positives.len())];
        let w: Vec<f64> = negatives
            .iter()
            .map(|&j| 1.0 / dist.get(a, j).max(TRIPLET_DISTANCE_CUTOFF))
            .collect();
        let total: f64 = w.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut neg = *negatives.last().unwrap();
        for (&j, &wj) in negatives.iter().zip(&w) {
            if u < wj {
                neg = j;
                break;
            }
            u -= wj;
        }
        pos_cells.push((a, p));
        neg_cells.push((a, neg));
    }
    if pos_cells.is_empty() {
        return Ok(zero(tape));
    }
    let dp = tape.pick(d2, &pos_cells)?;
    let dn = tape.pick(d2, &neg_cells)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Individual loss terms of one batch (scalar handles on the tape).
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub task: Var,
    pub numeric: Var,
    pub categorical: Var,
    pub homophily: Var,
    pub triplet: Option<Var>,
}

/// Plain values of each term, for logs and history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub task: f64,
    pub numeric: f64,
    pub categorical: f64,
    pub homophily: f64,
    pub triplet: f64,
}

impl LossValues {
    pub fn imputation(&self) -> f64 {
        self.numeric + self.categorical
    }

    pub(crate) fn accumulate(&mut self, o: &LossValues, w: f64) {
        self.total += w * o.total;
        self.task += w * o.task;
        self.numeric += w * o.numeric;
        self.categorical += w * o.categorical;
        self.homophily += w * o.homophily;
        self.triplet += w * o.triplet;
    }
}

/// `α·task + β·(numeric + categorical) + γ·homophily (+ η·triplet)`.
/// Fails with the offending term's name if any part is non-finite.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, w: &LossWeights) -> Result<(Var, LossValues)> {
    let mut named = vec![
        ("task", parts.task),
        ("numeric_imputation", parts.numeric),
        ("categorical_imputation", parts.categorical),
        ("homophily", parts.homophily),
    ];
    if let Some(t) = parts.triplet {
        named.push(("triplet", t));
    }
    for (name, v) in &named {
        if !tape.value(*v).item().is_finite() {
            return Err(Error::NonFiniteLoss { term: name.to_string() });
        }
    }
    let task = tape.scale(parts.task, w.alpha);
    let imp = tape.add(parts.numeric, parts.categorical)?;
    let imp = tape.scale(imp, w.beta);
    let hom = tape.scale(parts.homophily, w.gamma);
    let mut total = tape.add(task, imp)?;
    total = tape.add(total, hom)?;
    if let Some(t) = parts.triplet {
        let t = tape.scale(t, w.eta);
        total = tape.add(total, t)?;
    }
    let val = |v: Var| tape.value(v).item();
    let values = LossValues {
        total: val(total),
        task: val(parts.task),
        numeric: val(parts.numeric),
        categorical: val(parts.categorical),
        homophily: val(parts.homophily),
        triplet: parts.triplet.map_or(0.0, val),
    };
    if !values.total.is_finite() {
        return Err(Error::NonFiniteLoss { term: "total".into() });
    }
    Ok((total, values))
}

/// Numerical and categorical ground truth of a batch, split by column kind.
pub fn batch_targets(batch: &MiniBatch) -> (Tensor, MaskMatrix, Tensor, MaskMatrix) {
    let n = batch.len();
    let num_truth = Tensor::from_fn(n, batch.numeric_columns.len(), |i, k| {
        batch.truth.get(i, batch.numeric_columns[k])
    });
    let cat_truth = Tensor::from_fn(n, batch.categorical_columns.len(), |i, k| {
        batch.truth.get(i, batch.categorical_columns[k])
    });
    (
        num_truth,
        batch.surrogate.select_cols(&batch.numeric_columns),
        cat_truth,
        batch.surrogate.select_cols(&batch.categorical_columns),
    )
}

/// Every loss term for one forward pass.
pub fn batch_losses(
    tape: &mut Tape,
    out: &ForwardOutput,
    batch: &MiniBatch,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<(Var, LossValues)> {
    let (num_truth, num_mask, cat_truth, cat_mask) = batch_targets(batch);
    let numeric = match out.numeric {
        Some(p) => numeric_imputation_loss(tape, p, &num_truth, &num_mask)?,
        None => zero(tape),
    };
    let categorical = categorical_imputation_loss(tape, &out.categorical, &cat_truth, &cat_mask)?;
    let task = task_loss(tape, out.task, &batch.labels)?;
    let relaxed: Vec<Var> = out.graphs.iter().map(|g| g.relaxed).collect();
    let homophily = homophily_loss(tape, &relaxed, &batch.labels)?;
    let triplet = if weights.eta > 0.0 {
        let mut acc: Option<Var> = None;
        for &hg in &out.projected {
            let t = triplet_regularizer(tape, hg, &batch.labels, weights.margin, rng)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, t)?,
                None => t,
            });
        }
        acc
    } else {
        None
    };
    total_loss(
        tape,
        &LossParts {
            task,
            numeric,
            categorical,
            homophily,
            triplet,
        },
        weights,
    )
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mask(rows: &[&[u8]]) -> MaskMatrix {
        let mut m = MaskMatrix::all_observed(rows.len(), rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            for (j, &b) in r.iter().enumerate() {
                m.set(i, j, b == 1);
            }
        }
        m
    }

    #[test]
    fn numeric_loss_examples() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::from_rows(&[vec![0.0, 5.0]]).unwrap());
        let truth = Tensor::from_rows(&[vec![1.0, -3.0]]).unwrap();
        let none = numeric_imputation_loss(&mut tape, pred, &truth, &mask(&[&[1, 1]])).unwrap();
        assert_eq!(tape.value(none).item(), 0.0);
        let one = numeric_imputation_loss(&mut tape, pred, &truth, &mask(&[&[0, 1]])).unwrap();
        assert_eq!(tape.value(one).item(), 1.0);
        // the unmasked prediction gets no gradient
        let g = tape.backward(one).unwrap().get(pred);
        assert_eq!(g.get(0, 1), 0.0);
        assert_eq!(g.get(0, 0), -2.0);
    }

    #[test]
    fn categorical_loss_uniform_and_saturated() {
        let mut tape = Tape::new();
        let uniform = tape.leaf(Tensor::zeros(2, 3));
        let truth = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let l = categorical_imputation_loss(&mut tape, &[uniform], &truth, &mask(&[&[0], &[0]])).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
        let sharp = tape.leaf(Tensor::from_rows(&[vec![0.0, 40.0, 0.0], vec![0.0, 0.0, 40.0]]).unwrap());
        let l2 = categorical_imputation_loss(&mut tape, &[sharp], &truth, &mask(&[&[0], &[0]])).unwrap();
        assert!(tape.value(l2).item() < 1e-15);
        // only the masked row receives gradient
        let mut tape = Tape::new();
        let lg = tape.leaf(Tensor::from_rows(&[vec![0.3, -0.2, 0.1], vec![1.0, 0.5, -1.0]]).unwrap());
        let l = categorical_imputation_loss(&mut tape, &[lg], &truth, &mask(&[&[1], &[0]])).unwrap();
        let g = tape.backward(l).unwrap().get(lg);
        assert!(g.row(0).iter().all(|&v| v == 0.0));
        assert!(g.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn task_loss_examples() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::zeros(3, 4));
        let l = task_loss(&mut tape, u, &[0, 1, 3]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
        // hand fixture: logits [[1, 0], [0, 2]], labels [0, 1]
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let l = task_loss(&mut tape, x, &[0, 1]).unwrap();
        let expect = 0.5 * ((1.0 + (-1f64).exp()).ln() + (1.0 + (-2f64).exp()).ln());
        assert!((tape.value(l).item() - expect).abs() < 1e-12);
        assert!(matches!(task_loss(&mut tape, x, &[0, 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn homophily_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![0.0, 0.8], vec![0.0, 0.0]]).unwrap());
        let l = homophily_loss(&mut tape, &[a], &[0, 1]).unwrap();
        assert!((tape.value(l).item() - 0.2).abs() < 1e-15);
        let same = homophily_loss(&mut tape, &[a], &[1, 1]).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let z = tape.leaf(Tensor::zeros(3, 3));
        let l = homophily_loss(&mut tape, &[z], &[0, 1]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn triplet_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // satisfied: positives coincide, negatives far away
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::from_rows(&[vec![0.0], vec![0.0], vec![5.0], vec![5.0]]).unwrap());
        let l = triplet_regularizer(&mut tape, h, &[0, 0, 1, 1], 0.05, &mut rng).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        // every point at the same place: each term equals the margin
        let h = tape.leaf(Tensor::zeros(4, 2));
        let l = triplet_regularizer(&mut tape, h, &[0, 0, 1, 1], 0.05, &mut rng).unwrap();
        assert!((tape.value(l).item() - 0.05).abs() < 1e-15);
        // single class → 0
        let l = triplet_regularizer(&mut tape, h, &[1, 1, 1, 1], 0.05, &mut rng).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #[test]
            fn triplet_is_nonnegative(vals in proptest::collection::vec(-3.0f64..3.0, 16), seed in 0u64..1000) {
                let mut tape = Tape::new();
                let h = tape.leaf(Tensor::from_vec(8, 2, vals).unwrap());
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let l = triplet_regularizer(&mut tape, h, &[0, 1, 0, 1, 2, 2, 0, 1], 0.05, &mut rng).unwrap();
                prop_assert!(tape.value(l).item() >= 0.0);
            }
        }
    }

    fn parts(tape: &mut Tape, vals: [f64; 4]) -> LossParts {
        let v: Vec<Var> = vals.iter().map(|&x| tape.leaf(Tensor::scalar(x))).collect();
        LossParts {
            task: v[0],
            numeric: v[1],
            categorical: v[2],
            homophily: v[3],
            triplet: None,
        }
    }

    #[test]
    fn total_loss_weights() {
        let mut tape = Tape::new();
        let p = parts(&mut tape, [1.0, 2.0, 3.0, 4.0]);
        let zero_w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&mut tape, &p, &zero_w).unwrap().1.total, 0.0);
        assert_eq!(LossWeights::default().gamma, 0.1);
        let w1 = LossWeights::default();
        let w2 = LossWeights {
            beta: 2.0,
            ..w1
        };
        let t1 = total_loss(&mut tape, &p, &w1).unwrap().1.total;
        let t2 = total_loss(&mut tape, &p, &w2).unwrap().1.total;
        assert_eq!(t2 - t1, 5.0);
        assert!((t1 - (1.0 + 5.0 + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_part_is_named() {
        let mut tape = Tape::new();
        let p = parts(&mut tape, [1.0, f64::NAN, 0.0, 0.0]);
        match total_loss(&mut tape, &p, &LossWeights::default()) {
            Err(Error::NonFiniteLoss { term }) => assert_eq!(term, "numeric_imputation"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn total_gradient_is_weighted_sum() {
        // superposition on a shared leaf
        let build = |w: LossWeights| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]).unwrap());
            let task = task_loss(&mut tape, x, &[1, 0]).unwrap();
            let num = numeric_imputation_loss(
                &mut tape,
                x,
                &Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap(),
                &mask(&[&[0, 1], &[0, 0]]),
            )
            .unwrap();
            let sq = tape.square(x);
            let hom = tape.mean(sq);
            let cat = tape.constant(Tensor::scalar(0.0));
            let p = LossParts {
                task,
                numeric: num,
                categorical: cat,
                homophily: hom,
                triplet: None,
            };
            let (t, _) = total_loss(&mut tape, &p, &w).unwrap();
            tape.backward(t).unwrap().get(x)
        };
        let only = |a, b, c| LossWeights {
            alpha: a,
            beta: b,
            gamma: c,
            ..LossWeights::default()
        };
        let full = build(only(0.7, 1.3, 0.4));
        let sum = build(only(0.7, 0.0, 0.0))
            .add(&build(only(0.0, 1.3, 0.0)))
            .unwrap()
            .add(&build(only(0.0, 0.0, 0.4)))
            .unwrap();
        for (a, b) in full.data().iter().zip(sum.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
