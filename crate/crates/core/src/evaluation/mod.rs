//! Imputation metrics on initially missing cells, downstream random-forest
//! accuracy, and cross-run aggregation (count of wins, average ranking).

mod aggregate;
pub mod forest;
mod report;

pub use aggregate::{average_ranks, count_of_wins, unified_average_ranking, Metric, RankStat, Ranking, Wins};
pub use forest::{downstream_accuracy, encode_features, ForestConfig, RandomForest};
pub use report::{read_results, write_results, MetricReport, RESULT_COLUMNS};

use crate::dataio::TabularDataset;
use crate::error::{Error, Result};
use crate::missingness::MaskMatrix;

fn check(truth: &TabularDataset, imputed: &TabularDataset, initial: &MaskMatrix) -> Result<()> {
    let shape = (truth.n_rows(), truth.n_cols());
    if imputed.values.shape() != shape || initial.shape() != shape {
        return Err(Error::dim(
            "metric",
            format!(
                "truth {shape:?}, imputed {:?}, mask {:?}",
                imputed.values.shape(),
                initial.shape()
            ),
        ));
    }
    Ok(())
}

/// `(truth, imputed)` pairs at initially missing cells with known truth.
fn scored_cells(
    truth: &TabularDataset,
    imputed: &TabularDataset,
    initial: &MaskMatrix,
    categorical: bool,
) -> Result<Vec<(f64, f64)>> {
    check(truth, imputed, initial)?;
    let mut cells = Vec::new();
    for i in 0..truth.n_rows() {
        for j in 0..truth.n_cols() {
            if truth.columns[j].is_categorical() != categorical || initial.is_observed(i, j) {
                continue;
            }
            let t = truth.values.get(i, j);
            if t.is_finite() {
                cells.push((t, imputed.values.get(i, j)));
            }
        }
    }
    Ok(cells)
}

/// Root-mean-square error over initially missing numerical cells; `None`
/// when there are none.
pub fn rmse(truth: &TabularDataset, imputed: &TabularDataset, initial: &MaskMatrix) -> Result<Option<f64>> {
    let cells = scored_cells(truth, imputed, initial, false)?;
    Ok((!cells.is_empty())
        .then(|| (cells.iter().map(|(t, p)| (t - p).powi(2)).sum::<f64>() / cells.len() as f64).sqrt()))
}

/// Mean absolute error over initially missing numerical cells.
pub fn mae(truth: &TabularDataset, imputed: &TabularDataset, initial: &MaskMatrix) -> Result<Option<f64>> {
    let cells = scored_cells(truth, imputed, initial, false)?;
    Ok((!cells.is_empty()).then(|| cells.iter().map(|(t, p)| (t - p).abs()).sum::<f64>() / cells.len() as f64))
}

/// Share of initially missing categorical cells imputed to the true class.
pub fn cat_accuracy(truth: &TabularDataset, imputed: &TabularDataset, initial: &MaskMatrix) -> Result<Option<f64>> {
    let cells = scored_cells(truth, imputed, initial, true)?;
    Ok((!cells.is_empty()).then(|| cells.iter().filter(|(t, p)| t == p).count() as f64 / cells.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ColumnSchema;
    use crate::ndmath::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ds(rows: &[Vec<f64>]) -> TabularDataset {
        TabularDataset::new(
            "t",
            vec![
                ColumnSchema::numerical("x"),
                ColumnSchema::categorical("c", vec!["a".into(), "b".into(), "c".into(), "d".into()]),
            ],
            Tensor::from_rows(rows).unwrap(),
            vec![0; rows.len()],
            "y",
            vec!["p".into()],
        )
        .unwrap()
    }

    #[test]
    fn perfect_and_unit_errors() {
        let truth = ds(&[vec![0.0, 1.0], vec![2.0, 3.0]]);
        let mut mask = MaskMatrix::all_observed(2, 2);
        mask.set(0, 0, false);
        mask.set(1, 0, false);
        assert_eq!(rmse(&truth, &truth, &mask).unwrap(), Some(0.0));
        let imp = ds(&[vec![1.0, 1.0], vec![1.0, 3.0]]);
        assert_eq!(rmse(&truth, &imp, &mask).unwrap(), Some(1.0));
        assert_eq!(mae(&truth, &imp, &mask).unwrap(), Some(1.0));
        assert_eq!(cat_accuracy(&truth, &imp, &mask).unwrap(), None);
    }

    #[test]
    fn categorical_all_right_and_all_wrong() {
        let truth = ds(&[vec![0.0, 1.0], vec![2.0, 3.0]]);
        let mut mask = MaskMatrix::all_observed(2, 2);
        mask.set(0, 1, false);
        mask.set(1, 1, false);
        assert_eq!(cat_accuracy(&truth, &truth, &mask).unwrap(), Some(1.0));
        let wrong = ds(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(cat_accuracy(&truth, &wrong, &mask).unwrap(), Some(0.0));
        assert_eq!(rmse(&truth, &wrong, &mask).unwrap(), None);
    }

    #[test]
    fn uniform_guessing_scores_one_over_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let t: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0, rng.random_range(0..4) as f64]).collect();
        let p: Vec<Vec<f64>> = (0..n).map(|_| vec![0.0, rng.random_range(0..4) as f64]).collect();
        let mut mask = MaskMatrix::all_observed(n, 2);
        for i in 0..n {
            mask.set(i, 1, false);
        }
        let acc = cat_accuracy(&ds(&t), &ds(&p), &mask).unwrap().unwrap();
        assert!((acc - 0.25).abs() < 0.015, "{acc}");
    }

    #[test]
    fn observed_cells_never_affect_metrics() {
        let truth = ds(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![-1.0, 0.0]]);
        let mut mask = MaskMatrix::all_observed(3, 2);
        mask.set(0, 0, false);
        mask.set(2, 1, false);
        let imp = ds(&[vec![0.5, 1.0], vec![2.0, 3.0], vec![-1.0, 2.0]]);
        let mut perturbed = imp.clone();
        perturbed.values.set(1, 0, 100.0);
        perturbed.values.set(1, 1, 0.0);
        perturbed.values.set(0, 1, 2.0);
        for f in [rmse, mae, cat_accuracy] {
            assert_eq!(f(&truth, &imp, &mask).unwrap(), f(&truth, &perturbed, &mask).unwrap());
        }
    }

    #[test]
    fn unknown_truth_is_skipped_and_shapes_checked() {
        let truth = ds(&[vec![f64::NAN, 1.0], vec![2.0, 3.0]]);
        let mut mask = MaskMatrix::all_observed(2, 2);
        mask.set(0, 0, false);
        assert_eq!(rmse(&truth, &truth, &mask).unwrap(), None);
        assert!(rmse(&truth, &truth, &MaskMatrix::all_observed(3, 2)).is_err());
    }
}
