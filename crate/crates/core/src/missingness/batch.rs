use super::MaskMatrix;
use crate::dataio::TabularDataset;
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

/// One preprocessed batch of rows, ready for the model.
#[derive(Clone, Debug)]
pub struct MiniBatch {
    /// Row indices into the source dataset.
    pub rows: Vec<usize>,
    /// `n × d_n` numerical block with hidden cells set to the z-scored mean 0.
    pub numeric: Tensor,
    /// Per categorical column, `n` token indices; hidden cells carry the
    /// auxiliary index `C_k`.
    pub tokens: Vec<Vec<usize>>,
    /// Batch-level mask (`n × d`); `false` marks cells the loss is taken on.
    pub surrogate: MaskMatrix,
    /// Slice of the initial mask for these rows.
    pub initial: MaskMatrix,
    /// Ground truth on the normalized scale (`NaN` where initially missing).
    /// Only loss targets read from here.
    pub truth: Tensor,
    pub labels: Vec<usize>,
    pub numeric_columns: Vec<usize>,
    pub categorical_columns: Vec<usize>,
    pub cardinalities: Vec<usize>,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Whether cell `(i, j)` of the batch is visible to the model.
    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.initial.is_observed(i, j) && self.surrogate.is_observed(i, j)
    }

    /// Checks that `embeddings[k]` is a `(C_k + 1) × e` table for every
    /// categorical column and returns `e` (0 when there are none).
    pub fn embedding_width(&self, embeddings: &[Tensor]) -> Result<usize> {
        if embeddings.len() != self.cardinalities.len() {
            return Err(Error::Contract(format!(
                "{} embedding tables for {} categorical columns",
                embeddings.len(),
                self.cardinalities.len()
            )));
        }
        let width = embeddings.first().map_or(0, Tensor::cols);
        for (k, (t, &c)) in embeddings.iter().zip(&self.cardinalities).enumerate() {
            if t.rows() != c + 1 || t.cols() != width {
                return Err(Error::Contract(format!(
                    "embedding table {k} is {:?}, expected ({}, {width})",
                    t.shape(),
                    c + 1
                )));
            }
        }
        Ok(width)
    }

    /// `X = [numeric ‖ E_1[tokens_1] ‖ … ]`, of width `d_n + d_c·e`.
    pub fn input_matrix(&self, embeddings: &[Tensor]) -> Result<Tensor> {
        let e = self.embedding_width(embeddings)?;
        let n = self.len();
        let d_n = self.numeric.cols();
        let mut x = Tensor::zeros(n, d_n + e * embeddings.len());
        for i in 0..n {
            let row = x.row_mut(i);
            row[..d_n].copy_from_slice(self.numeric.row(i));
            for (k, table) in embeddings.iter().enumerate() {
                let off = d_n + k * e;
                row[off..off + e].copy_from_slice(table.row(self.tokens[k][i]));
            }
        }
        Ok(x)
    }
}

/// Builds the model input for `rows` of the normalized dataset `ds`.
///
/// `initial` covers all of `ds`; `surrogate` covers only the batch rows (in
/// order). A cell is hidden when either mask marks it missing: numerical
/// cells become 0, categorical cells become the auxiliary token.
pub fn preprocess_batch(
    ds: &TabularDataset,
    rows: &[usize],
    initial: &MaskMatrix,
    surrogate: &MaskMatrix,
) -> Result<MiniBatch> {
    let n = rows.len();
    let d = ds.n_cols();
    if initial.shape() != ds.values.shape() {
        return Err(Error::dim(
            "preprocess_batch",
            format!(
                "initial mask {:?} vs dataset {:?}",
                initial.shape(),
                ds.values.shape()
            ),
        ));
    }
    if surrogate.shape() != (n, d) {
        return Err(Error::dim(
            "preprocess_batch",
            format!("surrogate mask {:?} vs batch ({n}, {d})", surrogate.shape()),
        ));
    }
    let initial = initial.select_rows(rows);
    let numeric_columns = ds.numeric_columns();
    let categorical_columns = ds.categorical_columns();
    let cardinalities = ds.cardinalities();

    let visible = |i: usize, j: usize| initial.is_observed(i, j) && surrogate.is_observed(i, j);
    let mut numeric = Tensor::zeros(n, numeric_columns.len());
    let mut truth = Tensor::filled(n, d, f64::NAN);
    for (bi, &r) in rows.iter().enumerate() {
        for (k, &j) in numeric_columns.iter().enumerate() {
            if visible(bi, j) {
                numeric.set(bi, k, ds.values.get(r, j));
            }
        }
        for j in 0..d {
            if initial.is_observed(bi, j) {
                truth.set(bi, j, ds.values.get(r, j));
            }
        }
    }
    let tokens = categorical_columns
        .iter()
        .zip(&cardinalities)
        .map(|(&j, &c)| {
            rows.iter()
                .enumerate()
                .map(|(bi, &r)| {
                    if visible(bi, j) {
                        ds.values.get(r, j) as usize
                    } else {
                        c
                    }
                })
                .collect()
        })
        .collect();

    Ok(MiniBatch {
        rows: rows.to_vec(),
        numeric,
        tokens,
        surrogate: surrogate.clone(),
        initial,
        truth,
        labels: rows.iter().map(|&r| ds.targets[r]).collect(),
        numeric_columns,
        categorical_columns,
        cardinalities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthetic, ColumnSchema};

    fn mixed() -> TabularDataset {
        TabularDataset::new(
            "t",
            vec![
                ColumnSchema::numerical("a"),
                ColumnSchema::categorical("c", vec!["x".into(), "y".into()]),
                ColumnSchema::numerical("b"),
            ],
            Tensor::from_rows(&[
                vec![0.5, 1.0, -1.0],
                vec![1.5, 0.0, 2.0],
                vec![-0.3, 1.0, 0.1],
            ])
            .unwrap(),
            vec![0, 1, 0],
            "y",
            vec!["n".into(), "p".into()],
        )
        .unwrap()
    }

    fn tables() -> Vec<Tensor> {
        vec![Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![9.0, 9.0]]).unwrap()]
    }

    #[test]
    fn fully_observed_row_passes_through() {
        let ds = mixed();
        let init = MaskMatrix::all_observed(3, 3);
        let b = preprocess_batch(&ds, &[2, 0], &init, &MaskMatrix::all_observed(2, 3)).unwrap();
        let x = b.input_matrix(&tables()).unwrap();
        assert_eq!(x.row(0), &[-0.3, 0.1, 3.0, 4.0]);
        assert_eq!(x.row(1), &[0.5, -1.0, 3.0, 4.0]);
        assert_eq!(b.labels, vec![0, 0]);
    }

    #[test]
    fn hidden_cells_use_mean_and_missing_token() {
        let ds = mixed();
        let mut init = MaskMatrix::all_observed(3, 3);
        init.set(1, 2, false);
        let mut sur = MaskMatrix::all_observed(2, 3);
        sur.set(0, 0, false);
        sur.set(0, 1, false);
        let b = preprocess_batch(&ds, &[0, 1], &init, &sur).unwrap();
        let x = b.input_matrix(&tables()).unwrap();
        assert_eq!(x.row(0), &[0.0, -1.0, 9.0, 9.0]);
        assert_eq!(x.row(1), &[1.5, 0.0, 1.0, 2.0]);
        assert!(b.truth.get(1, 2).is_nan());
        assert_eq!(b.truth.get(0, 0), 0.5);
    }

    #[test]
    fn table_size_mismatch_is_contract_error() {
        let ds = mixed();
        let b = preprocess_batch(
            &ds,
            &[0],
            &MaskMatrix::all_observed(3, 3),
            &MaskMatrix::all_observed(1, 3),
        )
        .unwrap();
        let bad = vec![Tensor::zeros(2, 2)];
        assert!(matches!(b.input_matrix(&bad), Err(Error::Contract(_))));
        assert!(matches!(b.input_matrix(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn hidden_values_never_reach_input() {
        let ds = synthetic::two_cluster_mixed(30, 3, 2, 1);
        let init = crate::missingness::corrupt_mcar(&ds, 0.3, 2).unwrap();
        let rows: Vec<usize> = (0..30).step_by(2).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let sur =
            crate::missingness::surrogate_mask(&init.select_rows(&rows), 0.4, &mut rng).unwrap();
        let tabs: Vec<Tensor> = vec![Tensor::from_fn(4, 3, |i, j| (i * 3 + j) as f64); 2];
        let x0 = preprocess_batch(&ds, &rows, &init, &sur)
            .unwrap()
            .input_matrix(&tabs)
            .unwrap();

        let mut perturbed = ds.clone();
        for (bi, &r) in rows.iter().enumerate() {
            for j in 0..5 {
                if !(init.is_observed(r, j) && sur.is_observed(bi, j)) {
                    let v = if j < 3 {
                        1e6
                    } else {
                        ((perturbed.values.get(r, j) as usize + 1) % 3) as f64
                    };
                    perturbed.values.set(r, j, v);
                }
            }
        }
        let x1 = preprocess_batch(&perturbed, &rows, &init, &sur)
            .unwrap()
            .input_matrix(&tabs)
            .unwrap();
        assert_eq!(x0, x1);
    }
}
