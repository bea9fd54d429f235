//! Seeded synthetic datasets for tests, examples and desk-scale benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ColumnSchema, TabularDataset};
use crate::ndmath::Tensor;

/// Two balanced classes with `d` correlated numerical features.
///
/// Row `i` has class `c = i mod 2` and latent factor `z ~ N(0, 1)`; feature
/// `j` is `s_j·(2c − 1) + a_j·z + 0.35·ε` with per-column sign `s_j`,
/// loading `|a_j| ∈ [0.6, 1.0]` and `ε ~ N(0, 1)`. Every feature is largely
/// predictable from the others.
pub fn two_cluster(n: usize, d: usize, seed: u64) -> TabularDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let signs: Vec<f64> = (0..d)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let loadings: Vec<f64> = (0..d)
        .map(|_| {
            let a: f64 = rng.random_range(0.6..1.0);
            if rng.random_bool(0.5) {
                a
            } else {
                -a
            }
        })
        .collect();
    let mut values = Tensor::zeros(n, d);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let z: f64 = rng.sample(StandardNormal);
        let centre = if c == 1 { 1.0 } else { -1.0 };
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            values.set(i, j, signs[j] * centre + loadings[j] * z + 0.35 * e);
        }
        targets.push(c);
    }
    TabularDataset::new(
        "synthetic2c",
        (0..d)
            .map(|j| ColumnSchema::numerical(format!("x{j}")))
            .collect(),
        values,
        targets,
        "class",
        vec!["a".into(), "b".into()],
    )
    .expect("synthetic dataset is valid")
}

/// [`two_cluster`] with `d_c` extra categorical columns. Categorical column
/// `k` has `3` classes derived from the class label and a noisy threshold on
/// the latent factor, so it is predictable from the numerical block.
pub fn two_cluster_mixed(n: usize, d_n: usize, d_c: usize, seed: u64) -> TabularDataset {
    let base = two_cluster(n, d_n.max(1), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca7e);
    let d = d_n + d_c;
    let mut values = Tensor::zeros(n, d);
    for i in 0..n {
        for j in 0..d_n {
            values.set(i, j, base.values.get(i, j));
        }
        let anchor = base.values.get(i, 0);
        for k in 0..d_c {
            let noisy = anchor + 0.3 * rng.sample::<f64, _>(StandardNormal) + 0.2 * k as f64;
            let cls = if noisy < -0.7 {
                0.0
            } else if noisy < 0.7 {
                1.0
            } else {
                2.0
            };
            values.set(i, d_n + k, cls);
        }
    }
    let mut columns: Vec<ColumnSchema> = (0..d_n)
        .map(|j| ColumnSchema::numerical(format!("x{j}")))
        .collect();
    columns.extend((0..d_c).map(|k| {
        ColumnSchema::categorical(
            format!("c{k}"),
            vec!["lo".into(), "mid".into(), "hi".into()],
        )
    }));
    TabularDataset::new(
        "synthetic2c_mixed",
        columns,
        values,
        base.targets.clone(),
        "class",
        base.class_labels.clone(),
    )
    .expect("synthetic dataset is valid")
}

/// Same generator, selected by row count, for timing sweeps.
pub fn family(sizes: &[usize], d: usize, seed: u64) -> Vec<TabularDataset> {
    sizes
        .iter()
        .map(|&n| {
            let mut ds = two_cluster(n, d, seed);
            ds.name = format!("synthetic2c_n{n}");
            ds
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let ds = two_cluster(600, 6, 1);
        assert_eq!(ds.values.shape(), (600, 6));
        assert_eq!(ds.targets.iter().filter(|&&t| t == 1).count(), 300);
        assert_eq!(two_cluster(600, 6, 1), ds);
    }

    #[test]
    fn mixed_is_valid() {
        let ds = two_cluster_mixed(50, 3, 2, 4);
        assert_eq!(ds.numeric_columns(), vec![0, 1, 2]);
        assert_eq!(ds.cardinalities(), vec![3, 3]);
    }
}
