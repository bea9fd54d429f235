use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TabularDataset;
use crate::error::{Error, Result};

/// Disjoint row index sets covering the dataset.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded split stratified by target class.
///
/// The training set holds `T = round(N · train_fraction)` rows. Each class
/// gets `floor(n_c · T / N)` of them and the leftover slots go to the
/// classes with the largest fractional remainders (lower class index first on
/// ties). If some class has fewer than two rows the split falls back to a
/// plain shuffle.
pub fn split(ds: &TabularDataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = ds.n_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = ((n as f64) * train_fraction).round() as usize;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &t) in ds.targets.iter().enumerate() {
        by_class[t].push(i);
    }
    let stratify = by_class.iter().all(|c| c.is_empty() || c.len() >= 2);
    if !stratify {
        log::warn!("a class has fewer than 2 rows; falling back to an unstratified split");
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let validation = idx.split_off(total);
        let mut train = idx;
        train.sort_unstable();
        let mut validation = validation;
        validation.sort_unstable();
        return Ok(Split { train, validation });
    }

    let share = total as f64 / n as f64;
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|c| (c.len() as f64 * share).floor() as usize)
        .collect();
    let assigned: usize = quota.iter().sum();
    let mut order: Vec<usize> = (0..by_class.len())
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    order.sort_by(|&a, &b| {
        let ra = by_class[a].len() as f64 * share - quota[a] as f64;
        let rb = by_class[b].len() as f64 * share - quota[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().take(total.saturating_sub(assigned)) {
        quota[c] += 1;
    }

    let mut train = Vec::with_capacity(total);
    let mut validation = Vec::with_capacity(n - total);
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..quota[c]]);
        validation.extend_from_slice(&members[quota[c]..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok(Split { train, validation })
}
