use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{MaskMatrix, Mechanism};
use crate::dataio::TabularDataset;
use crate::error::{Error, Result};

/// Share of columns kept fully observed by [`corrupt_mar`].
pub const MAR_OBSERVED_SHARE: f64 = 0.3;

/// Largest per-cell missing probability any calibrated column is asked for.
const MAX_COLUMN_RATE: f64 = 0.99;

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Mechanism(format!(
            "rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intercept `b` with `mean_i σ(s_i + b) = target`, found by bisection.
pub fn calibrate_intercept(scores: &[f64], target: f64) -> f64 {
    let mean_at = |b: f64| scores.iter().map(|s| sigmoid(s + b)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Column `j` on a unit scale from its present cells; absent cells map to 0.
fn standardized_column(ds: &TabularDataset, j: usize) -> Vec<f64> {
    let n = ds.n_rows();
    let present: Vec<f64> = (0..n)
        .map(|i| ds.values.get(i, j))
        .filter(|v| !v.is_nan())
        .collect();
    let (mean, std) = if present.is_empty() {
        (0.0, 1.0)
    } else {
        let m = present.iter().sum::<f64>() / present.len() as f64;
        let v = present.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / present.len() as f64;
        (m, if v.sqrt() < 1e-12 { 1.0 } else { v.sqrt() })
    };
    (0..n)
        .map(|i| {
            let v = ds.values.get(i, j);
            if v.is_nan() {
                0.0
            } else {
                (v - mean) / std
            }
        })
        .collect()
}

fn standardize(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt();
    let s = if s < 1e-12 { 1.0 } else { s };
    v.iter_mut().for_each(|x| *x = (*x - m) / s);
}

/// Cells already absent from `ds` stay missing in every generated mask.
fn with_existing_gaps(ds: &TabularDataset, mut m: MaskMatrix) -> MaskMatrix {
    for i in 0..ds.n_rows() {
        for j in 0..ds.n_cols() {
            if ds.is_missing(i, j) {
                m.set(i, j, false);
            }
        }
    }
    m
}

/// Each cell is independently missing with probability `rate`.
pub fn corrupt_mcar(ds: &TabularDataset, rate: f64, seed: u64) -> Result<MaskMatrix> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (ds.n_rows(), ds.n_cols());
    let bits = (0..n * d).map(|_| rng.random::<f64>() >= rate).collect();
    Ok(with_existing_gaps(
        ds,
        MaskMatrix::from_bits(n, d, bits, Mechanism::Mcar, rate),
    ))
}

/// Logistic missingness driven by a fixed, fully observed column subset.
///
/// `max(1, round(0.3·d))` columns (at most `d − 1`) are drawn and never
/// masked. For every other column a random direction `w ~ N(0, I)` over the
/// observed subset gives standardized scores `s = std(X_obs w)`; cells go
/// missing with probability `σ(s + b_j)` where `b_j` is bisected so the column
/// rate is `rate · d / (d − n_obs)`, which makes the overall rate `rate`.
pub fn corrupt_mar(ds: &TabularDataset, rate: f64, seed: u64) -> Result<MaskMatrix> {
    corrupt_mar_detailed(ds, rate, seed).map(|(m, _)| m)
}

/// Logistic scores behind a MAR mask.
#[derive(Clone, Debug, Default)]
pub struct MarScores {
    /// Columns that were kept fully observed.
    pub observed: Vec<usize>,
    /// `(column, standardized score per row)` for every masked column.
    pub scores: Vec<(usize, Vec<f64>)>,
}

/// [`corrupt_mar`] that also returns the scores it drew.
pub fn corrupt_mar_detailed(
    ds: &TabularDataset,
    rate: f64,
    seed: u64,
) -> Result<(MaskMatrix, MarScores)> {
    check_rate(rate)?;
    let (n, d) = (ds.n_rows(), ds.n_cols());
    if d < 2 {
        return Err(Error::Mechanism(format!(
            "MAR needs at least 2 columns, got {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = MaskMatrix::all_observed(n, d);
    mask.mechanism = Mechanism::Mar;
    mask.rate = rate;
    if rate == 0.0 {
        return Ok((with_existing_gaps(ds, mask), MarScores::default()));
    }

    let n_obs = ((MAR_OBSERVED_SHARE * d as f64).round() as usize).clamp(1, d - 1);
    let mut observed: Vec<usize> = sample(&mut rng, d, n_obs).into_vec();
    observed.sort_unstable();
    let predictors: Vec<Vec<f64>> = observed
        .iter()
        .map(|&j| standardized_column(ds, j))
        .collect();

    let mut col_rate = rate * d as f64 / (d - n_obs) as f64;
    if col_rate > MAX_COLUMN_RATE {
        log::warn!(
            "MAR rate {rate} needs per-column rate {col_rate:.3} on {d} columns; capping at {MAX_COLUMN_RATE}"
        );
        col_rate = MAX_COLUMN_RATE;
    }

    let mut detail = MarScores {
        observed: observed.clone(),
        scores: Vec::new(),
    };
    for j in (0..d).filter(|j| !observed.contains(j)) {
        let w: Vec<f64> = (0..n_obs).map(|_| rng.sample(StandardNormal)).collect();
        let mut scores: Vec<f64> = (0..n)
            .map(|i| predictors.iter().zip(&w).map(|(col, wk)| col[i] * wk).sum())
            .collect();
        standardize(&mut scores);
        let b = calibrate_intercept(&scores, col_rate);
        for (i, s) in scores.iter().enumerate() {
            if rng.random::<f64>() < sigmoid(s + b) {
                mask.set(i, j, false);
            }
        }
        detail.scores.push((j, scores));
    }
    Ok((with_existing_gaps(ds, mask), detail))
}

/// Self-masking logistic missingness: cell `(i, j)` is missing with
/// probability `σ(z_ij + b)` where `z_ij` is the cell's own standardized value
/// and the single intercept `b` is bisected to give overall rate `rate`.
pub fn corrupt_mnar(ds: &TabularDataset, rate: f64, seed: u64) -> Result<MaskMatrix> {
    check_rate(rate)?;
    let (n, d) = (ds.n_rows(), ds.n_cols());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = MaskMatrix::all_observed(n, d);
    mask.mechanism = Mechanism::Mnar;
    mask.rate = rate;
    if rate == 0.0 {
        return Ok(with_existing_gaps(ds, mask));
    }
    let cols: Vec<Vec<f64>> = (0..d).map(|j| standardized_column(ds, j)).collect();
    let scores: Vec<f64> = (0..n)
        .flat_map(|i| cols.iter().map(move |c| c[i]))
        .collect();
    let b = calibrate_intercept(&scores, rate);
    for i in 0..n {
        for j in 0..d {
            if rng.random::<f64>() < sigmoid(scores[i * d + j] + b) {
                mask.set(i, j, false);
            }
        }
    }
    Ok(with_existing_gaps(ds, mask))
}

pub fn corrupt(
    ds: &TabularDataset,
    mechanism: Mechanism,
    rate: f64,
    seed: u64,
) -> Result<MaskMatrix> {
    match mechanism {
        Mechanism::Mcar => corrupt_mcar(ds, rate, seed),
        Mechanism::Mar => corrupt_mar(ds, rate, seed),
        Mechanism::Mnar => corrupt_mnar(ds, rate, seed),
        other => Err(Error::Mechanism(format!(
            "`{other}` is not a corruption mechanism"
        ))),
    }
}

/// Batch-level masking for training: each initially observed cell is hidden
/// with probability `ib`; initially missing cells are always marked observed
/// so they never enter the reconstruction loss.
pub fn surrogate_mask(initial: &MaskMatrix, ib: f64, rng: &mut impl Rng) -> Result<MaskMatrix> {
    if !(0.0..1.0).contains(&ib) {
        return Err(Error::Mechanism(format!(
            "batch masking rate must lie in [0, 1), got {ib}"
        )));
    }
    let (n, d) = initial.shape();
    let mut bits = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            let hide = initial.is_observed(i, j) && rng.random::<f64>() < ib;
            bits.push(!hide);
        }
    }
    Ok(MaskMatrix::from_bits(n, d, bits, Mechanism::Surrogate, ib))
}
