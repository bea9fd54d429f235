//! Latent-graph sampling and message passing.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndmath::{pairwise_sq_dist, Tape, Tensor, Var};

/// One sampled graph over the `m` nodes of a batch (data rows + prototypes).
#[derive(Clone, Copy, Debug)]
pub struct GraphSample {
    /// Relaxed edge values `Ã ∈ [0, 1]`; zero wherever an edge cannot be
    /// proposed.
    pub relaxed: Var,
    /// Binary, symmetric adjacency with unit diagonal. Its gradient reaches
    /// `relaxed` through the straight-through estimator.
    pub hard: Var,
}

/// `P_ij = exp(−‖h_i − h_j‖²)`.
pub fn edge_probabilities(hg: &Tensor) -> Tensor {
    pairwise_sq_dist(hg).map(|d| (-d).exp())
}

/// `log P = −‖h_i − h_j‖²`, computed directly so it never takes `log 0`.
pub fn edge_log_probabilities(tape: &mut Tape, hg: Var) -> Var {
    let d = tape.pairwise_sq_dist(hg);
    tape.scale(d, -1.0)
}

/// `m × m` standard Gumbel noise `−log(−log u)`.
pub fn gumbel_noise(m: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(m, m, |_, _| {
        let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
        -(-u.ln()).ln()
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Contract(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Relaxed values `σ((log P + G)/τ)` with entries where `blocked(i, j)`
/// pinned to 0 through a `−∞` logit. Also returns the logits.
fn relaxed_edges(
    tape: &mut Tape,
    log_p: Var,
    tau: f64,
    rng: &mut impl Rng,
    blocked: impl Fn(usize, usize) -> bool,
) -> Result<(Var, Tensor)> {
    let (m, c) = tape.shape(log_p);
    if m != c {
        return Err(Error::dim("edge sampling", format!("log P is {m}×{c}")));
    }
    let g = tape.constant(gumbel_noise(m, rng));
    let perturbed = tape.add(log_p, g)?;
    let logits = tape.scale(perturbed, 1.0 / tau);
    let mask: Vec<bool> = (0..m * m).map(|e| blocked(e / m, e % m)).collect();
    let logits = tape.mask_fill(logits, &mask, f64::NEG_INFINITY)?;
    Ok((tape.sigmoid(logits), tape.value(logits).clone()))
}

/// Independent edges over the strict upper triangle: `hard = 1[Ã > 0.5]`,
/// then `A = U ∨ Uᵀ ∨ I`.
pub fn sample_adjacency_egg(tape: &mut Tape, log_p: Var, tau: f64, rng: &mut impl Rng) -> Result<GraphSample> {
    check_tau(tau)?;
    let (relaxed, _) = relaxed_edges(tape, log_p, tau, rng, |i, j| j <= i)?;
    let upper = tape.value(relaxed).map(|a| if a > 0.5 { 1.0 } else { 0.0 });
    let st = tape.straight_through(upper, relaxed, None)?;
    let hard = tape.symmetrize_or(st)?;
    Ok(GraphSample { relaxed, hard })
}

/// Top-`k` neighbours per row of the Gumbel-perturbed, off-diagonal
/// logits (ties go to the lower column index), then `A = B ∨ Bᵀ ∨ I`.
/// Gradients reach `Ã` only at selected positions.
pub fn sample_adjacency_kegg(
    tape: &mut Tape,
    log_p: Var,
    tau: f64,
    k: usize,
    rng: &mut impl Rng,
) -> Result<GraphSample> {
    check_tau(tau)?;
    let m = tape.shape(log_p).0;
    if k == 0 || k >= m {
        return Err(Error::Contract(format!("k-EGG needs 1 <= k < m, got k = {k}, m = {m}")));
    }
    // Rank by the pre-sigmoid logits: the sigmoid saturates to exactly 0 or
    // 1 at small τ, which would turn the ranking into index order.
    let (relaxed, logits) = relaxed_edges(tape, log_p, tau, rng, |i, j| i == j)?;
    let mut chosen = Tensor::zeros(m, m);
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for i in 0..m {
        order.clear();
        order.extend((0..m).filter(|&j| j != i));
        let row = logits.row(i);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &order[..k] {
            chosen.set(i, j, 1.0);
        }
    }
    let st = tape.straight_through(chosen.clone(), relaxed, Some(chosen))?;
    let hard = tape.symmetrize_or(st)?;
    Ok(GraphSample { relaxed, hard })
}

/// Self-loops only: `Ã = 0`, `A = I`.
pub fn identity_adjacency(tape: &mut Tape, m: usize) -> GraphSample {
    GraphSample {
        relaxed: tape.constant(Tensor::zeros(m, m)),
        hard: tape.constant(Tensor::identity(m)),
    }
}

/// Fails unless `a` is square, symmetric and binary with unit diagonal.
pub fn check_adjacency(a: &Tensor) -> Result<()> {
    let (m, c) = a.shape();
    if m != c {
        return Err(Error::Contract(format!("adjacency is {m}×{c}, not square")));
    }
    for i in 0..m {
        if a.get(i, i) != 1.0 {
            return Err(Error::Contract(format!("adjacency diagonal entry {i} is not 1")));
        }
        for j in 0..i {
            let v = a.get(i, j);
            if v != a.get(j, i) {
                return Err(Error::Contract(format!("adjacency is not symmetric at ({i}, {j})")));
            }
            if v != 0.0 && v != 1.0 {
                return Err(Error::Contract(format!("adjacency entry ({i}, {j}) = {v} is not binary")));
            }
        }
    }
    Ok(())
}

/// Message-passing layer applied by each block.
pub trait GraphHead {
    /// Updated node features from `h` (`m × hidden`), the adjacency `a`
    /// (`m × m`) and the layer weight.
    fn propagate(&self, tape: &mut Tape, h: Var, a: Var, weight: Var) -> Result<Var>;
}

/// `LayerNorm(D^{-1/2} A D^{-1/2} H W + H)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Gcn;

impl GraphHead for Gcn {
    fn propagate(&self, tape: &mut Tape, h: Var, a: Var, weight: Var) -> Result<Var> {
        check_adjacency(tape.value(a))?;
        let norm = tape.gcn_normalize(a)?;
        let agg = tape.matmul(norm, h)?;
        let mixed = tape.matmul(agg, weight)?;
        let res = tape.add(mixed, h)?;
        Ok(tape.layer_norm_row(res))
    }
}

/// Free-standing GCN update on plain tensors.
pub fn gcn_update(h: &Tensor, a: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (h, a, w) = (tape.constant(h.clone()), tape.constant(a.clone()), tape.constant(weight.clone()));
    let out = Gcn.propagate(&mut tape, h, a, w)?;
    Ok(tape.value(out).clone())
}
