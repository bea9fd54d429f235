//! The imputation network: feature propagation, stacked latent-graph blocks
//! with prototype nodes, and row-wise output heads.

mod config;
pub mod graph;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{GraphHeadKind, ModelConfig, SamplerKind};
pub use graph::{
    check_adjacency, edge_log_probabilities, edge_probabilities, gcn_update, gumbel_noise, identity_adjacency,
    sample_adjacency_egg, sample_adjacency_kegg, Gcn, GraphHead, GraphSample,
};
pub use params::{
    Block, Linear, Mlp, Params, RunningMoments, RunningStats, BN_MOMENTUM, EMBEDDING_INIT_STD, PROTOTYPE_INIT_STD,
};

use crate::error::{Error, Result};
use crate::missingness::MiniBatch;
use crate::ndmath::{row_softmax, ColumnMoments, NormStats, Tape, Tensor, Var};
use crate::seeds;

/// Controls batch-norm statistics only; edge sampling is stochastic in both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Configuration, trainable parameters and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params<Tensor>,
    pub running: RunningStats,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeds::rng(seed, "init", 0);
        let params = Params::init(&config, &mut rng);
        let running = RunningStats::new(&config);
        Ok(Model {
            config,
            params,
            running,
        })
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Params<Var> {
        self.params.map(|_, t| tape.leaf(t.clone()))
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Params<Var> {
        self.params.map(|_, t| tape.constant(t.clone()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub tau: f64,
    /// Replaces each block's sampled hard adjacency by a fixed matrix. The
    /// relaxed values are still computed (same noise), but no gradient
    /// flows through the graph structure.
    pub frozen: Option<&'a [Tensor]>,
}

impl ForwardOptions<'_> {
    pub fn train(tau: f64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            tau,
            frozen: None,
        }
    }

    pub fn eval(tau: f64) -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            tau,
            frozen: None,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Number of data rows `n` (prototype rows are excluded from every head).
    pub rows: usize,
    /// `n × (K·hidden)` concatenated block outputs.
    pub h_out: Var,
    /// `n × d_n` numerical reconstructions.
    pub numeric: Option<Var>,
    /// `n × C_k` logits per categorical column.
    pub categorical: Vec<Var>,
    /// `n × num_classes` task logits.
    pub task: Var,
    /// Per block, over all `n + p` nodes.
    pub graphs: Vec<GraphSample>,
    /// Per block node-projector output `H^g` (`(n + p) × hidden`).
    pub projected: Vec<Var>,
    /// Training-mode batch-norm moments: propagation, then each block.
    pub moments: Vec<Option<ColumnMoments>>,
}

fn linear(tape: &mut Tape, p: &Linear<Var>, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.weight)?;
    tape.add_row(y, p.bias)
}

fn mlp(tape: &mut Tape, p: &Mlp<Var>, x: Var, stats: NormStats<'_>) -> Result<(Var, Option<ColumnMoments>)> {
    let h = linear(tape, &p.first, x)?;
    let (h, moments) = tape.batch_norm_col(h, stats)?;
    let h = tape.mul_row(h, p.bn_gain)?;
    let h = tape.add_row(h, p.bn_shift)?;
    let h = tape.relu(h);
    Ok((linear(tape, &p.second, h)?, moments))
}

fn norm_stats<'a>(mode: Mode, rows: usize, running: &'a RunningMoments) -> NormStats<'a> {
    match mode {
        Mode::Train => NormStats::Batch { rows },
        Mode::Eval => NormStats::Running {
            mean: &running.mean,
            var: &running.var,
        },
    }
}

/// `[numeric ‖ E_1[tokens_1] ‖ …]` assembled on the tape.
pub fn input_matrix(tape: &mut Tape, vars: &Params<Var>, batch: &MiniBatch) -> Result<Var> {
    if !batch.numeric.is_finite() {
        return Err(Error::Contract("model input contains non-finite values".into()));
    }
    if vars.embeddings.len() != batch.cardinalities.len() {
        return Err(Error::Contract(format!(
            "{} embedding tables for {} categorical columns",
            vars.embeddings.len(),
            batch.cardinalities.len()
        )));
    }
    let mut parts = Vec::with_capacity(1 + vars.embeddings.len());
    if batch.numeric.cols() > 0 {
        parts.push(tape.constant(batch.numeric.clone()));
    }
    for (k, (&table, &c)) in vars.embeddings.iter().zip(&batch.cardinalities).enumerate() {
        if tape.shape(table).0 != c + 1 {
            return Err(Error::Contract(format!(
                "embedding table {k} has {} rows, expected {}",
                tape.shape(table).0,
                c + 1
            )));
        }
        parts.push(tape.gather_rows(table, &batch.tokens[k])?);
    }
    match parts.len() {
        0 => Err(Error::Contract("batch has no input columns".into())),
        1 => Ok(parts[0]),
        _ => tape.concat_cols(&parts),
    }
}

/// Full forward pass over one batch.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    vars: &Params<Var>,
    batch: &MiniBatch,
    opts: ForwardOptions<'_>,
    rng: &mut impl Rng,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let x = input_matrix(tape, vars, batch)?;
    let (h0, m0) = mlp(
        tape,
        &vars.propagation,
        x,
        norm_stats(opts.mode, n, &model.running.propagation),
    )?;
    let mut moments = vec![m0];

    let mut h = match vars.prototypes {
        Some(p) => tape.concat_rows(&[h0, p])?,
        None => h0,
    };
    let m = tape.shape(h).0;
    let head = Gcn;
    let mut graphs = Vec::with_capacity(cfg.blocks);
    let mut projected = Vec::with_capacity(cfg.blocks);
    let mut outs = Vec::with_capacity(cfg.blocks);
    for (b, blk) in vars.blocks.iter().enumerate() {
        let (hg, mb) = mlp(
            tape,
            &blk.projector,
            h,
            norm_stats(opts.mode, n, &model.running.blocks[b]),
        )?;
        moments.push(mb);
        let mut sample = match cfg.sampler {
            SamplerKind::Identity => identity_adjacency(tape, m),
            SamplerKind::Egg => {
                let lp = edge_log_probabilities(tape, hg);
                sample_adjacency_egg(tape, lp, opts.tau, rng)?
            }
            SamplerKind::Kegg if m == 1 => identity_adjacency(tape, m),
            SamplerKind::Kegg => {
                let lp = edge_log_probabilities(tape, hg);
                sample_adjacency_kegg(tape, lp, opts.tau, cfg.k.min(m - 1), rng)?
            }
        };
        if let Some(frozen) = opts.frozen {
            let a = frozen
                .get(b)
                .ok_or_else(|| Error::Contract(format!("no frozen adjacency for block {b}")))?;
            if a.shape() != (m, m) {
                return Err(Error::dim(
                    "frozen adjacency",
                    format!("{:?} for {m} nodes", a.shape()),
                ));
            }
            sample.hard = tape.constant(a.clone());
        }
        h = head.propagate(tape, h, sample.hard, blk.gcn)?;
        graphs.push(sample);
        projected.push(hg);
        outs.push(if m > n { tape.slice_rows(h, 0, n)? } else { h });
    }
    let h_out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let numeric = match &vars.numeric_head {
        Some(l) => Some(linear(tape, l, h_out)?),
        None => None,
    };
    let categorical = vars
        .categorical_heads
        .iter()
        .map(|l| linear(tape, l, h_out))
        .collect::<Result<Vec<_>>>()?;
    let task = linear(tape, &vars.task_head, h_out)?;
    Ok(ForwardOutput {
        rows: n,
        h_out,
        numeric,
        categorical,
        task,
        graphs,
        projected,
        moments,
    })
}

/// Plain-tensor predictions read off a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `n × d_n` on the normalized scale (`n × 0` when there are none).
    pub numeric: Tensor,
    /// Softmax probabilities per categorical column.
    pub categorical: Vec<Tensor>,
    /// Softmax over task classes.
    pub task: Tensor,
}

impl Predictions {
    pub fn from_output(tape: &Tape, out: &ForwardOutput) -> Self {
        Predictions {
            numeric: out
                .numeric
                .map_or_else(|| Tensor::zeros(out.rows, 0), |v| tape.value(v).clone()),
            categorical: out.categorical.iter().map(|&v| row_softmax(tape.value(v))).collect(),
            task: row_softmax(tape.value(out.task)),
        }
    }
}

#[cfg(test)]
mod tests;
