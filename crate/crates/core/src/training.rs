//! Optimization loop: surrogate masking, RMSprop, temperature annealing and
//! validation-based early stopping.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{ColumnSchema, ColumnStats, TabularDataset};
use crate::error::{Error, Result};
use crate::missingness::{preprocess_batch, surrogate_mask, MaskMatrix, MiniBatch};
use crate::model::{forward, ForwardOptions, Model, ModelConfig, Mode, Params, SamplerKind};
use crate::ndmath::{Tape, Tensor, Var};
use crate::objectives::{batch_losses, LossValues, LossWeights};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Share of observed cells hidden by the surrogate mask of each batch.
    pub batch_mask_rate: f64,
    pub weights: LossWeights,
    pub sampler: SamplerKind,
    pub k: usize,
    pub blocks: usize,
    pub prototypes: usize,
    pub embedding_width: usize,
    pub hidden: usize,
    pub projector_gain: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 300,
            learning_rate: 1e-4,
            tau_start: 0.5,
            tau_end: 0.01,
            batch_mask_rate: 0.2,
            weights: LossWeights::default(),
            sampler: SamplerKind::Egg,
            k: 5,
            blocks: 1,
            prototypes: 10,
            embedding_width: 16,
            hidden: 300,
            projector_gain: 0.1,
            max_epochs: 300,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.tau_start > self.tau_end && self.tau_end > 0.0) {
            return bad(format!(
                "temperatures must satisfy tau_start > tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            ));
        }
        if !(0.0..1.0).contains(&self.batch_mask_rate) {
            return bad(format!("batch_mask_rate must lie in [0, 1), got {}", self.batch_mask_rate));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        self.weights.validate()
    }

    pub fn model_config(&self, ds: &TabularDataset) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            embedding_width: self.embedding_width,
            blocks: self.blocks,
            prototypes: self.prototypes,
            sampler: self.sampler,
            k: self.k,
            projector_gain: self.projector_gain,
            ..ModelConfig::for_dataset(ds)
        }
    }
}

/// Linear decay from `start` at step 0 to `end` at `total`, constant after.
pub fn temperature(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 || step >= total {
        return end;
    }
    start + (end - start) * step as f64 / total as f64
}

/// RMSprop with per-tensor squared-gradient accumulators.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    state: Vec<Tensor>,
}

impl RmsProp {
    pub const RHO: f64 = 0.99;
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            rho: Self::RHO,
            eps: Self::EPS,
            state: Vec::new(),
        }
    }

    fn check(&self, names: &[String], shapes: &[(usize, usize)], grads: &[Tensor]) -> Result<()> {
        if shapes.len() != grads.len() {
            return Err(Error::dim(
                "rmsprop",
                format!("{} parameters, {} gradients", shapes.len(), grads.len()),
            ));
        }
        for ((name, &shape), g) in names.iter().zip(shapes).zip(grads) {
            if shape != g.shape() {
                return Err(Error::dim("rmsprop", format!("{name}: {shape:?} vs {:?}", g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
        }
        Ok(())
    }

    fn update(&mut self, k: usize, p: &mut Tensor, g: &Tensor) {
        if self.state.len() <= k {
            self.state.push(Tensor::zeros(g.rows(), g.cols()));
        }
        let s = &mut self.state[k];
        for ((pv, &gv), sv) in p.data_mut().iter_mut().zip(g.data()).zip(s.data_mut()) {
            *sv = self.rho * *sv + (1.0 - self.rho) * gv * gv;
            *pv -= self.lr * gv / (sv.sqrt() + self.eps);
        }
    }

    /// `s ← ρ s + (1−ρ) g²; θ ← θ − lr·g/(√s + ε)` for each named tensor.
    /// Fails before touching anything if a gradient is non-finite.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        let shapes: Vec<(usize, usize)> = params.iter().map(|(_, p)| p.shape()).collect();
        self.check(&names, &shapes, grads)?;
        for (k, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(k, p, g);
        }
        Ok(())
    }

    /// Steps every tensor of `params` with the matching entry of `grads`.
    pub fn step_params(&mut self, params: &mut Params<Tensor>, grads: &Params<Tensor>) -> Result<()> {
        let mut names = Vec::new();
        let mut g = Vec::new();
        grads.for_each(|n, t| {
            names.push(n.to_string());
            g.push(t.clone());
        });
        let mut shapes = Vec::new();
        params.for_each(|_, t| shapes.push(t.shape()));
        self.check(&names, &shapes, &g)?;
        let mut k = 0;
        params.for_each_mut(|_, p| {
            self.update(k, p, &g[k]);
            k += 1;
        });
        Ok(())
    }
}

/// One epoch of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossValues,
    pub validation: LossValues,
    /// Temperature at the last step of the epoch.
    pub tau: f64,
    /// Share of sampled hard edges between data rows of different classes.
    pub interclass_edge_fraction: f64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
    pub train_seconds: f64,
}

impl History {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to impute with a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub version: u32,
    pub model: Model,
    pub train_config: TrainConfig,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    /// Normalization statistics of the training split, when known.
    pub stats: Option<ColumnStats>,
    pub columns: Vec<ColumnSchema>,
}

impl TrainedModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        match v.get("version").and_then(|x| x.as_u64()) {
            Some(x) if x == CHECKPOINT_VERSION as u64 => Ok(serde_json::from_value(v)?),
            other => Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint version {other:?} (expected {CHECKPOINT_VERSION})",
                path.display()
            ))),
        }
    }
}

/// Fraction of hard edges among the first `labels.len()` nodes (`i < j`)
/// that join different classes, as `(interclass, total)` counts.
pub fn interclass_edges(a: &Tensor, labels: &[usize]) -> (usize, usize) {
    let n = labels.len();
    let (mut inter, mut total) = (0, 0);
    for i in 0..n {
        for j in i + 1..n {
            if a.get(i, j) > 0.5 {
                total += 1;
                if labels[i] != labels[j] {
                    inter += 1;
                }
            }
        }
    }
    (inter, total)
}

fn gradients(grads: &crate::ndmath::Gradients, vars: &Params<Var>) -> Params<Tensor> {
    vars.map(|_, &v| grads.get(v))
}

struct StepOutcome {
    values: LossValues,
    edges: (usize, usize),
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    model: &mut Model,
    batch: &MiniBatch,
    mode: Mode,
    tau: f64,
    weights: &LossWeights,
    opt: Option<&mut RmsProp>,
    gumbel_seed: u64,
    aux_seed: u64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let vars = if opt.is_some() { model.bind(&mut tape) } else { model.bind_frozen(&mut tape) };
    let opts = ForwardOptions {
        mode,
        tau,
        frozen: None,
    };
    let mut g_rng = seeds::rng(gumbel_seed, "gumbel", 0);
    let out = forward(&mut tape, model, &vars, batch, opts, &mut g_rng)?;
    let mut a_rng = seeds::rng(aux_seed, "triplet", 0);
    let (loss, values) = batch_losses(&mut tape, &out, batch, weights, &mut a_rng)?;
    let mut edges = (0, 0);
    for g in &out.graphs {
        let (i, t) = interclass_edges(tape.value(g.hard), &batch.labels);
        edges.0 += i;
        edges.1 += t;
    }
    if let Some(opt) = opt {
        let grads = tape.backward(loss)?;
        let g = gradients(&grads, &vars);
        opt.step_params(&mut model.params, &g)?;
        model.running.update(&out.moments);
        if !model.params.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: "parameters after update".into(),
            });
        }
    }
    Ok(StepOutcome { values, edges })
}

/// Splits `0..n` (already ordered) into consecutive batches.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains on `train` and early-stops on `val`; both must be normalized with
/// training statistics. Masks are the initial masks of each split.
pub fn train(
    cfg: &TrainConfig,
    train: &TabularDataset,
    train_mask: &MaskMatrix,
    val: &TabularDataset,
    val_mask: &MaskMatrix,
) -> Result<(TrainedModel, History)> {
    cfg.validate()?;
    if train.n_rows() == 0 || val.n_rows() == 0 {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let start = Instant::now();
    let mut model = Model::new(cfg.model_config(train), seeds::derive(cfg.seed, "init", 0))?;
    let mut opt = RmsProp::new(cfg.learning_rate);
    let per_epoch = train.n_rows().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * per_epoch;

    // fixed validation corruption and batches
    let val_sur = surrogate_mask(
        val_mask,
        cfg.batch_mask_rate,
        &mut seeds::rng(cfg.seed, "validation_mask", 0),
    )?;
    let val_order: Vec<usize> = (0..val.n_rows()).collect();
    let val_batches: Vec<MiniBatch> = batches(&val_order, cfg.batch_size)
        .into_iter()
        .map(|rows| preprocess_batch(val, &rows, val_mask, &val_sur.select_rows(&rows)))
        .collect::<Result<_>>()?;

    let snapshot = |model: &Model, epoch: usize, loss: f64| TrainedModel {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        train_config: cfg.clone(),
        best_epoch: epoch,
        best_validation_loss: loss,
        stats: None,
        columns: train.columns.clone(),
    };
    let mut best: Option<TrainedModel> = None;
    let mut history = History::default();
    let mut since_best = 0;
    let mut step = 0;
    let mut tau = cfg.tau_start;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.n_rows()).collect();
        order.shuffle(&mut seeds::rng(cfg.seed, "batch_order", epoch as u64));
        let mut train_vals = LossValues::default();
        let mut edges = (0, 0);
        for rows in batches(&order, cfg.batch_size) {
            tau = temperature(step, total_steps, cfg.tau_start, cfg.tau_end);
            let sur = surrogate_mask(
                &train_mask.select_rows(&rows),
                cfg.batch_mask_rate,
                &mut seeds::rng(cfg.seed, "surrogate", step as u64),
            )?;
            let batch = preprocess_batch(train, &rows, train_mask, &sur)?;
            let outcome = run_batch(
                &mut model,
                &batch,
                Mode::Train,
                tau,
                &cfg.weights,
                Some(&mut opt),
                seeds::derive(cfg.seed, "train_gumbel", step as u64),
                seeds::derive(cfg.seed, "train_aux", step as u64),
            );
            let outcome = match outcome {
                Ok(o) => o,
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })) => {
                    return Err(Error::Diverged {
                        reason: format!("epoch {epoch}, step {step}: {e}"),
                        checkpoint: best.map(Box::new),
                    })
                }
                Err(e) => return Err(e),
            };
            train_vals.accumulate(&outcome.values, rows.len() as f64 / train.n_rows() as f64);
            edges.0 += outcome.edges.0;
            edges.1 += outcome.edges.1;
            step += 1;
        }

        let mut val_vals = LossValues::default();
        for (b, batch) in val_batches.iter().enumerate() {
            let o = run_batch(
                &mut model,
                batch,
                Mode::Eval,
                tau,
                &cfg.weights,
                None,
                seeds::derive(cfg.seed, "validation_gumbel", b as u64),
                seeds::derive(cfg.seed, "validation_aux", b as u64),
            );
            let o = match o {
                Ok(o) => o,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    return Err(Error::Diverged {
                        reason: format!("validation after epoch {epoch}: {e}"),
                        checkpoint: best.map(Box::new),
                    })
                }
                Err(e) => return Err(e),
            };
            val_vals.accumulate(&o.values, batch.len() as f64 / val.n_rows() as f64);
        }

        let frac = if edges.1 == 0 {
            0.0
        } else {
            edges.0 as f64 / edges.1 as f64
        };
        history.epochs.push(EpochRecord {
            epoch,
            train: train_vals,
            validation: val_vals,
            tau,
            interclass_edge_fraction: frac,
            seconds: start.elapsed().as_secs_f64(),
        });
        log::debug!(
            "epoch {epoch}: train {:.5} val {:.5} tau {tau:.4} interclass {frac:.3}",
            train_vals.total,
            val_vals.total
        );

        if best.as_ref().is_none_or(|b| val_vals.total < b.best_validation_loss) {
            best = Some(snapshot(&model, epoch, val_vals.total));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }

    let best = best.expect("at least one epoch ran");
    history.best_epoch = best.best_epoch;
    history.best_validation_loss = best.best_validation_loss;
    history.train_seconds = start.elapsed().as_secs_f64();
    Ok((best, history))
}
