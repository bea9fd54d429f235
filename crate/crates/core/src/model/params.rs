use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::ndmath::{ColumnMoments, Tensor};

/// Affine map `x W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// `Linear₂(ReLU(BatchNorm(Linear₁(x))))`, the shape shared by the feature
/// propagation map and every node projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    pub first: Linear<T>,
    pub bn_gain: T,
    pub bn_shift: T,
    pub second: Linear<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    pub projector: Mlp<T>,
    /// GCN weight (`hidden × hidden`, no bias).
    pub gcn: T,
}

/// Every trainable tensor of the model. `T` is [`Tensor`] for stored
/// values and [`Var`](crate::ndmath::Var) once bound to a tape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    /// One `(C_k + 1) × e` table per categorical column; row `C_k` is the
    /// missing token.
    pub embeddings: Vec<T>,
    pub propagation: Mlp<T>,
    pub blocks: Vec<Block<T>>,
    /// `p × hidden`, absent when `p = 0`.
    pub prototypes: Option<T>,
    /// Absent when there are no numerical columns.
    pub numeric_head: Option<Linear<T>>,
    pub categorical_heads: Vec<Linear<T>>,
    pub task_head: Linear<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Mlp<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Mlp<U> {
        Mlp {
            first: self.first.map(&format!("{prefix}.first"), f),
            bn_gain: f(&format!("{prefix}.bn_gain"), &self.bn_gain),
            bn_shift: f(&format!("{prefix}.bn_shift"), &self.bn_shift),
            second: self.second.map(&format!("{prefix}.second"), f),
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        self.first.for_each_mut(&format!("{prefix}.first"), f);
        f(&format!("{prefix}.bn_gain"), &mut self.bn_gain);
        f(&format!("{prefix}.bn_shift"), &mut self.bn_shift);
        self.second.for_each_mut(&format!("{prefix}.second"), f);
    }
}

impl<T> Params<T> {
    /// Structure-preserving map; `f` sees tensors in canonical order with
    /// their dotted names.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Params<U> {
        let f = &mut f;
        Params {
            embeddings: self
                .embeddings
                .iter()
                .enumerate()
                .map(|(k, t)| f(&format!("embeddings.{k}"), t))
                .collect(),
            propagation: self.propagation.map("propagation", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(b, blk)| Block {
                    projector: blk.projector.map(&format!("blocks.{b}.projector"), f),
                    gcn: f(&format!("blocks.{b}.gcn"), &blk.gcn),
                })
                .collect(),
            prototypes: self.prototypes.as_ref().map(|t| f("prototypes", t)),
            numeric_head: self.numeric_head.as_ref().map(|l| l.map("numeric_head", f)),
            categorical_heads: self
                .categorical_heads
                .iter()
                .enumerate()
                .map(|(k, l)| l.map(&format!("categorical_heads.{k}"), f))
                .collect(),
            task_head: self.task_head.map("task_head", f),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &T)) {
        self.map(|name, t| f(name, t));
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        let f = &mut f;
        for (k, t) in self.embeddings.iter_mut().enumerate() {
            f(&format!("embeddings.{k}"), t);
        }
        self.propagation.for_each_mut("propagation", f);
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            blk.projector.for_each_mut(&format!("blocks.{b}.projector"), f);
            f(&format!("blocks.{b}.gcn"), &mut blk.gcn);
        }
        if let Some(t) = self.prototypes.as_mut() {
            f("prototypes", t);
        }
        if let Some(l) = self.numeric_head.as_mut() {
            l.for_each_mut("numeric_head", f);
        }
        for (k, l) in self.categorical_heads.iter_mut().enumerate() {
            l.for_each_mut(&format!("categorical_heads.{k}"), f);
        }
        self.task_head.for_each_mut("task_head", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }
}

impl Params<Tensor> {
    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.is_finite());
        ok
    }
}

fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(rows, cols, |_, _| d.sample(rng))
}

/// Fan-in uniform initialization, bound `1/√fan_in` for weight and bias.
fn linear(fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Linear<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Linear {
        weight: uniform(fan_in, fan_out, bound * gain, rng),
        bias: uniform(1, fan_out, bound * gain, rng),
    }
}

fn mlp(fan_in: usize, hidden: usize, out_gain: f64, rng: &mut impl Rng) -> Mlp<Tensor> {
    Mlp {
        first: linear(fan_in, hidden, 1.0, rng),
        bn_gain: Tensor::ones(1, hidden),
        bn_shift: Tensor::zeros(1, hidden),
        second: linear(hidden, hidden, out_gain, rng),
    }
}

pub const EMBEDDING_INIT_STD: f64 = 0.1;
pub const PROTOTYPE_INIT_STD: f64 = 0.01;

impl Params<Tensor> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden;
        let embeddings = cfg
            .cardinalities
            .iter()
            .map(|&c| normal(c + 1, cfg.embedding_width, EMBEDDING_INIT_STD, rng))
            .collect();
        let propagation = mlp(cfg.input_width(), h, 1.0, rng);
        let blocks = (0..cfg.blocks)
            .map(|_| Block {
                projector: mlp(h, h, cfg.projector_gain, rng),
                gcn: uniform(h, h, 1.0 / (h as f64).sqrt(), rng),
            })
            .collect();
        let prototypes = (cfg.prototypes > 0).then(|| normal(cfg.prototypes, h, PROTOTYPE_INIT_STD, rng));
        let out = h * cfg.blocks;
        let numeric_head = (cfg.numeric > 0).then(|| linear(out, cfg.numeric, 1.0, rng));
        let categorical_heads = cfg.cardinalities.iter().map(|&c| linear(out, c, 1.0, rng)).collect();
        let task_head = linear(out, cfg.num_classes, 1.0, rng);
        Params {
            embeddings,
            propagation,
            blocks,
            prototypes,
            numeric_head,
            categorical_heads,
            task_head,
        }
    }
}

/// Running batch-norm statistics of one MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl RunningMoments {
    pub fn new(width: usize) -> Self {
        RunningMoments {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    /// Exponential update with the unbiased batch variance.
    pub fn update(&mut self, m: &ColumnMoments) {
        let unbias = if m.count > 1 {
            m.count as f64 / (m.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.mean.iter_mut().zip(&m.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&m.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
    }
}

/// Running statistics for the propagation MLP and every block projector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub propagation: RunningMoments,
    pub blocks: Vec<RunningMoments>,
}

impl RunningStats {
    pub fn new(cfg: &ModelConfig) -> Self {
        RunningStats {
            propagation: RunningMoments::new(cfg.hidden),
            blocks: (0..cfg.blocks).map(|_| RunningMoments::new(cfg.hidden)).collect(),
        }
    }

    /// Applies moments in forward order: propagation first, then blocks.
    pub fn update(&mut self, moments: &[Option<ColumnMoments>]) {
        let mut it = moments.iter();
        if let Some(Some(m)) = it.next() {
            self.propagation.update(m);
        }
        for (r, m) in self.blocks.iter_mut().zip(it) {
            if let Some(m) = m {
                r.update(m);
            }
        }
    }
}
