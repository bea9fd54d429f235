use serde::{Deserialize, Serialize};

use crate::dataio::TabularDataset;
use crate::error::{Error, Result};

/// How each block turns edge probabilities into an adjacency matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Independent Gumbel-sigmoid edges over the upper triangle.
    #[default]
    Egg,
    /// Top-`k` Gumbel-perturbed neighbours per row.
    Kegg,
    /// `A = I`: every block reduces to a row-wise map (the MLP ablation).
    Identity,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "egg" => Ok(SamplerKind::Egg),
            "kegg" | "k-egg" => Ok(SamplerKind::Kegg),
            "identity" | "nn_ablation" => Ok(SamplerKind::Identity),
            other => Err(Error::Config(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Message-passing layer used inside each block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphHeadKind {
    #[default]
    Gcn,
}

/// Architecture of one model. Data-dependent sizes come from
/// [`ModelConfig::for_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of numerical columns `d_n`.
    pub numeric: usize,
    /// Class count `C_k` of each categorical column.
    pub cardinalities: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::embedding_width")]
    pub embedding_width: usize,
    /// Number of stacked graph blocks `K`.
    #[serde(default = "defaults::blocks")]
    pub blocks: usize,
    /// Number of prototype nodes `p` appended to every batch graph.
    #[serde(default = "defaults::prototypes")]
    pub prototypes: usize,
    #[serde(default)]
    pub sampler: SamplerKind,
    /// Neighbours per node for [`SamplerKind::Kegg`].
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default)]
    pub graph_head: GraphHeadKind,
    /// Scale applied to the initial weights of each node projector's output
    /// layer, so squared embedding distances start near 1 instead of
    /// saturating `exp(-d²)` to zero.
    #[serde(default = "defaults::projector_gain")]
    pub projector_gain: f64,
}

pub(crate) mod defaults {
    pub fn hidden() -> usize {
        300
    }
    pub fn embedding_width() -> usize {
        16
    }
    pub fn blocks() -> usize {
        1
    }
    pub fn prototypes() -> usize {
        10
    }
    pub fn k() -> usize {
        5
    }
    pub fn projector_gain() -> f64 {
        0.1
    }
}

impl ModelConfig {
    pub fn for_dataset(ds: &TabularDataset) -> Self {
        ModelConfig {
            numeric: ds.numeric_columns().len(),
            cardinalities: ds.cardinalities(),
            num_classes: ds.num_classes(),
            hidden: defaults::hidden(),
            embedding_width: defaults::embedding_width(),
            blocks: defaults::blocks(),
            prototypes: defaults::prototypes(),
            sampler: SamplerKind::default(),
            k: defaults::k(),
            graph_head: GraphHeadKind::default(),
            projector_gain: defaults::projector_gain(),
        }
    }

    /// Width of the model input `d_n + d_c·e`.
    pub fn input_width(&self) -> usize {
        self.numeric + self.cardinalities.len() * self.embedding_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        if self.blocks == 0 {
            return bad("at least one graph block is required");
        }
        if self.input_width() == 0 {
            return bad("model has no input columns");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if !self.cardinalities.is_empty() && self.embedding_width == 0 {
            return bad("embedding width must be positive when categorical columns exist");
        }
        if self.sampler == SamplerKind::Kegg && self.k == 0 {
            return bad("k-EGG needs k >= 1");
        }
        if !(self.projector_gain.is_finite() && self.projector_gain > 0.0) {
            return bad("projector_gain must be positive");
        }
        Ok(())
    }
}
