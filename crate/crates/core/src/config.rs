use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Activation, AdamConfig};

/// Which neighbors a node listens to for an edge `src -> dst`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeDirection {
    /// `dst` receives from `src`.
    #[default]
    In,
    /// `src` receives from `dst`.
    Out,
    Both,
}

impl std::str::FromStr for EdgeDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(EdgeDirection::In),
            "out" => Ok(EdgeDirection::Out),
            "both" => Ok(EdgeDirection::Both),
            other => Err(Error::Config(format!("unknown edge direction `{other}`"))),
        }
    }
}

/// Message-passing layer used inside the graph encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphLayerKind {
    /// Per-relation, per-neighbor multi-head attention.
    #[default]
    Local,
    /// Mean over the relation-union neighborhood followed by an affine map.
    Gcn,
    /// Multi-head attention over the relation-union neighborhood.
    Gat,
    /// Uniform per-relation means combined by global semantic attention.
    Rgt,
}

impl std::str::FromStr for GraphLayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(GraphLayerKind::Local),
            "gcn" => Ok(GraphLayerKind::Gcn),
            "gat" => Ok(GraphLayerKind::Gat),
            "rgt" => Ok(GraphLayerKind::Rgt),
            other => Err(Error::Config(format!("unknown graph layer `{other}`"))),
        }
    }
}

/// Which representations reach the fusion stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Invariant and specific vectors of every mode.
    #[default]
    Full,
    /// No subspaces; encoder outputs concatenated straight into the detector.
    Base,
    /// Specific vectors only.
    Sf,
    /// Invariant vectors only.
    If,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" | "botsai" => Ok(Variant::Full),
            "base" => Ok(Variant::Base),
            "sf" => Ok(Variant::Sf),
            "if" => Ok(Variant::If),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "BotSAI",
            Variant::Base => "BotSAI-BASE",
            Variant::Sf => "BotSAI-SF",
            Variant::If => "BotSAI-IF",
        }
    }
}

/// Every knob of one training run. Serialized as flat JSON; field names are
/// the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub layers: usize,
    pub hidden: usize,
    pub max_epochs: usize,
    pub heads: usize,
    pub l2_lambda: f64,
    pub oversample_scale: f64,
    /// Redraw synthetic nodes every epoch instead of once before training.
    pub oversample_per_epoch: bool,
    pub knn_k: usize,
    /// Relation subset; `None` keeps every dataset relation.
    pub relations: Option<Vec<String>>,
    pub alpha: f64,
    pub beta_w: f64,
    pub gamma: f64,
    pub cmd_order: usize,
    pub patience: usize,
    pub seed: u64,
    /// Seed of the 7:2:1 split when the dataset does not pin one.
    pub split_seed: u64,
    pub repeats: usize,
    pub edge_direction: EdgeDirection,
    pub activation: Activation,
    /// Nonlinearity of the subspace projectors; `identity` makes them affine.
    pub projector_activation: Activation,
    pub graph_layer: GraphLayerKind,
    pub variant: Variant,
    /// Disable the graph mode entirely (text and metadata only).
    pub graph_branch: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            dropout: 0.4,
            layers: 2,
            hidden: 256,
            max_epochs: 400,
            heads: 4,
            l2_lambda: 5e-6,
            oversample_scale: 0.25,
            oversample_per_epoch: false,
            knn_k: 5,
            relations: None,
            alpha: 0.7,
            beta_w: 0.3,
            gamma: 1.0,
            cmd_order: 5,
            patience: 50,
            seed: 0,
            split_seed: 0,
            repeats: 5,
            edge_direction: EdgeDirection::In,
            activation: Activation::Relu,
            projector_activation: Activation::Relu,
            graph_layer: GraphLayerKind::Local,
            variant: Variant::Full,
            graph_branch: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Preset for TwiBot-20 style data.
    pub fn twibot20() -> Self {
        TrainConfig {
            relations: Some(vec!["follower".into(), "following".into()]),
            ..Self::default()
        }
    }

    /// Preset for MGTAB style data.
    pub fn mgtab() -> Self {
        TrainConfig {
            oversample_scale: 1.5,
            beta_w: 1.0,
            relations: Some(vec!["follower".into(), "following".into(), "reply".into()]),
            ..Self::default()
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("heads ({}) must divide hidden ({})", self.heads, self.hidden));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.repeats == 0 {
            return fail("batch_size, max_epochs and repeats must be positive".into());
        }
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1".into());
        }
        if self.cmd_order == 0 {
            return fail("cmd_order must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta_w", self.beta_w),
            ("gamma", self.gamma),
            ("l2_lambda", self.l2_lambda),
            ("oversample_scale", self.oversample_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if let Some(rel) = &self.relations {
            if rel.is_empty() && self.graph_branch {
                return fail("an empty relation subset requires graph_branch = false".into());
            }
        }
        Ok(())
    }
}
