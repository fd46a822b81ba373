//! Model and training configuration.
//!
//! Every knob has a built-in default; callers override individual fields and
//! then run [`TrainingConfig::validate`] before handing the config to the
//! trainer or model constructors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Pointwise,
    Listwise,
    Joint,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointwise" => Ok(LossMode::Pointwise),
            "listwise" => Ok(LossMode::Listwise),
            "joint" => Ok(LossMode::Joint),
            other => Err(Error::Config(format!(
                "unknown loss mode `{other}` (expected pointwise, listwise, or joint)"
            ))),
        }
    }
}

/// Form of the parameter regularizer added to the training objective.
///
/// `SquaredL2` is the default weight-decay style penalty; `L2` is the plain
/// (unsquared) norm, selectable from configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    SquaredL2,
    L2,
}

impl std::str::FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" | "squared_l2" => Ok(Regularizer::SquaredL2),
            "norm" | "l2" => Ok(Regularizer::L2),
            other => Err(Error::Config(format!(
                "unknown regularizer `{other}` (expected squared or norm)"
            ))),
        }
    }
}

/// Which semantic relations the graph keeps. Disabling a relation zeroes its
/// adjacency matrix, which is exactly equivalent to removing the edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationToggles {
    pub relevance: bool,
    pub similarity: bool,
    pub entailment: bool,
}

impl Default for RelationToggles {
    fn default() -> Self {
        RelationToggles {
            relevance: true,
            similarity: true,
            entailment: true,
        }
    }
}

/// Which per-answer feature blocks feed the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureToggles {
    pub textual: bool,
    pub interaction: bool,
}

impl Default for FeatureToggles {
    fn default() -> Self {
        FeatureToggles {
            textual: true,
            interaction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    // Loss.
    pub loss_mode: LossMode,
    /// Weight of the listwise term in the joint loss.
    pub lambda: f64,
    /// Regularizer weight.
    pub eta: f64,
    /// Norm order p used to normalize listwise score and label vectors.
    pub norm_order: f64,
    /// Smoothing added to binary labels before listwise normalization.
    pub label_smoothing: f64,
    pub regularizer: Regularizer,

    // Optimization.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early stopping: epochs without a validation-MAP improvement.
    pub patience: usize,
    pub seed: u64,
    /// Dropout rate on the prediction-head input during training (0 = off).
    pub dropout: f64,

    // Dimensions.
    pub embed_dim: usize,
    /// Per-direction recurrent hidden size; the context dimension is twice this.
    pub hidden_dim: usize,
    /// Output size of the answer-attention projection. Must equal the context
    /// dimension so question, answer, and snippet vectors share one node space.
    pub attn_dim: usize,
    pub gcn_dims: Vec<usize>,
    pub mlp_hidden: usize,

    // Data shape.
    /// Review snippets retrieved per question.
    pub num_snippets: usize,
    /// Positions kept by the clip-rescale attention.
    pub clip_k: usize,

    // Ablations.
    pub relations: RelationToggles,
    pub features: FeatureToggles,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            loss_mode: LossMode::Joint,
            lambda: 2.0,
            eta: 0.001,
            norm_order: 1.0,
            label_smoothing: 1e-3,
            regularizer: Regularizer::SquaredL2,
            learning_rate: 0.001,
            batch_size: 50,
            epochs: 50,
            patience: 10,
            seed: 42,
            dropout: 0.0,
            embed_dim: 300,
            hidden_dim: 100,
            attn_dim: 200,
            gcn_dims: vec![150, 100],
            mlp_hidden: 100,
            num_snippets: 5,
            clip_k: 8,
            relations: RelationToggles::default(),
            features: FeatureToggles::default(),
        }
    }
}

impl TrainingConfig {
    /// Context vector dimension (both recurrent directions concatenated).
    pub fn context_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    /// Dimension of the interaction feature produced by the last graph layer.
    pub fn interaction_dim(&self) -> usize {
        *self.gcn_dims.last().expect("validated non-empty")
    }

    /// Input width of the prediction head under the current feature toggles.
    pub fn head_input_dim(&self) -> usize {
        let mut dim = 0;
        if self.features.textual {
            dim += self.attn_dim;
        }
        if self.features.interaction {
            dim += self.interaction_dim();
        }
        dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Argument("lambda must be >= 0".into()));
        }
        if self.eta < 0.0 {
            return Err(Error::Argument("eta must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Argument("batch_size must be >= 1".into()));
        }
        if self.norm_order < 1.0 {
            return Err(Error::Argument("norm_order must be >= 1".into()));
        }
        if self.label_smoothing <= 0.0 {
            return Err(Error::Argument("label_smoothing must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument("dropout must be in [0, 1)".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Argument("learning_rate must be > 0".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Argument("dimensions must be positive".into()));
        }
        if self.attn_dim != self.context_dim() {
            return Err(Error::Argument(format!(
                "attn_dim ({}) must equal twice hidden_dim ({}) so all graph nodes share one feature space",
                self.attn_dim,
                self.hidden_dim
            )));
        }
        if self.gcn_dims.is_empty() || self.gcn_dims.contains(&0) {
            return Err(Error::Argument(
                "gcn_dims must be non-empty and positive".into(),
            ));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Argument("mlp_hidden must be positive".into()));
        }
        if self.clip_k < 1 {
            return Err(Error::Argument("clip_k must be >= 1".into()));
        }
        if !self.features.textual && !self.features.interaction {
            return Err(Error::Argument(
                "at least one of the textual and interaction features must be enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Derive a named sub-seed from the master seed so that independent random
/// streams (corpus split, parameter init, batch order, ...) never collide.
pub fn sub_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
