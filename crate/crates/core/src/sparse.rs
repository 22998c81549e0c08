//! Log-square sparsity penalty on transformer activations.
//!
//! The penalty `S(h) = ln(1 + h²)` is summed over every element of every
//! tensor captured at one hook position, scaled by `lambda`, and added to
//! the cross-entropy loss: `E = L + lambda * Σ S(h)`.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::vit::{HookTap, ViTConfig};

/// Where inside the encoder block the penalty is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SparsePosition {
    /// Scaled `QKᵗ/√d_k`, before the softmax.
    SimilarityScore,
    /// Row-softmax of the similarity score.
    AttentionWeight,
    /// Attention weight times `V`, per head.
    WeightedValue,
    /// Output projection of multi-head attention.
    AttentionOutput,
    /// First MLP linear layer, i.e. the GELU input.
    MlpGeluInput,
}

impl SparsePosition {
    pub const ALL: [SparsePosition; 5] = [
        SparsePosition::SimilarityScore,
        SparsePosition::AttentionWeight,
        SparsePosition::WeightedValue,
        SparsePosition::AttentionOutput,
        SparsePosition::MlpGeluInput,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SparsePosition::SimilarityScore => "similarity_score",
            SparsePosition::AttentionWeight => "attention_weight",
            SparsePosition::WeightedValue => "weighted_value",
            SparsePosition::AttentionOutput => "attention_output",
            SparsePosition::MlpGeluInput => "mlp_gelu_input",
        }
    }

    /// Size of the last dimension of the tensor captured at this position.
    pub fn feature_count(self, config: &ViTConfig) -> usize {
        match self {
            SparsePosition::SimilarityScore | SparsePosition::AttentionWeight => {
                config.num_tokens()
            }
            SparsePosition::WeightedValue => config.head_dim(),
            SparsePosition::AttentionOutput => config.hidden_size,
            SparsePosition::MlpGeluInput => config.mlp_size,
        }
    }
}

impl fmt::Display for SparsePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SparsePosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|p| p.as_str()).collect();
            Error::Config(format!(
                "unknown sparse position `{s}`; expected one of: {}",
                valid.join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseConfig {
    pub enabled: bool,
    pub position: SparsePosition,
    pub lambda: f64,
}

impl SparseConfig {
    pub fn new(position: SparsePosition, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("sparse lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { enabled: true, position, lambda })
    }

    pub fn disabled() -> Self {
        Self { enabled: false, position: SparsePosition::AttentionWeight, lambda: 0.0 }
    }

    /// Enabled at `position` with `lambda = 1 / n_feature` for that position.
    pub fn with_default_lambda(position: SparsePosition, config: &ViTConfig) -> Result<Self> {
        Self::new(position, default_lambda(position.feature_count(config))?)
    }

    /// The tap the forward pass must record for this config, if any.
    pub fn tap(&self) -> HookTap {
        if self.enabled {
            HookTap::at(self.position)
        } else {
            HookTap::disabled()
        }
    }
}

/// `1 / n_feature`.
pub fn default_lambda(n_feature: usize) -> Result<f64> {
    if n_feature == 0 {
        return Err(Error::Config("n_feature must be positive".into()));
    }
    Ok(1.0 / n_feature as f64)
}

/// `Σ_k ln(1 + h_k²)` as a one-element graph node.
pub fn penalty(g: &mut Graph, h: Var) -> Result<Var> {
    let sq = g.mul(h, h)?;
    let shifted = g.add_scalar(sq, 1.0);
    let logs = g.ln(shifted)?;
    Ok(g.sum(logs))
}

/// Loss pieces after adding the penalty.
#[derive(Debug, Clone, Copy)]
pub struct PenalizedLoss {
    pub total: Var,
    /// `lambda * Σ S`, absent when the penalty is off.
    pub penalty: Option<Var>,
}

/// `E = ce + lambda * Σ penalty(tap)` over every captured tensor. When the
/// config is disabled or `lambda == 0`, `E` is the `ce` node itself.
pub fn total_loss(
    g: &mut Graph,
    ce: Var,
    taps: &HookTap,
    config: &SparseConfig,
) -> Result<PenalizedLoss> {
    if !config.enabled || config.lambda == 0.0 {
        return Ok(PenalizedLoss { total: ce, penalty: None });
    }
    if taps.position() != Some(config.position) {
        return Err(Error::Contract(format!(
            "taps were recorded for {:?}, penalty needs {}",
            taps.position(),
            config.position
        )));
    }
    if taps.is_empty() {
        return Err(Error::Contract(format!("no tensors captured at {}", config.position)));
    }
    let mut sum: Option<Var> = None;
    for entry in taps.entries() {
        let p = penalty(g, entry.var)?;
        sum = Some(match sum {
            Some(acc) => g.add(acc, p)?,
            None => p,
        });
    }
    let weighted = g.scale(sum.expect("non-empty"), config.lambda);
    let total = g.add(ce, weighted)?;
    Ok(PenalizedLoss { total, penalty: Some(weighted) })
}
