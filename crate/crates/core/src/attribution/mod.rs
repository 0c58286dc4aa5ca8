//! Token attribution from a traced forward pass.
//!
//! Three scorers are provided:
//!
//! * [`attention_rollout`]: head-averaged attention mixed with the identity
//!   (`0.5 A + 0.5 I`) and multiplied across layers.
//! * [`globenc`]: per-layer norms of residual- and layer-norm-adjusted
//!   attention contributions, row-normalized and rolled out the same way.
//! * [`decompx`]: exact propagation of per-source decomposed hidden states
//!   through attention, layer norms, FFNs and the classifier head.
//!
//! The first two produce an `n x n` [`AttributionMatrix`] that is reduced to
//! one score per token with [`matrix_to_saliency`]; DecompX directly yields
//! signed per-class token contributions.

mod decompx;
mod globenc;
mod rollout;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decompx::{
    activation_ratio, decompose_with, decompx, DecompState, Decomposition, ScoreSign, Target, DRIFT_LIMIT,
};
pub use globenc::{globenc, layer_norm_attribution, LayerNormAttribution};
pub use rollout::{attention_rollout, residual_mix, rollout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Rollout,
    GlobEnc,
    DecompX,
}

impl AttributionMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttributionMethod::Rollout => "rollout",
            AttributionMethod::GlobEnc => "globenc",
            AttributionMethod::DecompX => "decompx",
        }
    }
}

impl fmt::Display for AttributionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rollout" => Ok(AttributionMethod::Rollout),
            "globenc" => Ok(AttributionMethod::GlobEnc),
            "decompx" => Ok(AttributionMethod::DecompX),
            other => Err(format!("unknown attribution method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Subword,
    #[default]
    Word,
}

impl FromStr for Unit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subword" => Ok(Unit::Subword),
            "word" => Ok(Unit::Word),
            other => Err(format!("unknown unit {other:?}")),
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Unit::Subword => "subword",
            Unit::Word => "word",
        })
    }
}

/// How an `n x n` attribution grid becomes one score per token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionMode {
    /// Row of the `[CLS]` position: attribution of each token to the pooled output.
    #[default]
    ClsRow,
    /// Total influence of each token over all non-special output positions.
    ColumnSum,
}

impl FromStr for ReductionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cls_row" => Ok(ReductionMode::ClsRow),
            "column_sum" => Ok(ReductionMode::ColumnSum),
            other => Err(format!("unknown reduction mode {other:?}")),
        }
    }
}

impl fmt::Display for ReductionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReductionMode::ClsRow => "cls_row",
            ReductionMode::ColumnSum => "column_sum",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WordAggregation {
    #[default]
    Mean,
    Max,
}

/// A row that had no mass and was replaced by a uniform distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegenerateRow {
    pub layer: usize,
    pub row: usize,
}

/// Entry `(i, j)`: influence of input token `j` on output token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    pub values: Array2<f64>,
    pub method: AttributionMethod,
    pub degenerate_rows: Vec<DegenerateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyVector {
    pub scores: Vec<f64>,
    pub unit: Unit,
    pub method: AttributionMethod,
}

impl SaliencyVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AttributionError {
    #[error("decomposition drifted from the traced forward pass at {stage}: relative error {error:e}")]
    ReconstructionDrift { stage: String, error: f64 },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("saliency is not subword-level")]
    NotSubword,
    #[error("word {0} has no subword tokens")]
    EmptyWord(usize),
}

/// Reduces a token grid to scores for the non-special tokens, in order.
/// The `[CLS]` row is the first special position.
pub fn matrix_to_saliency(m: &AttributionMatrix, mode: ReductionMode, special_mask: &[bool]) -> SaliencyVector {
    let values = &m.values;
    let keep: Vec<usize> = (0..special_mask.len()).filter(|&j| !special_mask[j]).collect();
    let scores = match mode {
        ReductionMode::ClsRow => {
            let cls = special_mask.iter().position(|&s| s).unwrap_or(0);
            keep.iter().map(|&j| values[[cls, j]]).collect()
        }
        ReductionMode::ColumnSum => keep
            .iter()
            .map(|&j| keep.iter().map(|&i| values[[i, j]]).sum())
            .collect(),
    };
    SaliencyVector {
        scores,
        unit: Unit::Subword,
        method: m.method,
    }
}

/// Pools subword scores into word scores. `word_index` covers the same
/// non-special tokens as `s`, in order.
pub fn aggregate_to_words(
    s: &SaliencyVector,
    word_index: &[usize],
    aggregation: WordAggregation,
) -> Result<SaliencyVector, AttributionError> {
    if s.unit != Unit::Subword {
        return Err(AttributionError::NotSubword);
    }
    assert_eq!(s.scores.len(), word_index.len(), "one word index per subword score");
    let words = word_index.iter().max().map_or(0, |&w| w + 1);
    let mut groups: Vec<Vec<f64>> = vec![Vec::new(); words];
    for (&score, &w) in s.scores.iter().zip(word_index) {
        groups[w].push(score);
    }
    let scores = groups
        .iter()
        .enumerate()
        .map(|(w, g)| {
            if g.is_empty() {
                return Err(AttributionError::EmptyWord(w));
            }
            Ok(match aggregation {
                WordAggregation::Mean => g.iter().sum::<f64>() / g.len() as f64,
                WordAggregation::Max => g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SaliencyVector {
        scores,
        unit: Unit::Word,
        method: s.method,
    })
}
