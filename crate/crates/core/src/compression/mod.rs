//! Saliency ranking, top/bottom/random selection and order-preserving text
//! reconstruction.
//!
//! With `m` units (words or subwords) and retention percent `k`, exactly
//! `p = ceil(k * m / 100)` units are kept and emitted in source order.

mod rng;

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use rng::{sample_indices, SplitMix64};

use crate::attribution::{
    aggregate_to_words, attention_rollout, decompx, globenc, matrix_to_saliency, AttributionError, AttributionMethod,
    ReductionMode, SaliencyVector, ScoreSign, Target, Unit, WordAggregation,
};
use crate::encoder::{forward, EncoderBundle, ForwardError, ModelError};
use crate::tokenizer::{reconstruct, tokenize, TokenizeError, TokenizedInput, Vocab, VocabError};

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("saliency vector is empty")]
    EmptyScores,
    #[error("score at position {0} is NaN")]
    NanScore(usize),
    #[error("retention percent {0} is outside 1..=100")]
    KOutOfRange(u32),
    #[error("kept count {count} is outside 1..={units}")]
    CountOutOfRange { count: usize, units: usize },
    #[error("{scores} scores for {units} units")]
    LengthMismatch { scores: usize, units: usize },
    #[error("word {word} needs {tokens} positions but the encoder holds {max}")]
    WordTooLong { word: usize, tokens: usize, max: usize },
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
}

/// Indices ordered by non-increasing score; equal scores keep source order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingPermutation {
    pub pi: Vec<usize>,
}

impl RankingPermutation {
    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }
}

pub fn rank(scores: &[f64]) -> Result<RankingPermutation, CompressionError> {
    if scores.is_empty() {
        return Err(CompressionError::EmptyScores);
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(CompressionError::NanScore(i));
    }
    let mut pi: Vec<usize> = (0..scores.len()).collect();
    // Stable sort: ties stay in index order.
    pi.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    Ok(RankingPermutation { pi })
}

pub fn check_k(k: u32) -> Result<(), CompressionError> {
    if (1..=100).contains(&k) {
        Ok(())
    } else {
        Err(CompressionError::KOutOfRange(k))
    }
}

/// `ceil(k * m / 100)`, in exact integer arithmetic.
pub fn kept_count(m: usize, k: u32) -> usize {
    (m * k as usize).div_ceil(100)
}

fn check_count(count: usize, units: usize) -> Result<(), CompressionError> {
    if (1..=units).contains(&count) {
        Ok(())
    } else {
        Err(CompressionError::CountOutOfRange { count, units })
    }
}

/// First `count` entries of `pi`, ascending.
pub fn top_count(pi: &RankingPermutation, count: usize) -> Result<Vec<usize>, CompressionError> {
    check_count(count, pi.len())?;
    let mut kept = pi.pi[..count].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Last `count` entries of `pi`, ascending.
pub fn bottom_count(pi: &RankingPermutation, count: usize) -> Result<Vec<usize>, CompressionError> {
    check_count(count, pi.len())?;
    let mut kept = pi.pi[pi.len() - count..].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

pub fn select_top_k(pi: &RankingPermutation, k: u32) -> Result<Vec<usize>, CompressionError> {
    check_k(k)?;
    top_count(pi, kept_count(pi.len(), k))
}

pub fn select_bottom_k(pi: &RankingPermutation, k: u32) -> Result<Vec<usize>, CompressionError> {
    check_k(k)?;
    bottom_count(pi, kept_count(pi.len(), k))
}

/// Uniform draw of `ceil(k * m / 100)` indices with [`SplitMix64`] seeded by `seed`.
pub fn select_random_k(m: usize, k: u32, seed: u64) -> Result<Vec<usize>, CompressionError> {
    check_k(k)?;
    let count = kept_count(m, k);
    check_count(count, m)?;
    Ok(sample_indices(m, count, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMethod {
    #[serde(rename = "globenc")]
    GlobEnc,
    #[serde(rename = "decompx")]
    DecompX,
    Rollout,
    Random,
    #[serde(rename = "bottom_globenc")]
    BottomGlobEnc,
    #[serde(rename = "bottom_decompx")]
    BottomDecompX,
}

impl CompressionMethod {
    pub const ALL: [CompressionMethod; 6] = [
        CompressionMethod::GlobEnc,
        CompressionMethod::DecompX,
        CompressionMethod::Rollout,
        CompressionMethod::Random,
        CompressionMethod::BottomGlobEnc,
        CompressionMethod::BottomDecompX,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CompressionMethod::GlobEnc => "globenc",
            CompressionMethod::DecompX => "decompx",
            CompressionMethod::Rollout => "rollout",
            CompressionMethod::Random => "random",
            CompressionMethod::BottomGlobEnc => "bottom_globenc",
            CompressionMethod::BottomDecompX => "bottom_decompx",
        }
    }

    /// Scorer behind the method; `None` for random selection.
    pub fn attribution(self) -> Option<AttributionMethod> {
        match self {
            CompressionMethod::GlobEnc | CompressionMethod::BottomGlobEnc => Some(AttributionMethod::GlobEnc),
            CompressionMethod::DecompX | CompressionMethod::BottomDecompX => Some(AttributionMethod::DecompX),
            CompressionMethod::Rollout => Some(AttributionMethod::Rollout),
            CompressionMethod::Random => None,
        }
    }

    pub fn keeps_lowest(self) -> bool {
        matches!(self, CompressionMethod::BottomGlobEnc | CompressionMethod::BottomDecompX)
    }
}

impl fmt::Display for CompressionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompressionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CompressionMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown compression method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionResult {
    pub reduced_text: String,
    /// Kept unit indices (words or non-special subwords), ascending.
    pub kept_indices: Vec<usize>,
    pub k: u32,
    pub p: usize,
    pub method: CompressionMethod,
    pub unit: Unit,
    pub original_count: usize,
    pub kept_count: usize,
}

impl CompressionResult {
    pub fn retention(&self) -> f64 {
        self.kept_count as f64 / self.original_count as f64
    }
}

/// Scoring knobs shared by every attribution method.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoringOptions {
    pub unit: Unit,
    pub mode: ReductionMode,
    pub aggregation: WordAggregation,
    pub target: Target,
    pub sign: ScoreSign,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrugalOptions {
    pub method: CompressionMethod,
    pub k: u32,
    pub scoring: ScoringOptions,
    pub seed: u64,
    /// Fixed number of kept units in place of `ceil(k * m / 100)`.
    pub count: Option<usize>,
}

impl FrugalOptions {
    pub fn new(method: CompressionMethod, k: u32) -> Self {
        FrugalOptions {
            method,
            k,
            scoring: ScoringOptions::default(),
            seed: 0,
            count: None,
        }
    }
}

/// Encoder weights plus the vocabulary they were trained with.
#[derive(Debug, Clone)]
pub struct ScoringModel {
    pub bundle: EncoderBundle,
    pub vocab: Vocab,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("vocab: {0}")]
    Vocab(#[from] VocabError),
    #[error("vocab has {vocab} entries but the model expects {model}")]
    VocabSize { vocab: usize, model: usize },
}

impl ScoringModel {
    pub fn new(bundle: EncoderBundle, vocab: Vocab) -> Result<Self, LoadError> {
        if vocab.len() != bundle.config.vocab_size {
            return Err(LoadError::VocabSize {
                vocab: vocab.len(),
                model: bundle.config.vocab_size,
            });
        }
        Ok(ScoringModel { bundle, vocab })
    }

    pub fn load(model: impl AsRef<Path>, vocab: impl AsRef<Path>) -> Result<Self, LoadError> {
        ScoringModel::new(EncoderBundle::load(model)?, Vocab::load(vocab)?)
    }
}

pub fn unit_count(input: &TokenizedInput, unit: Unit) -> usize {
    match unit {
        Unit::Word => input.num_words(),
        Unit::Subword => input.special_mask.iter().filter(|s| !**s).count(),
    }
}

/// Word runs whose token count (plus the two markers) fits in `max_positions`.
pub fn chunk_words(input: &TokenizedInput, max_positions: usize) -> Result<Vec<Range<usize>>, CompressionError> {
    let budget = max_positions.saturating_sub(2);
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut used = 0;
    for (w, tokens) in input.word_token_ranges().iter().enumerate() {
        let len = tokens.len();
        if len > budget {
            return Err(CompressionError::WordTooLong {
                word: w,
                tokens: len + 2,
                max: max_positions,
            });
        }
        if used + len > budget {
            chunks.push(start..w);
            start = w;
            used = 0;
        }
        used += len;
    }
    chunks.push(start..input.num_words());
    Ok(chunks)
}

fn score_chunk(
    model: &ScoringModel,
    chunk: &TokenizedInput,
    method: AttributionMethod,
    options: &ScoringOptions,
) -> Result<Vec<f64>, CompressionError> {
    let trace = forward(&model.bundle, &chunk.token_ids)?;
    let s = match method {
        AttributionMethod::Rollout => matrix_to_saliency(&attention_rollout(&trace), options.mode, &chunk.special_mask),
        AttributionMethod::GlobEnc => {
            matrix_to_saliency(&globenc(&trace, &model.bundle), options.mode, &chunk.special_mask)
        }
        AttributionMethod::DecompX => {
            decompx(&trace, &model.bundle, options.target)?.saliency(&chunk.special_mask, options.sign)
        }
    };
    Ok(s.scores)
}

/// Saliency per unit. Inputs longer than the encoder window are scored in
/// word-aligned chunks and the chunk scores concatenated.
pub fn score_units(
    model: &ScoringModel,
    input: &TokenizedInput,
    method: AttributionMethod,
    options: &ScoringOptions,
) -> Result<SaliencyVector, CompressionError> {
    let max = model.bundle.config.max_positions;
    let scores = if input.len() <= max {
        score_chunk(model, input, method, options)?
    } else {
        let mut scores = Vec::with_capacity(input.len());
        for range in chunk_words(input, max)? {
            scores.extend(score_chunk(model, &input.slice_words(range), method, options)?);
        }
        scores
    };
    let subwords = SaliencyVector {
        scores,
        unit: Unit::Subword,
        method,
    };
    match options.unit {
        Unit::Subword => Ok(subwords),
        Unit::Word => {
            let word_index: Vec<usize> = input.word_index.iter().flatten().copied().collect();
            Ok(aggregate_to_words(&subwords, &word_index, options.aggregation)?)
        }
    }
}

/// Words touched by the kept units, ascending.
fn kept_words(input: &TokenizedInput, unit: Unit, kept: &[usize]) -> Vec<usize> {
    match unit {
        Unit::Word => kept.to_vec(),
        Unit::Subword => {
            let word_index: Vec<usize> = input.word_index.iter().flatten().copied().collect();
            let mut words: Vec<usize> = kept.iter().map(|&i| word_index[i]).collect();
            words.dedup();
            words
        }
    }
}

/// Builds the result from already-selected unit indices.
pub fn assemble(
    input: &TokenizedInput,
    kept: Vec<usize>,
    method: CompressionMethod,
    k: u32,
    unit: Unit,
) -> Result<CompressionResult, CompressionError> {
    let reduced_text = reconstruct(input, &kept_words(input, unit, &kept))?;
    Ok(CompressionResult {
        reduced_text,
        p: kept.len(),
        kept_count: kept.len(),
        kept_indices: kept,
        k,
        method,
        unit,
        original_count: unit_count(input, unit),
    })
}

/// Keeps the top (or, for bottom methods, lowest) units by the given scores.
pub fn compress_scored(
    input: &TokenizedInput,
    scores: &SaliencyVector,
    method: CompressionMethod,
    k: u32,
    count: Option<usize>,
) -> Result<CompressionResult, CompressionError> {
    check_k(k)?;
    let units = unit_count(input, scores.unit);
    if scores.len() != units {
        return Err(CompressionError::LengthMismatch {
            scores: scores.len(),
            units,
        });
    }
    let pi = rank(&scores.scores)?;
    let p = count.unwrap_or_else(|| kept_count(units, k));
    let kept = if method.keeps_lowest() {
        bottom_count(&pi, p)?
    } else {
        top_count(&pi, p)?
    };
    assemble(input, kept, method, k, scores.unit)
}

/// tokenize, score, rank, select, reconstruct.
pub fn frugalize(text: &str, model: &ScoringModel, options: &FrugalOptions) -> Result<CompressionResult, CompressionError> {
    check_k(options.k)?;
    let input = tokenize(text, &model.vocab)?;
    let unit = options.scoring.unit;
    let m = unit_count(&input, unit);
    let p = options.count.unwrap_or_else(|| kept_count(m, options.k));
    check_count(p, m)?;
    let kept = match options.method.attribution() {
        _ if p == m => (0..m).collect(),
        None => sample_indices(m, p, options.seed),
        Some(method) => {
            let scores = score_units(model, &input, method, &options.scoring)?;
            return compress_scored(&input, &scores, options.method, options.k, Some(p));
        }
    };
    assemble(&input, kept, options.method, options.k, unit)
}
