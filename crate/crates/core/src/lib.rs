//! Attribution-guided prompt compression.
//!
//! A small transformer encoder scores every token of a prompt (attention
//! rollout, GlobEnc norm attribution, or DecompX decomposition); the most
//! salient words are kept in their original order, and the shortened prompt
//! is sent to a chat-completion endpoint for task evaluation and cost
//! accounting.

pub mod attribution;
pub mod compression;
pub mod encoder;
pub mod harness;
pub mod metrics;
pub mod selfcheck;
pub mod tokenizer;

pub use attribution::{
    aggregate_to_words, attention_rollout, decompx, globenc, matrix_to_saliency, AttributionError, AttributionMatrix,
    AttributionMethod, Decomposition, ReductionMode, SaliencyVector, ScoreSign, Target, Unit, WordAggregation,
};
pub use compression::{
    frugalize, rank, select_bottom_k, select_random_k, select_top_k, CompressionError, CompressionMethod,
    CompressionResult, FrugalOptions, RankingPermutation, ScoringModel, ScoringOptions,
};
pub use encoder::{
    classify, forward, Activation, EncoderBundle, EncoderConfig, ForwardError, ForwardTrace, ModelError,
};
pub use metrics::{accuracy_f1, bleu, meteor, pass_at_1, rouge, MetricError, MetricReport, Task};
pub use tokenizer::{reconstruct, tokenize, TokenizeError, TokenizedInput, Vocab, VocabError};
