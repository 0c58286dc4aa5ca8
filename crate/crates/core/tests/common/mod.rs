#![allow(dead_code)]

use ndarray::Array2;
use proptest::prelude::*;

use salient::encoder::{Activation, EncoderBundle, EncoderConfig};
use salient::tokenizer::Vocab;

/// Random small encoder: L <= 4, H <= 4, d <= 32, n <= 10.
pub fn bundle_and_ids() -> impl Strategy<Value = (EncoderBundle, Vec<u32>)> {
    (1usize..=4, 1usize..=4, 1usize..=8, 1usize..=40, 2usize..=4, 0usize..3, any::<u64>())
        .prop_flat_map(|(layers, heads, head_dim, ffn, classes, act, seed)| {
            let config = EncoderConfig {
                num_layers: layers,
                num_heads: heads,
                hidden_dim: heads * head_dim,
                ffn_dim: ffn,
                vocab_size: 25,
                max_positions: 10,
                num_classes: classes,
                ln_epsilon: 1e-12,
                activation: [Activation::Gelu, Activation::Relu, Activation::Identity][act],
            };
            let bundle = EncoderBundle::random(config, seed).expect("valid config");
            (Just(bundle), prop::collection::vec(0u32..25, 1..=10))
        })
}

pub fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn relative_error(got: &Array2<f64>, want: &Array2<f64>) -> f64 {
    frobenius(&(got - want)) / frobenius(want).max(1e-300)
}

pub fn naive_product(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            out[[i, j]] = (0..a.ncols()).map(|t| a[[i, t]] * b[[t, j]]).sum();
        }
    }
    out
}

/// Lowercase letters and their continuations, so any alphabetic word segments.
pub fn letter_vocab() -> Vocab {
    let mut entries: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", ",", ".", "!", "?"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    entries.extend(('a'..='z').map(|c| c.to_string()));
    entries.extend(('a'..='z').map(|c| format!("##{c}")));
    entries.extend(["the", "movie", "good", "##ing"].iter().map(|s| s.to_string()));
    Vocab::from_entries(entries, true).expect("valid vocab")
}
