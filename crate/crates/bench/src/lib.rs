//! Shared inputs for the pipeline benchmarks.

use std::path::PathBuf;

use salient::ScoringModel;

/// The bundled two-layer model under `fixtures/tiny`.
pub fn tiny_model() -> ScoringModel {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tiny");
    ScoringModel::load(dir.join("model.bin"), dir.join("vocab.txt")).expect("run the tiny_model example first")
}

/// A sentence of roughly `words` words drawn from the tiny vocabulary.
pub fn sentence(words: usize) -> String {
    const POOL: [&str; 12] = ["the", "movie", "was", "good", "and", "i", "liked", "it", "very", "much", "but", "long"];
    (0..words).map(|i| POOL[(i * 5 + i / 12) % POOL.len()]).collect::<Vec<_>>().join(" ")
}
