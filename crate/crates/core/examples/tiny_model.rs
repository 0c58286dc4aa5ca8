//! Writes the bundled tiny encoder and its vocabulary.
//!
//! ```text
//! cargo run -p salient-core --example tiny_model -- fixtures/tiny
//! ```

use std::path::PathBuf;

use salient::encoder::{Activation, EncoderBundle, EncoderConfig};

const SEED: u64 = 20_240_601;

const WORDS: &str = "the a an and or but of to in on at for with from by is was are were be been it this that \
    these those he she they we you i his her their its not no very so too much many more most good bad great \
    poor fine movie film book story plot acting actor music food service place price time day night year \
    people team city town road river rain sun water market company report new old long short first last \
    liked loved hated enjoyed said made found went came took gave saw had has have will would could should \
    what which who how why when where many each every all some any one two three four five six seven eight \
    nine ten hundred dollars apples books cost buys sells total left after before each per";

fn vocab() -> Vec<String> {
    let mut v: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"].iter().map(|s| s.to_string()).collect();
    v.extend(".,!?;:'\"()-$%#/".chars().map(|c| c.to_string()));
    v.extend(('0'..='9').map(|c| c.to_string()));
    v.extend(('a'..='z').map(|c| c.to_string()));
    v.extend(('0'..='9').chain('a'..='z').map(|c| format!("##{c}")));
    for w in WORDS.split_whitespace() {
        if !v.iter().any(|x| x == w) {
            v.push(w.to_string());
        }
    }
    v
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures/tiny".into()));
    std::fs::create_dir_all(&dir)?;
    let vocab = vocab();
    let config = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        hidden_dim: 16,
        ffn_dim: 32,
        vocab_size: vocab.len(),
        max_positions: 64,
        num_classes: 2,
        ln_epsilon: 1e-12,
        activation: Activation::Gelu,
    };
    let bundle = EncoderBundle::random(config, SEED)?;
    bundle.save(dir.join("model.bin"))?;
    std::fs::write(dir.join("vocab.txt"), format!("#lowercase=true\n{}\n", vocab.join("\n")))?;
    println!("{} ({} tokens) fingerprint {}", dir.display(), vocab.len(), bundle.fingerprint());
    Ok(())
}
