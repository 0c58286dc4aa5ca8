use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::split_words;

/// Dollar prices per million tokens for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    #[serde(rename = "model")]
    pub model_name: String,
    #[serde(rename = "in_per_1m")]
    pub usd_per_1m_input: f64,
    #[serde(rename = "out_per_1m")]
    pub usd_per_1m_output: f64,
}

#[derive(Debug, Error)]
pub enum CostError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cost table: {0}")]
    Csv(#[from] csv::Error),
    #[error("cost table: negative or non-finite price for {0}")]
    BadPrice(String),
    #[error("cost table: duplicate model {0}")]
    Duplicate(String),
    #[error("no cost entry for model {0}")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub entries: Vec<CostEntry>,
}

/// Shipped price list: `(model, in, out)` in USD per million tokens.
pub const DEFAULT_COSTS: [(&str, f64, f64); 5] = [
    ("Llama-3 8B", 0.03, 0.06),
    ("Llama-3 70B", 0.30, 0.40),
    ("GPT-3.5", 0.50, 1.50),
    ("Gemini-2.0 FT", 0.10, 0.40),
    ("o3-mini", 1.10, 4.40),
];

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            entries: DEFAULT_COSTS
                .iter()
                .map(|&(m, i, o)| CostEntry {
                    model_name: m.to_string(),
                    usd_per_1m_input: i,
                    usd_per_1m_output: o,
                })
                .collect(),
        }
    }
}

impl CostTable {
    /// CSV with header `model,in_per_1m,out_per_1m`.
    pub fn from_reader(reader: impl Read) -> Result<Self, CostError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut entries: Vec<CostEntry> = Vec::new();
        for row in rdr.deserialize() {
            let e: CostEntry = row?;
            if !(e.usd_per_1m_input >= 0.0 && e.usd_per_1m_output >= 0.0)
                || !e.usd_per_1m_input.is_finite()
                || !e.usd_per_1m_output.is_finite()
            {
                return Err(CostError::BadPrice(e.model_name));
            }
            if entries.iter().any(|x| x.model_name.eq_ignore_ascii_case(&e.model_name)) {
                return Err(CostError::Duplicate(e.model_name));
            }
            entries.push(e);
        }
        Ok(CostTable { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CostError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| CostError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        CostTable::from_reader(file)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    /// Case-insensitive lookup by model name.
    pub fn get(&self, model: &str) -> Result<&CostEntry, CostError> {
        self.entries
            .iter()
            .find(|e| e.model_name.eq_ignore_ascii_case(model))
            .ok_or_else(|| CostError::UnknownModel(model.to_string()))
    }
}

/// `input * in_rate / 1e6 + output * out_rate / 1e6` dollars.
pub fn estimate_cost(input_tokens: u64, output_tokens: u64, entry: &CostEntry) -> f64 {
    input_tokens as f64 / 1e6 * entry.usd_per_1m_input + output_tokens as f64 / 1e6 * entry.usd_per_1m_output
}

/// Token estimate used when a provider reports no usage: whitespace-separated
/// words with punctuation counted separately, so a compressed prompt never
/// counts more than its source.
pub fn estimate_tokens(text: &str) -> u64 {
    split_words(text).len() as u64
}
