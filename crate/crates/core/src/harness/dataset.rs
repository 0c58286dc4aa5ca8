use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::Task;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset has no records")]
    Empty,
}

/// Record id; numbers and strings are both accepted and compared as text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct SampleId(pub String);

impl<'de> Deserialize<'de> for SampleId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(s) => Ok(SampleId(s)),
            Value::Number(n) => Ok(SampleId(n.to_string())),
            other => Err(serde::de::Error::custom(format!("id must be a string or number, got {other}"))),
        }
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SampleId {
    fn from(s: &str) -> Self {
        SampleId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsSample {
    pub id: SampleId,
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SumSample {
    pub id: SampleId,
    pub document: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSample {
    pub id: SampleId,
    pub context: String,
    pub question: String,
    pub choices: [String; 4],
    pub answer_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsnSample {
    pub id: SampleId,
    pub problem: String,
    pub answer_number: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Cls(ClsSample),
    Sum(SumSample),
    Qa(QaSample),
    Rsn(RsnSample),
}

impl Sample {
    pub fn id(&self) -> &SampleId {
        match self {
            Sample::Cls(s) => &s.id,
            Sample::Sum(s) => &s.id,
            Sample::Qa(s) => &s.id,
            Sample::Rsn(s) => &s.id,
        }
    }

    /// The text that gets compressed: for QA only the context, never the
    /// question or the answer options.
    pub fn compressible(&self) -> &str {
        match self {
            Sample::Cls(s) => &s.text,
            Sample::Sum(s) => &s.document,
            Sample::Qa(s) => &s.context,
            Sample::Rsn(s) => &s.problem,
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Sample::Cls(_) => Task::Cls,
            Sample::Sum(_) => Task::Sum,
            Sample::Qa(_) => Task::Qa,
            Sample::Rsn(_) => Task::Rsn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub samples: Vec<Sample>,
    /// sha256 of the raw file contents.
    pub hash: String,
}

impl Dataset {
    /// Sorted distinct gold labels (CLS only; empty otherwise).
    pub fn labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .samples
            .iter()
            .filter_map(|s| match s {
                Sample::Cls(c) => Some(c.label.clone()),
                _ => None,
            })
            .collect();
        labels.sort();
        labels.dedup();
        labels
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn parse_record<T: DeserializeOwned>(line: usize, text: &str) -> Result<T, DatasetError> {
    serde_json::from_str(text).map_err(|e| DatasetError::Parse {
        line,
        message: e.to_string(),
    })
}

fn invalid(line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        line,
        message: message.into(),
    }
}

/// Parses line-delimited JSON records for `task`; blank lines are skipped.
pub fn parse_dataset(contents: &str, task: Task) -> Result<Dataset, DatasetError> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in contents.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let sample = match task {
            Task::Cls => Sample::Cls(parse_record(line, raw)?),
            Task::Sum => Sample::Sum(parse_record(line, raw)?),
            Task::Qa => {
                let s: QaSample = parse_record(line, raw)?;
                if s.answer_index >= 4 {
                    return Err(invalid(line, format!("answer_index {} is not in 0..4", s.answer_index)));
                }
                Sample::Qa(s)
            }
            Task::Rsn => {
                let s: RsnSample = parse_record(line, raw)?;
                if !s.answer_number.is_finite() {
                    return Err(invalid(line, "answer_number is not finite"));
                }
                Sample::Rsn(s)
            }
        };
        if sample.compressible().split_whitespace().next().is_none() {
            return Err(invalid(line, "text to compress is empty"));
        }
        if !seen.insert(sample.id().clone()) {
            return Err(DatasetError::DuplicateId {
                line,
                id: sample.id().to_string(),
            });
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(Dataset {
        task,
        samples,
        hash: hex::encode(Sha256::digest(contents.as_bytes())),
    })
}

pub fn load_dataset(path: impl AsRef<Path>, task: Task) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let contents = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&contents, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_task() {
        let cls = parse_dataset("{\"id\": 7, \"text\": \"good film\", \"label\": \"positive\"}\n\n", Task::Cls).unwrap();
        assert_eq!(cls.samples[0].id(), &SampleId::from("7"));
        let qa = parse_dataset(
            r#"{"id":"q1","context":"It rained.","question":"Why wet?","choices":["rain","sun","snow","wind"],"answer_index":0}"#,
            Task::Qa,
        )
        .unwrap();
        assert_eq!(qa.samples[0].compressible(), "It rained.");
        let rsn = parse_dataset(r#"{"id":1,"problem":"2+2?","answer_number":4}"#, Task::Rsn).unwrap();
        assert_eq!(rsn.task, Task::Rsn);
        let sum = parse_dataset(r#"{"id":1,"document":"long text","reference":"short"}"#, Task::Sum).unwrap();
        assert_eq!(sum.len(), 1);
    }

    #[test]
    fn reports_offending_line() {
        let text = "{\"id\":1,\"text\":\"a\",\"label\":\"x\"}\n{\"id\":2,\"text\":\"b\"}\n";
        assert!(matches!(parse_dataset(text, Task::Cls), Err(DatasetError::Parse { line: 2, .. })));
        let dup = "{\"id\":1,\"text\":\"a\",\"label\":\"x\"}\n{\"id\":\"1\",\"text\":\"b\",\"label\":\"y\"}\n";
        assert!(matches!(parse_dataset(dup, Task::Cls), Err(DatasetError::DuplicateId { line: 2, .. })));
        let qa = r#"{"id":1,"context":"c","question":"q","choices":["a","b","c","d"],"answer_index":4}"#;
        assert!(matches!(parse_dataset(qa, Task::Qa), Err(DatasetError::Parse { line: 1, .. })));
        assert!(matches!(parse_dataset("\n", Task::Cls), Err(DatasetError::Empty)));
        let bad_id = r#"{"id":[1],"text":"a","label":"x"}"#;
        assert!(matches!(parse_dataset(bad_id, Task::Cls), Err(DatasetError::Parse { line: 1, .. })));
    }

    #[test]
    fn labels_sorted_distinct() {
        let text = "{\"id\":1,\"text\":\"a\",\"label\":\"pos\"}\n{\"id\":2,\"text\":\"b\",\"label\":\"neg\"}\n{\"id\":3,\"text\":\"c\",\"label\":\"pos\"}";
        assert_eq!(parse_dataset(text, Task::Cls).unwrap().labels(), vec!["neg", "pos"]);
    }
}
