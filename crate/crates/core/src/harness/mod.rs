//! Evaluation harness: compress each sample, send it to a chat-completion
//! endpoint (or a replay file), score the reply and aggregate per
//! `(method, k)` with token and dollar cost.

mod cost;
mod dataset;
mod templates;
mod transport;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cost::{estimate_cost, estimate_tokens, CostEntry, CostError, CostTable, DEFAULT_COSTS};
pub use dataset::{
    load_dataset, parse_dataset, ClsSample, Dataset, DatasetError, QaSample, RsnSample, Sample, SampleId, SumSample,
};
pub use templates::{
    parse_choice, parse_label, render, template, template_hash, Template, CLS_TEMPLATE, QA_TEMPLATE, RSN_TEMPLATE,
    SUM_TEMPLATE, TEMPLATE_VERSION,
};
pub use transport::{
    complete_with_retry, interpret_response, Attempted, Completion, CompletionRequest, ConfigError, EndpointConfig,
    HttpTransport, ReplayError, ReplayRecord, ReplayTransport, RetryPolicy, Transport, TransportError, TransportKind,
    DEFAULT_API_KEY_ENV, FULL_METHOD,
};

use crate::compression::{check_k, frugalize, CompressionMethod, FrugalOptions, ScoringModel, ScoringOptions, SplitMix64};
use crate::metrics::{accuracy_f1, bleu, meteor, pass_at_1, rouge, MetricReport, Task};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("retention percent {0} is outside 1..=100")]
    KOutOfRange(u32),
    #[error("parallelism must be at least 1")]
    NoParallelism,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Empty means a baseline-only run (`full`, k = 100).
    pub methods: Vec<CompressionMethod>,
    /// k = 100 is always added.
    pub ks: Vec<u32>,
    pub scoring: ScoringOptions,
    pub seed: u64,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            methods: Vec::new(),
            ks: vec![100],
            scoring: ScoringOptions::default(),
            seed: 0,
            parallelism: 4,
            retry: RetryPolicy::default(),
        }
    }
}

/// One `(sample, method, k)` request and its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: SampleId,
    pub task: Task,
    pub method: String,
    pub k: u32,
    pub prompt_full: String,
    pub prompt_reduced: String,
    pub original_count: usize,
    pub kept_count: usize,
    pub response: Option<String>,
    pub error: Option<String>,
    pub retries: u32,
    pub input_tokens_estimate: u64,
    pub output_tokens_estimate: u64,
    pub input_tokens_reported: Option<u64>,
    pub output_tokens_reported: Option<u64>,
    /// Wall-clock time of the request; excluded from the summary hash.
    pub latency_ms: u64,
    /// Parsed label (CLS) or option letter (QA).
    pub prediction: Option<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalRecord {
    pub fn input_tokens(&self) -> u64 {
        self.input_tokens_reported.unwrap_or(self.input_tokens_estimate)
    }

    pub fn output_tokens(&self) -> u64 {
        self.output_tokens_reported.unwrap_or(self.output_tokens_estimate)
    }

    pub fn is_scored(&self) -> bool {
        self.error.is_none()
    }
}

/// Aggregate for one `(method, k)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub k: u32,
    /// Absent when no sample in the cell could be scored.
    pub metrics: Option<MetricReport>,
    pub scored: usize,
    pub errors: usize,
    pub mean_retention: f64,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub model_name: String,
    pub encoder_fingerprint: String,
    pub dataset_hash: String,
    pub template_version: String,
    pub template_hash: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub records: Vec<EvalRecord>,
    /// sha256 over everything above except request latencies.
    pub summary_hash: String,
}

impl EvalReport {
    pub fn scored(&self) -> usize {
        self.rows.iter().map(|r| r.scored).sum()
    }

    pub fn row(&self, method: &str, k: u32) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.k == k)
    }

    /// Plain-text table: one line per `(method, k)` with metrics and cost.
    pub fn render_table(&self) -> String {
        let names = self.task.metric_names();
        let mut out = format!("{:<16} {:>4}", "method", "k");
        for n in names {
            let _ = write!(out, " {n:>9}");
        }
        let _ = writeln!(out, " {:>7} {:>6} {:>10} {:>11}", "scored", "errors", "in_tokens", "cost_usd");
        for row in &self.rows {
            let _ = write!(out, "{:<16} {:>4}", row.method, row.k);
            for n in names {
                match row.metrics.as_ref().and_then(|m| m.metrics.get(*n)) {
                    Some(v) => {
                        let _ = write!(out, " {v:>9.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>9}", "-");
                    }
                }
            }
            let _ = writeln!(
                out,
                " {:>7} {:>6} {:>10} {:>11.6}",
                row.scored, row.errors, row.input_tokens, row.cost_usd
            );
        }
        out
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Per-request seed derived from the run seed and the request identity.
pub fn derive_seed(seed: u64, parts: &[&str]) -> u64 {
    let mut h = seed;
    for p in parts {
        h = SplitMix64::new(h ^ fnv1a(p.as_bytes())).next_u64();
    }
    h
}

/// `(method, k)` cells in report order. Methods keep the given order; k runs
/// from 100 downwards.
pub fn grid(options: &EvalOptions) -> Result<Vec<(Option<CompressionMethod>, u32)>, EvalError> {
    if options.methods.is_empty() {
        return Ok(vec![(None, 100)]);
    }
    let mut ks = options.ks.clone();
    for &k in &ks {
        check_k(k).map_err(|_| EvalError::KOutOfRange(k))?;
    }
    ks.push(100);
    ks.sort_unstable_by(|a, b| b.cmp(a));
    ks.dedup();
    let mut methods = options.methods.clone();
    let mut seen = Vec::new();
    methods.retain(|m| {
        let fresh = !seen.contains(m);
        seen.push(*m);
        fresh
    });
    Ok(methods.iter().flat_map(|&m| ks.iter().map(move |&k| (Some(m), k))).collect())
}

fn method_name(method: Option<CompressionMethod>) -> &'static str {
    method.map_or(FULL_METHOD, CompressionMethod::name)
}

/// Per-sample metric values; CLS macro F1 is only defined over a set and is
/// filled in during aggregation.
fn score_sample(sample: &Sample, response: &str, labels: &[String]) -> (Option<String>, BTreeMap<String, f64>) {
    let mut m = BTreeMap::new();
    let hit = |b: bool| if b { 1.0 } else { 0.0 };
    let prediction = match sample {
        Sample::Cls(s) => {
            let p = parse_label(response, labels);
            m.insert("accuracy".into(), hit(p.as_deref() == Some(s.label.as_str())));
            p
        }
        Sample::Sum(s) => {
            // A reply with no words scores zero on every overlap metric.
            let b = bleu(response, &s.reference).unwrap_or(0.0);
            let r = rouge(response, &s.reference).ok();
            m.insert("bleu".into(), b);
            m.insert("rouge1".into(), r.map_or(0.0, |r| r.rouge1));
            m.insert("rouge2".into(), r.map_or(0.0, |r| r.rouge2));
            m.insert("rougeL".into(), r.map_or(0.0, |r| r.rouge_l));
            m.insert("meteor".into(), meteor(response, &s.reference).unwrap_or(0.0));
            None
        }
        Sample::Qa(s) => {
            let p = parse_choice(response);
            m.insert("accuracy".into(), hit(p == Some(s.answer_index)));
            p.map(|i| ((b'A' + i as u8) as char).to_string())
        }
        Sample::Rsn(s) => {
            m.insert("pass@1".into(), hit(pass_at_1(response, s.answer_number)));
            None
        }
    };
    (prediction, m)
}

/// Label recorded when a CLS reply names none of the known labels.
pub const NO_LABEL: &str = "<none>";

fn aggregate(task: Task, method: &str, k: u32, records: &[&EvalRecord], golds: &BTreeMap<&SampleId, &str>, cost: &CostEntry) -> ReportRow {
    let scored: Vec<&&EvalRecord> = records.iter().filter(|r| r.is_scored()).collect();
    let input_tokens: u64 = scored.iter().map(|r| r.input_tokens()).sum();
    let output_tokens: u64 = scored.iter().map(|r| r.output_tokens()).sum();
    let metrics = (!scored.is_empty()).then(|| {
        let mut values = BTreeMap::new();
        match task {
            Task::Cls => {
                let preds: Vec<&str> = scored.iter().map(|r| r.prediction.as_deref().unwrap_or(NO_LABEL)).collect();
                let gold: Vec<&str> = scored.iter().map(|r| golds[&r.id]).collect();
                let (acc, f1) = accuracy_f1(&preds, &gold).expect("equal, non-empty");
                values.insert("accuracy".to_string(), acc);
                values.insert("macro_f1".to_string(), f1);
            }
            _ => {
                for name in task.metric_names() {
                    let sum: f64 = scored.iter().map(|r| r.metrics[*name]).sum();
                    values.insert(name.to_string(), sum / scored.len() as f64);
                }
            }
        }
        MetricReport {
            task,
            metrics: values,
            sample_count: scored.len(),
        }
    });
    let retention: f64 = records
        .iter()
        .map(|r| r.kept_count as f64 / r.original_count.max(1) as f64)
        .sum::<f64>()
        / records.len().max(1) as f64;
    ReportRow {
        method: method.to_string(),
        k,
        metrics,
        scored: scored.len(),
        errors: records.len() - scored.len(),
        mean_retention: retention,
        input_tokens,
        output_tokens,
        cost_usd: estimate_cost(input_tokens, output_tokens, cost),
    }
}

struct Unit<'a> {
    sample: &'a Sample,
    method: Option<CompressionMethod>,
    k: u32,
}

fn run_unit(
    unit: &Unit<'_>,
    model: &ScoringModel,
    options: &EvalOptions,
    labels: &[String],
    transport: &dyn Transport,
    sleep: &(dyn Fn(Duration) + Sync),
) -> EvalRecord {
    let sample = unit.sample;
    let text = sample.compressible();
    let method = method_name(unit.method);
    let id = sample.id().to_string();
    let k_text = unit.k.to_string();
    let (_, prompt_full) = render(sample, text, labels);
    let mut record = EvalRecord {
        id: sample.id().clone(),
        task: sample.task(),
        method: method.to_string(),
        k: unit.k,
        prompt_full: prompt_full.clone(),
        prompt_reduced: prompt_full,
        original_count: 0,
        kept_count: 0,
        response: None,
        error: None,
        retries: 0,
        input_tokens_estimate: 0,
        output_tokens_estimate: 0,
        input_tokens_reported: None,
        output_tokens_reported: None,
        latency_ms: 0,
        prediction: None,
        metrics: BTreeMap::new(),
    };
    let compressed = match unit.method {
        // Every method sends the original text at full retention.
        Some(m) if unit.k < 100 => {
            let f = FrugalOptions {
                method: m,
                k: unit.k,
                scoring: options.scoring,
                seed: derive_seed(options.seed, &[&id]),
                count: None,
            };
            frugalize(text, model, &f).map(|r| (r.reduced_text, r.original_count, r.kept_count))
        }
        _ => {
            let m = crate::tokenizer::split_words(text).len();
            Ok((text.to_string(), m, m))
        }
    };
    let (reduced, original_count, kept_count) = match compressed {
        Ok(c) => c,
        Err(e) => {
            record.error = Some(format!("compression: {e}"));
            return record;
        }
    };
    record.original_count = original_count;
    record.kept_count = kept_count;
    let (system, user) = render(sample, &reduced, labels);
    record.prompt_reduced = user.clone();
    record.input_tokens_estimate = estimate_tokens(&system) + estimate_tokens(&user);
    let request = CompletionRequest {
        sample_id: sample.id().clone(),
        method: method.to_string(),
        k: unit.k,
        system,
        user,
    };
    let started = Instant::now();
    let seed = derive_seed(options.seed, &[&id, method, &k_text, "retry"]);
    let attempted = complete_with_retry(transport, &request, &options.retry, seed, sleep);
    record.latency_ms = started.elapsed().as_millis() as u64;
    record.retries = attempted.retries;
    match attempted.result {
        Ok(c) => {
            record.output_tokens_estimate = estimate_tokens(&c.text);
            record.input_tokens_reported = c.input_tokens;
            record.output_tokens_reported = c.output_tokens;
            let (prediction, metrics) = score_sample(sample, &c.text, labels);
            record.prediction = prediction;
            record.metrics = metrics;
            record.response = Some(c.text);
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

#[derive(Serialize)]
struct HashView<'a> {
    task: Task,
    model_name: &'a str,
    encoder_fingerprint: &'a str,
    dataset_hash: &'a str,
    template_version: &'a str,
    template_hash: &'a str,
    seed: u64,
    rows: &'a [ReportRow],
    records: Vec<EvalRecord>,
}

/// Runs the `(sample, method, k)` grid with at most `options.parallelism`
/// requests in flight. Records and rows come out in grid order regardless
/// of completion order. Per-request failures are recorded, not returned.
pub fn run_eval(
    dataset: &Dataset,
    model: &ScoringModel,
    options: &EvalOptions,
    transport: &dyn Transport,
    model_name: &str,
    cost: &CostEntry,
    sleep: &(dyn Fn(Duration) + Sync),
) -> Result<EvalReport, EvalError> {
    if options.parallelism == 0 {
        return Err(EvalError::NoParallelism);
    }
    let cells = grid(options)?;
    let labels = dataset.labels();
    let units: Vec<Unit<'_>> = cells
        .iter()
        .flat_map(|&(method, k)| dataset.samples.iter().map(move |sample| Unit { sample, method, k }))
        .collect();

    let next = AtomicUsize::new(0);
    let workers = options.parallelism.min(units.len()).max(1);
    let mut done: Vec<(usize, EvalRecord)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut out = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(unit) = units.get(i) else { break };
                        out.push((i, run_unit(unit, model, options, &labels, transport, sleep)));
                    }
                    out
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    done.sort_by_key(|(i, _)| *i);
    let records: Vec<EvalRecord> = done.into_iter().map(|(_, r)| r).collect();

    let golds: BTreeMap<&SampleId, &str> = dataset
        .samples
        .iter()
        .filter_map(|s| match s {
            Sample::Cls(c) => Some((&c.id, c.label.as_str())),
            _ => None,
        })
        .collect();
    let n = dataset.samples.len();
    let rows: Vec<ReportRow> = cells
        .iter()
        .enumerate()
        .map(|(c, &(method, k))| {
            let cell: Vec<&EvalRecord> = records[c * n..(c + 1) * n].iter().collect();
            aggregate(dataset.task, method_name(method), k, &cell, &golds, cost)
        })
        .collect();

    let mut report = EvalReport {
        task: dataset.task,
        model_name: model_name.to_string(),
        encoder_fingerprint: model.bundle.fingerprint(),
        dataset_hash: dataset.hash.clone(),
        template_version: TEMPLATE_VERSION.to_string(),
        template_hash: template_hash(dataset.task),
        seed: options.seed,
        rows,
        records,
        summary_hash: String::new(),
    };
    report.summary_hash = summary_hash(&report);
    Ok(report)
}

/// Deterministic digest of a report, ignoring latencies and the stored hash.
pub fn summary_hash(report: &EvalReport) -> String {
    let view = HashView {
        task: report.task,
        model_name: &report.model_name,
        encoder_fingerprint: &report.encoder_fingerprint,
        dataset_hash: &report.dataset_hash,
        template_version: &report.template_version,
        template_hash: &report.template_hash,
        seed: report.seed,
        rows: &report.rows,
        records: report
            .records
            .iter()
            .map(|r| EvalRecord {
                latency_ms: 0,
                ..r.clone()
            })
            .collect(),
    };
    let json = serde_json::to_vec(&view).expect("report serializes");
    hex::encode(Sha256::digest(json))
}
