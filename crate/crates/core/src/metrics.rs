//! Task metrics: accuracy and macro F1, BLEU-4, ROUGE-1/2/L, exact-match
//! METEOR and pass@1.
//!
//! Text metrics compare lowercased word sequences produced by the same
//! whitespace-and-punctuation splitter as the tokenizer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::split_words;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{preds} predictions for {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("no labels to score")]
    Empty,
    #[error("{0} text has no words")]
    EmptyText(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Cls,
    Sum,
    Qa,
    Rsn,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Cls => "CLS",
            Task::Sum => "SUM",
            Task::Qa => "QA",
            Task::Rsn => "RSN",
        }
    }

    /// Metric columns reported for the task, in report order.
    pub fn metric_names(self) -> &'static [&'static str] {
        match self {
            Task::Cls => &["accuracy", "macro_f1"],
            Task::Sum => &["bleu", "rouge1", "rouge2", "rougeL", "meteor"],
            Task::Qa => &["accuracy"],
            Task::Rsn => &["pass@1"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CLS" => Ok(Task::Cls),
            "SUM" => Ok(Task::Sum),
            "QA" => Ok(Task::Qa),
            "RSN" => Ok(Task::Rsn),
            _ => Err(format!("unknown task {s:?} (expected CLS, SUM, QA or RSN)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub sample_count: usize,
}

/// `(accuracy, macro F1)`. Classes are the union of predicted and gold labels;
/// a class with no true positives scores F1 = 0.
pub fn accuracy_f1<T: Ord + Clone>(preds: &[T], golds: &[T]) -> Result<(f64, f64), MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    let classes: BTreeSet<&T> = preds.iter().chain(golds).collect();
    let f1_sum: f64 = classes
        .iter()
        .map(|&c| {
            let tp = preds.iter().zip(golds).filter(|(p, g)| *p == c && *g == c).count();
            let fp = preds.iter().zip(golds).filter(|(p, g)| *p == c && *g != c).count();
            let fn_ = preds.iter().zip(golds).filter(|(p, g)| *p != c && *g == c).count();
            if tp == 0 {
                0.0
            } else {
                (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
            }
        })
        .sum();
    Ok((correct as f64 / preds.len() as f64, f1_sum / classes.len() as f64))
}

/// Lowercased words, punctuation as separate words.
pub fn metric_tokens(text: &str) -> Vec<String> {
    split_words(text).into_iter().map(|r| text[r].to_lowercase()).collect()
}

fn tokens_pair(hyp: &str, reference: &str) -> Result<(Vec<String>, Vec<String>), MetricError> {
    let h = metric_tokens(hyp);
    let r = metric_tokens(reference);
    if h.is_empty() {
        return Err(MetricError::EmptyText("hypothesis"));
    }
    if r.is_empty() {
        return Err(MetricError::EmptyText("reference"));
    }
    Ok((h, r))
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Clipped n-gram overlap `sum_g min(count_h(g), count_r(g))`.
fn clipped_overlap<T: Eq + Hash>(h: &[T], r: &[T], n: usize) -> usize {
    let rc = ngram_counts(r, n);
    ngram_counts(h, n)
        .iter()
        .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Stand-in for a zero modified precision in the geometric mean.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Sentence BLEU-4 over token sequences. Orders longer than the hypothesis
/// are left out of the geometric mean.
pub fn bleu_tokens<T: Eq + Hash>(h: &[T], r: &[T]) -> f64 {
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=4 {
        if h.len() < n {
            break;
        }
        let total = h.len() + 1 - n;
        let matches = clipped_overlap(h, r, n);
        let precision = if matches == 0 {
            BLEU_EPSILON
        } else {
            matches as f64 / total as f64
        };
        log_sum += precision.ln();
        orders += 1;
    }
    let c = h.len() as f64;
    let rl = r.len() as f64;
    let bp = if c < rl { (1.0 - rl / c).exp() } else { 1.0 };
    bp * (log_sum / orders as f64).exp()
}

pub fn bleu(hyp: &str, reference: &str) -> Result<f64, MetricError> {
    let (h, r) = tokens_pair(hyp, reference)?;
    Ok(bleu_tokens(&h, &r))
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-N F1. If neither side is long enough to hold an n-gram the score is
/// 1 for equal sequences and 0 otherwise.
pub fn rouge_n_tokens<T: Eq + Hash>(h: &[T], r: &[T], n: usize) -> f64 {
    let ht = (h.len() + 1).saturating_sub(n);
    let rt = (r.len() + 1).saturating_sub(n);
    if ht == 0 && rt == 0 {
        return if h == r { 1.0 } else { 0.0 };
    }
    if ht == 0 || rt == 0 {
        return 0.0;
    }
    f1(clipped_overlap(h, r, n), ht, rt)
}

/// Longest common subsequence length, two-row dynamic programme.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_tokens<T: Eq>(h: &[T], r: &[T]) -> f64 {
    f1(lcs_len(h, r), h.len(), r.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

pub fn rouge(hyp: &str, reference: &str) -> Result<RougeScores, MetricError> {
    let (h, r) = tokens_pair(hyp, reference)?;
    Ok(RougeScores {
        rouge1: rouge_n_tokens(&h, &r, 1),
        rouge2: rouge_n_tokens(&h, &r, 2),
        rouge_l: rouge_l_tokens(&h, &r),
    })
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Search budget for the chunk-minimizing alignment; past it the best
/// alignment found so far is used.
const METEOR_SEARCH_NODES: usize = 200_000;

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

struct AlignSearch<'a, T> {
    h: &'a [T],
    /// Reference positions per hypothesis position holding the same token.
    candidates: Vec<Vec<usize>>,
    /// Matches still owed per hypothesis position's token type.
    owed: Vec<usize>,
    /// Occurrences of the token at `i` from `i` onwards in the hypothesis.
    remaining: Vec<usize>,
    type_of: Vec<usize>,
    used: Vec<bool>,
    pairs: Vec<(usize, usize)>,
    best: Option<(usize, Vec<(usize, usize)>)>,
    nodes: usize,
}

impl<T: Eq + Hash> AlignSearch<'_, T> {
    fn chunks_so_far(&self) -> usize {
        count_chunks(&self.pairs)
    }

    fn dfs(&mut self, i: usize) {
        self.nodes += 1;
        let chunks = self.chunks_so_far();
        if let Some((best, _)) = &self.best {
            if chunks >= *best || self.nodes > METEOR_SEARCH_NODES {
                return;
            }
        }
        if i == self.h.len() {
            self.best = Some((chunks, self.pairs.clone()));
            return;
        }
        let t = self.type_of[i];
        if self.owed[t] == 0 {
            self.dfs(i + 1);
            return;
        }
        // Try extending the current chunk first so the first leaf is a good bound.
        let mut options: Vec<usize> = self.candidates[i].iter().copied().filter(|&j| !self.used[j]).collect();
        if let Some(&(ph, pr)) = self.pairs.last() {
            if ph + 1 == i {
                if let Some(pos) = options.iter().position(|&j| j == pr + 1) {
                    options.swap(0, pos);
                }
            }
        }
        for j in options {
            self.used[j] = true;
            self.owed[t] -= 1;
            self.pairs.push((i, j));
            self.dfs(i + 1);
            self.pairs.pop();
            self.owed[t] += 1;
            self.used[j] = false;
        }
        // Skipping is allowed only while later occurrences can still pay what is owed.
        if self.remaining[i] > self.owed[t] {
            self.dfs(i + 1);
        }
    }
}

/// Exact-match alignment with the maximum number of matches and, among
/// those, the fewest chunks. Returns `(matches, chunks)`.
pub fn meteor_alignment<T: Eq + Hash>(h: &[T], r: &[T]) -> (usize, usize) {
    let mut ids: HashMap<&T, usize> = HashMap::new();
    let type_of: Vec<usize> = h
        .iter()
        .map(|tok| {
            let next = ids.len();
            *ids.entry(tok).or_insert(next)
        })
        .collect();
    let types = ids.len();
    let mut owed = vec![0usize; types];
    let mut h_count = vec![0usize; types];
    for &t in &type_of {
        h_count[t] += 1;
    }
    let mut candidates = vec![Vec::new(); h.len()];
    let mut r_count = vec![0usize; types];
    for (j, tok) in r.iter().enumerate() {
        if let Some(&t) = ids.get(tok) {
            r_count[t] += 1;
        }
        for (i, x) in h.iter().enumerate() {
            if x == tok {
                candidates[i].push(j);
            }
        }
    }
    for t in 0..types {
        owed[t] = h_count[t].min(r_count[t]);
    }
    let matches: usize = owed.iter().sum();
    if matches == 0 {
        return (0, 0);
    }
    let mut remaining = vec![0usize; h.len()];
    let mut seen = vec![0usize; types];
    for i in (0..h.len()).rev() {
        seen[type_of[i]] += 1;
        remaining[i] = seen[type_of[i]];
    }
    let mut search = AlignSearch {
        h,
        candidates,
        owed,
        remaining,
        type_of,
        used: vec![false; r.len()],
        pairs: Vec::new(),
        best: None,
        nodes: 0,
    };
    search.dfs(0);
    let (chunks, pairs) = search.best.expect("a full alignment exists");
    debug_assert_eq!(pairs.len(), matches);
    (matches, chunks)
}

pub fn meteor_tokens<T: Eq + Hash>(h: &[T], r: &[T]) -> f64 {
    let (matches, chunks) = meteor_alignment(h, r);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / h.len() as f64;
    let rc = m / r.len() as f64;
    let f_mean = p * rc / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rc);
    let penalty = METEOR_GAMMA * (chunks as f64 / m).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor(hyp: &str, reference: &str) -> Result<f64, MetricError> {
    let (h, r) = tokens_pair(hyp, reference)?;
    Ok(meteor_tokens(&h, &r))
}

static FINAL_ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"####\s*([-+]?(?:\d[\d,]*(?:\.\d+)?|\.\d+))").expect("valid regex"));
static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?(?:\d[\d,]*(?:\.\d+)?|\.\d+)").expect("valid regex"));

/// The `#### <number>` answer if present, otherwise the last number.
pub fn extract_answer(response: &str) -> Option<f64> {
    let raw = match FINAL_ANSWER.captures_iter(response).last() {
        Some(c) => c.get(1).expect("group").as_str(),
        None => NUMBER.find_iter(response).last()?.as_str(),
    };
    raw.replace(',', "").parse().ok()
}

pub const PASS_TOLERANCE: f64 = 1e-6;

pub fn pass_at_1(response: &str, gold: f64) -> bool {
    match extract_answer(response) {
        Some(x) => x == gold || (x - gold).abs() <= PASS_TOLERANCE * x.abs().max(gold.abs()),
        None => false,
    }
}
