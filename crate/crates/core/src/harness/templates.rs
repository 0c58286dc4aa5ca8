//! Versioned task prompts. Placeholders in braces are substituted verbatim;
//! the sha256 of the raw templates is stored in every report.

use std::sync::LazyLock;

use regex::Regex;
use sha2::{Digest, Sha256};

use super::dataset::Sample;
use crate::metrics::Task;

pub const TEMPLATE_VERSION: &str = "1";

pub struct Template {
    pub system: &'static str,
    pub user: &'static str,
}

pub const CLS_TEMPLATE: Template = Template {
    system: "You are a precise text classifier.",
    user: "Classify the sentiment of the text below. Reply with exactly one label from: {labels}.\n\nText: {text}",
};

pub const SUM_TEMPLATE: Template = Template {
    system: "You are a concise news summarizer.",
    user: "Summarize the article below in two or three sentences.\n\nArticle: {text}",
};

pub const QA_TEMPLATE: Template = Template {
    system: "You answer multiple-choice questions about short passages.",
    user: "Read the context and answer the question. Reply with the letter of the correct option only.\n\nContext: {text}\nQuestion: {question}\nA. {a}\nB. {b}\nC. {c}\nD. {d}",
};

pub const RSN_TEMPLATE: Template = Template {
    system: "You solve grade-school math word problems.",
    user: "Solve the problem below step by step. End with a final line of the form \"#### <number>\".\n\nProblem: {text}",
};

pub fn template(task: Task) -> &'static Template {
    match task {
        Task::Cls => &CLS_TEMPLATE,
        Task::Sum => &SUM_TEMPLATE,
        Task::Qa => &QA_TEMPLATE,
        Task::Rsn => &RSN_TEMPLATE,
    }
}

pub fn template_hash(task: Task) -> String {
    let t = template(task);
    let mut h = Sha256::new();
    for part in [TEMPLATE_VERSION, task.name(), t.system, t.user] {
        h.update(part.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// System and user messages for `sample`, with `text` standing in for the
/// sample's compressible field.
pub fn render(sample: &Sample, text: &str, labels: &[String]) -> (String, String) {
    let t = template(sample.task());
    let user = match sample {
        Sample::Cls(_) => t.user.replace("{labels}", &labels.join(", ")).replace("{text}", text),
        Sample::Sum(_) | Sample::Rsn(_) => t.user.replace("{text}", text),
        Sample::Qa(q) => t
            .user
            .replace("{question}", &q.question)
            .replace("{a}", &q.choices[0])
            .replace("{b}", &q.choices[1])
            .replace("{c}", &q.choices[2])
            .replace("{d}", &q.choices[3])
            .replace("{text}", text),
    };
    (t.system.to_string(), user)
}

/// First label mentioned in the response as a whole word, case-insensitive.
pub fn parse_label(response: &str, labels: &[String]) -> Option<String> {
    let lower = response.to_lowercase();
    labels
        .iter()
        .filter_map(|label| {
            let pattern = format!(r"\b{}\b", regex::escape(&label.to_lowercase()));
            let re = Regex::new(&pattern).ok()?;
            re.find(&lower).map(|m| (m.start(), label))
        })
        .min_by_key(|(start, _)| *start)
        .map(|(_, label)| label.clone())
}

static LETTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([ABCD])\b").expect("valid regex"));
static DIGIT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\b([1-4])\b").expect("valid regex"));

/// Option index from a reply: the first standalone capital A-D, else the first
/// standalone digit 1-4.
pub fn parse_choice(response: &str) -> Option<usize> {
    if let Some(c) = LETTER.captures(response) {
        return Some((c[1].as_bytes()[0] - b'A') as usize);
    }
    DIGIT.captures(response).map(|c| (c[1].as_bytes()[0] - b'1') as usize)
}
