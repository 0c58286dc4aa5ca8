//! Subword tokenization with word-boundary bookkeeping.
//!
//! Text is split into words on Unicode whitespace, with every punctuation
//! character standing as a word of its own. Each word is then segmented by
//! greedy longest-match against the vocabulary, continuation pieces carrying
//! the `##` prefix. Words that cannot be segmented collapse to `[UNK]`.
//!
//! The tokenizer keeps the source span of every word so that a compressed
//! prompt can be rebuilt from the original surface forms, never from
//! (possibly lowercased) subword strings.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

pub const CONTINUATION_PREFIX: &str = "##";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const UNK_TOKEN: &str = "[UNK]";

/// Words longer than this many characters map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

const LOWERCASE_HEADER: &str = "#lowercase=";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot read vocab file {path}: {source}")]
    Missing {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate vocab entry {entry:?} at lines {first} and {second}")]
    Duplicate {
        entry: String,
        first: usize,
        second: usize,
    },
    #[error("vocab is missing special marker {0}")]
    MissingSpecial(&'static str),
    #[error("empty vocab entry at line {0}")]
    EmptyEntry(usize),
    #[error("bad vocab header {0:?}")]
    BadHeader(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("input text is empty")]
    EmptyInput,
    #[error("word index {index} out of range (text has {words} words)")]
    WordOutOfRange { index: usize, words: usize },
    #[error("kept word indices must be strictly increasing (got {prev} then {next})")]
    NotIncreasing { prev: usize, next: usize },
}

/// Immutable subword vocabulary. Ids are line numbers of the vocab file.
#[derive(Debug, Clone)]
pub struct Vocab {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
    cls_id: u32,
    sep_id: u32,
    unk_id: u32,
    lowercase: bool,
}

impl Vocab {
    /// Builds a vocabulary from entries in id order.
    pub fn from_entries<I, S>(entries: I, lowercase: bool) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut ids = HashMap::new();
        let mut tokens = Vec::new();
        for (line, entry) in entries.into_iter().enumerate() {
            let entry: String = entry.into();
            if entry.is_empty() {
                return Err(VocabError::EmptyEntry(line + 1));
            }
            if let Some(&first) = ids.get(&entry) {
                return Err(VocabError::Duplicate {
                    entry,
                    first: first as usize + 1,
                    second: line + 1,
                });
            }
            ids.insert(entry.clone(), tokens.len() as u32);
            tokens.push(entry);
        }
        let special = |name: &'static str| ids.get(name).copied().ok_or(VocabError::MissingSpecial(name));
        Ok(Self {
            cls_id: special(CLS_TOKEN)?,
            sep_id: special(SEP_TOKEN)?,
            unk_id: special(UNK_TOKEN)?,
            ids,
            tokens,
            lowercase,
        })
    }

    /// Parses vocab file contents: an optional `#lowercase=true|false` header,
    /// then one subword per line.
    pub fn parse(contents: &str) -> Result<Self, VocabError> {
        let mut lines = contents.lines().peekable();
        let mut lowercase = true;
        if let Some(first) = lines.peek() {
            if let Some(flag) = first.strip_prefix(LOWERCASE_HEADER) {
                lowercase = match flag.trim() {
                    "true" => true,
                    "false" => false,
                    _ => return Err(VocabError::BadHeader(first.to_string())),
                };
                lines.next();
            }
        }
        let entries: Vec<&str> = lines.map(|l| l.trim_end_matches('\r')).collect();
        // A single trailing blank line is just the final newline of an editor.
        let entries = match entries.split_last() {
            Some((last, rest)) if last.is_empty() => rest.to_vec(),
            _ => entries,
        };
        Self::from_entries(entries, lowercase)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let contents = fs::read_to_string(path).map_err(|source| VocabError::Missing {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&contents)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn cls_id(&self) -> u32 {
        self.cls_id
    }

    pub fn sep_id(&self) -> u32 {
        self.sep_id
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }
}

/// Tokenized text. `word_index` is `None` for the `[CLS]`/`[SEP]` markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInput {
    pub token_ids: Vec<u32>,
    pub token_strings: Vec<String>,
    pub word_index: Vec<Option<usize>>,
    pub special_mask: Vec<bool>,
    /// Byte range of each word in the source text.
    pub word_spans: Vec<Range<usize>>,
    source: String,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.word_spans.len()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn word(&self, index: usize) -> &str {
        &self.source[self.word_spans[index].clone()]
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.word_spans.iter().map(|span| &self.source[span.clone()])
    }

    /// Token positions of each word, in word order.
    pub fn word_token_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges: Vec<Range<usize>> = Vec::with_capacity(self.num_words());
        for (pos, word) in self.word_index.iter().enumerate() {
            if let Some(w) = *word {
                if w == ranges.len() {
                    ranges.push(pos..pos + 1);
                } else {
                    ranges[w].end = pos + 1;
                }
            }
        }
        ranges
    }

    /// Builds a `[CLS] ... [SEP]` sequence covering a contiguous run of words.
    /// Word indices in the result are renumbered from zero.
    pub fn slice_words(&self, words: Range<usize>) -> TokenizedInput {
        let ranges = self.word_token_ranges();
        let first = ranges[words.start].start;
        let last = ranges[words.end - 1].end;
        let mut out = TokenizedInput {
            token_ids: vec![self.token_ids[0]],
            token_strings: vec![self.token_strings[0].clone()],
            word_index: vec![None],
            special_mask: vec![true],
            word_spans: self.word_spans[words.clone()].to_vec(),
            source: self.source.clone(),
        };
        for pos in first..last {
            out.token_ids.push(self.token_ids[pos]);
            out.token_strings.push(self.token_strings[pos].clone());
            out.word_index.push(self.word_index[pos].map(|w| w - words.start));
            out.special_mask.push(false);
        }
        let end = self.len() - 1;
        out.token_ids.push(self.token_ids[end]);
        out.token_strings.push(self.token_strings[end].clone());
        out.word_index.push(None);
        out.special_mask.push(true);
        out
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits text into word spans: whitespace-separated runs, with each
/// punctuation character as its own word.
pub fn split_words(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (pos, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push(s..pos);
            }
        } else if is_punctuation(c) {
            if let Some(s) = start.take() {
                spans.push(s..pos);
            }
            spans.push(pos..pos + c.len_utf8());
        } else if start.is_none() {
            start = Some(pos);
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
}

/// Greedy longest-match segmentation of one (already normalized) word.
/// Returns `None` when some suffix cannot be matched.
fn segment_word<'v>(word: &str, vocab: &'v Vocab) -> Option<Vec<(u32, &'v str)>> {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let byte_at = |i: usize| chars.get(i).map_or(word.len(), |&(b, _)| b);
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + CONTINUATION_PREFIX.len());
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION_PREFIX);
            }
            candidate.push_str(&word[byte_at(start)..byte_at(end)]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        let id = found?;
        pieces.push((id, vocab.token(id).expect("id from vocab")));
        start = end;
    }
    Some(pieces)
}

/// Tokenizes `text` into `[CLS]`, word subwords, `[SEP]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<TokenizedInput, TokenizeError> {
    let word_spans = split_words(text);
    if word_spans.is_empty() {
        return Err(TokenizeError::EmptyInput);
    }
    let mut out = TokenizedInput {
        token_ids: vec![vocab.cls_id()],
        token_strings: vec![CLS_TOKEN.to_string()],
        word_index: vec![None],
        special_mask: vec![true],
        word_spans: Vec::new(),
        source: text.to_string(),
    };
    for (w, span) in word_spans.iter().enumerate() {
        let surface = &text[span.clone()];
        let normalized = if vocab.lowercase() {
            surface.to_lowercase()
        } else {
            surface.to_string()
        };
        match segment_word(&normalized, vocab) {
            Some(pieces) => {
                for (id, piece) in pieces {
                    out.token_ids.push(id);
                    out.token_strings.push(piece.to_string());
                    out.word_index.push(Some(w));
                    out.special_mask.push(false);
                }
            }
            None => {
                out.token_ids.push(vocab.unk_id());
                out.token_strings.push(UNK_TOKEN.to_string());
                out.word_index.push(Some(w));
                out.special_mask.push(false);
            }
        }
    }
    out.token_ids.push(vocab.sep_id());
    out.token_strings.push(SEP_TOKEN.to_string());
    out.word_index.push(None);
    out.special_mask.push(true);
    out.word_spans = word_spans;
    Ok(out)
}

/// Joins the surface forms of `kept_words` (strictly increasing) with single spaces.
pub fn reconstruct(input: &TokenizedInput, kept_words: &[usize]) -> Result<String, TokenizeError> {
    let words = input.num_words();
    let mut out = String::new();
    let mut prev: Option<usize> = None;
    for &w in kept_words {
        if w >= words {
            return Err(TokenizeError::WordOutOfRange { index: w, words });
        }
        if let Some(p) = prev {
            if w <= p {
                return Err(TokenizeError::NotIncreasing { prev: p, next: w });
            }
            out.push(' ');
        }
        out.push_str(input.word(w));
        prev = Some(w);
    }
    Ok(out)
}
