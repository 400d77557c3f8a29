//! The medication-extraction label model: documents, entries and their field
//! annotations, plus pooling, splitting, corpus statistics and a synthetic
//! corpus generator.

mod format;
mod pool;
mod stats;
pub mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{parse_i2b2, serialize_annotations};
pub use pool::{dedup_pool, split_corpus, content_hash, CorpusPool, DedupReport, Split, SplitSizes, YearCount};
pub use stats::{corpus_metrics, label_metrics, LabelReport, MetricsReport};
pub use synthetic::{gen_synthetic, SyntheticConfig};

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("malformed annotation on line {line}: {reason}")]
    MalformedAnnotation { line: usize, reason: String },
    #[error("span {span} out of bounds in document {doc_id}")]
    SpanOutOfBounds { doc_id: String, span: TokenSpan },
    #[error("document {0} is empty")]
    EmptyDocument(String),
    #[error("requested {requested} annotated documents but only {available} are available")]
    InsufficientDocuments { requested: usize, available: usize },
    #[error("lexicon for {0} is empty")]
    EmptyLexicon(String),
    #[error("invalid generator template {template:?}: {reason}")]
    InvalidTemplate { template: String, reason: String },
}

/// One of the six medication fields, or `None` for unlabelled tokens.
///
/// Integer codes follow the challenge convention: 1 medication, 2 dosage,
/// 3 mode, 4 frequency, 5 duration, 6 reason and 0 for none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldLabel {
    None,
    Medication,
    Dosage,
    Mode,
    Frequency,
    Duration,
    Reason,
}

impl FieldLabel {
    /// The six annotated fields in code order.
    pub const FIELDS: [FieldLabel; 6] = [
        FieldLabel::Medication,
        FieldLabel::Dosage,
        FieldLabel::Mode,
        FieldLabel::Frequency,
        FieldLabel::Duration,
        FieldLabel::Reason,
    ];

    /// Fields that can be related to a medication.
    pub const RELATED: [FieldLabel; 5] = [
        FieldLabel::Dosage,
        FieldLabel::Mode,
        FieldLabel::Frequency,
        FieldLabel::Duration,
        FieldLabel::Reason,
    ];

    /// All seven classes, indexed by code.
    pub const ALL: [FieldLabel; 7] = [
        FieldLabel::None,
        FieldLabel::Medication,
        FieldLabel::Dosage,
        FieldLabel::Mode,
        FieldLabel::Frequency,
        FieldLabel::Duration,
        FieldLabel::Reason,
    ];

    pub fn code(self) -> u8 {
        match self {
            FieldLabel::None => 0,
            FieldLabel::Medication => 1,
            FieldLabel::Dosage => 2,
            FieldLabel::Mode => 3,
            FieldLabel::Frequency => 4,
            FieldLabel::Duration => 5,
            FieldLabel::Reason => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<FieldLabel> {
        FieldLabel::ALL.get(code as usize).copied()
    }

    /// Key used in annotation files (`m`, `do`, `mo`, `f`, `du`, `r`).
    pub fn key(self) -> Option<&'static str> {
        match self {
            FieldLabel::None => None,
            FieldLabel::Medication => Some("m"),
            FieldLabel::Dosage => Some("do"),
            FieldLabel::Mode => Some("mo"),
            FieldLabel::Frequency => Some("f"),
            FieldLabel::Duration => Some("du"),
            FieldLabel::Reason => Some("r"),
        }
    }

    pub fn from_key(key: &str) -> Option<FieldLabel> {
        FieldLabel::FIELDS.into_iter().find(|f| f.key() == Some(key))
    }

    pub fn name(self) -> &'static str {
        match self {
            FieldLabel::None => "none",
            FieldLabel::Medication => "medication",
            FieldLabel::Dosage => "dosage",
            FieldLabel::Mode => "mode",
            FieldLabel::Frequency => "frequency",
            FieldLabel::Duration => "duration",
            FieldLabel::Reason => "reason",
        }
    }

    pub fn from_name(name: &str) -> Option<FieldLabel> {
        FieldLabel::ALL.into_iter().find(|f| f.name() == name)
    }
}

impl fmt::Display for FieldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A run of tokens on one line: 1-based line, 0-based inclusive token offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSpan {
    pub line: usize,
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(line: usize, start: usize, end: usize) -> Self {
        TokenSpan { line, start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.start..=self.end).map(move |t| (self.line, t))
    }
}

impl fmt::Display for TokenSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{} {}:{}", self.line, self.start, self.line, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: FieldLabel,
    pub spans: Vec<TokenSpan>,
    pub surface: String,
}

impl Annotation {
    pub fn token_count(&self) -> usize {
        self.spans.iter().map(TokenSpan::len).sum()
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.spans.iter().flat_map(|s| s.positions())
    }
}

/// One medication event: the medication mention and its related fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub medication: Annotation,
    pub related: Vec<Annotation>,
}

impl Entry {
    /// Related annotations are kept in field-code order.
    pub fn new(medication: Annotation, mut related: Vec<Annotation>) -> Self {
        related.sort_by_key(|a| a.label);
        Entry { medication, related }
    }

    pub fn field(&self, label: FieldLabel) -> Option<&Annotation> {
        if label == FieldLabel::Medication {
            return Some(&self.medication);
        }
        self.related.iter().find(|a| a.label == label)
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        std::iter::once(&self.medication).chain(self.related.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub doc_id: String,
    pub lines: Vec<Vec<String>>,
    pub entries: Vec<Entry>,
    pub source_year: Option<u16>,
}

impl AnnotatedDocument {
    /// Builds an unannotated document from raw text.
    pub fn from_text(doc_id: impl Into<String>, text: &str) -> Self {
        AnnotatedDocument {
            doc_id: doc_id.into(),
            lines: tokenize_lines(text),
            entries: Vec::new(),
            source_year: None,
        }
    }

    pub fn is_annotated(&self) -> bool {
        !self.entries.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.lines.iter().map(Vec::len).sum()
    }

    pub fn token(&self, line: usize, index: usize) -> Option<&str> {
        self.lines
            .get(line.checked_sub(1)?)
            .and_then(|l| l.get(index))
            .map(String::as_str)
    }

    pub fn line_len(&self, line: usize) -> Option<usize> {
        self.lines.get(line.checked_sub(1)?).map(Vec::len)
    }

    pub fn span_in_bounds(&self, span: &TokenSpan) -> bool {
        span.start <= span.end && self.line_len(span.line).is_some_and(|n| span.end < n)
    }

    /// Whitespace-joined tokens addressed by `spans`.
    pub fn surface_of(&self, spans: &[TokenSpan]) -> String {
        spans
            .iter()
            .flat_map(|s| s.positions())
            .filter_map(|(l, t)| self.token(l, t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The document as text: tokens joined by single spaces, lines by `\n`.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Per-position gold label, multi-label: every field whose annotation
    /// covers the token.
    pub fn token_labels(&self) -> Vec<Vec<Vec<FieldLabel>>> {
        let mut labels: Vec<Vec<Vec<FieldLabel>>> =
            self.lines.iter().map(|l| vec![Vec::new(); l.len()]).collect();
        for entry in &self.entries {
            for ann in entry.annotations() {
                for (l, t) in ann.positions() {
                    if let Some(slot) = labels.get_mut(l - 1).and_then(|v| v.get_mut(t)) {
                        if !slot.contains(&ann.label) {
                            slot.push(ann.label);
                        }
                    }
                }
            }
        }
        labels
    }

    /// Single label per position for multiclass use; the lowest non-None code
    /// wins when annotations overlap.
    pub fn token_codes(&self) -> Vec<Vec<FieldLabel>> {
        self.token_labels()
            .into_iter()
            .map(|line| {
                line.into_iter()
                    .map(|ls| ls.into_iter().min().unwrap_or(FieldLabel::None))
                    .collect()
            })
            .collect()
    }
}

pub(crate) fn tokenize_lines(text: &str) -> Vec<Vec<String>> {
    let mut lines: Vec<Vec<String>> = text
        .split('\n')
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect();
    // a trailing newline does not start a new line
    if text.ends_with('\n') {
        lines.pop();
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_codes_are_bijective() {
        for (i, f) in FieldLabel::ALL.iter().enumerate() {
            assert_eq!(f.code() as usize, i);
            assert_eq!(FieldLabel::from_code(f.code()), Some(*f));
        }
        assert_eq!(FieldLabel::Medication.code(), 1);
        assert_eq!(FieldLabel::Reason.code(), 6);
        assert_eq!(FieldLabel::from_code(7), None);
        for f in FieldLabel::FIELDS {
            assert_eq!(FieldLabel::from_key(f.key().unwrap()), Some(f));
        }
    }

    #[test]
    fn tokenize_keeps_blank_lines() {
        let lines = tokenize_lines("a b\n\nc\n");
        assert_eq!(lines, vec![vec!["a", "b"], vec![], vec!["c"]]);
    }
}
