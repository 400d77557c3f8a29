//! Text normalization that never changes the number or position of tokens.
//!
//! Order of rules: sentence boundaries (needs case), numbers to `<num>`,
//! punctuation stripping, lowercasing.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::AnnotatedDocument;
use crate::embeddings::Vocabulary;

pub const NUM_TOKEN: &str = "<num>";

/// Sentence ends per line: the index of the last token of every sentence.
/// The last token of a non-empty line always ends a sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SentenceMap {
    pub ends: Vec<Vec<usize>>,
}

impl SentenceMap {
    /// Each line is a single sentence.
    pub fn by_line(doc: &AnnotatedDocument) -> Self {
        SentenceMap {
            ends: doc
                .lines
                .iter()
                .map(|l| if l.is_empty() { vec![] } else { vec![l.len() - 1] })
                .collect(),
        }
    }

    /// Inclusive token range of the sentence containing `(line, token)`;
    /// `line` is 1-based.
    pub fn sentence_range(&self, line: usize, token: usize) -> (usize, usize) {
        let ends = &self.ends[line - 1];
        let mut start = 0;
        for &end in ends {
            if token <= end {
                return (start, end);
            }
            start = end + 1;
        }
        (start, token)
    }

    /// All sentences as `(line, start, end)`.
    pub fn sentences(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.ends.iter().enumerate().flat_map(|(li, ends)| {
            let mut start = 0;
            ends.iter().map(move |&end| {
                let s = (li + 1, start, end);
                start = end + 1;
                s
            })
        })
    }

    /// One line per document line, sentence ends separated by spaces.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ends in &self.ends {
            let parts: Vec<String> = ends.iter().map(usize::to_string).collect();
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Option<Self> {
        let mut ends = Vec::new();
        for line in text.lines() {
            let v: Result<Vec<usize>, _> = line.split_whitespace().map(str::parse).collect();
            ends.push(v.ok()?);
        }
        Some(SentenceMap { ends })
    }

    /// Whether the map is consistent with the document's line lengths.
    pub fn fits(&self, doc: &AnnotatedDocument) -> bool {
        self.ends.len() == doc.lines.len()
            && self.ends.iter().zip(&doc.lines).all(|(ends, line)| match ends.last() {
                None => line.is_empty(),
                Some(&last) => last + 1 == line.len() && ends.windows(2).all(|w| w[0] < w[1]),
            })
    }
}

fn starts_uppercase(tok: &str) -> bool {
    tok.chars().next().is_some_and(char::is_uppercase)
}

/// Boundary after any token ending in '.' whose successor starts with an
/// uppercase letter; line ends are always boundaries.
pub fn split_sentences(doc: &AnnotatedDocument) -> SentenceMap {
    let ends = doc
        .lines
        .iter()
        .map(|line| {
            let mut ends = Vec::new();
            for (i, tok) in line.iter().enumerate() {
                let last = i + 1 == line.len();
                if last || (tok.ends_with('.') && starts_uppercase(&line[i + 1])) {
                    ends.push(i);
                }
            }
            ends
        })
        .collect();
    SentenceMap { ends }
}

fn is_edge_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ':' | ';' | '(' | ')' | '[' | ']' | '"' | '\'')
}

/// Optional sign, digits, and optionally one of `.` `/` `:` followed by
/// digits, after stripping edge punctuation.
pub fn is_numeric(token: &str) -> bool {
    let core = token.trim_matches(is_edge_punct);
    let core = core.strip_prefix(['+', '-']).unwrap_or(core);
    let (head, tail) = match core.find(['.', '/', ':']) {
        Some(i) => (&core[..i], Some(&core[i + 1..])),
        None => (core, None),
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    digits(head) && tail.is_none_or(digits)
}

/// Normalizes one token. Tokens that would be emptied by punctuation removal
/// are kept (lowercased) so the token count never changes.
pub fn normalize_token(token: &str) -> String {
    if is_numeric(token) {
        return NUM_TOKEN.to_string();
    }
    let chars: Vec<char> = token.chars().collect();
    let mut kept = String::with_capacity(token.len());
    for (i, &c) in chars.iter().enumerate() {
        if matches!(c, '.' | ':' | ';') {
            let prev = i.checked_sub(1).map(|j| chars[j]);
            let next = chars.get(i + 1).copied();
            let letter_surrounded = prev.is_some_and(char::is_alphabetic) && next.is_some_and(char::is_alphabetic);
            let after_number = prev.is_some_and(|p| p.is_ascii_digit());
            if !(letter_surrounded || after_number) {
                continue;
            }
        }
        kept.push(c);
    }
    if kept.is_empty() {
        token.to_lowercase()
    } else {
        kept.to_lowercase()
    }
}

/// Applies [`normalize_token`] to every token and refreshes annotation
/// surfaces. Spans are untouched because positions never move.
pub fn normalize_tokens(doc: &AnnotatedDocument) -> AnnotatedDocument {
    let mut out = doc.clone();
    for line in &mut out.lines {
        for tok in line.iter_mut() {
            *tok = normalize_token(tok);
        }
    }
    let lines = &out.lines;
    for entry in &mut out.entries {
        for ann in std::iter::once(&mut entry.medication).chain(entry.related.iter_mut()) {
            ann.surface = ann
                .spans
                .iter()
                .flat_map(|s| s.positions())
                .map(|(l, t)| lines[l - 1][t].as_str())
                .collect::<Vec<_>>()
                .join(" ");
        }
    }
    out
}

/// Sentence split followed by normalization.
pub fn preprocess(doc: &AnnotatedDocument) -> (AnnotatedDocument, SentenceMap) {
    let sentences = split_sentences(doc);
    (normalize_tokens(doc), sentences)
}

/// Number of distinct token types in `docs` that `vocab` does not contain.
pub fn oov_count(docs: &[AnnotatedDocument], vocab: &Vocabulary) -> usize {
    let types: BTreeSet<&str> = docs.iter().flat_map(|d| d.lines.iter().flatten()).map(String::as_str).collect();
    types.into_iter().filter(|t| !vocab.contains(t)).count()
}
