//! Vocabulary, sentence-bounded context windows, and CBOW / skip-gram
//! embedding training.

mod io;
mod windows;
mod word2vec;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotatedDocument;
use crate::numkit::Tensor;
use crate::preprocess::NUM_TOKEN;

pub use io::{load_embeddings, parse_embeddings, save_embeddings, write_embeddings};
pub use windows::{make_windows, window_ids, ContextWindow, DEFAULT_WINDOW};
pub use word2vec::{
    init_weights, train_cbow, train_csg, train_word2vec, window_loss, InitScheme, Word2VecConfig, Word2VecOutput,
};

pub const PAD_TOKEN: &str = "PAD";
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<end-of-output>";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("line {line}: unparsable value {value:?}")]
    MalformedValue { line: usize, value: String },
    #[error("no context windows to train on")]
    EmptyWindowStream,
    #[error("window size must be odd and at least 1, got {0}")]
    InvalidWindowSize(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged to non-finite weights")]
    Diverged,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Token to id table. Ids 0..4 are `PAD`, `<num>`, `<unk>` and
/// `<end-of-output>`; the remaining types follow by descending frequency,
/// ties in lexical order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const NUM: usize = 1;
    pub const UNK: usize = 2;
    pub const EOS: usize = 3;
    pub const RESERVED: [&'static str; 4] = [PAD_TOKEN, NUM_TOKEN, UNK_TOKEN, EOS_TOKEN];

    /// Vocabulary over the given token occurrences.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            let t = t.as_ref();
            if !Self::RESERVED.contains(&t) {
                *counts.entry(t.to_string()).or_default() += 1;
            }
        }
        let mut by_count: Vec<(String, usize)> = counts.into_iter().collect();
        by_count.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = Self::RESERVED.iter().map(|s| s.to_string()).chain(by_count.into_iter().map(|(t, _)| t)).collect();
        Self::from_ordered(tokens).expect("reserved tokens first, no duplicates")
    }

    /// Uses `tokens` as the id order. The reserved tokens must come first.
    pub fn from_ordered(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < 4 || tokens[..4].iter().zip(Self::RESERVED).any(|(a, b)| a != b) {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or `<unk>`.
    pub fn lookup(&self, token: &str) -> usize {
        self.id(token).unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(id: usize) -> bool {
        id < 4
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        Self::from_ordered(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Every token type of the embedding and model-training documents.
/// Held-out documents are deliberately not consulted.
pub fn build_vocab(embedding_docs: &[AnnotatedDocument], train_docs: &[AnnotatedDocument]) -> Vocabulary {
    Vocabulary::from_tokens(
        embedding_docs.iter().chain(train_docs).flat_map(|d| d.lines.iter().flatten()).map(String::as_str),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Cbow,
    Csg,
    /// Loaded from a file without a manifest.
    Imported,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cbow => "cbow",
            Algorithm::Csg => "csg",
            Algorithm::Imported => "imported",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cbow" => Ok(Algorithm::Cbow),
            "csg" | "skipgram" | "skip-gram" => Ok(Algorithm::Csg),
            "imported" => Ok(Algorithm::Imported),
            other => Err(format!("unknown embedding algorithm {other:?}")),
        }
    }
}

/// `V x m` embedding table with its vocabulary and training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub vocab: Vocabulary,
    pub weights: Tensor,
    pub algorithm: Algorithm,
    pub manifest: Option<Word2VecConfig>,
}

impl EmbeddingMatrix {
    pub fn new(vocab: Vocabulary, weights: Tensor, algorithm: Algorithm) -> Result<Self, EmbeddingError> {
        if weights.rows() != vocab.len() {
            return Err(EmbeddingError::DimensionMismatch { line: 0, expected: vocab.len(), found: weights.rows() });
        }
        Ok(EmbeddingMatrix { vocab, weights, algorithm, manifest: None })
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn len(&self) -> usize {
        self.weights.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.weights.row_slice(id)
    }

    /// Embedding of `token`, falling back to the `<unk>` row.
    pub fn vector(&self, token: &str) -> &[f64] {
        self.row(self.vocab.lookup(token))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> AnnotatedDocument {
        AnnotatedDocument::from_text("d", text)
    }

    #[test]
    fn vocab_counts_and_reserved() {
        let v = build_vocab(&[doc("a b")], &[]);
        assert_eq!(v.len(), 6);
        assert_eq!(build_vocab(&[], &[]).len(), 4);
        let v = Vocabulary::from_tokens(["b", "a", "b", "<num>", "c"]);
        assert_eq!(v.tokens(), &["PAD", "<num>", "<unk>", "<end-of-output>", "b", "a", "c"]);
        assert_eq!(v.lookup("zzz"), Vocabulary::UNK);
        assert_eq!(v.id("<num>"), Some(Vocabulary::NUM));
    }

    #[test]
    fn held_out_words_are_absent() {
        let test_doc = doc("only here");
        let v = build_vocab(&[doc("x y")], &[doc("z")]);
        assert!(!v.contains("only"));
        assert_eq!(v.lookup(&test_doc.lines[0][0]), Vocabulary::UNK);
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = Vocabulary::from_tokens(["q", "r"]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&s).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    }
}
