use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{AnnotatedDocument, FieldLabel};
use crate::embeddings::Vocabulary;
use crate::preprocess::oov_count;

/// Document/entry/phrase/token counts of an annotated set. A phrase is one
/// annotation; a token is one annotated token.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub documents: usize,
    pub entries: usize,
    pub phrases: usize,
    pub tokens: usize,
    pub entries_per_document: f64,
    pub phrases_per_document: f64,
    pub tokens_per_document: f64,
    pub phrases_per_entry: f64,
    pub tokens_per_entry: f64,
    pub tokens_per_phrase: f64,
    pub target_vocabulary: usize,
    pub oov_tokens: Option<usize>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn corpus_metrics(docs: &[AnnotatedDocument], vocab: Option<&Vocabulary>) -> MetricsReport {
    let mut entries = 0;
    let mut phrases = 0;
    let mut tokens = 0;
    let mut target_types = BTreeSet::new();
    for doc in docs {
        entries += doc.entries.len();
        for ann in doc.entries.iter().flat_map(|e| e.annotations()) {
            phrases += 1;
            tokens += ann.token_count();
            for (l, t) in ann.positions() {
                if let Some(tok) = doc.token(l, t) {
                    target_types.insert(tok.to_string());
                }
            }
        }
    }
    let n = docs.len();
    MetricsReport {
        documents: n,
        entries,
        phrases,
        tokens,
        entries_per_document: ratio(entries, n),
        phrases_per_document: ratio(phrases, n),
        tokens_per_document: ratio(tokens, n),
        phrases_per_entry: ratio(phrases, entries),
        tokens_per_entry: ratio(tokens, entries),
        tokens_per_phrase: ratio(tokens, phrases),
        target_vocabulary: target_types.len(),
        oov_tokens: vocab.map(|v| oov_count(docs, v)),
    }
}

/// Percentage of entries carrying at least one annotation of each field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub entries: usize,
    /// Indexed like [`FieldLabel::FIELDS`].
    pub percent: [f64; 6],
}

impl LabelReport {
    pub fn get(&self, field: FieldLabel) -> f64 {
        FieldLabel::FIELDS
            .iter()
            .position(|f| *f == field)
            .map(|i| self.percent[i])
            .unwrap_or(0.0)
    }
}

pub fn label_metrics(docs: &[AnnotatedDocument]) -> LabelReport {
    let mut counts = [0usize; 6];
    let mut entries = 0;
    for entry in docs.iter().flat_map(|d| d.entries.iter()) {
        entries += 1;
        for (i, f) in FieldLabel::FIELDS.iter().enumerate() {
            if entry.field(*f).is_some() {
                counts[i] += 1;
            }
        }
    }
    let mut percent = [0.0; 6];
    for i in 0..6 {
        percent[i] = 100.0 * ratio(counts[i], entries);
    }
    LabelReport { entries, percent }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_i2b2;

    #[test]
    fn hand_counted_single_entry() {
        let doc = parse_i2b2(
            "d",
            "took baby aspirin 81 daily\n",
            r#"m="baby aspirin" 1:1 1:2||do="81" 1:3 1:3"#,
        )
        .unwrap();
        let m = corpus_metrics(&[doc], None);
        assert_eq!(m.documents, 1);
        assert_eq!(m.entries, 1);
        assert_eq!(m.phrases, 2);
        assert_eq!(m.tokens, 3);
        assert_eq!(m.tokens_per_phrase, 1.5);
        assert_eq!(m.target_vocabulary, 3);
        assert_eq!(m.oov_tokens, None);
    }

    #[test]
    fn empty_doc_list_is_all_zero() {
        assert_eq!(corpus_metrics(&[], None), MetricsReport::default());
        assert_eq!(label_metrics(&[]), LabelReport::default());
    }

    #[test]
    fn label_proportions() {
        let doc = parse_i2b2(
            "d",
            "aspirin 81\nheparin\n",
            "m=\"aspirin\" 1:0 1:0||do=\"81\" 1:1 1:1\nm=\"heparin\" 2:0 2:0\n",
        )
        .unwrap();
        let r = label_metrics(&[doc]);
        assert_eq!(r.entries, 2);
        assert_eq!(r.get(FieldLabel::Medication), 100.0);
        assert_eq!(r.get(FieldLabel::Dosage), 50.0);
        assert_eq!(r.get(FieldLabel::Reason), 0.0);
    }
}
