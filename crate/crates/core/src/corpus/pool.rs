use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnnotatedDocument, CorpusError};
use crate::rng;

/// Hash of the lowercased, whitespace-normalized document text.
pub fn content_hash(doc: &AnnotatedDocument) -> String {
    let mut h = Sha256::new();
    let mut first = true;
    for tok in doc.lines.iter().flatten() {
        if !first {
            h.update(b" ");
        }
        first = false;
        h.update(tok.to_lowercase().as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

/// Deduplicated documents. A document is annotated iff it carries entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusPool {
    pub unannotated: Vec<AnnotatedDocument>,
    pub annotated: Vec<AnnotatedDocument>,
    pub content_hashes: HashSet<String>,
}

impl CorpusPool {
    pub fn len(&self) -> usize {
        self.unannotated.len() + self.annotated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn documents(&self) -> impl Iterator<Item = &AnnotatedDocument> {
        self.unannotated.iter().chain(self.annotated.iter())
    }

    pub fn get(&self, doc_id: &str) -> Option<&AnnotatedDocument> {
        self.documents().find(|d| d.doc_id == doc_id)
    }

    /// Regroups the pool by source year, ascending.
    pub fn as_corpora(&self) -> Vec<(u16, Vec<AnnotatedDocument>)> {
        let mut by_year: BTreeMap<u16, Vec<AnnotatedDocument>> = BTreeMap::new();
        for doc in self.documents() {
            by_year.entry(doc.source_year.unwrap_or(0)).or_default().push(doc.clone());
        }
        by_year.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearCount {
    pub year: u16,
    pub total: usize,
    pub unique_unannotated: usize,
    pub unique_annotated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub years: Vec<YearCount>,
}

impl DedupReport {
    pub fn total(&self) -> YearCount {
        YearCount {
            year: 0,
            total: self.years.iter().map(|y| y.total).sum(),
            unique_unannotated: self.years.iter().map(|y| y.unique_unannotated).sum(),
            unique_annotated: self.years.iter().map(|y| y.unique_annotated).sum(),
        }
    }
}

/// Pools yearly corpora in order; the first occurrence of each content hash
/// is kept and later copies are dropped.
pub fn dedup_pool(corpora: Vec<(u16, Vec<AnnotatedDocument>)>) -> (CorpusPool, DedupReport) {
    let mut corpora = corpora;
    corpora.sort_by_key(|(year, _)| *year);
    let mut pool = CorpusPool::default();
    let mut years = Vec::with_capacity(corpora.len());
    for (year, docs) in corpora {
        let mut count = YearCount { year, total: docs.len(), unique_unannotated: 0, unique_annotated: 0 };
        for mut doc in docs {
            if !pool.content_hashes.insert(content_hash(&doc)) {
                continue;
            }
            doc.source_year = Some(year);
            if doc.is_annotated() {
                count.unique_annotated += 1;
                pool.annotated.push(doc);
            } else {
                count.unique_unannotated += 1;
                pool.unannotated.push(doc);
            }
        }
        years.push(count);
    }
    (pool, DedupReport { years })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub model_train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes { model_train: 238, validation: 10, test: 10 }
    }
}

/// Document ids per role. The four sets partition the pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub embedding_train: Vec<String>,
    pub model_train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Draws validation, test and model-train documents uniformly from the
/// annotated pool. Everything else goes to embedding training.
pub fn split_corpus(pool: &CorpusPool, sizes: SplitSizes, seed: u64) -> Result<Split, CorpusError> {
    let requested = sizes.model_train + sizes.validation + sizes.test;
    if requested > pool.annotated.len() {
        return Err(CorpusError::InsufficientDocuments { requested, available: pool.annotated.len() });
    }
    let mut ids: Vec<String> = pool.annotated.iter().map(|d| d.doc_id.clone()).collect();
    let mut rng = rng::seeded(seed);
    ids.shuffle(&mut rng);
    let mut rest = ids.into_iter();
    let validation: Vec<String> = rest.by_ref().take(sizes.validation).collect();
    let test: Vec<String> = rest.by_ref().take(sizes.test).collect();
    let model_train: Vec<String> = rest.by_ref().take(sizes.model_train).collect();
    let mut embedding_train: Vec<String> = pool.unannotated.iter().map(|d| d.doc_id.clone()).collect();
    embedding_train.extend(rest);
    Ok(Split { embedding_train, model_train, validation, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, text: &str, annotated: bool) -> AnnotatedDocument {
        let mut d = AnnotatedDocument::from_text(id, text);
        if annotated {
            let med = super::super::Annotation {
                label: super::super::FieldLabel::Medication,
                spans: vec![super::super::TokenSpan::new(1, 0, 0)],
                surface: d.lines[0][0].clone(),
            };
            d.entries.push(super::super::Entry::new(med, vec![]));
        }
        d
    }

    #[test]
    fn duplicate_across_years_is_kept_once() {
        let d = doc("a", "same text", false);
        let (pool, report) = dedup_pool(vec![(2007, vec![d.clone()]), (2008, vec![doc("b", "same  TEXT", false)])]);
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.unannotated[0].doc_id, "a");
        assert_eq!(pool.unannotated[0].source_year, Some(2007));
        assert_eq!(report.years[1].unique_unannotated, 0);
        assert_eq!(report.years[1].total, 1);
    }

    #[test]
    fn dedup_is_idempotent() {
        let corpora = vec![
            (2009, vec![doc("c", "x y", true), doc("d", "x z", false), doc("e", "x y", false)]),
            (2007, vec![doc("a", "p q", false), doc("b", "p r", false)]),
        ];
        let (pool, _) = dedup_pool(corpora);
        let (again, _) = dedup_pool(pool.as_corpora());
        assert_eq!(pool, again);
    }

    /// Per-year totals and unique counts from the 2007-2012 releases.
    #[test]
    fn full_scale_pooling_counts() {
        let table = [
            (2007u16, 2886usize, 926usize, 0usize),
            (2008, 1267, 1237, 0),
            (2009, 1945, 991, 258),
            (2010, 696, 694, 0),
            (2011, 424, 188, 0),
            (2012, 671, 311, 0),
        ];
        let mut corpora = Vec::new();
        for (year, total, unann, ann) in table {
            let mut docs = Vec::new();
            for i in 0..unann {
                docs.push(doc(&format!("{year}-u{i}"), &format!("note {year} {i}"), false));
            }
            for i in 0..ann {
                docs.push(doc(&format!("{year}-a{i}"), &format!("med {year} {i}"), true));
            }
            // remaining documents repeat ones already seen
            for i in 0..total - unann - ann {
                docs.push(doc(&format!("{year}-dup{i}"), &format!("note 2007 {}", i % 926), false));
            }
            corpora.push((year, docs));
        }
        let (pool, report) = dedup_pool(corpora);
        let total = report.total();
        assert_eq!(total.total, 7889);
        assert_eq!(total.unique_unannotated, 4347);
        assert_eq!(total.unique_annotated, 258);
        assert_eq!(pool.len(), 4605);

        let split = split_corpus(&pool, SplitSizes::default(), 3).unwrap();
        assert_eq!(split.model_train.len(), 238);
        assert_eq!(split.validation.len(), 10);
        assert_eq!(split.test.len(), 10);
        assert_eq!(split.embedding_train.len(), 4347);
    }

    #[test]
    fn split_is_deterministic_and_checks_sizes() {
        let docs: Vec<_> = (0..30).map(|i| doc(&format!("d{i}"), &format!("t {i}"), true)).collect();
        let (pool, _) = dedup_pool(vec![(2009, docs)]);
        let sizes = SplitSizes { model_train: 20, validation: 3, test: 3 };
        let a = split_corpus(&pool, sizes, 11).unwrap();
        assert_eq!(a, split_corpus(&pool, sizes, 11).unwrap());
        assert_eq!(a.embedding_train.len(), 4);
        let err = split_corpus(&pool, SplitSizes { model_train: 300, validation: 10, test: 10 }, 1).unwrap_err();
        assert_eq!(err, CorpusError::InsufficientDocuments { requested: 320, available: 30 });
    }
}
