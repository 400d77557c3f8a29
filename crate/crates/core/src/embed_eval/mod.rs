//! Intrinsic and extrinsic evaluation of embeddings: per-field pairwise
//! distances, t-SNE projection, and a classification sweep over
//! context-free networks.

mod sweep;
mod tsne;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, FieldLabel};
use crate::embeddings::{EmbeddingMatrix, Vocabulary};
use crate::ner::NerError;

pub use sweep::{extrinsic_sweep, sweep_csv, table6_grid, FieldResult, SweepConfig, SweepPoint, SweepReport};
pub use tsne::{joint_probabilities, kl_divergence, tsne_project, TsneConfig, TsneResult};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least two words, got {0}")]
    TooFewWords(usize),
    #[error("token id {0} has a zero embedding")]
    ZeroVector(usize),
    #[error("t-SNE needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("not enough words to sample for {field}: {reason}")]
    InsufficientClassWords { field: String, reason: String },
    #[error("invalid evaluation config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Ner(#[from] NerError),
}

fn check_pairs(ids: &[usize]) -> Result<(), EvalError> {
    if ids.len() < 2 {
        return Err(EvalError::TooFewWords(ids.len()));
    }
    Ok(())
}

fn pair_mean(ids: &[usize], f: impl Fn(usize, usize) -> f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (k, &a) in ids.iter().enumerate() {
        for &b in &ids[k + 1..] {
            total += f(a, b);
            n += 1;
        }
    }
    total / n as f64
}

/// Mean Euclidean distance over all unordered pairs of `ids`.
pub fn avg_euclid(e: &EmbeddingMatrix, ids: &[usize]) -> Result<f64, EvalError> {
    check_pairs(ids)?;
    Ok(pair_mean(ids, |a, b| e.row(a).iter().zip(e.row(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()))
}

/// Mean cosine similarity over all unordered pairs of `ids`.
pub fn avg_cosine(e: &EmbeddingMatrix, ids: &[usize]) -> Result<f64, EvalError> {
    check_pairs(ids)?;
    let norms: BTreeMap<usize, f64> =
        ids.iter().map(|&i| (i, e.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())).collect();
    if let Some((&id, _)) = norms.iter().find(|(_, n)| **n == 0.0) {
        return Err(EvalError::ZeroVector(id));
    }
    Ok(pair_mean(ids, |a, b| {
        let dot: f64 = e.row(a).iter().zip(e.row(b)).map(|(x, y)| x * y).sum();
        dot / (norms[&a] * norms[&b])
    }))
}

/// Token ids per field, from the types inside training annotations. A type
/// may sit in several field sets. `none` holds the remaining types of the
/// training documents.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub fields: BTreeMap<FieldLabel, BTreeSet<usize>>,
    pub none: BTreeSet<usize>,
}

impl ClassPartition {
    /// Types missing from `vocab` (and reserved tokens) are left out.
    pub fn build(train_docs: &[AnnotatedDocument], vocab: &Vocabulary) -> Self {
        let mut fields: BTreeMap<FieldLabel, BTreeSet<usize>> =
            FieldLabel::FIELDS.iter().map(|f| (*f, BTreeSet::new())).collect();
        let mut seen = BTreeSet::new();
        let known = |t: &str| vocab.id(t).filter(|&i| !Vocabulary::is_reserved(i));
        for doc in train_docs {
            for line in &doc.lines {
                seen.extend(line.iter().filter_map(|t| known(t)));
            }
            for entry in &doc.entries {
                for ann in entry.annotations() {
                    let set = fields.entry(ann.label).or_default();
                    set.extend(ann.positions().filter_map(|(l, t)| doc.token(l, t)).filter_map(known));
                }
            }
        }
        let labelled: BTreeSet<usize> = fields.values().flatten().copied().collect();
        let none = seen.difference(&labelled).copied().collect();
        ClassPartition { fields, none }
    }

    pub fn field(&self, f: FieldLabel) -> Vec<usize> {
        self.fields.get(&f).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    /// Lowest-code field of `id`, if any.
    pub fn primary_field(&self, id: usize) -> Option<FieldLabel> {
        self.fields.iter().find(|(_, s)| s.contains(&id)).map(|(f, _)| *f)
    }
}

/// Distances for one (algorithm, field) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicRow {
    pub algorithm: String,
    pub field: FieldLabel,
    pub words: usize,
    pub avg_euclid: Option<f64>,
    pub avg_cosine: Option<f64>,
}

/// Per-field distances; fields with fewer than two words (or a zero vector)
/// get empty cells.
pub fn intrinsic_report(e: &EmbeddingMatrix, partition: &ClassPartition) -> Vec<IntrinsicRow> {
    FieldLabel::FIELDS
        .iter()
        .map(|&f| {
            let ids = partition.field(f);
            IntrinsicRow {
                algorithm: e.algorithm.name().to_string(),
                field: f,
                words: ids.len(),
                avg_euclid: avg_euclid(e, &ids).ok(),
                avg_cosine: avg_cosine(e, &ids).ok(),
            }
        })
        .collect()
}

pub fn intrinsic_csv(rows: &[IntrinsicRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    w.write_record(["algorithm", "field", "words", "aed", "acs"]).expect("in-memory write");
    for r in rows {
        w.write_record([&r.algorithm, r.field.name(), &r.words.to_string(), &cell(r.avg_euclid), &cell(r.avg_cosine)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// `token,field,x,y` rows for projected points.
pub fn tsne_csv(e: &EmbeddingMatrix, partition: &ClassPartition, ids: &[usize], coords: &crate::numkit::Tensor) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["token", "field", "x", "y"]).expect("in-memory write");
    for (k, &id) in ids.iter().enumerate() {
        let field = partition.primary_field(id).unwrap_or(FieldLabel::None).name();
        let (x, y) = (format!("{:.6}", coords.get(k, 0)), format!("{:.6}", coords.get(k, 1)));
        w.write_record([e.vocab.token(id), field, &x, &y]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
