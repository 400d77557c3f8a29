//! Precision, recall and F1 for term and relation extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, FieldLabel, TokenSpan};
use crate::rel::{attribute_fields, FieldLookup};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction does not fit document {doc_id}: {reason}")]
    DocumentMismatch { doc_id: String, reason: String },
    #[error("extracted relations for {doc_id} {medication} have no gold entry")]
    EntryMismatch { doc_id: String, medication: String },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

pub type FieldCounts = BTreeMap<FieldLabel, Counts>;

fn empty_counts(fields: &[FieldLabel]) -> FieldCounts {
    fields.iter().map(|f| (*f, Counts::default())).collect()
}

pub fn merge_counts(into: &mut FieldCounts, other: &FieldCounts) {
    for (f, c) in other {
        into.entry(*f).or_default().add(*c);
    }
}

/// Token-level and phrase-level counts for the six fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub token: FieldCounts,
    pub phrase: FieldCounts,
}

impl Default for ConfusionCounts {
    fn default() -> Self {
        ConfusionCounts { token: empty_counts(&FieldLabel::FIELDS), phrase: empty_counts(&FieldLabel::FIELDS) }
    }
}

impl ConfusionCounts {
    pub fn add(&mut self, o: &ConfusionCounts) {
        merge_counts(&mut self.token, &o.token);
        merge_counts(&mut self.phrase, &o.phrase);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Zero denominators give zero.
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub fields: BTreeMap<FieldLabel, Prf>,
    pub micro: Prf,
}

/// Per-field scores plus the micro average over summed counts.
pub fn f1(counts: &FieldCounts) -> F1Report {
    let mut total = Counts::default();
    let fields = counts
        .iter()
        .map(|(f, c)| {
            total.add(*c);
            (*f, Prf::from_counts(*c))
        })
        .collect();
    F1Report { fields, micro: Prf::from_counts(total) }
}

/// `field,precision,recall,f1` rows, one per field, then `micro`.
pub fn report_csv(report: &F1Report) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let row = |w: &mut csv::Writer<Vec<u8>>, name: &str, p: &Prf| {
        w.write_record([name, &format!("{:.4}", p.precision), &format!("{:.4}", p.recall), &format!("{:.4}", p.f1)])
            .expect("in-memory write");
    };
    w.write_record(["field", "precision", "recall", "f1"]).expect("in-memory write");
    for (f, p) in &report.fields {
        row(&mut w, f.name(), p);
    }
    row(&mut w, "micro", &report.micro);
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
}

fn gold_spans(doc: &AnnotatedDocument) -> BTreeSet<(FieldLabel, TokenSpan)> {
    doc.entries
        .iter()
        .flat_map(|e| e.annotations())
        .flat_map(|a| a.spans.iter().map(move |s| (a.label, *s)))
        .collect()
}

fn positions(spans: &BTreeSet<(FieldLabel, TokenSpan)>) -> BTreeSet<(FieldLabel, usize, usize)> {
    spans.iter().flat_map(|(f, s)| s.positions().map(move |(l, t)| (*f, l, t))).collect()
}

fn set_counts<T: Ord + Copy>(gold: &BTreeSet<(FieldLabel, T)>, pred: &BTreeSet<(FieldLabel, T)>) -> FieldCounts {
    let mut out = empty_counts(&FieldLabel::FIELDS);
    for (f, x) in pred {
        let c = out.entry(*f).or_default();
        if gold.contains(&(*f, *x)) {
            c.tp += 1;
        } else {
            c.fp += 1;
        }
    }
    for (f, x) in gold {
        if !pred.contains(&(*f, *x)) {
            out.entry(*f).or_default().fn_ += 1;
        }
    }
    out
}

/// Compares predicted phrases against the document's gold annotations.
/// Token level matches (position, field) pairs; phrase level requires an
/// identical gold span with the same field.
pub fn score_tokens(gold: &AnnotatedDocument, pred: &[(FieldLabel, TokenSpan)]) -> Result<ConfusionCounts, MetricsError> {
    for (f, s) in pred {
        let reason = if *f == FieldLabel::None {
            Some("None is not a predictable field".to_string())
        } else if !gold.span_in_bounds(s) {
            Some(format!("span {s} out of bounds"))
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(MetricsError::DocumentMismatch { doc_id: gold.doc_id.clone(), reason });
        }
    }
    let g = gold_spans(gold);
    let p: BTreeSet<(FieldLabel, TokenSpan)> = pred.iter().copied().collect();
    let phrase = set_counts(&g, &p);
    let to_pairs = |s: BTreeSet<(FieldLabel, usize, usize)>| -> BTreeSet<(FieldLabel, (usize, usize))> {
        s.into_iter().map(|(f, l, t)| (f, (l, t))).collect()
    };
    let token = set_counts(&to_pairs(positions(&g)), &to_pairs(positions(&p)));
    Ok(ConfusionCounts { token, phrase })
}

/// Scores a corpus. Documents without predictions count as predicting
/// nothing; predictions for unknown documents are an error.
pub fn score_corpus(
    gold: &[AnnotatedDocument],
    pred: &BTreeMap<String, Vec<(FieldLabel, TokenSpan)>>,
) -> Result<ConfusionCounts, MetricsError> {
    let by_id: HashMap<&str, &AnnotatedDocument> = gold.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    if let Some(id) = pred.keys().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(MetricsError::DocumentMismatch { doc_id: id.clone(), reason: "no gold document".into() });
    }
    let mut total = ConfusionCounts::default();
    for doc in gold {
        let p = pred.get(&doc.doc_id).map_or(&[][..], Vec::as_slice);
        total.add(&score_tokens(doc, p)?);
    }
    Ok(total)
}

/// Gold related tokens of one entry, keyed by field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSet {
    pub doc_id: String,
    pub medication: Vec<TokenSpan>,
    pub fields: BTreeMap<FieldLabel, Vec<String>>,
}

/// One `RelationSet` per entry, tokens in document order.
pub fn gold_relations(doc: &AnnotatedDocument) -> Vec<RelationSet> {
    doc.entries
        .iter()
        .map(|e| {
            let mut fields: BTreeMap<FieldLabel, Vec<String>> =
                FieldLabel::RELATED.iter().map(|f| (*f, Vec::new())).collect();
            for a in &e.related {
                let toks = a.positions().filter_map(|(l, t)| doc.token(l, t)).map(str::to_string);
                fields.entry(a.label).or_default().extend(toks);
            }
            RelationSet { doc_id: doc.doc_id.clone(), medication: e.medication.spans.clone(), fields }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RelationOutput {
    /// Tokens already carrying a field (tagger output).
    Tagged(BTreeMap<FieldLabel, Vec<String>>),
    /// A generated token sequence, attributed to fields at scoring time.
    Generated(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedRelations {
    pub doc_id: String,
    pub medication: Vec<TokenSpan>,
    pub output: RelationOutput,
}

fn multiset_counts(gold: &[String], pred: &[String]) -> Counts {
    let mut left: HashMap<&str, usize> = HashMap::new();
    for g in gold {
        *left.entry(g).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(n) = left.get_mut(p.as_str()).filter(|n| **n > 0) {
            *n -= 1;
            tp += 1;
        }
    }
    Counts { tp, fp: pred.len() - tp, fn_: gold.len() - tp }
}

/// Per-entry, per-field multiset comparison of related tokens. Entries are
/// matched on (document, medication spans), in order when a key repeats;
/// gold entries without an extraction contribute only false negatives.
pub fn score_relations(
    gold: &[RelationSet],
    extracted: &[ExtractedRelations],
    lookup: &FieldLookup,
) -> Result<FieldCounts, MetricsError> {
    let mut slots: BTreeMap<(&str, &[TokenSpan]), Vec<usize>> = BTreeMap::new();
    for (i, g) in gold.iter().enumerate().rev() {
        slots.entry((g.doc_id.as_str(), g.medication.as_slice())).or_default().push(i);
    }
    let mut matched: Vec<Option<&ExtractedRelations>> = vec![None; gold.len()];
    for x in extracted {
        let gi = slots.get_mut(&(x.doc_id.as_str(), x.medication.as_slice())).and_then(Vec::pop).ok_or_else(|| {
            MetricsError::EntryMismatch {
                doc_id: x.doc_id.clone(),
                medication: x.medication.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            }
        })?;
        matched[gi] = Some(x);
    }
    let mut out = empty_counts(&FieldLabel::RELATED);
    for (g, x) in gold.iter().zip(matched) {
        let pred = match x.map(|x| &x.output) {
            None => BTreeMap::new(),
            Some(RelationOutput::Tagged(m)) => m.clone(),
            Some(RelationOutput::Generated(toks)) => attribute_fields(toks, &g.fields, lookup),
        };
        for f in FieldLabel::RELATED {
            let none = Vec::new();
            let c = multiset_counts(g.fields.get(&f).unwrap_or(&none), pred.get(&f).unwrap_or(&none));
            out.entry(f).or_default().add(c);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_i2b2;
    use proptest::prelude::*;
    use FieldLabel::{Dosage, Medication, Mode};

    fn doc() -> AnnotatedDocument {
        parse_i2b2(
            "d",
            "pt given x y aspirin 81 mg po\n",
            r#"m="aspirin 81" 1:4 1:5||do="mg" 1:6 1:6"#,
        )
        .unwrap()
    }

    #[test]
    fn prf_conventions() {
        let p = Prf::from_counts(Counts { tp: 2, fp: 1, fn_: 1 });
        for v in [p.precision, p.recall, p.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(Prf::from_counts(Counts::default()), Prf::default());
        let none_predicted = Prf::from_counts(Counts { tp: 0, fp: 0, fn_: 3 });
        assert_eq!((none_predicted.precision, none_predicted.recall), (0.0, 0.0));
    }

    #[test]
    fn partial_overlap() {
        let c = score_tokens(&doc(), &[(Medication, TokenSpan::new(1, 5, 6))]).unwrap();
        assert_eq!(c.token[&Medication], Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(c.phrase[&Medication], Counts { tp: 0, fp: 1, fn_: 1 });
        let r = f1(&c.token);
        assert_eq!(r.fields[&Medication], Prf { precision: 0.5, recall: 0.5, f1: 0.5 });
        assert_eq!(c.token[&Dosage], Counts { tp: 0, fp: 0, fn_: 1 });
    }

    #[test]
    fn exact_prediction_scores_one() {
        let pred = [(Medication, TokenSpan::new(1, 4, 5)), (Dosage, TokenSpan::new(1, 6, 6))];
        let c = score_tokens(&doc(), &pred).unwrap();
        let r = f1(&c.token);
        assert_eq!(r.fields[&Medication].f1, 1.0);
        assert_eq!(r.fields[&Dosage].f1, 1.0);
        assert_eq!(r.micro.f1, 1.0);
        assert_eq!(f1(&c.phrase).micro.f1, 1.0);
        // fields absent from gold and predictions stay at zero
        assert_eq!(r.fields[&Mode], Prf::default());
    }

    #[test]
    fn mismatched_predictions_are_rejected() {
        assert!(matches!(
            score_tokens(&doc(), &[(Medication, TokenSpan::new(2, 0, 0))]),
            Err(MetricsError::DocumentMismatch { .. })
        ));
        let pred: BTreeMap<_, _> = [("other".to_string(), vec![])].into();
        assert!(score_corpus(&[doc()], &pred).is_err());
    }

    #[test]
    fn csv_layout() {
        let c = score_tokens(&doc(), &[(Medication, TokenSpan::new(1, 4, 5))]).unwrap();
        let csv = report_csv(&f1(&c.token));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "field,precision,recall,f1");
        assert_eq!(lines[1], "medication,1.0000,1.0000,1.0000");
        assert_eq!(lines.len(), 8);
        assert!(lines[7].starts_with("micro,"));
    }

    fn s(x: &[&str]) -> Vec<String> {
        x.iter().map(|t| t.to_string()).collect()
    }

    fn gold_set() -> RelationSet {
        let mut fields: BTreeMap<_, _> = FieldLabel::RELATED.iter().map(|f| (*f, Vec::new())).collect();
        fields.insert(Dosage, s(&["<num>", "mg"]));
        RelationSet { doc_id: "d".into(), medication: vec![TokenSpan::new(1, 0, 0)], fields }
    }

    #[test]
    fn relation_multisets() {
        let gold = vec![gold_set()];
        let mut train = parse_i2b2("t", "a po\n", r#"m="a" 1:0 1:0||mo="po" 1:1 1:1"#).unwrap();
        train.source_year = None;
        let lookup = FieldLookup::build(&[train]);
        let x = |out| ExtractedRelations { doc_id: "d".into(), medication: vec![TokenSpan::new(1, 0, 0)], output: out };
        let c = score_relations(&gold, &[x(RelationOutput::Generated(s(&["<num>"])))], &lookup).unwrap();
        assert_eq!(c[&Dosage], Counts { tp: 1, fp: 0, fn_: 1 });
        let c = score_relations(&gold, &[x(RelationOutput::Generated(s(&["<num>", "mg", "po"])))], &lookup).unwrap();
        assert_eq!(c[&Dosage], Counts { tp: 2, fp: 0, fn_: 0 });
        assert_eq!(c[&Mode], Counts { tp: 0, fp: 1, fn_: 0 });
        let c = score_relations(&gold, &[x(RelationOutput::Tagged(gold[0].fields.clone()))], &lookup).unwrap();
        assert_eq!(f1(&c).micro.f1, 1.0);
        let c = score_relations(&gold, &[], &lookup).unwrap();
        assert_eq!(c[&Dosage].fn_, 2);
        let stray = ExtractedRelations { doc_id: "e".into(), medication: vec![], output: RelationOutput::Generated(vec![]) };
        assert!(matches!(score_relations(&gold, &[stray], &lookup), Err(MetricsError::EntryMismatch { .. })));
    }

    proptest! {
        #[test]
        fn swapping_errors_swaps_precision_and_recall(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let a = Prf::from_counts(Counts { tp, fp, fn_ });
            let b = Prf::from_counts(Counts { tp, fp: fn_, fn_: fp });
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-15);
        }
    }
}
