use serde::{Deserialize, Serialize};

use super::network::forward_logits;
use super::{NerError, NerHead, NerModel};
use crate::corpus::{AnnotatedDocument, FieldLabel, TokenSpan};
use crate::numkit::{Tape, Tensor};
use crate::preprocess::SentenceMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPrediction {
    pub doc_id: String,
    pub line: usize,
    pub token: usize,
    pub label: FieldLabel,
    /// Indexed by field code. For the 7-way head this is the softmax output;
    /// for binary heads entry `f` is that head's positive probability and
    /// entry 0 is one minus the largest of them.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedSpan {
    pub label: FieldLabel,
    pub span: TokenSpan,
    /// Mean score of the run's tokens.
    pub score: f64,
}

/// Maximal runs of equal non-None labels that do not cross a sentence end.
/// Returns `(label, start, end)` with inclusive token offsets.
pub fn merge_runs(labels: &[FieldLabel], sentence_ends: &[usize]) -> Vec<(FieldLabel, usize, usize)> {
    let mut out = Vec::new();
    let mut run: Option<(FieldLabel, usize)> = None;
    for (i, &l) in labels.iter().enumerate() {
        let continues = matches!(run, Some((rl, _)) if rl == l) && !(i > 0 && sentence_ends.contains(&(i - 1)));
        if !continues {
            if let Some((rl, s)) = run.take() {
                out.push((rl, s, i - 1));
            }
            if l != FieldLabel::None {
                run = Some((l, i));
            }
        }
    }
    if let Some((rl, s)) = run {
        out.push((rl, s, labels.len() - 1));
    }
    out
}

fn head_probs(model: &NerModel, head: &NerHead, windows: &[&[usize]]) -> Result<Tensor, NerError> {
    let classes = head.classes();
    let mut data = Vec::with_capacity(windows.len() * classes);
    for chunk in windows.chunks(256) {
        let mut tape = Tape::new();
        let logits = forward_logits(&mut tape, &model.config, &head.params, &model.embeddings, chunk, None)?;
        let p = tape.softmax(logits)?;
        data.extend_from_slice(tape.value(p).data());
    }
    Ok(Tensor::new(vec![windows.len(), classes], data)?)
}

struct Scored {
    positions: Vec<(usize, usize)>,
    /// Per head, per token probabilities.
    probs: Vec<Tensor>,
}

fn score_doc(model: &NerModel, doc: &AnnotatedDocument, map: &SentenceMap) -> Result<Scored, NerError> {
    let wins = model.doc_windows(doc, map)?;
    let positions = wins.iter().map(|(l, t, _)| (*l, *t)).collect();
    let refs: Vec<&[usize]> = wins.iter().map(|(_, _, w)| w.as_slice()).collect();
    let probs = if refs.is_empty() {
        model.heads.iter().map(|h| Tensor::zeros(0, h.classes())).collect()
    } else {
        model.heads.iter().map(|h| head_probs(model, h, &refs)).collect::<Result<_, _>>()?
    };
    Ok(Scored { positions, probs })
}

/// Class and scores for every token of `doc`.
pub fn predict_tokens(
    model: &NerModel,
    doc: &AnnotatedDocument,
    map: &SentenceMap,
) -> Result<Vec<TokenPrediction>, NerError> {
    let s = score_doc(model, doc, map)?;
    let mut out = Vec::with_capacity(s.positions.len());
    for (i, &(line, token)) in s.positions.iter().enumerate() {
        let mut scores = vec![0.0; FieldLabel::ALL.len()];
        let label = if model.config.arch.is_ffn() {
            let mut best: Option<(FieldLabel, f64)> = None;
            for (h, p) in model.heads.iter().zip(&s.probs) {
                let f = h.field.expect("binary head");
                let pos = if h.active { p.get(i, 1) } else { 0.0 };
                scores[f.code() as usize] = pos;
                if pos > 0.5 && best.is_none_or(|(_, b)| pos > b) {
                    best = Some((f, pos));
                }
            }
            scores[0] = 1.0 - scores[1..].iter().copied().fold(0.0, f64::max);
            best.map_or(FieldLabel::None, |(f, _)| f)
        } else {
            scores.copy_from_slice(s.probs[0].row_slice(i));
            if model.heads[0].active {
                FieldLabel::from_code(s.probs[0].argmax_row(i) as u8).expect("7 classes")
            } else {
                FieldLabel::None
            }
        };
        out.push(TokenPrediction { doc_id: doc.doc_id.clone(), line, token, label, scores });
    }
    Ok(out)
}

fn line_spans(
    line: usize,
    labels: &[FieldLabel],
    scores: &[f64],
    ends: &[usize],
    out: &mut Vec<PredictedSpan>,
) {
    for (label, start, end) in merge_runs(labels, ends) {
        let score = scores[start..=end].iter().sum::<f64>() / (end + 1 - start) as f64;
        out.push(PredictedSpan { label, span: TokenSpan::new(line, start, end), score });
    }
}

/// Predicted phrases: runs of same-label tokens within a sentence. Binary
/// heads produce their runs independently, so phrases of different fields
/// may overlap.
pub fn predict_spans(
    model: &NerModel,
    doc: &AnnotatedDocument,
    map: &SentenceMap,
) -> Result<Vec<PredictedSpan>, NerError> {
    let s = score_doc(model, doc, map)?;
    let mut out = Vec::new();
    let line_len = |l: usize| doc.lines[l - 1].len();
    // windows come in document order, so each line is a contiguous block
    let mut offset = 0;
    for (li, ends) in map.ends.iter().enumerate() {
        let line = li + 1;
        let n = line_len(line);
        let range = offset..offset + n;
        offset += n;
        if n == 0 {
            continue;
        }
        if model.config.arch.is_ffn() {
            for (h, p) in model.heads.iter().zip(&s.probs) {
                if !h.active {
                    continue;
                }
                let f = h.field.expect("binary head");
                let scores: Vec<f64> = range.clone().map(|i| p.get(i, 1)).collect();
                let labels: Vec<FieldLabel> =
                    scores.iter().map(|&q| if q > 0.5 { f } else { FieldLabel::None }).collect();
                line_spans(line, &labels, &scores, ends, &mut out);
            }
        } else if model.heads[0].active {
            let p = &s.probs[0];
            let labels: Vec<FieldLabel> =
                range.clone().map(|i| FieldLabel::from_code(p.argmax_row(i) as u8).expect("7 classes")).collect();
            let scores: Vec<f64> = range.clone().zip(&labels).map(|(i, l)| p.get(i, l.code() as usize)).collect();
            line_spans(line, &labels, &scores, ends, &mut out);
        }
    }
    out.sort_by_key(|a| (a.span, a.label));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FieldLabel::{Dosage as D, Medication as M, None as N};
    use crate::ner::tests::toy_embeddings;
    use crate::ner::{Architecture, NerConfig};

    #[test]
    fn run_merging() {
        assert_eq!(merge_runs(&[N, M, M, N, D], &[4]), vec![(M, 1, 2), (D, 4, 4)]);
        assert!(merge_runs(&[N, N, N], &[2]).is_empty());
        assert_eq!(merge_runs(&[M, M, M, M], &[1, 3]), vec![(M, 0, 1), (M, 2, 3)]);
        assert_eq!(merge_runs(&[M, D, D], &[2]), vec![(M, 0, 0), (D, 1, 2)]);
    }

    fn model(arch: Architecture, half: usize) -> NerModel {
        let e = toy_embeddings(&["a", "b", "c", "d", "e", "f", "g"], 3, 9);
        let mut cfg = NerConfig::defaults(arch);
        cfg.half_window = half;
        cfg.hidden = if arch.is_ffn() { vec![4, 3] } else { vec![4] };
        NerModel::build(cfg, &e, 9).unwrap()
    }

    #[test]
    fn predictions_are_local_to_the_window() {
        for (arch, half) in [(Architecture::ContextAwareFfn, 1), (Architecture::Rnn, 2)] {
            let m = model(arch, half);
            let a = AnnotatedDocument::from_text("d", "a b c d e f g");
            let b = AnnotatedDocument::from_text("d", "a b c d e f a");
            let pa = predict_tokens(&m, &a, &SentenceMap::by_line(&a)).unwrap();
            let pb = predict_tokens(&m, &b, &SentenceMap::by_line(&b)).unwrap();
            // token 6 differs; positions further than `half` away are unaffected
            for i in 0..6 - half {
                assert_eq!(pa[i].scores, pb[i].scores, "{arch:?} token {i}");
            }
            assert_ne!(pa[6].scores, pb[6].scores);
        }
    }

    #[test]
    fn other_sentences_do_not_leak_in() {
        let m = model(Architecture::ContextAwareFfn, 2);
        let a = AnnotatedDocument::from_text("d", "a b. C d e");
        let b = AnnotatedDocument::from_text("d", "g f. C d e");
        let ma = crate::preprocess::split_sentences(&a);
        assert_eq!(ma.ends, vec![vec![1, 4]]);
        let pa = predict_tokens(&m, &a, &ma).unwrap();
        let pb = predict_tokens(&m, &b, &crate::preprocess::split_sentences(&b)).unwrap();
        for i in 2..5 {
            assert_eq!(pa[i].scores, pb[i].scores);
        }
    }

    #[test]
    fn spans_follow_token_labels() {
        let m = model(Architecture::Rnn, 1);
        let doc = AnnotatedDocument::from_text("d", "a b c\nd e");
        let map = SentenceMap::by_line(&doc);
        let toks = predict_tokens(&m, &doc, &map).unwrap();
        let spans = predict_spans(&m, &doc, &map).unwrap();
        for t in &toks {
            let covered = spans.iter().any(|s| s.span.line == t.line && (s.span.start..=s.span.end).contains(&t.token));
            assert_eq!(covered, t.label != FieldLabel::None);
            let total: f64 = t.scores.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
