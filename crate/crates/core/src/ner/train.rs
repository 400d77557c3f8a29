use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;

use super::network::instance_loss;
use super::{token_windows, NerConfig, NerError, NerHead, NerInstance, NerModel};
use crate::corpus::{AnnotatedDocument, FieldLabel};
use crate::embeddings::window_ids;
use crate::numkit::{lr_schedule, AdamConfig, Tape, Tensor};
use crate::preprocess::SentenceMap;
use crate::rng;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss per epoch, per head.
    pub losses: BTreeMap<String, Vec<f64>>,
    pub instances: BTreeMap<String, usize>,
    /// Fields left untrained because no token carried them.
    pub skipped: Vec<FieldLabel>,
}

type Labelled = Vec<(Vec<usize>, Vec<FieldLabel>)>;

fn labelled_windows(
    model: &NerModel,
    docs: &[AnnotatedDocument],
    maps: &[SentenceMap],
) -> Result<Labelled, NerError> {
    if docs.len() != maps.len() {
        return Err(NerError::ConfigInvalid(format!("{} documents but {} sentence maps", docs.len(), maps.len())));
    }
    let per_doc: Result<Vec<Labelled>, NerError> = docs
        .par_iter()
        .zip(maps.par_iter())
        .map(|(doc, map)| {
            let labels = doc.token_labels();
            let wins = token_windows(&model.vocab, model.config.half_window, doc, map)?;
            Ok(wins.into_iter().map(|(l, t, w)| (w, labels[l - 1][t].clone())).collect())
        })
        .collect();
    Ok(per_doc?.into_iter().flatten().collect())
}

fn sample_field(labelled: &Labelled, field: FieldLabel, proportion: f64, seed: u64) -> Vec<NerInstance> {
    let (pos, neg): (Vec<_>, Vec<_>) = labelled.iter().partition(|(_, ls)| ls.contains(&field));
    let mut out: Vec<NerInstance> = pos.iter().map(|(w, _)| NerInstance { window: w.clone(), target: 1 }).collect();
    if out.is_empty() || neg.is_empty() {
        return out;
    }
    let wanted = (out.len() as f64 * (1.0 - proportion) / proportion).round() as usize;
    let mut r = rng::stream(seed, &format!("ner-sample/{}", field.name()));
    for _ in 0..wanted {
        let (w, _) = neg.choose(&mut r).expect("non-empty");
        out.push(NerInstance { window: w.clone(), target: 0 });
    }
    out
}

/// Every token carrying `field` plus negatives drawn with replacement so
/// that positives make up the configured proportion.
pub fn field_instances(
    model: &NerModel,
    docs: &[AnnotatedDocument],
    maps: &[SentenceMap],
    field: FieldLabel,
    seed: u64,
) -> Result<Vec<NerInstance>, NerError> {
    let labelled = labelled_windows(model, docs, maps)?;
    Ok(sample_field(&labelled, field, model.config.positive_proportion, seed))
}

/// Every token within half a window of an annotated token in the same
/// sentence, labelled with its field code.
pub fn rnn_instances(
    model: &NerModel,
    docs: &[AnnotatedDocument],
    maps: &[SentenceMap],
) -> Result<Vec<NerInstance>, NerError> {
    if docs.len() != maps.len() {
        return Err(NerError::ConfigInvalid(format!("{} documents but {} sentence maps", docs.len(), maps.len())));
    }
    let half = model.config.half_window;
    let per_doc: Result<Vec<Vec<NerInstance>>, NerError> = docs
        .par_iter()
        .zip(maps.par_iter())
        .filter(|(d, _)| d.is_annotated())
        .map(|(doc, map)| {
            if !map.fits(doc) {
                return Err(NerError::SentenceMapMismatch(doc.doc_id.clone()));
            }
            let labels = doc.token_labels();
            let code = |line: usize, t: usize| labels[line - 1][t].iter().min().map_or(0, |f| f.code() as usize);
            let mut out = Vec::new();
            for (line, start, end) in map.sentences() {
                let positives: Vec<usize> = (start..=end).filter(|&t| code(line, t) != 0).collect();
                if positives.is_empty() {
                    continue;
                }
                let ids: Vec<usize> = doc.lines[line - 1].iter().map(|t| model.vocab.lookup(t)).collect();
                for tok in start..=end {
                    if positives.iter().any(|&p| p.abs_diff(tok) <= half) {
                        out.push(NerInstance { window: window_ids(&ids, (start, end), tok, half), target: code(line, tok) });
                    }
                }
            }
            Ok(out)
        })
        .collect();
    Ok(per_doc?.into_iter().flatten().collect())
}

/// Mini-batch Adam over `instances`; returns the mean loss of each epoch.
pub fn train_head(
    cfg: &NerConfig,
    shared: &Tensor,
    head: &mut NerHead,
    instances: &[NerInstance],
    seed: u64,
) -> Result<Vec<f64>, NerError> {
    if instances.is_empty() {
        return Err(NerError::NoPositiveInstances);
    }
    let mut r = rng::stream(seed, &format!("ner-train/{}", head.name()));
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr, cfg.decay, epoch);
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<NerInstance> = chunk.iter().map(|&i| instances[i].clone()).collect();
            let mut tape = Tape::new();
            let loss = instance_loss(&mut tape, cfg, &head.params, shared, &batch, Some(&mut r))?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            let grads = tape.backward(loss)?;
            head.params.adam_step(&grads, lr, &adam)?;
        }
        losses.push(total / instances.len() as f64);
    }
    Ok(losses)
}

/// Trains every head of `model` on the annotated `docs`. Feed-forward heads
/// train in parallel, each on its own seeded streams.
pub fn train_ner(
    model: &mut NerModel,
    docs: &[AnnotatedDocument],
    maps: &[SentenceMap],
    seed: u64,
) -> Result<TrainReport, NerError> {
    let mut report = TrainReport::default();
    let per_head: Vec<Vec<NerInstance>> = if model.config.arch.is_ffn() {
        let labelled = labelled_windows(model, docs, maps)?;
        let p = model.config.positive_proportion;
        model.heads.iter().map(|h| sample_field(&labelled, h.field.expect("binary head"), p, seed)).collect()
    } else {
        let inst = rnn_instances(model, docs, maps)?;
        let any_positive = inst.iter().any(|i| i.target != 0);
        vec![if any_positive { inst } else { Vec::new() }]
    };
    for (h, inst) in model.heads.iter_mut().zip(&per_head) {
        h.active = !inst.is_empty();
        if !h.active {
            if let Some(f) = h.field {
                report.skipped.push(f);
            }
        }
    }
    if model.heads.iter().all(|h| !h.active) {
        return Err(NerError::NoPositiveInstances);
    }
    let cfg = model.config.clone();
    let shared = &model.embeddings;
    let results: Vec<Result<Vec<f64>, NerError>> = model
        .heads
        .par_iter_mut()
        .zip(per_head.par_iter())
        .map(|(h, inst)| if h.active { train_head(&cfg, shared, h, inst, seed) } else { Ok(Vec::new()) })
        .collect();
    for ((h, inst), res) in model.heads.iter().zip(&per_head).zip(results) {
        let losses = res?;
        if h.active {
            report.losses.insert(h.name().to_string(), losses);
            report.instances.insert(h.name().to_string(), inst.len());
        }
    }
    Ok(report)
}
