//! Extrinsic evaluation: per field, a context-free binary classifier trained
//! on sampled words for every point of a hyperparameter grid.

use std::cmp::Ordering;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassPartition, EvalError};
use crate::corpus::FieldLabel;
use crate::embeddings::{Algorithm, EmbeddingMatrix};
use crate::metrics::{Counts, Prf};
use crate::ner::{forward_logits, train_head, Architecture, NerConfig, NerInstance, NerModel};
use crate::numkit::{Activation, Tape};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub algorithm: Algorithm,
    pub layers: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub lr: f64,
}

/// The explored grid: 2 algorithms x 2 depths x 3 activations x 3 dropout
/// rates x 2 learning rates.
pub fn table6_grid() -> Vec<SweepPoint> {
    let mut out = Vec::with_capacity(72);
    for algorithm in [Algorithm::Cbow, Algorithm::Csg] {
        for layers in [1, 2] {
            for activation in Activation::ALL {
                for dropout in [0.0, 0.2, 0.4] {
                    for lr in [0.001, 0.01] {
                        out.push(SweepPoint { algorithm, layers, activation, dropout, lr });
                    }
                }
            }
        }
    }
    out
}

/// Settings shared by every point of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub positive_proportion: f64,
    /// Truncated to each point's depth.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay: f64,
    pub fields: Vec<FieldLabel>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let cf = NerConfig::defaults(Architecture::ContextFreeFfn);
        SweepConfig {
            n_train: 10_000,
            n_test: 1_000,
            positive_proportion: 0.1,
            hidden: cf.hidden,
            epochs: cf.epochs,
            batch_size: cf.batch_size,
            decay: cf.decay,
            fields: FieldLabel::FIELDS.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldResult {
    pub field: FieldLabel,
    pub best: SweepPoint,
    pub best_f1: f64,
    /// Test F1 of every point, in sweep order.
    pub f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    pub fields: Vec<FieldResult>,
}

type Sample = (Vec<usize>, Vec<usize>);

fn draw(partition: &ClassPartition, field: FieldLabel, n: usize, p: f64, r: &mut rng::Rng) -> Result<Sample, EvalError> {
    let insufficient = |reason: String| EvalError::InsufficientClassWords { field: field.name().into(), reason };
    if !(p > 0.0 && p < 1.0) {
        return Err(insufficient(format!("positive proportion {p} leaves no positives or no negatives")));
    }
    let positives = partition.field(field);
    let negatives: Vec<usize> = partition.none.iter().copied().collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(insufficient(format!("{} field words, {} none words", positives.len(), negatives.len())));
    }
    let n_pos = (p * n as f64).round() as usize;
    if n_pos == 0 || n_pos == n {
        return Err(insufficient(format!("{n} samples at proportion {p} give {n_pos} positives")));
    }
    let pos = (0..n_pos).map(|_| *positives.choose(r).expect("non-empty")).collect();
    let neg = (0..n - n_pos).map(|_| *negatives.choose(r).expect("non-empty")).collect();
    Ok((pos, neg))
}

fn instances((pos, neg): &Sample) -> Vec<NerInstance> {
    let mk = |id: usize, target| NerInstance { window: vec![id], target };
    pos.iter().map(|&id| mk(id, 1)).chain(neg.iter().map(|&id| mk(id, 0))).collect()
}

fn point_config(cfg: &SweepConfig, point: &SweepPoint, field: FieldLabel) -> NerConfig {
    NerConfig {
        hidden: cfg.hidden.iter().copied().take(point.layers).collect(),
        activation: point.activation,
        dropout: point.dropout,
        lr: point.lr,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        decay: cfg.decay,
        positive_proportion: cfg.positive_proportion,
        fields: vec![field],
        ..NerConfig::defaults(Architecture::ContextFreeFfn)
    }
}

fn run_point(
    e: &EmbeddingMatrix,
    cfg: &SweepConfig,
    point: &SweepPoint,
    field: FieldLabel,
    train: &[NerInstance],
    test: &[NerInstance],
    seed: u64,
) -> Result<f64, EvalError> {
    let ner_cfg = point_config(cfg, point, field);
    let mut model = NerModel::build(ner_cfg, e, seed)?;
    let mut head = model.heads.remove(0);
    train_head(&model.config, &model.embeddings, &mut head, train, seed)?;
    let windows: Vec<&[usize]> = test.iter().map(|i| i.window.as_slice()).collect();
    let mut counts = Counts::default();
    for (chunk, gold) in windows.chunks(512).zip(test.chunks(512)) {
        let mut tape = Tape::new();
        let logits = forward_logits(&mut tape, &model.config, &head.params, &model.embeddings, chunk, None)
            .map_err(crate::ner::NerError::from)?;
        let scores = tape.value(logits);
        for (k, inst) in gold.iter().enumerate() {
            let predicted = scores.get(k, 1) > scores.get(k, 0);
            match (predicted, inst.target == 1) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(Prf::from_counts(counts).f1)
}

/// Higher F1 first; ties go to fewer layers, lower dropout, lower learning
/// rate, then CBOW.
fn rank(a: (&SweepPoint, f64), b: (&SweepPoint, f64)) -> Ordering {
    let alg = |p: &SweepPoint| p.algorithm != Algorithm::Cbow;
    b.1.total_cmp(&a.1)
        .then(a.0.layers.cmp(&b.0.layers))
        .then(a.0.dropout.total_cmp(&b.0.dropout))
        .then(a.0.lr.total_cmp(&b.0.lr))
        .then(alg(a.0).cmp(&alg(b.0)))
}

/// Trains and scores every (field, point) pair; points run in parallel,
/// each seeded from `(seed, field, point index)`.
pub fn extrinsic_sweep(
    cbow: &EmbeddingMatrix,
    csg: &EmbeddingMatrix,
    partition: &ClassPartition,
    points: &[SweepPoint],
    cfg: &SweepConfig,
) -> Result<SweepReport, EvalError> {
    if points.is_empty() {
        return Err(EvalError::ConfigInvalid("empty sweep".into()));
    }
    if cbow.vocab != csg.vocab {
        return Err(EvalError::ConfigInvalid("CBOW and CSG embeddings must share a vocabulary".into()));
    }
    if let Some(p) = points.iter().find(|p| p.algorithm == Algorithm::Imported) {
        return Err(EvalError::ConfigInvalid(format!("sweep point {p:?} names no training algorithm")));
    }
    let mut fields = Vec::with_capacity(cfg.fields.len());
    for &field in &cfg.fields {
        let mut r = rng::stream(cfg.seed, &format!("sweep-sample/{}", field.name()));
        let train = instances(&draw(partition, field, cfg.n_train, cfg.positive_proportion, &mut r)?);
        let test = instances(&draw(partition, field, cfg.n_test, cfg.positive_proportion, &mut r)?);
        let f1: Vec<f64> = points
            .par_iter()
            .enumerate()
            .map(|(i, point)| {
                let e = if point.algorithm == Algorithm::Cbow { cbow } else { csg };
                let seed = rng::derive_seed(cfg.seed, &format!("sweep/{}/{i}", field.name()));
                run_point(e, cfg, point, field, &train, &test, seed)
            })
            .collect::<Result<_, _>>()?;
        let best = (0..points.len()).min_by(|&a, &b| rank((&points[a], f1[a]), (&points[b], f1[b]))).expect("non-empty");
        fields.push(FieldResult { field, best: points[best], best_f1: f1[best], f1 });
    }
    Ok(SweepReport { points: points.to_vec(), fields })
}

/// Best point per field: `field,algorithm,layers,activation,dropout,lr,f1`.
pub fn sweep_csv(report: &SweepReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["field", "algorithm", "layers", "activation", "dropout", "lr", "f1"]).expect("in-memory write");
    for f in &report.fields {
        let b = &f.best;
        w.write_record([
            f.field.name(),
            b.algorithm.name(),
            &b.layers.to_string(),
            b.activation.name(),
            &b.dropout.to_string(),
            &b.lr.to_string(),
            &format!("{:.4}", f.best_f1),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}
