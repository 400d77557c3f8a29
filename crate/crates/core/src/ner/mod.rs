//! Term classifiers: a context-free feed-forward net, a windowed
//! (context-aware) feed-forward net, and an LSTM over the token window.
//!
//! The feed-forward nets are six independent binary models, one per field.
//! The LSTM has a single 7-way head (the six fields plus none).

mod network;
mod spans;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, FieldLabel};
use crate::embeddings::{window_ids, EmbeddingMatrix, Vocabulary};
use crate::numkit::checkpoint::{self, CheckpointError};
use crate::numkit::{Activation, LstmWeights, NumError, ParamStore, Precision, Tensor};
use crate::preprocess::SentenceMap;
use crate::rng;

pub use network::{ffn_input, forward_logits, instance_loss};
pub use spans::{merge_runs, predict_spans, predict_tokens, PredictedSpan, TokenPrediction};
pub use train::{field_instances, rnn_instances, train_head, train_ner, TrainReport};

#[derive(Debug, Error)]
pub enum NerError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no positive instances for any requested field")]
    NoPositiveInstances,
    #[error("sentence map does not fit document {0}")]
    SentenceMapMismatch(String),
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "cf-ffn")]
    ContextFreeFfn,
    #[serde(rename = "ca-ffn")]
    ContextAwareFfn,
    #[serde(rename = "rnn")]
    Rnn,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::ContextFreeFfn, Architecture::ContextAwareFfn, Architecture::Rnn];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::ContextFreeFfn => "cf-ffn",
            Architecture::ContextAwareFfn => "ca-ffn",
            Architecture::Rnn => "rnn",
        }
    }

    pub fn is_ffn(self) -> bool {
        self != Architecture::Rnn
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown architecture {s:?} (expected cf-ffn, ca-ffn or rnn)"))
    }
}

fn all_fields() -> Vec<FieldLabel> {
    FieldLabel::FIELDS.to_vec()
}

/// Hyperparameters of one architecture. The layer count is `hidden.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerConfig {
    pub arch: Architecture,
    /// Tokens on each side of the classified token.
    pub half_window: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Share of positives among feed-forward training instances.
    pub positive_proportion: f64,
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub activation: Activation,
    /// Train the embedding table along with the network.
    pub fine_tune: bool,
    /// Fields that get a feed-forward head; ignored by the LSTM.
    #[serde(default = "all_fields")]
    pub fields: Vec<FieldLabel>,
    #[serde(default)]
    pub precision: Precision,
}

impl NerConfig {
    pub fn defaults(arch: Architecture) -> Self {
        let base = NerConfig {
            arch,
            half_window: 0,
            hidden: vec![100, 100],
            dropout: 0.0,
            positive_proportion: 0.1,
            epochs: 5,
            lr: 0.01,
            decay: 0.002,
            batch_size: 50,
            activation: Activation::Sigmoid,
            fine_tune: false,
            fields: all_fields(),
            precision: Precision::F32,
        };
        match arch {
            Architecture::ContextFreeFfn => base,
            Architecture::ContextAwareFfn => {
                NerConfig { half_window: 5, hidden: vec![500, 100], lr: 0.001, decay: 0.0, ..base }
            }
            Architecture::Rnn => NerConfig {
                half_window: 15,
                hidden: vec![100],
                epochs: 3,
                lr: 0.001,
                decay: 0.0,
                activation: Activation::Tanh,
                fine_tune: true,
                ..base
            },
        }
    }

    pub fn layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn window_len(&self) -> usize {
        2 * self.half_window + 1
    }

    pub fn validate(&self) -> Result<(), NerError> {
        let bad = |m: String| Err(NerError::ConfigInvalid(m));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.arch.is_ffn() && !(self.positive_proportion > 0.0 && self.positive_proportion <= 1.0) {
            return bad(format!("positive proportion {} outside (0, 1]", self.positive_proportion));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.lr < 0.0 || self.decay < 0.0 {
            return bad("learning rate and decay must be non-negative".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers need at least one unit".into());
        }
        match self.arch {
            Architecture::ContextFreeFfn if self.half_window != 0 => {
                bad("the context-free network takes no window (half_window must be 0)".into())
            }
            Architecture::Rnn if self.hidden.len() != 1 => bad("the LSTM classifier has exactly one layer".into()),
            _ if self.arch.is_ffn() && self.fields.is_empty() => bad("no fields selected".into()),
            _ => Ok(()),
        }
    }
}

/// A training or inference example: window token ids and the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NerInstance {
    pub window: Vec<usize>,
    pub target: usize,
}

/// One classifier: a binary field head or the 7-way head (`field = None`).
#[derive(Debug, Clone)]
pub struct NerHead {
    pub field: Option<FieldLabel>,
    pub params: ParamStore,
    /// False when training saw no positives; such a head never fires.
    pub active: bool,
}

impl NerHead {
    pub fn classes(&self) -> usize {
        if self.field.is_some() {
            2
        } else {
            FieldLabel::ALL.len()
        }
    }

    pub fn name(&self) -> &'static str {
        self.field.map_or("all", FieldLabel::name)
    }
}

#[derive(Debug, Clone)]
pub struct NerModel {
    pub config: NerConfig,
    pub vocab: Vocabulary,
    /// Shared, frozen table. Heads that fine-tune keep their own `emb`.
    pub embeddings: Tensor,
    pub heads: Vec<NerHead>,
}

/// Copy of the table whose `<unk>` row is the mean of the non-reserved rows.
pub fn with_unk_mean(weights: &Tensor) -> Tensor {
    let mut w = weights.clone();
    let rows = w.rows();
    if rows > 4 {
        let mut mean = vec![0.0; w.cols()];
        for r in 4..rows {
            for (m, v) in mean.iter_mut().zip(w.row_slice(r)) {
                *m += v;
            }
        }
        let n = (rows - 4) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        w.row_slice_mut(Vocabulary::UNK).copy_from_slice(&mean);
    }
    w
}

fn init_head(cfg: &NerConfig, dim: usize, classes: usize, emb: &Tensor, rng: &mut rng::Rng) -> ParamStore {
    let mut store = ParamStore::with_precision(cfg.precision);
    let mut fan_in = if cfg.arch.is_ffn() { dim * cfg.window_len() } else { dim };
    match cfg.arch {
        Architecture::Rnn => {
            LstmWeights::init(&mut store, "lstm", dim, cfg.hidden[0], rng);
            fan_in = cfg.hidden[0];
        }
        _ => {
            for (i, &units) in cfg.hidden.iter().enumerate() {
                store.insert(format!("l{i}.w"), Tensor::glorot(fan_in, units, rng));
                store.insert(format!("l{i}.b"), Tensor::zeros(1, units));
                fan_in = units;
            }
        }
    }
    store.insert("out.w", Tensor::glorot(fan_in, classes, rng));
    store.insert("out.b", Tensor::zeros(1, classes));
    if cfg.fine_tune {
        store.insert("emb", emb.clone());
    }
    store
}

impl NerModel {
    /// Initializes an untrained model over `embeddings`.
    pub fn build(config: NerConfig, embeddings: &EmbeddingMatrix, seed: u64) -> Result<Self, NerError> {
        config.validate()?;
        let table = with_unk_mean(&embeddings.weights);
        let dim = table.cols();
        let fields: Vec<Option<FieldLabel>> = if config.arch.is_ffn() {
            let mut f = config.fields.clone();
            f.sort();
            f.dedup();
            if f.contains(&FieldLabel::None) {
                return Err(NerError::ConfigInvalid("None is not a trainable field".into()));
            }
            f.into_iter().map(Some).collect()
        } else {
            vec![None]
        };
        let heads = fields
            .into_iter()
            .map(|field| {
                let name = field.map_or("all", FieldLabel::name);
                let mut r = rng::stream(seed, &format!("ner-init/{name}"));
                let classes = if field.is_some() { 2 } else { FieldLabel::ALL.len() };
                NerHead { field, params: init_head(&config, dim, classes, &table, &mut r), active: true }
            })
            .collect();
        Ok(NerModel { config, vocab: embeddings.vocab.clone(), embeddings: table, heads })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn head(&self, field: FieldLabel) -> Option<&NerHead> {
        self.heads.iter().find(|h| h.field == Some(field))
    }

    /// Trainable scalars of head `i`, excluding any embedding table.
    pub fn param_count(&self, i: usize) -> usize {
        let p = &self.heads[i].params;
        p.num_values() - p.get("emb").map_or(0, Tensor::len)
    }

    /// `(line, token, window ids)` for every token, windows clipped to the
    /// token's sentence and filled with `PAD`.
    pub fn doc_windows(
        &self,
        doc: &AnnotatedDocument,
        map: &SentenceMap,
    ) -> Result<Vec<(usize, usize, Vec<usize>)>, NerError> {
        token_windows(&self.vocab, self.config.half_window, doc, map)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<(), NerError> {
        let mut all = ParamStore::with_precision(self.config.precision);
        all.insert("embeddings", self.embeddings.clone());
        for h in &self.heads {
            for (name, t) in h.params.iter() {
                all.insert(format!("{}/{name}", h.name()), t.clone());
            }
        }
        let heads: Vec<serde_json::Value> = self
            .heads
            .iter()
            .map(|h| serde_json::json!({"field": h.field, "active": h.active, "step": h.params.step()}))
            .collect();
        let extra = serde_json::json!({
            "kind": "ner",
            "config": self.config,
            "vocab": self.vocab,
            "heads": heads,
        });
        checkpoint::save_checkpoint(path, &all, seed, extra)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NerError> {
        let (all, manifest) = checkpoint::load_checkpoint(path)?;
        let bad = |m: &str| NerError::Checkpoint(CheckpointError::Format(m.to_string()));
        let extra = &manifest.extra;
        if extra["kind"] != "ner" {
            return Err(bad("not a term-classifier checkpoint"));
        }
        let config: NerConfig = serde_json::from_value(extra["config"].clone()).map_err(CheckpointError::from)?;
        let vocab: Vocabulary = serde_json::from_value(extra["vocab"].clone()).map_err(CheckpointError::from)?;
        let embeddings = all.get("embeddings").ok_or_else(|| bad("missing embeddings"))?.clone();
        let mut heads = Vec::new();
        for h in extra["heads"].as_array().ok_or_else(|| bad("missing heads"))? {
            let field: Option<FieldLabel> = serde_json::from_value(h["field"].clone()).map_err(CheckpointError::from)?;
            let name = field.map_or("all", FieldLabel::name);
            let mut params = ParamStore::with_precision(config.precision);
            let prefix = format!("{name}/");
            for (k, t) in all.iter() {
                if let Some(rest) = k.strip_prefix(&prefix) {
                    params.insert(rest, t.clone());
                }
            }
            params.set_step(h["step"].as_u64().unwrap_or(0));
            heads.push(NerHead { field, params, active: h["active"].as_bool().unwrap_or(true) });
        }
        Ok(NerModel { config, vocab, embeddings, heads })
    }
}

pub(crate) fn token_windows(
    vocab: &Vocabulary,
    half: usize,
    doc: &AnnotatedDocument,
    map: &SentenceMap,
) -> Result<Vec<(usize, usize, Vec<usize>)>, NerError> {
    if !map.fits(doc) {
        return Err(NerError::SentenceMapMismatch(doc.doc_id.clone()));
    }
    let mut out = Vec::with_capacity(doc.token_count());
    for (line, start, end) in map.sentences() {
        let ids: Vec<usize> = doc.lines[line - 1].iter().map(|t| vocab.lookup(t)).collect();
        for tok in start..=end {
            out.push((line, tok, window_ids(&ids, (start, end), tok, half)));
        }
    }
    Ok(out)
}

fn check_arch(cfg: &NerConfig, arch: Architecture) -> Result<(), NerError> {
    if cfg.arch != arch {
        return Err(NerError::ConfigInvalid(format!("expected a {} config, got {}", arch.name(), cfg.arch.name())));
    }
    Ok(())
}

pub fn build_context_free_ffn(cfg: NerConfig, e: &EmbeddingMatrix, seed: u64) -> Result<NerModel, NerError> {
    check_arch(&cfg, Architecture::ContextFreeFfn)?;
    NerModel::build(cfg, e, seed)
}

pub fn build_context_aware_ffn(cfg: NerConfig, e: &EmbeddingMatrix, seed: u64) -> Result<NerModel, NerError> {
    check_arch(&cfg, Architecture::ContextAwareFfn)?;
    NerModel::build(cfg, e, seed)
}

pub fn build_rnn_classifier(cfg: NerConfig, e: &EmbeddingMatrix, seed: u64) -> Result<NerModel, NerError> {
    check_arch(&cfg, Architecture::Rnn)?;
    NerModel::build(cfg, e, seed)
}
