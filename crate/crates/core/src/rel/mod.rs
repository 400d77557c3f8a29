//! Relation extraction: given a medication mention, find the tokens of its
//! related fields in the surrounding lines.
//!
//! Two models share the windowing and inputs. The tagger is a bidirectional
//! GRU that labels every window token. The encoder-decoder reads the window
//! with a bidirectional LSTM and generates the related tokens with an
//! attending LSTM decoder.

mod encdec;
mod lookup;
mod tagger;
mod train;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, Entry, FieldLabel, TokenSpan};
use crate::embeddings::{EmbeddingMatrix, Vocabulary};
use crate::ner::with_unk_mean;
use crate::numkit::checkpoint::{self, CheckpointError};
use crate::numkit::{GruWeights, LstmWeights, NumError, ParamStore, Precision, Tensor};
use crate::rng;

pub use encdec::{decode, encdec_loss, Decoded};
pub use lookup::{attribute_fields, FieldLookup};
pub use tagger::{tag, tagger_loss, tagger_probs};
pub use train::{extract, train_rel};

#[derive(Debug, Error)]
pub enum RelError {
    #[error("medication term has no tokens")]
    EmptyTerm,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no training instances")]
    NoInstances,
    #[error("medication span {span} is outside document {doc_id}")]
    SpanOutOfBounds { doc_id: String, span: TokenSpan },
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelArch {
    Seq2seq,
    Encdec,
}

impl RelArch {
    pub fn name(self) -> &'static str {
        match self {
            RelArch::Seq2seq => "seq2seq",
            RelArch::Encdec => "encdec",
        }
    }
}

impl std::str::FromStr for RelArch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "seq2seq" => Ok(RelArch::Seq2seq),
            "encdec" => Ok(RelArch::Encdec),
            _ => Err(format!("unknown relation model {s:?} (expected seq2seq or encdec)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// `vᵀ tanh(W₁h + W₂s)`
    Bahdanau,
    /// `sᵀWh`
    Luong,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Bahdanau => "bahdanau",
            AttentionKind::Luong => "luong",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bahdanau" => Ok(AttentionKind::Bahdanau),
            "luong" => Ok(AttentionKind::Luong),
            _ => Err(format!("unknown attention {s:?} (expected bahdanau or luong)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelConfig {
    pub arch: RelArch,
    pub attention: AttentionKind,
    /// Units per direction of the recurrent encoder (the tagger's GRU).
    /// The decoder has twice as many.
    pub hidden: usize,
    /// Width of the additive attention layer.
    pub attention_dim: usize,
    /// Lines on each side of the medication's line.
    pub context_lines: usize,
    pub lr: f64,
    pub decay: f64,
    pub clip: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoding stops after the window length plus this many tokens.
    pub decode_margin: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl RelConfig {
    pub fn defaults(arch: RelArch) -> Self {
        match arch {
            RelArch::Seq2seq => RelConfig {
                arch,
                attention: AttentionKind::Bahdanau,
                hidden: 100,
                attention_dim: 100,
                context_lines: 2,
                lr: 0.001,
                decay: 0.0,
                clip: None,
                batch_size: 50,
                epochs: 100,
                decode_margin: 64,
                precision: Precision::F32,
            },
            RelArch::Encdec => RelConfig {
                arch,
                attention: AttentionKind::Bahdanau,
                hidden: 128,
                attention_dim: 128,
                context_lines: 2,
                lr: 0.001,
                decay: 1e-5,
                clip: Some(5.0),
                batch_size: 50,
                epochs: 100,
                decode_margin: 64,
                precision: Precision::F32,
            },
        }
    }

    pub fn decoder_hidden(&self) -> usize {
        2 * self.hidden
    }

    pub fn validate(&self) -> Result<(), RelError> {
        let bad = |m: &str| Err(RelError::ConfigInvalid(m.to_string()));
        if self.hidden == 0 || self.attention_dim == 0 {
            return bad("hidden and attention sizes must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.lr < 0.0 || self.decay < 0.0 {
            return bad("learning rate and decay must be non-negative");
        }
        if self.clip.is_some_and(|c| c <= 0.0) {
            return bad("clip value must be positive");
        }
        Ok(())
    }
}

/// Sum of the term's embedding rows with the medication code appended.
pub fn bow_repr(term_ids: &[usize], table: &Tensor) -> Result<Vec<f64>, RelError> {
    if term_ids.is_empty() {
        return Err(RelError::EmptyTerm);
    }
    let mut v = vec![0.0; table.cols() + 1];
    for &id in term_ids {
        for (a, b) in v.iter_mut().zip(table.row_slice(id)) {
            *a += b;
        }
    }
    v[table.cols()] = f64::from(FieldLabel::Medication.code());
    Ok(v)
}

/// One medication mention and its window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelInstance {
    pub doc_id: String,
    pub medication: Vec<TokenSpan>,
    /// `(line, token)` of each window position.
    pub positions: Vec<(usize, usize)>,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    /// Known-entity field code of each window token, fed as an input.
    pub codes: Vec<f64>,
    /// Gold class of each window token for this entry (empty without gold).
    pub tags: Vec<usize>,
    pub bow: Vec<f64>,
    /// Gold related-token ids ending with `<end-of-output>` (empty without
    /// gold).
    pub output: Vec<usize>,
    /// Gold related tokens by field (empty without gold).
    pub gold: BTreeMap<FieldLabel, Vec<String>>,
}

impl RelInstance {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_gold(&self) -> bool {
        !self.output.is_empty()
    }
}

/// Builds the instance for one medication mention. `codes` gives the
/// known-entity field of every document token (gold or predicted); `entry`
/// supplies gold targets when available.
pub fn make_instance(
    doc: &AnnotatedDocument,
    medication: &[TokenSpan],
    entry: Option<&Entry>,
    codes: &[Vec<FieldLabel>],
    vocab: &Vocabulary,
    table: &Tensor,
    context_lines: usize,
) -> Result<RelInstance, RelError> {
    if medication.is_empty() {
        return Err(RelError::EmptyTerm);
    }
    if let Some(span) = medication.iter().find(|s| !doc.span_in_bounds(s)) {
        return Err(RelError::SpanOutOfBounds { doc_id: doc.doc_id.clone(), span: *span });
    }
    let term: Vec<usize> =
        medication.iter().flat_map(|s| s.positions()).map(|(l, t)| vocab.lookup(&doc.lines[l - 1][t])).collect();
    let bow = bow_repr(&term, table)?;
    let centre = medication[0].line;
    let first = centre.saturating_sub(context_lines).max(1);
    let last = (centre + context_lines).min(doc.lines.len());
    let mut tag_of: BTreeMap<(usize, usize), FieldLabel> = BTreeMap::new();
    if let Some(e) = entry {
        for a in e.annotations() {
            for p in a.positions() {
                tag_of.entry(p).or_insert(a.label);
            }
        }
    }
    let mut inst = RelInstance {
        doc_id: doc.doc_id.clone(),
        medication: medication.to_vec(),
        positions: Vec::new(),
        tokens: Vec::new(),
        ids: Vec::new(),
        codes: Vec::new(),
        tags: Vec::new(),
        bow,
        output: Vec::new(),
        gold: BTreeMap::new(),
    };
    for line in first..=last {
        for (t, tok) in doc.lines[line - 1].iter().enumerate() {
            inst.positions.push((line, t));
            inst.tokens.push(tok.clone());
            inst.ids.push(vocab.lookup(tok));
            let code = codes.get(line - 1).and_then(|l| l.get(t)).copied().unwrap_or(FieldLabel::None);
            inst.codes.push(f64::from(code.code()));
            if entry.is_some() {
                inst.tags.push(tag_of.get(&(line, t)).map_or(0, |f| f.code() as usize));
            }
        }
    }
    if let Some(e) = entry {
        for f in FieldLabel::RELATED {
            let toks: Vec<String> = e
                .related
                .iter()
                .filter(|a| a.label == f)
                .flat_map(|a| a.positions())
                .filter_map(|(l, t)| doc.token(l, t))
                .map(str::to_string)
                .collect();
            inst.output.extend(toks.iter().map(|t| vocab.lookup(t)));
            inst.gold.insert(f, toks);
        }
        inst.output.push(Vocabulary::EOS);
    }
    Ok(inst)
}

/// Instances for every gold entry of `doc`, with oracle known-entity codes.
pub fn oracle_instances(
    doc: &AnnotatedDocument,
    vocab: &Vocabulary,
    table: &Tensor,
    context_lines: usize,
) -> Result<Vec<RelInstance>, RelError> {
    let codes = doc.token_codes();
    doc.entries
        .iter()
        .map(|e| make_instance(doc, &e.medication.spans, Some(e), &codes, vocab, table, context_lines))
        .collect()
}

#[derive(Debug, Clone)]
pub struct RelModel {
    pub config: RelConfig,
    pub vocab: Vocabulary,
    /// Frozen input table.
    pub embeddings: Tensor,
    pub params: ParamStore,
    /// Field of each related-token type seen in training.
    pub lookup: FieldLookup,
}

fn affine_init(store: &mut ParamStore, name: &str, rows: usize, cols: usize, r: &mut rng::Rng) {
    store.insert(format!("{name}.w"), Tensor::glorot(rows, cols, r));
    store.insert(format!("{name}.b"), Tensor::zeros(1, cols));
}

impl RelModel {
    pub fn build(config: RelConfig, e: &EmbeddingMatrix, seed: u64) -> Result<Self, RelError> {
        config.validate()?;
        let table = with_unk_mean(&e.weights);
        let (m, h) = (table.cols(), config.hidden);
        let input = m + 1;
        let mut store = ParamStore::with_precision(config.precision);
        let mut r = rng::stream(seed, &format!("rel-init/{}", config.arch.name()));
        match config.arch {
            RelArch::Seq2seq => {
                affine_init(&mut store, "init_f", input, h, &mut r);
                affine_init(&mut store, "init_b", input, h, &mut r);
                GruWeights::init(&mut store, "gru_f", input, h, &mut r);
                GruWeights::init(&mut store, "gru_b", input, h, &mut r);
                affine_init(&mut store, "out", 2 * h, FieldLabel::ALL.len(), &mut r);
            }
            RelArch::Encdec => {
                let d = config.decoder_hidden();
                for name in ["enc_h_f", "enc_c_f", "enc_h_b", "enc_c_b"] {
                    affine_init(&mut store, name, input, h, &mut r);
                }
                LstmWeights::init(&mut store, "lstm_f", input, h, &mut r);
                LstmWeights::init(&mut store, "lstm_b", input, h, &mut r);
                LstmWeights::init(&mut store, "dec", m + 2 * h, d, &mut r);
                store.insert("start", Tensor::glorot(1, m, &mut r));
                match config.attention {
                    AttentionKind::Bahdanau => {
                        let a = config.attention_dim;
                        store.insert("att.w1", Tensor::glorot(2 * h, a, &mut r));
                        store.insert("att.w2", Tensor::glorot(d, a, &mut r));
                        store.insert("att.v", Tensor::glorot(a, 1, &mut r));
                    }
                    AttentionKind::Luong => store.insert("att.w", Tensor::glorot(d, 2 * h, &mut r)),
                }
                affine_init(&mut store, "out", d + 2 * h, e.len(), &mut r);
            }
        }
        Ok(RelModel { config, vocab: e.vocab.clone(), embeddings: table, params: store, lookup: FieldLookup::default() })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Oracle-mode instances for every entry of `docs`.
    pub fn instances(&self, docs: &[AnnotatedDocument]) -> Result<Vec<RelInstance>, RelError> {
        let mut out = Vec::new();
        for d in docs {
            out.extend(oracle_instances(d, &self.vocab, &self.embeddings, self.config.context_lines)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<(), RelError> {
        let mut all = self.params.clone();
        all.insert("embeddings", self.embeddings.clone());
        let extra = serde_json::json!({
            "kind": "rel",
            "config": self.config,
            "vocab": self.vocab,
            "lookup": self.lookup,
        });
        checkpoint::save_checkpoint(path, &all, seed, extra)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RelError> {
        let (all, manifest) = checkpoint::load_checkpoint(path)?;
        let bad = |m: &str| RelError::Checkpoint(CheckpointError::Format(m.to_string()));
        let extra = &manifest.extra;
        if extra["kind"] != "rel" {
            return Err(bad("not a relation checkpoint"));
        }
        let json = |k: &str| extra[k].clone();
        let config: RelConfig = serde_json::from_value(json("config")).map_err(CheckpointError::from)?;
        let vocab: Vocabulary = serde_json::from_value(json("vocab")).map_err(CheckpointError::from)?;
        let lookup: FieldLookup = serde_json::from_value(json("lookup")).map_err(CheckpointError::from)?;
        let embeddings = all.get("embeddings").ok_or_else(|| bad("missing embeddings"))?.clone();
        let mut params = ParamStore::with_precision(config.precision);
        for (k, t) in all.iter().filter(|(k, _)| *k != "embeddings") {
            params.insert(k, t.clone());
        }
        params.set_step(manifest.step);
        Ok(RelModel { config, vocab, embeddings, params, lookup })
    }
}

/// Batch inputs shared by both models: per-step `[embedding; code]` rows,
/// validity masks and the term representations.
pub(crate) struct Inputs {
    pub len: usize,
    pub steps: Vec<Tensor>,
    pub masks: Vec<Tensor>,
    pub inv_masks: Vec<Tensor>,
    pub bow: Tensor,
    pub lengths: Vec<usize>,
}

pub(crate) fn assemble(table: &Tensor, batch: &[&RelInstance]) -> Inputs {
    let m = table.cols();
    let b = batch.len();
    let lengths: Vec<usize> = batch.iter().map(|i| i.len()).collect();
    let len = lengths.iter().copied().max().unwrap_or(0);
    let mut steps = Vec::with_capacity(len);
    let mut masks = Vec::with_capacity(len);
    let mut inv_masks = Vec::with_capacity(len);
    for t in 0..len {
        let mut x = Tensor::zeros(b, m + 1);
        let mut mask = Tensor::zeros(b, 1);
        for (r, inst) in batch.iter().enumerate() {
            if t < inst.len() {
                let row = x.row_slice_mut(r);
                row[..m].copy_from_slice(table.row_slice(inst.ids[t]));
                row[m] = inst.codes[t];
                mask.set(r, 0, 1.0);
            }
        }
        inv_masks.push(mask.map(|v| 1.0 - v));
        masks.push(mask);
        steps.push(x);
    }
    let bow_rows: Vec<Vec<f64>> = batch.iter().map(|i| i.bow.clone()).collect();
    let bow = Tensor::from_rows(&bow_rows).unwrap_or_else(|_| Tensor::zeros(0, m + 1));
    Inputs { len, steps, masks, inv_masks, bow, lengths }
}
