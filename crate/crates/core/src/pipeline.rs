//! End-to-end runs: corpus → preprocessing → embeddings → embedding
//! evaluation → term classifiers → relation extractors → reports.
//!
//! Every stage writes `<stage>/manifest.json` with its seed, a hash of its
//! inputs and hashes of its outputs. Reports land in `reports/` and are
//! byte-identical across runs with the same configuration and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    corpus_metrics, dedup_pool, gen_synthetic, label_metrics, split_corpus, AnnotatedDocument, FieldLabel,
    SplitSizes, SyntheticConfig, TokenSpan,
};
use crate::embed_eval::{
    extrinsic_sweep, intrinsic_csv, intrinsic_report, sweep_csv, table6_grid, tsne_csv, tsne_project, ClassPartition,
    EvalError, SweepConfig, SweepPoint, TsneConfig,
};
use crate::embeddings::{
    build_vocab, make_windows, save_embeddings, train_word2vec, Algorithm, EmbeddingError, EmbeddingMatrix,
    InitScheme, Word2VecConfig, DEFAULT_WINDOW,
};
use crate::files::{read_corpus_dir, write_jsonl, FileError, PredictionRecord};
use crate::metrics::{f1, gold_relations, score_corpus, score_relations, ExtractedRelations, F1Report};
use crate::ner::{predict_spans, train_ner, NerConfig, NerError, NerModel};
use crate::numkit::{NumError, Precision, Tensor};
use crate::preprocess::{preprocess, SentenceMap};
use crate::rel::{extract, train_rel, RelConfig, RelError, RelModel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSource {
    /// Generated with the given settings from the stage seed.
    Synthetic(SyntheticConfig),
    /// A corpus directory; documents without `.ann` files are unannotated.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub dim: usize,
    pub epochs: usize,
    pub window: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub negatives: usize,
    pub init: InitScheme,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        let w = Word2VecConfig::default();
        EmbeddingSettings {
            dim: w.dim,
            epochs: w.epochs,
            window: DEFAULT_WINDOW,
            lr0: w.lr0,
            lr_min: w.lr_min,
            negatives: w.negatives,
            init: w.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    #[serde(flatten)]
    pub config: SweepConfig,
    /// Defaults to the full 72-point grid.
    #[serde(default)]
    pub points: Option<Vec<SweepPoint>>,
}

/// Configuration of a full run. JSON; see `README.md` for the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub split: SplitSizes,
    #[serde(default)]
    pub embeddings: EmbeddingSettings,
    /// Embeddings fed to the term classifiers and relation models.
    #[serde(default = "default_algorithm")]
    pub model_embeddings: Algorithm,
    #[serde(default)]
    pub tsne: Option<TsneConfig>,
    #[serde(default)]
    pub sweep: Option<SweepSettings>,
    #[serde(default)]
    pub ner: Vec<NerConfig>,
    #[serde(default)]
    pub rel: Vec<RelConfig>,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Cbow
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Forces every trained model to `precision`.
    pub fn set_precision(&mut self, precision: Precision) {
        self.ner.iter_mut().for_each(|c| c.precision = precision);
        self.rel.iter_mut().for_each(|c| c.precision = precision);
    }

    /// Checks everything that can be checked without running a stage.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::ConfigInvalid(m));
        if let CorpusSource::Dir(d) = &self.corpus {
            if !d.is_dir() {
                return bad(format!("corpus directory {} does not exist", d.display()));
            }
        }
        if self.out_dir.is_file() {
            return bad(format!("output path {} is a file", self.out_dir.display()));
        }
        let e = &self.embeddings;
        if e.dim == 0 || e.epochs == 0 || !(e.lr0 > 0.0) || e.lr_min < 0.0 {
            return bad("embedding dim, epochs and lr0 must be positive".into());
        }
        if e.window.is_multiple_of(2) {
            return bad(format!("embedding window {} must be odd", e.window));
        }
        if self.model_embeddings == Algorithm::Imported {
            return bad("model_embeddings must be cbow or csg".into());
        }
        if self.split.test == 0 && (!self.ner.is_empty() || !self.rel.is_empty()) {
            return bad("models need a non-empty test split".into());
        }
        if let Some(t) = &self.tsne {
            if !(t.perplexity > 0.0) || !(t.learning_rate > 0.0) {
                return bad("t-SNE perplexity and learning rate must be positive".into());
            }
        }
        for c in &self.ner {
            c.validate().map_err(|e| PipelineError::ConfigInvalid(format!("ner {}: {e}", c.arch.name())))?;
        }
        for c in &self.rel {
            c.validate().map_err(|e| PipelineError::ConfigInvalid(format!("rel {}: {e}", c.arch.name())))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("stage {stage} failed: {source}")]
    StageFailure { stage: &'static str, numeric: bool, source: Box<dyn Error + Send + Sync> },
}

impl PipelineError {
    /// True when the failure traces back to a NaN or infinity.
    pub fn is_numeric(&self) -> bool {
        matches!(self, PipelineError::StageFailure { numeric: true, .. })
    }
}

trait StageCause: Error + Send + Sync + 'static {
    fn numeric(&self) -> bool {
        false
    }
}

fn num_is_numeric(e: &NumError) -> bool {
    matches!(e, NumError::NonFiniteValue { .. })
}

impl StageCause for NerError {
    fn numeric(&self) -> bool {
        matches!(self, NerError::Numeric(e) if num_is_numeric(e))
    }
}

impl StageCause for RelError {
    fn numeric(&self) -> bool {
        matches!(self, RelError::Numeric(e) if num_is_numeric(e))
    }
}

impl StageCause for EvalError {
    fn numeric(&self) -> bool {
        matches!(self, EvalError::Ner(e) if e.numeric())
    }
}

impl StageCause for EmbeddingError {
    fn numeric(&self) -> bool {
        matches!(self, EmbeddingError::Diverged)
    }
}

impl StageCause for FileError {}
impl StageCause for crate::corpus::CorpusError {}
impl StageCause for crate::metrics::MetricsError {}
impl StageCause for std::io::Error {}
impl StageCause for serde_json::Error {}

fn at<E: StageCause>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::StageFailure { stage, numeric: e.numeric(), source: Box::new(e) }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// What a stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub inputs_hash: String,
    /// Output path (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

struct Stage {
    name: &'static str,
    root: PathBuf,
    seed: u64,
    inputs_hash: String,
    outputs: BTreeMap<String, String>,
    notes: Vec<String>,
}

impl Stage {
    fn begin(run: &Run, name: &'static str, inputs: &impl Serialize) -> Self {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(inputs).expect("inputs serialize"));
        for upstream in run.manifests.values() {
            for (path, digest) in &upstream.outputs {
                h.update(path.as_bytes());
                h.update(digest.as_bytes());
            }
        }
        Stage {
            name,
            root: run.root.clone(),
            seed: rng::derive_seed(run.seed, &format!("stage/{name}")),
            inputs_hash: hex::encode(h.finalize()),
            outputs: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(p) = path.parent() {
            fs::create_dir_all(p).map_err(at(self.name))?;
        }
        fs::write(&path, bytes).map_err(at(self.name))?;
        self.record(rel)
    }

    /// Hashes a file some other writer produced.
    fn record(&mut self, rel: &str) -> Result<(), PipelineError> {
        let bytes = fs::read(self.root.join(rel)).map_err(at(self.name))?;
        self.outputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(self, run: &mut Run) -> Result<(), PipelineError> {
        let m = StageManifest {
            stage: self.name.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            inputs_hash: self.inputs_hash,
            outputs: self.outputs,
            notes: self.notes,
        };
        let path = run.root.join(self.name).join("manifest.json");
        fs::create_dir_all(path.parent().expect("stage dir")).map_err(at(self.name))?;
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(at(self.name))?;
        run.manifests.insert(self.name, m);
        Ok(())
    }
}

struct Run {
    root: PathBuf,
    seed: u64,
    manifests: BTreeMap<&'static str, StageManifest>,
}

/// Outcome of [`run_pipeline`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifests: BTreeMap<String, StageManifest>,
    /// Report path (relative to `out_dir`) to SHA-256.
    pub reports: BTreeMap<String, String>,
}

struct Prepared {
    embedding: Vec<AnnotatedDocument>,
    embedding_maps: Vec<SentenceMap>,
    train: Vec<AnnotatedDocument>,
    train_maps: Vec<SentenceMap>,
    test: Vec<AnnotatedDocument>,
    test_maps: Vec<SentenceMap>,
}

fn stage_corpus(cfg: &PipelineConfig, run: &mut Run) -> Result<Prepared, PipelineError> {
    let mut st = Stage::begin(run, "corpus", &(&cfg.corpus, &cfg.split));
    let docs = match &cfg.corpus {
        CorpusSource::Synthetic(s) => {
            let (u, a) = gen_synthetic(s, st.seed).map_err(at("corpus"))?;
            u.into_iter().chain(a).collect()
        }
        CorpusSource::Dir(d) => read_corpus_dir(d).map_err(at("corpus"))?.docs,
    };
    let (pool, dedup) = dedup_pool(vec![(0, docs)]);
    let split = split_corpus(&pool, cfg.split, st.seed).map_err(at("corpus"))?;
    let pick = |ids: &[String]| -> Vec<AnnotatedDocument> {
        ids.iter().map(|id| pool.get(id).expect("split ids come from the pool").clone()).collect()
    };
    let (embedding, train, test) = (pick(&split.embedding_train), pick(&split.model_train), pick(&split.test));
    let stats = serde_json::json!({
        "dedup": dedup,
        "split": { "embedding_train": embedding.len(), "model_train": train.len(),
                   "validation": split.validation.len(), "test": test.len() },
        "model_train": corpus_metrics(&train, None),
        "test": corpus_metrics(&test, None),
        "model_train_labels": label_metrics(&train),
        "test_labels": label_metrics(&test),
    });
    st.write("corpus/split.json", &pretty(&split))?;
    st.write("reports/corpus.json", &pretty(&stats))?;
    st.finish(run)?;

    let st = Stage::begin(run, "preprocess", &"normalize+split");
    let prep = |docs: Vec<AnnotatedDocument>| -> (Vec<AnnotatedDocument>, Vec<SentenceMap>) {
        docs.iter().map(preprocess).unzip()
    };
    let (embedding, embedding_maps) = prep(embedding);
    let (train, train_maps) = prep(train);
    let (test, test_maps) = prep(test);
    st.finish(run)?;
    Ok(Prepared { embedding, embedding_maps, train, train_maps, test, test_maps })
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

struct Trained {
    cbow: EmbeddingMatrix,
    csg: EmbeddingMatrix,
}

fn stage_embeddings(cfg: &PipelineConfig, run: &mut Run, data: &Prepared) -> Result<Trained, PipelineError> {
    let mut st = Stage::begin(run, "embeddings", &cfg.embeddings);
    let vocab = build_vocab(&data.embedding, &data.train);
    let docs: Vec<AnnotatedDocument> = data.embedding.iter().chain(&data.train).cloned().collect();
    let maps: Vec<SentenceMap> = data.embedding_maps.iter().chain(&data.train_maps).cloned().collect();
    let windows = make_windows(&docs, &maps, &vocab, cfg.embeddings.window).map_err(at("embeddings"))?;
    let e = &cfg.embeddings;
    let mut train = |algorithm: Algorithm| -> Result<EmbeddingMatrix, PipelineError> {
        let w2v = Word2VecConfig {
            algorithm,
            dim: e.dim,
            lr0: e.lr0,
            lr_min: e.lr_min,
            epochs: e.epochs,
            negatives: e.negatives,
            full_softmax: false,
            init: e.init,
            seed: rng::derive_seed(st.seed, algorithm.name()),
        };
        let out = train_word2vec(&windows, &vocab, &w2v).map_err(at("embeddings"))?;
        let rel = format!("embeddings/{}.txt", algorithm.name());
        let path = st.root.join(&rel);
        fs::create_dir_all(path.parent().expect("stage dir")).map_err(at("embeddings"))?;
        save_embeddings(&out.embeddings, &path).map_err(at("embeddings"))?;
        st.record(&rel)?;
        Ok(out.embeddings)
    };
    let trained = Trained { cbow: train(Algorithm::Cbow)?, csg: train(Algorithm::Csg)? };
    st.finish(run)?;
    Ok(trained)
}

fn stage_eval(cfg: &PipelineConfig, run: &mut Run, data: &Prepared, emb: &Trained) -> Result<(), PipelineError> {
    let mut st = Stage::begin(run, "eval-embeddings", &(&cfg.tsne, &cfg.sweep));
    let partition = ClassPartition::build(&data.train, &emb.cbow.vocab);
    let mut rows = intrinsic_report(&emb.cbow, &partition);
    rows.extend(intrinsic_report(&emb.csg, &partition));
    st.write("reports/table4.csv", intrinsic_csv(&rows).as_bytes())?;
    if let Some(t) = &cfg.tsne {
        let ids: Vec<usize> = partition.fields.values().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut points = Tensor::zeros(ids.len(), emb.cbow.dim());
        for (k, &id) in ids.iter().enumerate() {
            points.row_slice_mut(k).copy_from_slice(emb.cbow.row(id));
        }
        let tcfg = TsneConfig { seed: rng::derive_seed(st.seed, "tsne"), ..t.clone() };
        match tsne_project(&points, &tcfg) {
            Ok(res) => {
                st.write("reports/tsne_cbow.csv", tsne_csv(&emb.cbow, &partition, &ids, &res.coords).as_bytes())?;
            }
            Err(e @ EvalError::TooFewPoints { .. }) => st.notes.push(format!("t-SNE skipped: {e}")),
            Err(e) => return Err(at("eval-embeddings")(e)),
        }
    }
    if let Some(s) = &cfg.sweep {
        let points = s.points.clone().unwrap_or_else(table6_grid);
        let scfg = SweepConfig { seed: rng::derive_seed(st.seed, "sweep"), ..s.config.clone() };
        let report = extrinsic_sweep(&emb.cbow, &emb.csg, &partition, &points, &scfg).map_err(at("eval-embeddings"))?;
        st.write("reports/table6.csv", sweep_csv(&report).as_bytes())?;
        st.write("eval-embeddings/sweep.json", &pretty(&report))?;
    }
    st.finish(run)
}

/// `model,level,field,precision,recall,f1` rows.
fn scores_csv(rows: &[(String, &str, F1Report)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "level", "field", "precision", "recall", "f1"]).expect("in-memory write");
    for (model, level, r) in rows {
        let cells = r.fields.iter().map(|(f, p)| (f.name(), p)).chain([("micro", &r.micro)]);
        for (field, p) in cells {
            w.write_record([
                model.as_str(),
                level,
                field,
                &format!("{:.4}", p.precision),
                &format!("{:.4}", p.recall),
                &format!("{:.4}", p.f1),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn model_embeddings<'a>(cfg: &PipelineConfig, emb: &'a Trained) -> &'a EmbeddingMatrix {
    if cfg.model_embeddings == Algorithm::Csg {
        &emb.csg
    } else {
        &emb.cbow
    }
}

fn stage_ner(cfg: &PipelineConfig, run: &mut Run, data: &Prepared, emb: &Trained) -> Result<(), PipelineError> {
    let mut st = Stage::begin(run, "ner", &(&cfg.ner, cfg.model_embeddings));
    let e = model_embeddings(cfg, emb);
    let mut rows = Vec::new();
    for (i, c) in cfg.ner.iter().enumerate() {
        let tag = format!("{}-{i}", c.arch.name());
        let seed = rng::derive_seed(st.seed, &tag);
        let mut model = NerModel::build(c.clone(), e, seed).map_err(at("ner"))?;
        train_ner(&mut model, &data.train, &data.train_maps, seed).map_err(at("ner"))?;
        let ckpt = format!("ner/{tag}.bin");
        model.save(&st.root.join(&ckpt), seed).map_err(at("ner"))?;
        st.record(&ckpt)?;
        let mut records = Vec::new();
        let mut by_doc: BTreeMap<String, Vec<(FieldLabel, TokenSpan)>> = BTreeMap::new();
        for (doc, map) in data.test.iter().zip(&data.test_maps) {
            let spans = predict_spans(&model, doc, map).map_err(at("ner"))?;
            by_doc.insert(doc.doc_id.clone(), spans.iter().map(|s| (s.label, s.span)).collect());
            records.extend(spans.into_iter().map(|s| PredictionRecord {
                doc_id: doc.doc_id.clone(),
                line: s.span.line,
                start: s.span.start,
                end: s.span.end,
                label: s.label,
                score: s.score,
            }));
        }
        let pred = format!("ner/{tag}.predictions.jsonl");
        write_jsonl(&st.root.join(&pred), &records).map_err(at("ner"))?;
        st.record(&pred)?;
        let counts = score_corpus(&data.test, &by_doc).map_err(at("ner"))?;
        rows.push((c.arch.name().to_string(), "token", f1(&counts.token)));
        rows.push((c.arch.name().to_string(), "phrase", f1(&counts.phrase)));
    }
    if !rows.is_empty() {
        st.write("reports/table7.csv", scores_csv(&rows).as_bytes())?;
    }
    st.finish(run)
}

fn stage_rel(cfg: &PipelineConfig, run: &mut Run, data: &Prepared, emb: &Trained) -> Result<(), PipelineError> {
    let mut st = Stage::begin(run, "rel", &(&cfg.rel, cfg.model_embeddings));
    let e = model_embeddings(cfg, emb);
    let gold: Vec<_> = data.test.iter().flat_map(gold_relations).collect();
    let mut rows = Vec::new();
    for (i, c) in cfg.rel.iter().enumerate() {
        let name = match c.arch {
            crate::rel::RelArch::Seq2seq => c.arch.name().to_string(),
            crate::rel::RelArch::Encdec => format!("encdec-{}", c.attention.name()),
        };
        let tag = format!("{name}-{i}");
        let seed = rng::derive_seed(st.seed, &tag);
        let mut model = RelModel::build(c.clone(), e, seed).map_err(at("rel"))?;
        let train = model.instances(&data.train).map_err(at("rel"))?;
        train_rel(&mut model, &train, seed).map_err(at("rel"))?;
        let ckpt = format!("rel/{tag}.bin");
        model.save(&st.root.join(&ckpt), seed).map_err(at("rel"))?;
        st.record(&ckpt)?;
        let mut extracted = Vec::new();
        for inst in model.instances(&data.test).map_err(at("rel"))? {
            let output = extract(&model, &inst).map_err(at("rel"))?;
            extracted.push(ExtractedRelations { doc_id: inst.doc_id, medication: inst.medication, output });
        }
        let counts = score_relations(&gold, &extracted, &model.lookup).map_err(at("rel"))?;
        rows.push((name, "token", f1(&counts)));
    }
    if !rows.is_empty() {
        st.write("reports/table8.csv", scores_csv(&rows).as_bytes())?;
    }
    st.finish(run)
}

/// Runs every stage in order under `cfg.out_dir`. The configuration is
/// validated before anything is written.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let mut run = Run { root: cfg.out_dir.clone(), seed: cfg.seed, manifests: BTreeMap::new() };
    fs::create_dir_all(&run.root).map_err(at("setup"))?;
    fs::write(run.root.join("config.json"), pretty(cfg)).map_err(at("setup"))?;
    let data = stage_corpus(cfg, &mut run)?;
    let emb = stage_embeddings(cfg, &mut run, &data)?;
    stage_eval(cfg, &mut run, &data, &emb)?;
    stage_ner(cfg, &mut run, &data, &emb)?;
    stage_rel(cfg, &mut run, &data, &emb)?;
    let reports = run
        .manifests
        .values()
        .flat_map(|m| m.outputs.iter())
        .filter(|(p, _)| p.starts_with("reports/"))
        .map(|(p, h)| (p.clone(), h.clone()))
        .collect();
    Ok(RunSummary {
        out_dir: run.root,
        manifests: run.manifests.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        reports,
    })
}

/// Applies the keys of a JSON object on top of `defaults`. Keys the
/// defaults do not have are rejected.
pub fn overlay_json<T: Serialize + serde::de::DeserializeOwned>(defaults: T, json: &str) -> Result<T, String> {
    let user: serde_json::Value = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let mut base = serde_json::to_value(defaults).map_err(|e| e.to_string())?;
    let (Some(obj), Some(user)) = (base.as_object_mut(), user.as_object()) else {
        return Err("expected a JSON object".into());
    };
    for (k, v) in user {
        if !obj.contains_key(k) {
            return Err(format!("unknown key {k:?}"));
        }
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(base).map_err(|e| e.to_string())
}

/// A small configuration on a generated corpus; finishes in seconds.
pub fn demo_config(out_dir: impl Into<PathBuf>, seed: u64) -> PipelineConfig {
    use crate::ner::Architecture;
    use crate::rel::{AttentionKind, RelArch};
    let synthetic = SyntheticConfig { unannotated_docs: 40, annotated_docs: 40, ..SyntheticConfig::default() };
    let small_ner = |arch| {
        let mut c = NerConfig::defaults(arch);
        c.hidden = c.hidden.iter().map(|_| 16).collect();
        c.epochs = 2;
        c
    };
    let small_rel = |arch, attention| {
        let mut c = RelConfig::defaults(arch);
        (c.hidden, c.attention_dim, c.attention, c.epochs, c.lr) = (8, 8, attention, 2, 0.01);
        c
    };
    PipelineConfig {
        out_dir: out_dir.into(),
        seed,
        corpus: CorpusSource::Synthetic(synthetic),
        split: SplitSizes { model_train: 25, validation: 5, test: 10 },
        embeddings: EmbeddingSettings { dim: 16, epochs: 2, ..EmbeddingSettings::default() },
        model_embeddings: Algorithm::Cbow,
        tsne: Some(TsneConfig { perplexity: 5.0, iterations: 250, exaggeration_iters: 100, ..TsneConfig::default() }),
        sweep: Some(SweepSettings {
            config: SweepConfig { n_train: 400, n_test: 100, hidden: vec![8, 8], epochs: 2, ..SweepConfig::default() },
            points: Some(table6_grid().into_iter().filter(|p| p.dropout == 0.0 && p.lr == 0.01).collect()),
        }),
        ner: Architecture::ALL.into_iter().map(small_ner).collect(),
        rel: vec![
            small_rel(RelArch::Seq2seq, AttentionKind::Bahdanau),
            small_rel(RelArch::Encdec, AttentionKind::Bahdanau),
            small_rel(RelArch::Encdec, AttentionKind::Luong),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_replaces_known_keys_only() {
        let cfg = overlay_json(NerConfig::defaults(crate::ner::Architecture::Rnn), r#"{"epochs": 2}"#).unwrap();
        assert_eq!((cfg.epochs, cfg.hidden.clone()), (2, vec![100]));
        let err = overlay_json(cfg.clone(), r#"{"epoch": 2}"#).unwrap_err();
        assert!(err.contains("epoch"), "{err}");
        assert!(overlay_json(cfg.clone(), "[1]").is_err());
        assert!(overlay_json(cfg, r#"{"epochs": "two"}"#).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = demo_config("run", 3);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_missing_paths_are_config_errors() {
        assert!(matches!(
            PipelineConfig::from_json(r#"{"out_dir":"x","seed":1,"corpus":{"dir":"y"},"bogus":1}"#),
            Err(PipelineError::ConfigInvalid(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = demo_config(dir.path().join("run"), 1);
        cfg.corpus = CorpusSource::Dir(dir.path().join("missing"));
        assert!(matches!(run_pipeline(&cfg), Err(PipelineError::ConfigInvalid(_))));
        assert!(!dir.path().join("run").exists());
    }

    #[test]
    fn invalid_model_settings_are_rejected_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = demo_config(dir.path().join("run"), 1);
        cfg.ner[0].dropout = 1.5;
        assert!(matches!(cfg.validate(), Err(PipelineError::ConfigInvalid(m)) if m.contains("cf-ffn")));
        let mut cfg = demo_config(dir.path().join("run"), 1);
        cfg.embeddings.window = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn precision_override_reaches_every_model() {
        let mut cfg = demo_config("run", 1);
        cfg.set_precision(Precision::F64);
        assert!(cfg.ner.iter().all(|c| c.precision == Precision::F64));
        assert!(cfg.rel.iter().all(|c| c.precision == Precision::F64));
    }
}
