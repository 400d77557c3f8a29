//! Python bindings: synthetic corpora, preprocessing, embeddings, the term
//! classifiers, relation extractors, scoring, t-SNE and the pipeline runner.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use medextract::corpus::{self, AnnotatedDocument, FieldLabel, SyntheticConfig, TokenSpan};
use medextract::embed_eval::{tsne_project, TsneConfig};
use medextract::embeddings::{self as emb, build_vocab, make_windows, Algorithm, EmbeddingMatrix, Word2VecConfig};
use medextract::metrics::{self, gold_relations, score_relations, ExtractedRelations, RelationOutput};
use medextract::ner::{self, Architecture, NerConfig};
use medextract::numkit::Tensor;
use medextract::pipeline::{self, PipelineConfig};
use medextract::preprocess::{self as pre, SentenceMap};
use medextract::rel::{self, AttentionKind, RelArch, RelConfig};

fn overlay<T: serde::Serialize + serde::de::DeserializeOwned>(defaults: T, json: Option<&str>) -> Result<T, String> {
    match json {
        Some(j) => pipeline::overlay_json(defaults, j),
        None => Ok(defaults),
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn field(name: &str) -> PyResult<FieldLabel> {
    FieldLabel::from_name(name).ok_or_else(|| value_err(format!("unknown field {name:?}")))
}

/// A tokenized note with optional medication entries.
#[pyclass(name = "Document", module = "medextract_py", from_py_object)]
#[derive(Clone)]
pub struct PyDocument {
    inner: AnnotatedDocument,
}

#[pymethods]
impl PyDocument {
    #[new]
    #[pyo3(signature = (doc_id, text, ann=None))]
    fn new(doc_id: &str, text: &str, ann: Option<&str>) -> PyResult<Self> {
        let inner = match ann {
            Some(a) => corpus::parse_i2b2(doc_id, text, a).map_err(value_err)?,
            None => AnnotatedDocument::from_text(doc_id, text),
        };
        Ok(PyDocument { inner })
    }

    #[getter]
    fn doc_id(&self) -> &str {
        &self.inner.doc_id
    }

    #[getter]
    fn lines(&self) -> Vec<Vec<String>> {
        self.inner.lines.clone()
    }

    fn text(&self) -> String {
        self.inner.text()
    }

    fn annotation_text(&self) -> String {
        corpus::serialize_annotations(&self.inner)
    }

    fn token_count(&self) -> usize {
        self.inner.token_count()
    }

    /// `(entry, field, surface, [(line, start, end), ...])` for every
    /// annotation; lines are 1-based, token offsets 0-based.
    fn annotations(&self) -> Vec<(usize, String, String, Vec<(usize, usize, usize)>)> {
        let mut out = Vec::new();
        for (i, e) in self.inner.entries.iter().enumerate() {
            for a in e.annotations() {
                let spans = a.spans.iter().map(|s| (s.line, s.start, s.end)).collect();
                out.push((i, a.label.name().to_string(), a.surface.clone(), spans));
            }
        }
        out
    }

    fn __repr__(&self) -> String {
        format!("Document({:?}, {} lines, {} entries)", self.inner.doc_id, self.inner.lines.len(), self.inner.entries.len())
    }
}

fn docs_of(docs: &[PyDocument]) -> Vec<AnnotatedDocument> {
    docs.iter().map(|d| d.inner.clone()).collect()
}

fn wrap(docs: Vec<AnnotatedDocument>) -> Vec<PyDocument> {
    docs.into_iter().map(|inner| PyDocument { inner }).collect()
}

/// Generates `(unannotated, annotated)` synthetic documents.
#[pyfunction]
#[pyo3(signature = (annotated=200, unannotated=400, seed=0, config=None))]
fn gen_synthetic(annotated: usize, unannotated: usize, seed: u64, config: Option<&str>) -> PyResult<(Vec<PyDocument>, Vec<PyDocument>)> {
    let mut cfg: SyntheticConfig = overlay(SyntheticConfig::default(), config).map_err(value_err)?;
    (cfg.annotated_docs, cfg.unannotated_docs) = (annotated, unannotated);
    let (u, a) = corpus::gen_synthetic(&cfg, seed).map_err(value_err)?;
    Ok((wrap(u), wrap(a)))
}

#[pyfunction]
fn normalize_token(token: &str) -> String {
    pre::normalize_token(token)
}

#[pyfunction]
fn is_numeric(token: &str) -> bool {
    pre::is_numeric(token)
}

/// Normalized copy of `doc` and its sentences as `(line, start, end)`.
#[pyfunction]
fn preprocess(doc: &PyDocument) -> (PyDocument, Vec<(usize, usize, usize)>) {
    let (inner, map) = pre::preprocess(&doc.inner);
    (PyDocument { inner }, map.sentences().collect())
}

fn sentence_maps(docs: &[AnnotatedDocument]) -> Vec<SentenceMap> {
    docs.iter().map(pre::split_sentences).collect()
}

fn algorithm(name: &str) -> PyResult<Algorithm> {
    match name {
        "cbow" => Ok(Algorithm::Cbow),
        "csg" => Ok(Algorithm::Csg),
        _ => Err(value_err(format!("unknown algorithm {name:?} (expected cbow or csg)"))),
    }
}

/// A word embedding table.
#[pyclass(name = "Embeddings", module = "medextract_py", from_py_object)]
#[derive(Clone)]
pub struct PyEmbeddings {
    inner: EmbeddingMatrix,
}

#[pymethods]
impl PyEmbeddings {
    /// Trains CBOW or skip-gram embeddings on preprocessed documents.
    #[staticmethod]
    #[pyo3(signature = (docs, algorithm="cbow", dim=100, epochs=5, window=emb::DEFAULT_WINDOW, seed=0))]
    fn train(
        py: Python<'_>,
        docs: Vec<PyDocument>,
        algorithm: &str,
        dim: usize,
        epochs: usize,
        window: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let algorithm = self::algorithm(algorithm)?;
        let docs = docs_of(&docs);
        py.detach(|| {
            let vocab = build_vocab(&docs, &[]);
            let windows = make_windows(&docs, &sentence_maps(&docs), &vocab, window)?;
            let cfg = Word2VecConfig { algorithm, dim, epochs, seed, ..Default::default() };
            emb::train_word2vec(&windows, &vocab, &cfg)
        })
        .map(|out| PyEmbeddings { inner: out.embeddings })
        .map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        emb::load_embeddings(&path).map(|inner| PyEmbeddings { inner }).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        emb::save_embeddings(&self.inner, &path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab.tokens().to_vec()
    }

    /// Vector of `token` (the `<unk>` row for unknown words).
    fn vector(&self, token: &str) -> Vec<f64> {
        self.inner.vector(token).to_vec()
    }
}

/// One of the three term classifiers.
#[pyclass(name = "NerModel", module = "medextract_py")]
pub struct PyNerModel {
    inner: ner::NerModel,
    seed: u64,
}

#[pymethods]
impl PyNerModel {
    /// `arch` is cf-ffn, ca-ffn or rnn; `config` is a JSON object overriding
    /// the architecture defaults.
    #[new]
    #[pyo3(signature = (arch, embeddings, seed=0, config=None))]
    fn new(arch: &str, embeddings: &PyEmbeddings, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let arch: Architecture = arch.parse().map_err(value_err)?;
        let mut cfg: NerConfig = overlay(NerConfig::defaults(arch), config).map_err(value_err)?;
        cfg.arch = arch;
        let inner = ner::NerModel::build(cfg, &embeddings.inner, seed).map_err(value_err)?;
        Ok(PyNerModel { inner, seed })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ner::NerModel::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyNerModel { inner, seed: 0 })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, self.seed).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// Trains on annotated, preprocessed documents; returns the mean loss per
    /// epoch for each head.
    fn train(&mut self, py: Python<'_>, docs: Vec<PyDocument>) -> PyResult<BTreeMap<String, Vec<f64>>> {
        let docs = docs_of(&docs);
        let maps = sentence_maps(&docs);
        let (model, seed) = (&mut self.inner, self.seed);
        let report = py.detach(|| ner::train_ner(model, &docs, &maps, seed)).map_err(runtime_err)?;
        Ok(report.losses)
    }

    /// Predicted spans as `(field, line, start, end, score)`.
    fn predict(&self, doc: &PyDocument) -> PyResult<Vec<(String, usize, usize, usize, f64)>> {
        let map = pre::split_sentences(&doc.inner);
        let spans = ner::predict_spans(&self.inner, &doc.inner, &map).map_err(runtime_err)?;
        Ok(spans.into_iter().map(|s| (s.label.name().to_string(), s.span.line, s.span.start, s.span.end, s.score)).collect())
    }

    #[getter]
    fn arch(&self) -> &'static str {
        self.inner.config.arch.name()
    }
}

/// Seq2seq tagger or encoder-decoder relation extractor.
#[pyclass(name = "RelModel", module = "medextract_py")]
pub struct PyRelModel {
    inner: rel::RelModel,
    seed: u64,
}

#[pymethods]
impl PyRelModel {
    /// `arch` is seq2seq or encdec; `attention` is bahdanau or luong.
    #[new]
    #[pyo3(signature = (arch, embeddings, attention="bahdanau", seed=0, config=None))]
    fn new(arch: &str, embeddings: &PyEmbeddings, attention: &str, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let arch: RelArch = arch.parse().map_err(value_err)?;
        let attention: AttentionKind = attention.parse().map_err(value_err)?;
        let mut cfg: RelConfig = overlay(RelConfig::defaults(arch), config).map_err(value_err)?;
        (cfg.arch, cfg.attention) = (arch, attention);
        let inner = rel::RelModel::build(cfg, &embeddings.inner, seed).map_err(value_err)?;
        Ok(PyRelModel { inner, seed })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = rel::RelModel::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(PyRelModel { inner, seed: 0 })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, self.seed).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// Trains on the gold entries of `docs`; returns the loss per epoch.
    fn train(&mut self, py: Python<'_>, docs: Vec<PyDocument>) -> PyResult<Vec<f64>> {
        let docs = docs_of(&docs);
        let (model, seed) = (&mut self.inner, self.seed);
        py.detach(|| {
            let instances = model.instances(&docs)?;
            rel::train_rel(model, &instances, seed)
        })
        .map_err(runtime_err)
    }

    /// Related tokens per field for every gold entry of `doc`, using gold
    /// known-entity codes.
    fn extract(&self, doc: &PyDocument) -> PyResult<Vec<BTreeMap<String, Vec<String>>>> {
        let gold = gold_relations(&doc.inner);
        let instances = self.inner.instances(std::slice::from_ref(&doc.inner)).map_err(runtime_err)?;
        let mut out = Vec::with_capacity(instances.len());
        for (inst, g) in instances.iter().zip(&gold) {
            let fields = match rel::extract(&self.inner, inst).map_err(runtime_err)? {
                RelationOutput::Tagged(m) => m,
                RelationOutput::Generated(toks) => rel::attribute_fields(&toks, &g.fields, &self.inner.lookup),
            };
            out.push(fields.into_iter().map(|(f, t)| (f.name().to_string(), t)).collect());
        }
        Ok(out)
    }

    /// Token-level relation scores over the gold entries of `docs`.
    fn evaluate(&self, docs: Vec<PyDocument>) -> PyResult<Scores> {
        let docs = docs_of(&docs);
        let gold: Vec<_> = docs.iter().flat_map(gold_relations).collect();
        let mut extracted = Vec::new();
        for inst in self.inner.instances(&docs).map_err(runtime_err)? {
            let output = rel::extract(&self.inner, &inst).map_err(runtime_err)?;
            extracted.push(ExtractedRelations { doc_id: inst.doc_id, medication: inst.medication, output });
        }
        let counts = score_relations(&gold, &extracted, &self.inner.lookup).map_err(runtime_err)?;
        Ok(scores(&metrics::f1(&counts)))
    }
}

/// `{field: (precision, recall, f1)}` with a `micro` key.
type Scores = BTreeMap<String, (f64, f64, f64)>;

fn scores(r: &metrics::F1Report) -> Scores {
    let mut out: Scores = r.fields.iter().map(|(f, p)| (f.name().to_string(), (p.precision, p.recall, p.f1))).collect();
    out.insert("micro".into(), (r.micro.precision, r.micro.recall, r.micro.f1));
    out
}

type SpanTuple = (String, usize, usize, usize);

/// Scores predicted spans (`{doc_id: [(field, line, start, end), ...]}`)
/// against gold documents at token or phrase level.
#[pyfunction]
#[pyo3(signature = (gold, predictions, level="token"))]
fn score(gold: Vec<PyDocument>, predictions: BTreeMap<String, Vec<SpanTuple>>, level: &str) -> PyResult<Scores> {
    let mut pred: BTreeMap<String, Vec<(FieldLabel, TokenSpan)>> = BTreeMap::new();
    for (doc, spans) in predictions {
        let list = spans
            .into_iter()
            .map(|(f, line, start, end)| Ok((field(&f)?, TokenSpan::new(line, start, end))))
            .collect::<PyResult<Vec<_>>>()?;
        pred.insert(doc, list);
    }
    let counts = metrics::score_corpus(&docs_of(&gold), &pred).map_err(value_err)?;
    match level {
        "token" => Ok(scores(&metrics::f1(&counts.token))),
        "phrase" => Ok(scores(&metrics::f1(&counts.phrase))),
        _ => Err(value_err(format!("unknown level {level:?} (expected token or phrase)"))),
    }
}

/// Two-dimensional t-SNE projection of `points`; returns the coordinates
/// and the initial and final KL divergence.
#[pyfunction]
#[pyo3(signature = (points, perplexity=30.0, iterations=1000, seed=0))]
fn tsne(
    py: Python<'_>,
    points: Vec<Vec<f64>>,
    perplexity: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<(Vec<(f64, f64)>, f64, f64)> {
    let x = Tensor::from_rows(&points).map_err(value_err)?;
    let cfg = TsneConfig { perplexity, iterations, seed, ..Default::default() };
    let res = py.detach(|| tsne_project(&x, &cfg)).map_err(value_err)?;
    let coords = (0..res.coords.rows()).map(|i| (res.coords.get(i, 0), res.coords.get(i, 1))).collect();
    Ok((coords, res.initial_kl, res.final_kl))
}

/// Runs every pipeline stage. Give either a config file path or `demo_out`
/// for the built-in small run. Returns `{report path: sha256}`.
#[pyfunction]
#[pyo3(signature = (config=None, demo_out=None, seed=0))]
fn run_pipeline(py: Python<'_>, config: Option<PathBuf>, demo_out: Option<PathBuf>, seed: u64) -> PyResult<BTreeMap<String, String>> {
    let cfg = match (config, demo_out) {
        (Some(path), None) => PipelineConfig::load(&path).map_err(value_err)?,
        (None, Some(out)) => pipeline::demo_config(out, seed),
        _ => return Err(value_err("give exactly one of config or demo_out")),
    };
    let summary = py.detach(|| pipeline::run_pipeline(&cfg)).map_err(runtime_err)?;
    Ok(summary.reports)
}

#[pymodule]
pub fn medextract_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDocument>()?;
    m.add_class::<PyEmbeddings>()?;
    m.add_class::<PyNerModel>()?;
    m.add_class::<PyRelModel>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_token, m)?)?;
    m.add_function(wrap_pyfunction!(is_numeric, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(tsne, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
