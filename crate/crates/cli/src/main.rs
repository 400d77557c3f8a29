//! Command-line front end for corpus preparation, embedding training and
//! evaluation, term classification, relation extraction and full runs.

mod failure;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use failure::Failure;
use medextract::corpus::{gen_synthetic, AnnotatedDocument, FieldLabel, SyntheticConfig, TokenSpan};
use medextract::embed_eval::{
    extrinsic_sweep, intrinsic_csv, intrinsic_report, sweep_csv, table6_grid, tsne_csv, tsne_project, ClassPartition,
    TsneConfig,
};
use medextract::embeddings::{
    build_vocab, load_embeddings, make_windows, save_embeddings, train_word2vec, Algorithm, EmbeddingMatrix,
    Word2VecConfig, DEFAULT_WINDOW,
};
use medextract::files::{
    read_corpus_dir, read_jsonl, write_corpus_dir, write_jsonl, Corpus, EntryRecord, PredictionRecord,
    RelationRecord,
};
use medextract::metrics::{
    f1, gold_relations, report_csv, score_corpus, score_relations, ExtractedRelations, RelationOutput,
};
use medextract::ner::{predict_spans, train_ner, Architecture, NerConfig, NerModel};
use medextract::numkit::{Precision, Tensor};
use medextract::pipeline::{demo_config, overlay_json, run_pipeline, PipelineConfig, SweepSettings};
use medextract::preprocess::preprocess;
use medextract::rel::{
    attribute_fields, extract, make_instance, train_rel, AttentionKind, RelArch, RelConfig, RelModel,
};

#[derive(Debug, Parser)]
#[command(name = "medextract", version, about = "Medication extraction from clinical notes")]
struct Cli {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Storage precision of trained parameters.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize tokens and split sentences.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vocab_report: Option<PathBuf>,
    },
    /// Train CBOW or skip-gram embeddings.
    TrainEmbeddings {
        /// Corpus directories (repeatable).
        #[arg(long = "in", required = true)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum)]
        algo: Algo,
        #[arg(long, default_value_t = 100)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Intrinsic distances and t-SNE, or the extrinsic sweep.
    EvalEmbeddings(EvalArgs),
    /// Train a term classifier.
    TrainNer {
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        /// JSON object overriding the architecture defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict term spans with a trained classifier.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a relation extractor on gold entries.
    TrainRel {
        #[arg(long, value_parser = parse_rel_arch)]
        arch: RelArch,
        #[arg(long, value_parser = parse_attention, default_value = "bahdanau")]
        attention: AttentionKind,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract related fields for medication mentions.
    ExtractRel {
        #[arg(long)]
        model: PathBuf,
        /// Documents the entries refer to.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        entries: PathBuf,
        /// Predicted spans used as known-entity input; defaults to the gold
        /// annotations in `--in`.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions or extracted relations against gold annotations.
    Evaluate(EvaluateArgs),
    /// Write a synthetic corpus directory.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        /// JSON object overriding the generator defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        annotated: Option<usize>,
        #[arg(long)]
        unannotated: Option<usize>,
    },
    /// Run every stage from a configuration file.
    RunPipeline {
        #[arg(long, required_unless_present = "demo")]
        config: Option<PathBuf>,
        /// Use the built-in small configuration on a generated corpus.
        #[arg(long, conflicts_with = "config", requires = "out")]
        demo: bool,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Algo {
    Cbow,
    Csg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Level {
    Token,
    Phrase,
}

#[derive(Debug, Args)]
#[group(id = "mode", required = true, multiple = false, args = ["intrinsic", "extrinsic"])]
struct EvalArgs {
    #[arg(long)]
    intrinsic: bool,
    #[arg(long)]
    extrinsic: bool,
    #[arg(long)]
    cbow: Option<PathBuf>,
    #[arg(long)]
    csg: Option<PathBuf>,
    /// Annotated training documents defining the field word sets.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    tsne_out: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    /// JSON object overriding the sweep defaults.
    #[arg(long)]
    sweep: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, required_unless_present = "relations", conflicts_with = "relations")]
    pred: Option<PathBuf>,
    #[arg(long)]
    relations: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value = "token")]
    level: Level,
    /// Also write the scores as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse()
}

fn parse_rel_arch(s: &str) -> Result<RelArch, String> {
    s.parse()
}

fn parse_attention(s: &str) -> Result<AttentionKind, String> {
    s.parse()
}

struct Globals {
    seed: u64,
    precision: Option<Precision>,
}

/// Applies the keys of the JSON object at `path` on top of `defaults`.
fn overlay<T: Serialize + DeserializeOwned>(defaults: T, path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else { return Ok(defaults) };
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    overlay_json(defaults, &text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn load_emb(path: &Path) -> Result<EmbeddingMatrix, Failure> {
    Ok(load_embeddings(path)?)
}

fn cmd_preprocess(input: &Path, out: &Path, report: Option<&Path>) -> Result<(), Failure> {
    let corpus = read_corpus_dir(input)?;
    let (docs, maps): (Vec<AnnotatedDocument>, Vec<_>) = corpus.docs.iter().map(preprocess).unzip();
    write_corpus_dir(out, &docs, Some(&maps))?;
    if let Some(path) = report {
        let types = |d: &[AnnotatedDocument]| build_vocab(d, &[]).len() - 4;
        let tokens: usize = docs.iter().map(AnnotatedDocument::token_count).sum();
        let num = docs.iter().flat_map(|d| d.lines.iter().flatten()).filter(|t| *t == "<num>").count();
        let sentences: usize = maps.iter().map(|m| m.sentences().count()).sum();
        let r = serde_json::json!({
            "documents": docs.len(),
            "tokens": tokens,
            "sentences": sentences,
            "types_before": types(&corpus.docs),
            "types_after": types(&docs),
            "numeric_tokens": num,
        });
        write_text(path, &(serde_json::to_string_pretty(&r).expect("json") + "\n"))?;
    }
    Ok(())
}

fn cmd_train_embeddings(g: &Globals, inputs: &[PathBuf], algo: Algo, dim: usize, epochs: usize, window: usize, out: &Path) -> Result<(), Failure> {
    let mut corpus = Corpus::default();
    for dir in inputs {
        let c = read_corpus_dir(dir)?;
        corpus.docs.extend(c.docs);
        corpus.maps.extend(c.maps);
    }
    let vocab = build_vocab(&corpus.docs, &[]);
    let windows = make_windows(&corpus.docs, &corpus.maps, &vocab, window)?;
    let algorithm = match algo {
        Algo::Cbow => Algorithm::Cbow,
        Algo::Csg => Algorithm::Csg,
    };
    let cfg = Word2VecConfig { algorithm, dim, epochs, seed: g.seed, ..Word2VecConfig::default() };
    let trained = train_word2vec(&windows, &vocab, &cfg)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    save_embeddings(&trained.embeddings, out)?;
    eprintln!("loss per prediction {:.4} -> {:.4}", trained.initial_loss, trained.final_loss);
    Ok(())
}

fn cmd_eval_embeddings(g: &Globals, a: &EvalArgs) -> Result<(), Failure> {
    let cbow = a.cbow.as_deref().map(load_emb).transpose()?;
    let csg = a.csg.as_deref().map(load_emb).transpose()?;
    let first = cbow.as_ref().or(csg.as_ref()).ok_or_else(|| Failure::config("give --cbow and/or --csg"))?;
    let train = read_corpus_dir(&a.train)?;
    let partition = ClassPartition::build(&train.docs, &first.vocab);
    if a.intrinsic {
        let mut rows = Vec::new();
        for e in cbow.iter().chain(csg.iter()) {
            rows.extend(intrinsic_report(e, &partition));
        }
        write_text(&a.report, &intrinsic_csv(&rows))?;
        if let Some(out) = &a.tsne_out {
            let ids: Vec<usize> =
                partition.fields.values().flatten().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            let mut points = Tensor::zeros(ids.len(), first.dim());
            for (k, &id) in ids.iter().enumerate() {
                points.row_slice_mut(k).copy_from_slice(first.row(id));
            }
            let cfg = TsneConfig { perplexity: a.perplexity, seed: g.seed, ..TsneConfig::default() };
            let res = tsne_project(&points, &cfg)?;
            write_text(out, &tsne_csv(first, &partition, &ids, &res.coords))?;
            eprintln!("t-SNE KL {:.4} -> {:.4}", res.initial_kl, res.final_kl);
        }
    } else {
        let (Some(cbow), Some(csg)) = (&cbow, &csg) else {
            return Err(Failure::config("the extrinsic sweep needs both --cbow and --csg"));
        };
        let defaults = SweepSettings { config: Default::default(), points: None };
        let settings = overlay(defaults, a.sweep.as_deref())?;
        let points = settings.points.unwrap_or_else(table6_grid);
        let cfg = medextract::embed_eval::SweepConfig { seed: g.seed, ..settings.config };
        let report = extrinsic_sweep(cbow, csg, &partition, &points, &cfg)?;
        write_text(&a.report, &sweep_csv(&report))?;
    }
    Ok(())
}

fn cmd_train_ner(g: &Globals, arch: Architecture, config: Option<&Path>, emb: &Path, train: &Path, out: &Path) -> Result<(), Failure> {
    let mut cfg: NerConfig = overlay(NerConfig::defaults(arch), config)?;
    cfg.arch = arch;
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    let e = load_emb(emb)?;
    let corpus = read_corpus_dir(train)?;
    let mut model = NerModel::build(cfg, &e, g.seed)?;
    let report = train_ner(&mut model, &corpus.docs, &corpus.maps, g.seed)?;
    for (head, losses) in &report.losses {
        eprintln!("{head}: final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    }
    for f in &report.skipped {
        eprintln!("{f}: no positive tokens, head left inactive");
    }
    model.save(out, g.seed)?;
    Ok(())
}

fn cmd_predict(model: &Path, input: &Path, out: &Path) -> Result<(), Failure> {
    let model = NerModel::load(model)?;
    let corpus = read_corpus_dir(input)?;
    let mut records = Vec::new();
    for (doc, map) in corpus.docs.iter().zip(&corpus.maps) {
        for s in predict_spans(&model, doc, map)? {
            records.push(PredictionRecord {
                doc_id: doc.doc_id.clone(),
                line: s.span.line,
                start: s.span.start,
                end: s.span.end,
                label: s.label,
                score: s.score,
            });
        }
    }
    write_jsonl(out, &records)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train_rel(g: &Globals, arch: RelArch, attention: AttentionKind, config: Option<&Path>, emb: &Path, train: &Path, out: &Path) -> Result<(), Failure> {
    let mut cfg: RelConfig = overlay(RelConfig::defaults(arch), config)?;
    (cfg.arch, cfg.attention) = (arch, attention);
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    let e = load_emb(emb)?;
    let corpus = read_corpus_dir(train)?;
    let mut model = RelModel::build(cfg, &e, g.seed)?;
    let instances = model.instances(&corpus.docs)?;
    let losses = train_rel(&mut model, &instances, g.seed)?;
    eprintln!("{} instances, final loss {:.4}", instances.len(), losses.last().copied().unwrap_or(f64::NAN));
    model.save(out, g.seed)?;
    Ok(())
}

/// Known-entity codes from predicted spans; overlapping spans keep the
/// lowest code.
fn predicted_codes(doc: &AnnotatedDocument, preds: &[&PredictionRecord]) -> Vec<Vec<FieldLabel>> {
    let mut codes: Vec<Vec<FieldLabel>> = doc.lines.iter().map(|l| vec![FieldLabel::None; l.len()]).collect();
    for p in preds {
        for t in p.start..=p.end {
            if let Some(slot) = codes.get_mut(p.line - 1).and_then(|l| l.get_mut(t)) {
                if *slot == FieldLabel::None || p.label < *slot {
                    *slot = p.label;
                }
            }
        }
    }
    codes
}

fn cmd_extract_rel(model: &Path, input: &Path, entries: &Path, pred: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let model = RelModel::load(model)?;
    let corpus = read_corpus_dir(input)?;
    let docs: BTreeMap<&str, &AnnotatedDocument> = corpus.docs.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let entries: Vec<EntryRecord> = read_jsonl(entries)?;
    let preds: Option<Vec<PredictionRecord>> = pred.map(read_jsonl).transpose()?;
    let no_gold = BTreeMap::new();
    let mut records = Vec::new();
    for e in &entries {
        let doc = docs.get(e.doc_id.as_str()).ok_or_else(|| Failure::data(format!("unknown document {}", e.doc_id)))?;
        let codes = match &preds {
            Some(p) => predicted_codes(doc, &p.iter().filter(|r| r.doc_id == e.doc_id).collect::<Vec<_>>()),
            None => doc.token_codes(),
        };
        let inst = make_instance(doc, &e.medication_span, None, &codes, &model.vocab, &model.embeddings, model.config.context_lines)?;
        let fields = match extract(&model, &inst)? {
            RelationOutput::Tagged(m) => m,
            RelationOutput::Generated(toks) => attribute_fields(&toks, &no_gold, &model.lookup),
        };
        for (field, tokens) in fields.into_iter().filter(|(_, t)| !t.is_empty()) {
            records.push(RelationRecord { doc_id: e.doc_id.clone(), medication_span: e.medication_span.clone(), field, tokens });
        }
    }
    write_jsonl(out, &records)?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), Failure> {
    let gold = read_corpus_dir(&a.gold)?.docs;
    let report = if let Some(pred) = &a.pred {
        let records: Vec<PredictionRecord> = read_jsonl(pred)?;
        let mut by_doc: BTreeMap<String, Vec<(FieldLabel, TokenSpan)>> = BTreeMap::new();
        for r in records {
            by_doc.entry(r.doc_id).or_default().push((r.label, TokenSpan::new(r.line, r.start, r.end)));
        }
        let counts = score_corpus(&gold, &by_doc)?;
        f1(match a.level {
            Level::Token => &counts.token,
            Level::Phrase => &counts.phrase,
        })
    } else {
        let path = a.relations.as_ref().expect("clap enforces one input");
        let records: Vec<RelationRecord> = read_jsonl(path)?;
        let mut grouped: BTreeMap<(String, Vec<TokenSpan>), BTreeMap<FieldLabel, Vec<String>>> = BTreeMap::new();
        for r in records {
            grouped.entry((r.doc_id, r.medication_span)).or_default().entry(r.field).or_default().extend(r.tokens);
        }
        let extracted: Vec<ExtractedRelations> = grouped
            .into_iter()
            .map(|((doc_id, medication), m)| ExtractedRelations { doc_id, medication, output: RelationOutput::Tagged(m) })
            .collect();
        let gold: Vec<_> = gold.iter().flat_map(gold_relations).collect();
        f1(&score_relations(&gold, &extracted, &Default::default())?)
    };
    write_text(&a.report, &report_csv(&report))?;
    if let Some(path) = &a.json {
        write_text(path, &(serde_json::to_string_pretty(&report).expect("json") + "\n"))?;
    }
    Ok(())
}

fn cmd_gen_synthetic(g: &Globals, out: &Path, config: Option<&Path>, annotated: Option<usize>, unannotated: Option<usize>) -> Result<(), Failure> {
    let mut cfg: SyntheticConfig = overlay(SyntheticConfig::default(), config)?;
    cfg.annotated_docs = annotated.unwrap_or(cfg.annotated_docs);
    cfg.unannotated_docs = unannotated.unwrap_or(cfg.unannotated_docs);
    let (u, a) = gen_synthetic(&cfg, g.seed).map_err(|e| Failure::config(e.to_string()))?;
    let docs: Vec<AnnotatedDocument> = u.into_iter().chain(a).collect();
    write_corpus_dir(out, &docs, None)?;
    Ok(())
}

fn cmd_run_pipeline(g: &Globals, seed_given: bool, config: Option<&Path>, demo: bool, out: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = if demo {
        demo_config(out.expect("clap requires --out with --demo"), g.seed)
    } else {
        PipelineConfig::load(config.expect("clap requires --config"))?
    };
    if let Some(out) = out {
        cfg.out_dir = out.to_path_buf();
    }
    if seed_given {
        cfg.seed = g.seed;
    }
    if let Some(p) = g.precision {
        cfg.set_precision(p);
    }
    let summary = run_pipeline(&cfg)?;
    for (path, hash) in &summary.reports {
        println!("{hash}  {path}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("--threads {n}: {e}")))?;
    }
    let precision = cli.precision.as_deref().map(|p| if p == "64" { Precision::F64 } else { Precision::F32 });
    let g = Globals { seed: cli.seed.unwrap_or(0), precision };
    match &cli.command {
        Command::Preprocess { input, out, vocab_report } => cmd_preprocess(input, out, vocab_report.as_deref()),
        Command::TrainEmbeddings { input, algo, dim, epochs, window, out } => {
            cmd_train_embeddings(&g, input, *algo, *dim, *epochs, *window, out)
        }
        Command::EvalEmbeddings(a) => cmd_eval_embeddings(&g, a),
        Command::TrainNer { arch, config, embeddings, train, out } => {
            cmd_train_ner(&g, *arch, config.as_deref(), embeddings, train, out)
        }
        Command::Predict { model, input, out } => cmd_predict(model, input, out),
        Command::TrainRel { arch, attention, config, embeddings, train, out } => {
            cmd_train_rel(&g, *arch, *attention, config.as_deref(), embeddings, train, out)
        }
        Command::ExtractRel { model, input, entries, pred, out } => {
            cmd_extract_rel(model, input, entries, pred.as_deref(), out)
        }
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GenSynthetic { out, config, annotated, unannotated } => {
            cmd_gen_synthetic(&g, out, config.as_deref(), *annotated, *unannotated)
        }
        Command::RunPipeline { config, demo, out } => {
            cmd_run_pipeline(&g, cli.seed.is_some(), config.as_deref(), *demo, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overlay_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epochs": 2}"#).unwrap();
        let cfg = overlay(NerConfig::defaults(Architecture::Rnn), Some(&path)).unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.hidden, vec![100]);
        fs::write(&path, r#"{"epoch": 2}"#).unwrap();
        let err = overlay(NerConfig::defaults(Architecture::Rnn), Some(&path)).unwrap_err();
        assert_eq!(err.code, failure::CONFIG);
    }

    #[test]
    fn predicted_codes_prefer_lower_fields() {
        let doc = AnnotatedDocument::from_text("d", "a b c\n");
        let rec = |start, end, label| PredictionRecord { doc_id: "d".into(), line: 1, start, end, label, score: 1.0 };
        let (x, y) = (rec(0, 1, FieldLabel::Dosage), rec(1, 2, FieldLabel::Medication));
        let codes = predicted_codes(&doc, &[&x, &y]);
        assert_eq!(codes[0], vec![FieldLabel::Dosage, FieldLabel::Medication, FieldLabel::Medication]);
    }
}
