use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use medextract::files::{read_corpus_dir, write_jsonl, EntryRecord};

fn medextract(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_medextract")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = medextract(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn term_and_relation_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (raw, pre) = (d.join("raw"), d.join("pre"));
    ok(&["gen-synthetic", "--out", p(&raw), "--annotated", "12", "--unannotated", "6", "--seed", "3"]);
    assert_eq!(fs::read_dir(&raw).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "ann").count(), 12);

    ok(&["preprocess", "--in", p(&raw), "--out", p(&pre), "--vocab-report", p(&d.join("vocab.json"))]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("vocab.json")).unwrap()).unwrap();
    assert_eq!(report["documents"], 18);
    assert!(report["numeric_tokens"].as_u64().unwrap() > 0);
    assert!(report["types_after"].as_u64() <= report["types_before"].as_u64());

    let emb = d.join("emb/cbow.txt");
    ok(&["train-embeddings", "--in", p(&pre), "--algo", "cbow", "--dim", "8", "--epochs", "1", "--out", p(&emb), "--seed", "3"]);

    let ner_cfg = d.join("ner.json");
    fs::write(&ner_cfg, r#"{"hidden": [8], "epochs": 1}"#).unwrap();
    let model = d.join("ner.bin");
    ok(&["train-ner", "--arch", "cf-ffn", "--config", p(&ner_cfg), "--embeddings", p(&emb), "--train", p(&pre), "--out", p(&model)]);
    let pred = d.join("pred.jsonl");
    ok(&["predict", "--model", p(&model), "--in", p(&pre), "--out", p(&pred)]);
    let (csv, json) = (d.join("scores.csv"), d.join("scores.json"));
    ok(&["evaluate", "--gold", p(&pre), "--pred", p(&pred), "--report", p(&csv), "--json", p(&json)]);
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("field,precision,recall,f1\n"));
    assert!(table.lines().last().unwrap().starts_with("micro,"));
    let scores: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert!(scores["micro"]["f1"].is_number());

    let rel_cfg = d.join("rel.json");
    fs::write(&rel_cfg, r#"{"hidden": 6, "epochs": 1}"#).unwrap();
    let rel = d.join("rel.bin");
    ok(&["train-rel", "--arch", "seq2seq", "--config", p(&rel_cfg), "--embeddings", p(&emb), "--train", p(&pre), "--out", p(&rel)]);
    let corpus = read_corpus_dir(&pre).unwrap();
    let entries: Vec<EntryRecord> = corpus
        .docs
        .iter()
        .flat_map(|doc| {
            doc.entries.iter().map(|e| EntryRecord { doc_id: doc.doc_id.clone(), medication_span: e.medication.spans.clone() })
        })
        .collect();
    let entries_path = d.join("entries.jsonl");
    write_jsonl(&entries_path, &entries).unwrap();
    let relations = d.join("relations.jsonl");
    ok(&["extract-rel", "--model", p(&rel), "--in", p(&pre), "--entries", p(&entries_path), "--out", p(&relations)]);
    ok(&["extract-rel", "--model", p(&rel), "--in", p(&pre), "--entries", p(&entries_path), "--pred", p(&pred), "--out", p(&d.join("r2.jsonl"))]);
    let rel_csv = d.join("rel.csv");
    ok(&["evaluate", "--gold", p(&pre), "--relations", p(&relations), "--report", p(&rel_csv)]);
    let rows: Vec<String> = fs::read_to_string(&rel_csv).unwrap().lines().map(str::to_string).collect();
    assert_eq!(rows.len(), 1 + 5 + 1, "{rows:?}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // usage and configuration errors
    assert_eq!(medextract(&["preprocess"]).status.code(), Some(2));
    let (gold, report) = (d.join("g"), d.join("r.csv"));
    assert_eq!(medextract(&["evaluate", "--gold", p(&gold), "--report", p(&report)]).status.code(), Some(2));
    assert_eq!(medextract(&["--precision", "16", "gen-synthetic", "--out", p(&d.join("x"))]).status.code(), Some(2));
    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"hiden": [8]}"#).unwrap();
    let out = medextract(&["gen-synthetic", "--out", p(&d.join("x")), "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));

    // data errors
    let out = medextract(&["preprocess", "--in", p(&d.join("missing")), "--out", p(&d.join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let raw = d.join("raw");
    fs::create_dir_all(&raw).unwrap();
    fs::write(raw.join("a.txt"), "took aspirin\n").unwrap();
    fs::write(raw.join("a.ann"), "m=\"aspirin\" 1:9 1:9\n").unwrap();
    assert_eq!(medextract(&["preprocess", "--in", p(&raw), "--out", p(&d.join("o"))]).status.code(), Some(3));
}

#[test]
fn demo_pipeline_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = ok(&["run-pipeline", "--demo", "--out", p(&dir.path().join(name)), "--seed", "4", "--threads", "1"]);
        String::from_utf8(out.stdout).unwrap()
    };
    let first = run("a");
    assert!(first.lines().any(|l| l.ends_with("reports/table7.csv")), "{first}");
    assert_eq!(first, run("b"));
    let table = fs::read_to_string(dir.path().join("a/reports/table8.csv")).unwrap();
    assert!(table.starts_with("model,level,field,precision,recall,f1\n"));
}
