use std::fs;
use std::path::Path;

use medextract::pipeline::{demo_config, run_pipeline, PipelineError};

fn read_reports(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(root.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn demo_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(&demo_config(dir.path().join("a"), 11)).unwrap();
    let names: Vec<String> = read_reports(&first.out_dir).into_iter().map(|(n, _)| n).collect();
    for expected in ["corpus.json", "table4.csv", "table6.csv", "table7.csv", "table8.csv", "tsne_cbow.csv"] {
        assert!(names.iter().any(|n| n == expected), "missing {expected} in {names:?}");
    }
    for stage in ["corpus", "preprocess", "embeddings", "eval-embeddings", "ner", "rel"] {
        assert!(first.out_dir.join(stage).join("manifest.json").exists(), "{stage}");
    }
    let table7 = fs::read_to_string(first.out_dir.join("reports/table7.csv")).unwrap();
    assert!(table7.starts_with("model,level,field,precision,recall,f1\n"));
    assert_eq!(table7.lines().count(), 1 + 3 * 2 * 7);

    let second = run_pipeline(&demo_config(dir.path().join("b"), 11)).unwrap();
    assert_eq!(read_reports(&first.out_dir), read_reports(&second.out_dir));
    assert_eq!(first.reports, second.reports);

    // downstream outputs come back bit-exactly after deletion
    fs::remove_dir_all(second.out_dir.join("reports")).unwrap();
    fs::remove_dir_all(second.out_dir.join("rel")).unwrap();
    let third = run_pipeline(&demo_config(dir.path().join("b"), 11)).unwrap();
    assert_eq!(third.manifests, first.manifests);

    let other = run_pipeline(&demo_config(dir.path().join("c"), 12)).unwrap();
    assert_ne!(other.reports, first.reports);
}

#[test]
fn missing_corpus_fails_before_any_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = demo_config(dir.path().join("run"), 1);
    cfg.corpus = medextract::pipeline::CorpusSource::Dir(dir.path().join("nope"));
    assert!(matches!(run_pipeline(&cfg), Err(PipelineError::ConfigInvalid(_))));
    assert!(!dir.path().join("run").exists());
}
