//! On-disk formats: corpus directories and JSONL record files.
//!
//! A corpus directory holds `<id>.txt` documents, optional `<id>.ann`
//! annotation files and optional `<id>.sent` sentence maps written by the
//! preprocessing step.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{parse_i2b2, serialize_annotations, AnnotatedDocument, CorpusError, FieldLabel, TokenSpan};
use crate::preprocess::{split_sentences, SentenceMap};

#[derive(Debug, Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("{path}:{line}: {source}")]
    Json { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{0}: no documents found")]
    EmptyCorpus(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FileError + '_ {
    move |source| FileError::Io { path: path.to_path_buf(), source }
}

/// Documents of a corpus directory with their sentence maps, sorted by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub docs: Vec<AnnotatedDocument>,
    pub maps: Vec<SentenceMap>,
}

/// Reads every `*.txt` in `dir`. Missing or stale `.sent` files are replaced
/// by a fresh sentence split.
pub fn read_corpus_dir(dir: &Path) -> Result<Corpus, FileError> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(FileError::EmptyCorpus(dir.to_path_buf()));
    }
    let mut corpus = Corpus::default();
    for stem in stems {
        let txt = dir.join(format!("{stem}.txt"));
        let text = fs::read_to_string(&txt).map_err(io_err(&txt))?;
        let ann = dir.join(format!("{stem}.ann"));
        let doc = if ann.exists() {
            let ann_text = fs::read_to_string(&ann).map_err(io_err(&ann))?;
            parse_i2b2(&stem, &text, &ann_text).map_err(|source| FileError::Corpus { path: ann.clone(), source })?
        } else {
            AnnotatedDocument::from_text(stem.as_str(), &text)
        };
        let sent = dir.join(format!("{stem}.sent"));
        let map = fs::read_to_string(&sent)
            .ok()
            .and_then(|t| SentenceMap::from_text(&t))
            .filter(|m| m.fits(&doc))
            .unwrap_or_else(|| split_sentences(&doc));
        corpus.docs.push(doc);
        corpus.maps.push(map);
    }
    Ok(corpus)
}

/// Writes documents (and annotations when present) to `dir`, plus sentence
/// maps when given.
pub fn write_corpus_dir(dir: &Path, docs: &[AnnotatedDocument], maps: Option<&[SentenceMap]>) -> Result<(), FileError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, doc) in docs.iter().enumerate() {
        let txt = dir.join(format!("{}.txt", doc.doc_id));
        fs::write(&txt, doc.text()).map_err(io_err(&txt))?;
        if doc.is_annotated() {
            let ann = dir.join(format!("{}.ann", doc.doc_id));
            fs::write(&ann, serialize_annotations(doc)).map_err(io_err(&ann))?;
        }
        if let Some(m) = maps.and_then(|m| m.get(i)) {
            let sent = dir.join(format!("{}.sent", doc.doc_id));
            fs::write(&sent, m.to_text()).map_err(io_err(&sent))?;
        }
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FileError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| FileError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), FileError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// One predicted term span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc_id: String,
    pub line: usize,
    pub start: usize,
    pub end: usize,
    pub label: FieldLabel,
    pub score: f64,
}

/// A medication mention to extract relations for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryRecord {
    pub doc_id: String,
    pub medication_span: Vec<TokenSpan>,
}

/// Related tokens of one field for one medication mention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRecord {
    pub doc_id: String,
    pub medication_span: Vec<TokenSpan>,
    pub field: FieldLabel,
    pub tokens: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::preprocess;

    #[test]
    fn corpus_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = parse_i2b2("a", "Took aspirin 81 mg. Then rest\nok\n", r#"m="aspirin" 1:1 1:1||do="81 mg." 1:2 1:3"#).unwrap();
        let b = AnnotatedDocument::from_text("b", "plain note\n");
        let (a_norm, a_map) = preprocess(&a);
        write_corpus_dir(dir.path(), &[a_norm.clone(), b.clone()], Some(&[a_map.clone(), split_sentences(&b)])).unwrap();
        let back = read_corpus_dir(dir.path()).unwrap();
        assert_eq!(back.docs, vec![a_norm, b]);
        assert_eq!(back.maps[0], a_map);
        assert!(!dir.path().join("b.ann").exists());
    }

    #[test]
    fn stale_sentence_maps_are_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let doc = AnnotatedDocument::from_text("d", "One. Two three\n");
        write_corpus_dir(dir.path(), std::slice::from_ref(&doc), None).unwrap();
        fs::write(dir.path().join("d.sent"), "7\n").unwrap();
        let back = read_corpus_dir(dir.path()).unwrap();
        assert_eq!(back.maps[0], split_sentences(&doc));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let recs = vec![PredictionRecord {
            doc_id: "d".into(),
            line: 1,
            start: 0,
            end: 1,
            label: FieldLabel::Dosage,
            score: 0.5,
        }];
        write_jsonl(&path, &recs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"doc_id\":\"d\",\"line\":1,\"start\":0,\"end\":1,\"label\":\"dosage\",\"score\":0.5}\n");
        assert_eq!(read_jsonl::<PredictionRecord>(&path).unwrap(), recs);
        fs::write(&path, "\n{\"doc_id\": 3}\n").unwrap();
        assert!(matches!(read_jsonl::<PredictionRecord>(&path), Err(FileError::Json { line: 2, .. })));
        assert!(matches!(read_corpus_dir(dir.path()), Err(FileError::EmptyCorpus(_))));
    }
}
