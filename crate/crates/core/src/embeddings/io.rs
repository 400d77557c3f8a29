//! Plain-text embedding files: a `V m` header, then `token v1 ... vm` per
//! line with six decimals. An optional `<file>.json` sidecar records the
//! training algorithm and configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Algorithm, EmbeddingError, EmbeddingMatrix, Vocabulary, Word2VecConfig};
use crate::numkit::checkpoint::manifest_path;
use crate::numkit::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    algorithm: Algorithm,
    manifest: Option<Word2VecConfig>,
}

pub fn write_embeddings(e: &EmbeddingMatrix) -> String {
    let mut out = String::with_capacity(e.len() * (e.dim() * 10 + 16));
    let _ = writeln!(out, "{} {}", e.len(), e.dim());
    for (id, tok) in e.vocab.tokens().iter().enumerate() {
        out.push_str(tok);
        for v in e.row(id) {
            let _ = write!(out, " {v:.6}");
        }
        out.push('\n');
    }
    out
}

/// Parses the text format. Files lacking the reserved tokens get them
/// prepended as zero rows.
pub fn parse_embeddings(text: &str) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| EmbeddingError::MalformedHeader("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let parse = |s: &str| s.parse::<usize>().map_err(|_| EmbeddingError::MalformedHeader(header.to_string()));
    if fields.len() != 2 {
        return Err(EmbeddingError::MalformedHeader(header.to_string()));
    }
    let (rows, dim) = (parse(fields[0])?, parse(fields[1])?);
    let mut tokens = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * dim);
    for (idx, line) in lines {
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-blank line");
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(EmbeddingError::DimensionMismatch { line: idx + 1, expected: dim, found: values.len() });
        }
        for v in values {
            let x: f64 = v
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| EmbeddingError::MalformedValue { line: idx + 1, value: v.to_string() })?;
            data.push(x);
        }
        tokens.push(token.to_string());
    }
    if tokens.len() != rows {
        return Err(EmbeddingError::MalformedHeader(format!("header declares {rows} rows, file has {}", tokens.len())));
    }
    let missing: Vec<&str> = Vocabulary::RESERVED.iter().copied().filter(|r| !tokens.iter().any(|t| t == r)).collect();
    let (tokens, data) = if missing.is_empty() && tokens[..4].iter().zip(Vocabulary::RESERVED).all(|(a, b)| a == b) {
        (tokens, data)
    } else {
        // Reorder so that the reserved tokens take ids 0..4.
        let mut order = Vec::with_capacity(rows + 4);
        let mut new_data = Vec::with_capacity((rows + 4) * dim);
        for r in Vocabulary::RESERVED {
            order.push(r.to_string());
            match tokens.iter().position(|t| t == r) {
                Some(i) => new_data.extend_from_slice(&data[i * dim..(i + 1) * dim]),
                None => new_data.extend(std::iter::repeat_n(0.0, dim)),
            }
        }
        for (i, t) in tokens.iter().enumerate() {
            if !Vocabulary::RESERVED.contains(&t.as_str()) {
                order.push(t.clone());
                new_data.extend_from_slice(&data[i * dim..(i + 1) * dim]);
            }
        }
        (order, new_data)
    };
    let vocab = Vocabulary::from_ordered(tokens).map_err(EmbeddingError::MalformedHeader)?;
    let weights = Tensor::new(vec![vocab.len(), dim], data).expect("row lengths checked");
    EmbeddingMatrix::new(vocab, weights, Algorithm::Imported)
}

pub fn save_embeddings(e: &EmbeddingMatrix, path: &Path) -> Result<(), EmbeddingError> {
    fs::write(path, write_embeddings(e))?;
    let sidecar = Sidecar { algorithm: e.algorithm, manifest: e.manifest.clone() };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix, EmbeddingError> {
    let mut e = parse_embeddings(&fs::read_to_string(path)?)?;
    let side = manifest_path(path);
    if side.exists() {
        let s: Sidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
        e.algorithm = s.algorithm;
        e.manifest = s.manifest;
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingMatrix {
        let vocab = Vocabulary::from_tokens(["aspirin", "mg"]);
        let mut r = crate::rng::seeded(1);
        EmbeddingMatrix::new(vocab, Tensor::gaussian(6, 3, 1.0, &mut r), Algorithm::Csg).unwrap()
    }

    #[test]
    fn round_trip_at_six_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.txt");
        let e = sample();
        save_embeddings(&e, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        assert_eq!(back.vocab, e.vocab);
        assert_eq!(back.algorithm, Algorithm::Csg);
        for (a, b) in back.weights.data().iter().zip(e.weights.data()) {
            assert!((a - b).abs() <= 5e-7);
        }
        // a second round trip is exact
        assert_eq!(write_embeddings(&back), write_embeddings(&parse_embeddings(&write_embeddings(&back)).unwrap()));
    }

    #[test]
    fn malformed_inputs() {
        let rows: String = (0..4).map(|i| format!("w{i} 0.1 0.2\n")).collect();
        let four_rows = format!("5 2\n{rows}");
        assert!(matches!(parse_embeddings(&four_rows), Err(EmbeddingError::MalformedHeader(_))));
        assert!(matches!(parse_embeddings(""), Err(EmbeddingError::MalformedHeader(_))));
        assert!(matches!(parse_embeddings("x y\n"), Err(EmbeddingError::MalformedHeader(_))));
        assert!(matches!(parse_embeddings("1 3\nw 0.1 0.2\n"), Err(EmbeddingError::DimensionMismatch { .. })));
        assert!(matches!(parse_embeddings("1 1\nw abc\n"), Err(EmbeddingError::MalformedValue { .. })));
    }

    #[test]
    fn foreign_files_gain_reserved_rows() {
        let e = parse_embeddings("2 2\ncat 1 2\ndog 3 4\n").unwrap();
        assert_eq!(e.len(), 6);
        assert_eq!(e.vector("dog"), &[3.0, 4.0]);
        assert_eq!(e.row(Vocabulary::UNK), &[0.0, 0.0]);
        assert_eq!(e.algorithm, Algorithm::Imported);
    }
}
