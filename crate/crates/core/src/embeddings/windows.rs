use rayon::prelude::*;

use super::{EmbeddingError, Vocabulary};
use crate::corpus::AnnotatedDocument;
use crate::preprocess::SentenceMap;

pub const DEFAULT_WINDOW: usize = 11;

/// A center token and its fixed-length context (left positions first, then
/// right), `PAD` wherever the window leaves the center's sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub center: usize,
    pub context: Vec<usize>,
}

/// Ids of positions `center - half ..= center + half`, with `PAD` outside
/// the inclusive sentence range `[start, end]`.
pub fn window_ids(ids: &[usize], (start, end): (usize, usize), center: usize, half: usize) -> Vec<usize> {
    (0..=2 * half)
        .map(|k| {
            let pos = center as isize + k as isize - half as isize;
            if pos >= start as isize && pos <= end as isize {
                ids[pos as usize]
            } else {
                Vocabulary::PAD
            }
        })
        .collect()
}

fn doc_windows(doc: &AnnotatedDocument, map: &SentenceMap, vocab: &Vocabulary, half: usize) -> Vec<ContextWindow> {
    let mut out = Vec::with_capacity(doc.token_count());
    for (line, start, end) in map.sentences() {
        let ids: Vec<usize> = doc.lines[line - 1].iter().map(|t| vocab.lookup(t)).collect();
        for center in start..=end {
            let mut context = window_ids(&ids, (start, end), center, half);
            let c = context.remove(half);
            out.push(ContextWindow { center: c, context });
        }
    }
    out
}

/// One window per token occurrence, in document order. Documents are
/// windowed in parallel; the output order does not depend on threading.
pub fn make_windows(
    docs: &[AnnotatedDocument],
    maps: &[SentenceMap],
    vocab: &Vocabulary,
    size: usize,
) -> Result<Vec<ContextWindow>, EmbeddingError> {
    if size.is_multiple_of(2) {
        return Err(EmbeddingError::InvalidWindowSize(size));
    }
    if docs.len() != maps.len() {
        return Err(EmbeddingError::InvalidConfig(format!("{} documents but {} sentence maps", docs.len(), maps.len())));
    }
    let half = size / 2;
    let per_doc: Vec<Vec<ContextWindow>> =
        docs.par_iter().zip(maps.par_iter()).map(|(d, m)| doc_windows(d, m, vocab, half)).collect();
    Ok(per_doc.into_iter().flatten().collect())
}
