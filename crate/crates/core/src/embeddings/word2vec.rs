//! Shallow word2vec training with hand-derived SGD updates.
//!
//! CBOW predicts the center from the mean of the non-PAD context rows;
//! skip-gram predicts each non-PAD context word from the center row. The
//! output layer is negative sampling over the unigram^0.75 distribution of
//! centers, or a full softmax for small oracle tests.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Algorithm, ContextWindow, EmbeddingError, EmbeddingMatrix, Vocabulary};
use crate::numkit::Tensor;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// N(0, 1) for every row but `PAD`.
    #[default]
    Gaussian,
    /// U(-0.5/m, 0.5/m).
    SmallUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word2VecConfig {
    pub algorithm: Algorithm,
    pub dim: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub negatives: usize,
    pub full_softmax: bool,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for Word2VecConfig {
    fn default() -> Self {
        Word2VecConfig {
            algorithm: Algorithm::Cbow,
            dim: 100,
            lr0: 0.025,
            lr_min: 0.0001,
            epochs: 5,
            negatives: 5,
            full_softmax: false,
            init: InitScheme::Gaussian,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Word2VecOutput {
    pub embeddings: EmbeddingMatrix,
    pub output_weights: Tensor,
    /// Mean loss per prediction over all windows before training.
    pub initial_loss: f64,
    /// Same measurement after training, with the same negative draws.
    pub final_loss: f64,
    /// Running mean loss per prediction within each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Seeded input-embedding initialization; the `PAD` row is zero.
pub fn init_weights(vocab_size: usize, dim: usize, scheme: InitScheme, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, "word2vec-init");
    let mut w = match scheme {
        InitScheme::Gaussian => Tensor::gaussian(vocab_size, dim, 1.0, &mut rng),
        InitScheme::SmallUniform => Tensor::uniform(vocab_size, dim, 0.5 / dim.max(1) as f64, &mut rng),
    };
    if vocab_size > 0 {
        w.row_slice_mut(Vocabulary::PAD).fill(0.0);
    }
    w
}

/// `-ln sigmoid(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

enum Output<'a> {
    Negative { k: usize, table: &'a WeightedIndex<f64> },
    Softmax,
}

/// Loss of predicting `target` from `h`. Accumulates `dL/dh` into `dh` and,
/// when `lr > 0`, applies the output-layer update.
fn predict(
    h: &[f64],
    target: usize,
    output: &mut Tensor,
    mode: &Output,
    lr: f64,
    dh: &mut [f64],
    rng: &mut Rng,
) -> f64 {
    match mode {
        Output::Negative { k, table } => {
            let mut loss = 0.0;
            let mut apply = |j: usize, label: f64, output: &mut Tensor| {
                let u = output.row_slice_mut(j);
                let f = dot(u, h);
                loss += if label > 0.0 { neg_log_sigmoid(f) } else { neg_log_sigmoid(-f) };
                let g = crate::numkit::sigmoid(f) - label;
                for (d, uj) in dh.iter_mut().zip(u.iter()) {
                    *d += g * uj;
                }
                if lr > 0.0 {
                    for (uj, hj) in u.iter_mut().zip(h) {
                        *uj -= lr * g * hj;
                    }
                }
            };
            apply(target, 1.0, output);
            for _ in 0..*k {
                let j = table.sample(rng);
                if j != target {
                    apply(j, 0.0, output);
                }
            }
            loss
        }
        Output::Softmax => {
            let logits: Vec<f64> = (0..output.rows()).map(|j| dot(output.row_slice(j), h)).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let loss = max + z.ln() - logits[target];
            for (j, l) in logits.iter().enumerate() {
                let g = (l - max).exp() / z - if j == target { 1.0 } else { 0.0 };
                let u = output.row_slice_mut(j);
                for (d, uj) in dh.iter_mut().zip(u.iter()) {
                    *d += g * uj;
                }
                if lr > 0.0 {
                    for (uj, hj) in u.iter_mut().zip(h) {
                        *uj -= lr * g * hj;
                    }
                }
            }
            loss
        }
    }
}

/// Processes one window; returns `(loss sum, predictions)`. With `lr == 0`
/// nothing is updated.
fn run_window(
    algorithm: Algorithm,
    w: &ContextWindow,
    input: &mut Tensor,
    output: &mut Tensor,
    mode: &Output,
    lr: f64,
    rng: &mut Rng,
) -> (f64, usize) {
    let dim = input.cols();
    let ctx: Vec<usize> = w.context.iter().copied().filter(|&c| c != Vocabulary::PAD).collect();
    if ctx.is_empty() {
        return (0.0, 0);
    }
    let mut dh = vec![0.0; dim];
    match algorithm {
        Algorithm::Cbow => {
            let mut h = vec![0.0; dim];
            for &c in &ctx {
                for (a, v) in h.iter_mut().zip(input.row_slice(c)) {
                    *a += v;
                }
            }
            let n = ctx.len() as f64;
            h.iter_mut().for_each(|v| *v /= n);
            let loss = predict(&h, w.center, output, mode, lr, &mut dh, rng);
            if lr > 0.0 {
                for &c in &ctx {
                    for (e, d) in input.row_slice_mut(c).iter_mut().zip(&dh) {
                        *e -= lr * d / n;
                    }
                }
            }
            (loss, 1)
        }
        _ => {
            let mut loss = 0.0;
            for &c in &ctx {
                let h = input.row_slice(w.center).to_vec();
                dh.fill(0.0);
                loss += predict(&h, c, output, mode, lr, &mut dh, rng);
                if lr > 0.0 {
                    for (e, d) in input.row_slice_mut(w.center).iter_mut().zip(&dh) {
                        *e -= lr * d;
                    }
                }
            }
            (loss, ctx.len())
        }
    }
}

/// Full-softmax loss of a single window: the summed cross-entropy of every
/// prediction the algorithm makes for it.
pub fn window_loss(algorithm: Algorithm, window: &ContextWindow, input: &Tensor, output: &Tensor) -> f64 {
    let mut input = input.clone();
    let mut output = output.clone();
    let mut rng = rng::seeded(0);
    run_window(algorithm, window, &mut input, &mut output, &Output::Softmax, 0.0, &mut rng).0
}

fn mean_loss(
    algorithm: Algorithm,
    windows: &[ContextWindow],
    input: &Tensor,
    output: &Tensor,
    mode: &Output,
    seed: u64,
) -> f64 {
    let mut rng = rng::stream(seed, "word2vec-eval");
    let (mut input, mut output) = (input.clone(), output.clone());
    let (mut total, mut n) = (0.0, 0);
    for w in windows {
        let (l, k) = run_window(algorithm, w, &mut input, &mut output, mode, 0.0, &mut rng);
        total += l;
        n += k;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Trains embeddings for `cfg.algorithm` over `windows`.
pub fn train_word2vec(
    windows: &[ContextWindow],
    vocab: &Vocabulary,
    cfg: &Word2VecConfig,
) -> Result<Word2VecOutput, EmbeddingError> {
    if cfg.algorithm == Algorithm::Imported {
        return Err(EmbeddingError::InvalidConfig("cannot train an imported embedding".into()));
    }
    if cfg.dim == 0 || !(cfg.lr0 > 0.0) || cfg.lr_min < 0.0 {
        return Err(EmbeddingError::InvalidConfig(format!(
            "dim {} lr0 {} lr_min {}",
            cfg.dim, cfg.lr0, cfg.lr_min
        )));
    }
    if windows.is_empty() {
        return Err(EmbeddingError::EmptyWindowStream);
    }
    let v = vocab.len();
    if let Some(bad) = windows.iter().flat_map(|w| std::iter::once(&w.center).chain(&w.context)).find(|&&i| i >= v) {
        return Err(EmbeddingError::InvalidConfig(format!("token id {bad} outside vocabulary of {v}")));
    }
    let mut counts = vec![0.0f64; v];
    for w in windows {
        counts[w.center] += 1.0;
    }
    let table = WeightedIndex::new(counts.iter().map(|c| c.powf(0.75)))
        .map_err(|e| EmbeddingError::InvalidConfig(format!("unigram table: {e}")))?;
    let mode = if cfg.full_softmax { Output::Softmax } else { Output::Negative { k: cfg.negatives, table: &table } };

    let mut input = init_weights(v, cfg.dim, cfg.init, cfg.seed);
    let mut output = Tensor::zeros(v, cfg.dim);
    let initial_loss = mean_loss(cfg.algorithm, windows, &input, &output, &mode, cfg.seed);

    let mut rng = rng::stream(cfg.seed, "word2vec-train");
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let total = (cfg.epochs * windows.len()) as f64;
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for &i in &order {
            let lr = (cfg.lr0 - (cfg.lr0 - cfg.lr_min) * step as f64 / total).max(cfg.lr_min);
            let (l, k) = run_window(cfg.algorithm, &windows[i], &mut input, &mut output, &mode, lr, &mut rng);
            sum += l;
            n += k;
            step += 1;
        }
        epoch_losses.push(if n == 0 { 0.0 } else { sum / n as f64 });
    }
    if !input.is_finite() || !output.is_finite() {
        return Err(EmbeddingError::Diverged);
    }
    let final_loss = mean_loss(cfg.algorithm, windows, &input, &output, &mode, cfg.seed);
    let mut embeddings = EmbeddingMatrix::new(vocab.clone(), input, cfg.algorithm)?;
    embeddings.manifest = Some(cfg.clone());
    Ok(Word2VecOutput { embeddings, output_weights: output, initial_loss, final_loss, epoch_losses })
}

pub fn train_cbow(windows: &[ContextWindow], vocab: &Vocabulary, cfg: &Word2VecConfig) -> Result<Word2VecOutput, EmbeddingError> {
    train_word2vec(windows, vocab, &Word2VecConfig { algorithm: Algorithm::Cbow, ..cfg.clone() })
}

pub fn train_csg(windows: &[ContextWindow], vocab: &Vocabulary, cfg: &Word2VecConfig) -> Result<Word2VecOutput, EmbeddingError> {
    train_word2vec(windows, vocab, &Word2VecConfig { algorithm: Algorithm::Csg, ..cfg.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::two_topic_corpus;
    use crate::corpus::AnnotatedDocument;
    use crate::embeddings::{build_vocab, make_windows};
    use crate::preprocess::SentenceMap;

    fn corpus_windows(docs: &[AnnotatedDocument]) -> (Vec<ContextWindow>, Vocabulary) {
        let vocab = build_vocab(docs, &[]);
        let maps: Vec<SentenceMap> = docs.iter().map(SentenceMap::by_line).collect();
        (make_windows(docs, &maps, &vocab, 11).unwrap(), vocab)
    }

    fn cfg(algorithm: Algorithm, dim: usize, seed: u64) -> Word2VecConfig {
        Word2VecConfig { algorithm, dim, seed, ..Default::default() }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn repeated_sentence_loss_drops() {
        let text = vec!["a b"; 20].join(" ");
        let docs = vec![AnnotatedDocument::from_text("d", &text)];
        let (windows, vocab) = corpus_windows(&docs);
        for alg in [Algorithm::Cbow, Algorithm::Csg] {
            let out = train_word2vec(&windows, &vocab, &cfg(alg, 8, 3)).unwrap();
            assert!(out.final_loss < out.initial_loss, "{alg:?}: {} vs {}", out.final_loss, out.initial_loss);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let docs = vec![AnnotatedDocument::from_text("d", "x y z x")];
        let (windows, vocab) = corpus_windows(&docs);
        let c = Word2VecConfig { epochs: 0, ..cfg(Algorithm::Csg, 5, 11) };
        let out = train_word2vec(&windows, &vocab, &c).unwrap();
        assert_eq!(out.embeddings.weights, init_weights(vocab.len(), 5, InitScheme::Gaussian, 11));
        assert!(out.epoch_losses.is_empty());
        assert!(matches!(train_word2vec(&[], &vocab, &c), Err(EmbeddingError::EmptyWindowStream)));
    }

    #[test]
    fn small_uniform_init_bounds() {
        let w = init_weights(10, 4, InitScheme::SmallUniform, 1);
        assert!(w.data().iter().all(|v| v.abs() <= 0.125));
        assert!(w.row_slice(0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_softmax_loss_by_hand() {
        // V = 3, m = 2; row 0 is PAD and drops out of the context.
        let input = Tensor::from_rows(&[vec![9.0, 9.0], vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let output = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = ContextWindow { center: 1, context: vec![0, 2, 0, 0] };
        // CBOW: h = e2 = (1, 0), logits (0, 1, 0), target 1
        let expected = (2.0 + std::f64::consts::E).ln() - 1.0;
        assert!((window_loss(Algorithm::Cbow, &w, &input, &output) - expected).abs() < 1e-12);
        // skip-gram: h = e1 = (0.5, 0.5), logits (0, 0.5, 0.5), target 2
        let expected = (1.0 + 2.0 * 0.5f64.exp()).ln() - 0.5;
        assert!((window_loss(Algorithm::Csg, &w, &input, &output) - expected).abs() < 1e-12);
    }

    /// One SGD step with a tiny learning rate moves every input row by
    /// `-lr * gradient`, checked against central differences of the loss.
    #[test]
    fn updates_follow_the_loss_gradient() {
        let mut r = rng::seeded(5);
        let input = Tensor::uniform(5, 3, 1.0, &mut r);
        let output = Tensor::uniform(5, 3, 1.0, &mut r);
        let w = ContextWindow { center: 2, context: vec![0, 1, 3, 4, 3, 0] };
        for alg in [Algorithm::Cbow, Algorithm::Csg] {
            let lr = 1e-7;
            let (mut inp, mut out) = (input.clone(), output.clone());
            run_window(alg, &w, &mut inp, &mut out, &Output::Softmax, lr, &mut r);
            let h = 1e-5;
            for i in 0..input.len() {
                let mut up = input.clone();
                up.data_mut()[i] += h;
                let mut down = input.clone();
                down.data_mut()[i] -= h;
                let fd = (window_loss(alg, &w, &up, &output) - window_loss(alg, &w, &down, &output)) / (2.0 * h);
                let step = (input.data()[i] - inp.data()[i]) / lr;
                assert!((fd - step).abs() < 1e-4 * fd.abs().max(1.0), "{alg:?} {i}: {fd} vs {step}");
            }
            assert_eq!(inp.row_slice(0), input.row_slice(0));
        }
    }

    #[test]
    fn pad_row_is_never_updated_and_runs_repeat() {
        let (docs, _) = two_topic_corpus(10, 8, 1);
        let (windows, vocab) = corpus_windows(&docs);
        for alg in [Algorithm::Cbow, Algorithm::Csg] {
            let a = train_word2vec(&windows, &vocab, &cfg(alg, 6, 2)).unwrap();
            assert!(a.embeddings.row(Vocabulary::PAD).iter().all(|v| *v == 0.0));
            let b = train_word2vec(&windows, &vocab, &cfg(alg, 6, 2)).unwrap();
            assert_eq!(a.embeddings.weights, b.embeddings.weights);
            assert_eq!(a.epoch_losses, b.epoch_losses);
        }
    }

    fn topic_similarity(out: &Word2VecOutput, words: usize) -> (f64, f64) {
        let e = &out.embeddings;
        let ids = |t: usize| -> Vec<usize> { (0..words).filter_map(|i| e.vocab.id(&format!("t{t}w{i}"))).collect() };
        let (a, b) = (ids(0), ids(1));
        let mut intra = Vec::new();
        for set in [&a, &b] {
            for (i, &x) in set.iter().enumerate() {
                for &y in &set[i + 1..] {
                    intra.push(cosine(e.row(x), e.row(y)));
                }
            }
        }
        let inter: Vec<f64> = a.iter().flat_map(|&x| b.iter().map(move |&y| (x, y))).map(|(x, y)| cosine(e.row(x), e.row(y))).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        (mean(&intra), mean(&inter))
    }

    #[test]
    fn two_topics_separate() {
        let (docs, _) = two_topic_corpus(60, 10, 7);
        let (windows, vocab) = corpus_windows(&docs);
        for alg in [Algorithm::Cbow, Algorithm::Csg] {
            let out = train_word2vec(&windows, &vocab, &cfg(alg, 20, 7)).unwrap();
            let (intra, inter) = topic_similarity(&out, 10);
            assert!(intra > inter, "{alg:?}: intra {intra} inter {inter}");
        }
    }

    #[test]
    fn epoch_loss_falls_for_most_seeds() {
        for alg in [Algorithm::Cbow, Algorithm::Csg] {
            let mut falls = 0;
            for seed in 0..10 {
                let (docs, _) = two_topic_corpus(20, 10, seed);
                let (windows, vocab) = corpus_windows(&docs);
                let out = train_word2vec(&windows, &vocab, &cfg(alg, 20, seed)).unwrap();
                if out.epoch_losses[4] < out.epoch_losses[0] {
                    falls += 1;
                }
            }
            assert!(falls >= 9, "{alg:?}: {falls}/10");
        }
    }
}
