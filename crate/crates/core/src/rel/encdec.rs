use super::{assemble, AttentionKind, RelConfig, RelInstance};
use crate::embeddings::Vocabulary;
use crate::numkit::cells::{carry, lstm_step};
use crate::numkit::{LstmWeights, NumError, ParamStore, Tape, Tensor, Var};

/// Additive score for padded encoder positions.
const MASKED: f64 = -1e9;

struct Encoded {
    /// Per position `[fwd; bwd]` outputs, `batch x 2h`.
    outputs: Vec<Var>,
    /// `Wh` (Bahdanau) per position, precomputed once.
    keys: Vec<Var>,
    score_mask: Var,
    state: (Var, Var),
}

fn encode(
    tape: &mut Tape,
    cfg: &RelConfig,
    store: &ParamStore,
    table: &Tensor,
    batch: &[&RelInstance],
) -> Result<Encoded, NumError> {
    let inp = assemble(table, batch);
    let bow = tape.leaf(inp.bow.clone());
    let init = |tape: &mut Tape, name: &str| -> Result<Var, NumError> {
        let w = tape.param(store, &format!("{name}.w"))?;
        let b = tape.param(store, &format!("{name}.b"))?;
        tape.affine(bow, w, b)
    };
    let (hf0, cf0) = (init(tape, "enc_h_f")?, init(tape, "enc_c_f")?);
    let (hb0, cb0) = (init(tape, "enc_h_b")?, init(tape, "enc_c_b")?);
    let lf = LstmWeights::bind(tape, store, "lstm_f", true)?;
    let lb = LstmWeights::bind(tape, store, "lstm_b", true)?;
    let xs: Vec<Var> = inp.steps.iter().map(|x| tape.leaf(x.clone())).collect();
    let ms: Vec<(Var, Var)> =
        inp.masks.iter().zip(&inp.inv_masks).map(|(m, i)| (tape.leaf(m.clone()), tape.leaf(i.clone()))).collect();
    let mut fwd = Vec::with_capacity(inp.len);
    let (mut h, mut c) = (hf0, cf0);
    for t in 0..inp.len {
        let (nh, nc) = lstm_step(tape, &lf, xs[t], h, c)?;
        h = carry(tape, nh, h, ms[t].0, ms[t].1)?;
        c = carry(tape, nc, c, ms[t].0, ms[t].1)?;
        fwd.push(h);
    }
    let (hf, cf) = (h, c);
    let mut bwd = vec![hb0; inp.len];
    let (mut h, mut c) = (hb0, cb0);
    for t in (0..inp.len).rev() {
        let (nh, nc) = lstm_step(tape, &lb, xs[t], h, c)?;
        h = carry(tape, nh, h, ms[t].0, ms[t].1)?;
        c = carry(tape, nc, c, ms[t].0, ms[t].1)?;
        bwd[t] = h;
    }
    let state = (tape.concat(&[hf, h])?, tape.concat(&[cf, c])?);
    let outputs: Vec<Var> = (0..inp.len).map(|t| tape.concat(&[fwd[t], bwd[t]])).collect::<Result<_, _>>()?;
    let keys = match cfg.attention {
        AttentionKind::Bahdanau => {
            let w1 = tape.param(store, "att.w1")?;
            outputs.iter().map(|o| tape.matmul(*o, w1)).collect::<Result<_, _>>()?
        }
        AttentionKind::Luong => Vec::new(),
    };
    let mut mask = Tensor::zeros(batch.len(), inp.len);
    for (r, &n) in inp.lengths.iter().enumerate() {
        for t in n..inp.len {
            mask.set(r, t, MASKED);
        }
    }
    let score_mask = tape.leaf(mask);
    Ok(Encoded { outputs, keys, score_mask, state })
}

/// Attention weights (`batch x len`) and context (`batch x 2h`) for the
/// decoder state `s`.
fn attend(tape: &mut Tape, cfg: &RelConfig, store: &ParamStore, enc: &Encoded, s: Var) -> Result<(Var, Var), NumError> {
    let scores: Vec<Var> = match cfg.attention {
        AttentionKind::Bahdanau => {
            let w2 = tape.param(store, "att.w2")?;
            let v = tape.param(store, "att.v")?;
            let query = tape.matmul(s, w2)?;
            enc.keys
                .iter()
                .map(|k| {
                    let e = tape.add(*k, query)?;
                    let e = tape.tanh(e)?;
                    tape.matmul(e, v)
                })
                .collect::<Result<_, _>>()?
        }
        AttentionKind::Luong => {
            let w = tape.param(store, "att.w")?;
            let sw = tape.matmul(s, w)?;
            enc.outputs
                .iter()
                .map(|h| {
                    let p = tape.mul(sw, *h)?;
                    tape.sum_cols(p)
                })
                .collect::<Result<_, _>>()?
        }
    };
    let scores = if scores.len() == 1 { scores[0] } else { tape.concat(&scores)? };
    let scores = tape.add(scores, enc.score_mask)?;
    let alpha = tape.softmax(scores)?;
    let mut ctx: Option<Var> = None;
    for (t, h) in enc.outputs.iter().enumerate() {
        let a = tape.slice_cols(alpha, t, t + 1)?;
        let part = tape.mul_col(*h, a)?;
        ctx = Some(match ctx {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    Ok((alpha, ctx.expect("non-empty window")))
}

struct Decoder {
    weights: LstmWeights,
    out_w: Var,
    out_b: Var,
    start: Var,
}

fn bind_decoder(tape: &mut Tape, store: &ParamStore) -> Result<Decoder, NumError> {
    Ok(Decoder {
        weights: LstmWeights::bind(tape, store, "dec", true)?,
        out_w: tape.param(store, "out.w")?,
        out_b: tape.param(store, "out.b")?,
        start: tape.param(store, "start")?,
    })
}

/// One decoder step from the previous token's embedding; returns logits
/// over the vocabulary, the attention weights and the new state.
#[allow(clippy::too_many_arguments)]
fn decode_step(
    tape: &mut Tape,
    cfg: &RelConfig,
    store: &ParamStore,
    enc: &Encoded,
    dec: &Decoder,
    prev: Var,
    state: (Var, Var),
) -> Result<(Var, Var, (Var, Var)), NumError> {
    let (alpha, ctx) = attend(tape, cfg, store, enc, state.0)?;
    let x = tape.concat(&[prev, ctx])?;
    let (h, c) = lstm_step(tape, &dec.weights, x, state.0, state.1)?;
    let feat = tape.concat(&[h, ctx])?;
    let logits = tape.affine(feat, dec.out_w, dec.out_b)?;
    Ok((logits, alpha, (h, c)))
}

fn embed_rows(tape: &mut Tape, table: &Tensor, ids: &[usize]) -> Var {
    let mut data = Vec::with_capacity(ids.len() * table.cols());
    for &id in ids {
        data.extend_from_slice(table.row_slice(id));
    }
    tape.leaf(Tensor::new(vec![ids.len(), table.cols()], data).expect("whole rows"))
}

/// Teacher-forced cross-entropy summed over each gold output, averaged over
/// the batch.
pub fn encdec_loss(
    tape: &mut Tape,
    cfg: &RelConfig,
    store: &ParamStore,
    table: &Tensor,
    batch: &[&RelInstance],
) -> Result<Var, NumError> {
    let enc = encode(tape, cfg, store, table, batch)?;
    let dec = bind_decoder(tape, store)?;
    let steps = batch.iter().map(|i| i.output.len()).max().unwrap_or(0);
    if steps == 0 {
        return Err(NumError::InvalidArgument("instances carry no gold output".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut prev = tape.gather(dec.start, &vec![0; batch.len()])?;
    let mut state = enc.state;
    let mut total: Option<Var> = None;
    for k in 0..steps {
        let (logits, _, next) = decode_step(tape, cfg, store, &enc, &dec, prev, state)?;
        state = next;
        let targets: Vec<usize> = batch.iter().map(|i| i.output.get(k).copied().unwrap_or(Vocabulary::PAD)).collect();
        let weights: Vec<f64> = batch.iter().map(|i| if k < i.output.len() { scale } else { 0.0 }).collect();
        let ce = tape.cross_entropy(logits, &targets, Some(&weights))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
        if k + 1 < steps {
            prev = embed_rows(tape, table, &targets);
        }
    }
    Ok(total.expect("at least one step"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated ids, without the end marker.
    pub tokens: Vec<usize>,
    /// Attention weights over the window at each step.
    pub attention: Vec<Vec<f64>>,
    /// True when the end marker was produced before the length cap.
    pub finished: bool,
}

/// Greedy decoding, capped at the window length plus the configured margin.
pub fn decode(cfg: &RelConfig, store: &ParamStore, table: &Tensor, inst: &RelInstance) -> Result<Decoded, NumError> {
    let mut tape = Tape::new();
    let enc = encode(&mut tape, cfg, store, table, &[inst])?;
    let dec = bind_decoder(&mut tape, store)?;
    let mut prev = dec.start;
    let mut state = enc.state;
    let mut out = Decoded { tokens: Vec::new(), attention: Vec::new(), finished: false };
    for _ in 0..inst.len() + cfg.decode_margin {
        let (logits, alpha, next) = decode_step(&mut tape, cfg, store, &enc, &dec, prev, state)?;
        state = next;
        out.attention.push(tape.value(alpha).data().to_vec());
        let id = tape.value(logits).argmax_row(0);
        if id == Vocabulary::EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(id);
        prev = embed_rows(&mut tape, table, &[id]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, Precision};
    use crate::rel::tests::{sample_doc, toy_matrix};
    use crate::rel::{oracle_instances, RelArch, RelModel};
    use crate::rng;
    use rand::Rng as _;

    fn small_model(kind: AttentionKind, seed: u64) -> RelModel {
        // six words plus four reserved tokens: V = 10
        let e = toy_matrix(&["a", "b", "c", "d", "e", "f"], 4, seed);
        let mut cfg = RelConfig::defaults(RelArch::Encdec);
        (cfg.hidden, cfg.attention_dim, cfg.attention, cfg.precision) = (6, 5, kind, Precision::F64);
        let m = RelModel::build(cfg, &e, seed).unwrap();
        assert_eq!(m.params.get("dec.wh").unwrap().rows(), 12);
        assert_eq!(m.params.get("out.w").unwrap().cols(), 10);
        m
    }

    fn random_instance(model: &RelModel, len: usize, out: usize, r: &mut rng::Rng) -> RelInstance {
        let mut inst = oracle_instances(&sample_doc(), &model.vocab, &model.embeddings, 2).unwrap().remove(0);
        let v = model.vocab.len();
        inst.ids = (0..len).map(|_| r.random_range(0..v)).collect();
        inst.codes = (0..len).map(|_| f64::from(r.random_range(0u8..7))).collect();
        inst.tags = vec![0; len];
        inst.positions.truncate(len);
        inst.tokens.truncate(len);
        inst.output = (0..out).map(|_| r.random_range(0..v)).chain([Vocabulary::EOS]).collect();
        inst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [AttentionKind::Bahdanau, AttentionKind::Luong] {
            for seed in 0..2 {
                let model = small_model(kind, seed);
                let mut r = rng::seeded(seed + 10);
                let a = random_instance(&model, 4, 2, &mut r);
                let b = random_instance(&model, 2, 1, &mut r);
                let batch = [&a, &b];
                let cfg = &model.config;
                let err =
                    finite_diff_check(|t, s| encdec_loss(t, cfg, s, &model.embeddings, &batch), &model.params, 1e-5)
                        .unwrap();
                assert!(err < 1e-4, "{kind:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn attention_is_a_distribution() {
        for kind in [AttentionKind::Bahdanau, AttentionKind::Luong] {
            let model = small_model(kind, 3);
            let mut r = rng::seeded(3);
            let inst = random_instance(&model, 4, 1, &mut r);
            let d = decode(&model.config, &model.params, &model.embeddings, &inst).unwrap();
            assert!(!d.attention.is_empty());
            for a in &d.attention {
                assert_eq!(a.len(), 4);
                assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!(d.tokens.len() <= inst.len() + model.config.decode_margin);
            let single = random_instance(&model, 1, 1, &mut r);
            let d = decode(&model.config, &model.params, &model.embeddings, &single).unwrap();
            assert!(d.attention.iter().all(|a| a == &vec![1.0]));
        }
    }

    #[test]
    fn decoding_stops_at_the_cap() {
        let mut model = small_model(AttentionKind::Luong, 4);
        // make the end marker unreachable
        let out_b = model.params.get_mut("out.b").unwrap();
        out_b.set(0, Vocabulary::EOS, -1e6);
        out_b.set(0, 5, 1e6);
        let inst = random_instance(&model, 3, 1, &mut rng::seeded(4));
        let d = decode(&model.config, &model.params, &model.embeddings, &inst).unwrap();
        assert!(!d.finished);
        assert_eq!(d.tokens.len(), 3 + model.config.decode_margin);
    }
}
