use super::{assemble, RelInstance};
use crate::corpus::FieldLabel;
use crate::numkit::cells::{carry, gru_step};
use crate::numkit::{GruWeights, NumError, ParamStore, Tape, Tensor, Var};

/// Per-position logits (`batch x 7` each) of the bidirectional GRU tagger.
fn tagger_logits(tape: &mut Tape, store: &ParamStore, table: &Tensor, batch: &[&RelInstance]) -> Result<(Vec<Var>, super::Inputs), NumError> {
    let inp = assemble(table, batch);
    let bow = tape.leaf(inp.bow.clone());
    let init = |tape: &mut Tape, name: &str| -> Result<Var, NumError> {
        let w = tape.param(store, &format!("{name}.w"))?;
        let b = tape.param(store, &format!("{name}.b"))?;
        tape.affine(bow, w, b)
    };
    let hf0 = init(tape, "init_f")?;
    let hb0 = init(tape, "init_b")?;
    let gf = GruWeights::bind(tape, store, "gru_f", true)?;
    let gb = GruWeights::bind(tape, store, "gru_b", true)?;
    let xs: Vec<Var> = inp.steps.iter().map(|x| tape.leaf(x.clone())).collect();
    let ms: Vec<(Var, Var)> =
        inp.masks.iter().zip(&inp.inv_masks).map(|(m, i)| (tape.leaf(m.clone()), tape.leaf(i.clone()))).collect();
    let mut fwd = Vec::with_capacity(inp.len);
    let mut h = hf0;
    for t in 0..inp.len {
        let new = gru_step(tape, &gf, xs[t], h)?;
        h = carry(tape, new, h, ms[t].0, ms[t].1)?;
        fwd.push(h);
    }
    let mut bwd = vec![hb0; inp.len];
    let mut h = hb0;
    for t in (0..inp.len).rev() {
        let new = gru_step(tape, &gb, xs[t], h)?;
        h = carry(tape, new, h, ms[t].0, ms[t].1)?;
        bwd[t] = h;
    }
    let ow = tape.param(store, "out.w")?;
    let ob = tape.param(store, "out.b")?;
    let mut out = Vec::with_capacity(inp.len);
    for t in 0..inp.len {
        let both = tape.concat(&[fwd[t], bwd[t]])?;
        out.push(tape.affine(both, ow, ob)?);
    }
    Ok((out, inp))
}

/// Cross-entropy summed over each window, averaged over the batch.
pub fn tagger_loss(tape: &mut Tape, store: &ParamStore, table: &Tensor, batch: &[&RelInstance]) -> Result<Var, NumError> {
    let (logits, inp) = tagger_logits(tape, store, table, batch)?;
    let scale = 1.0 / batch.len() as f64;
    let mut total: Option<Var> = None;
    for (t, l) in logits.into_iter().enumerate() {
        let targets: Vec<usize> = batch.iter().map(|i| i.tags.get(t).copied().unwrap_or(0)).collect();
        let weights: Vec<f64> = inp.masks[t].data().iter().map(|m| m * scale).collect();
        let ce = tape.cross_entropy(l, &targets, Some(&weights))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| NumError::InvalidArgument("empty batch".into()))
}

/// Class distribution at every window position of `inst`.
pub fn tagger_probs(store: &ParamStore, table: &Tensor, inst: &RelInstance) -> Result<Vec<Vec<f64>>, NumError> {
    let mut tape = Tape::new();
    let (logits, _) = tagger_logits(&mut tape, store, table, &[inst])?;
    logits
        .into_iter()
        .map(|l| {
            let p = tape.softmax(l)?;
            Ok(tape.value(p).data().to_vec())
        })
        .collect()
}

/// Most likely class per position; ties go to the lower code.
pub fn tag(store: &ParamStore, table: &Tensor, inst: &RelInstance) -> Result<Vec<FieldLabel>, NumError> {
    Ok(tagger_probs(store, table, inst)?
        .into_iter()
        .map(|p| {
            let best = (1..p.len()).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            FieldLabel::from_code(best as u8).expect("7 classes")
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, Precision};
    use crate::rel::tests::{sample_doc, sample_words, toy_matrix};
    use crate::rel::{oracle_instances, RelArch, RelConfig, RelModel};
    use crate::rng;
    use rand::Rng as _;

    fn small_model(m: usize, hidden: usize, seed: u64) -> RelModel {
        let e = toy_matrix(&sample_words(), m, seed);
        let mut cfg = RelConfig::defaults(RelArch::Seq2seq);
        (cfg.hidden, cfg.precision) = (hidden, Precision::F64);
        RelModel::build(cfg, &e, seed).unwrap()
    }

    fn random_instance(model: &RelModel, len: usize, r: &mut rng::Rng) -> RelInstance {
        let doc = sample_doc();
        let mut inst = oracle_instances(&doc, &model.vocab, &model.embeddings, 2).unwrap().remove(0);
        inst.ids = (0..len).map(|_| r.random_range(0..model.vocab.len())).collect();
        inst.codes = (0..len).map(|_| f64::from(r.random_range(0u8..7))).collect();
        inst.tags = (0..len).map(|_| r.random_range(0..7)).collect();
        inst.positions.truncate(len);
        inst.tokens.truncate(len);
        inst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let model = small_model(4, 6, seed);
            let mut r = rng::seeded(seed);
            let a = random_instance(&model, 5, &mut r);
            let b = random_instance(&model, 3, &mut r);
            let batch = [&a, &b];
            let err = finite_diff_check(|t, s| tagger_loss(t, s, &model.embeddings, &batch), &model.params, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn outputs_are_distributions() {
        let model = small_model(4, 6, 1);
        let inst = random_instance(&model, 5, &mut rng::seeded(1));
        for p in tagger_probs(&model.params, &model.embeddings, &inst).unwrap() {
            assert_eq!(p.len(), 7);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_init_maps_give_zero_states() {
        let mut model = small_model(4, 6, 2);
        for n in ["init_f.w", "init_f.b", "init_b.w", "init_b.b"] {
            model.params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let inst = random_instance(&model, 4, &mut rng::seeded(2));
        let mut tape = Tape::new();
        let inp = assemble(&model.embeddings, &[&inst]);
        let bow = tape.leaf(inp.bow);
        let w = tape.param(&model.params, "init_f.w").unwrap();
        let b = tape.param(&model.params, "init_f.b").unwrap();
        let h = tape.affine(bow, w, b).unwrap();
        assert!(tape.value(h).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn padding_does_not_change_outputs() {
        let model = small_model(4, 6, 3);
        let mut r = rng::seeded(3);
        let short = random_instance(&model, 3, &mut r);
        let long = random_instance(&model, 6, &mut r);
        let alone = tagger_probs(&model.params, &model.embeddings, &short).unwrap();
        let mut tape = Tape::new();
        let (logits, _) = tagger_logits(&mut tape, &model.params, &model.embeddings, &[&short, &long]).unwrap();
        for (t, l) in logits.iter().take(3).enumerate() {
            let p = tape.softmax(*l).unwrap();
            let row = tape.value(p).row_slice(0);
            for (a, b) in row.iter().zip(&alone[t]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
