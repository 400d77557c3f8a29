use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{decode, encdec_loss, FieldLookup, tag, tagger_loss, RelArch, RelError, RelInstance, RelModel};
use crate::corpus::FieldLabel;
use crate::metrics::RelationOutput;
use crate::numkit::{clip_gradients, lr_schedule, AdamConfig, Tape};
use crate::rng;

/// Mini-batch Adam over `instances`; returns the mean batch loss of each
/// epoch. The field lookup used for generated output is rebuilt from the
/// instances' gold tokens.
pub fn train_rel(model: &mut RelModel, instances: &[RelInstance], seed: u64) -> Result<Vec<f64>, RelError> {
    let usable: Vec<&RelInstance> = instances.iter().filter(|i| i.has_gold() && !i.is_empty()).collect();
    if usable.is_empty() {
        return Err(RelError::NoInstances);
    }
    model.config.validate()?;
    model.lookup = FieldLookup::from_pairs(
        usable.iter().flat_map(|i| i.gold.iter()).flat_map(|(f, toks)| toks.iter().map(|t| (*f, t.as_str()))),
    );
    let cfg = model.config.clone();
    let mut r = rng::stream(seed, &format!("rel-train/{}", cfg.arch.name()));
    let adam = AdamConfig::default();
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr, cfg.decay, epoch);
        order.shuffle(&mut r);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&RelInstance> = chunk.iter().map(|&i| usable[i]).collect();
            let mut tape = Tape::new();
            let loss = match cfg.arch {
                RelArch::Seq2seq => tagger_loss(&mut tape, &model.params, &model.embeddings, &batch)?,
                RelArch::Encdec => encdec_loss(&mut tape, &cfg, &model.params, &model.embeddings, &batch)?,
            };
            total += tape.value(loss).data()[0];
            batches += 1;
            let mut grads = tape.backward(loss)?;
            if let Some(c) = cfg.clip {
                clip_gradients(&mut grads, c);
            }
            model.params.adam_step(&grads, lr, &adam)?;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

/// Related tokens for one instance: per-field tags from the tagger, or the
/// generated token sequence from the encoder-decoder.
pub fn extract(model: &RelModel, inst: &RelInstance) -> Result<RelationOutput, RelError> {
    if inst.is_empty() {
        return Err(RelError::EmptyTerm);
    }
    match model.config.arch {
        RelArch::Seq2seq => {
            let tags = tag(&model.params, &model.embeddings, inst)?;
            let mut out: BTreeMap<FieldLabel, Vec<String>> =
                FieldLabel::RELATED.iter().map(|f| (*f, Vec::new())).collect();
            for (label, tok) in tags.iter().zip(&inst.tokens) {
                if let Some(v) = out.get_mut(label) {
                    v.push(tok.clone());
                }
            }
            Ok(RelationOutput::Tagged(out))
        }
        RelArch::Encdec => {
            let d = decode(&model.config, &model.params, &model.embeddings, inst)?;
            Ok(RelationOutput::Generated(d.tokens.iter().map(|&i| model.vocab.token(i).to_string()).collect()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Precision;
    use crate::rel::tests::{sample_doc, sample_words, toy_matrix};
    use crate::rel::{AttentionKind, RelConfig};

    fn model(arch: RelArch, lr: f64, epochs: usize) -> (RelModel, Vec<RelInstance>) {
        let e = toy_matrix(&sample_words(), 16, 5);
        let mut cfg = RelConfig::defaults(arch);
        (cfg.hidden, cfg.attention_dim, cfg.lr, cfg.epochs, cfg.precision) = (32, 32, lr, epochs, Precision::F64);
        let m = RelModel::build(cfg, &e, 5).unwrap();
        let inst = m.instances(&[sample_doc()]).unwrap();
        (m, inst)
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        for arch in [RelArch::Seq2seq, RelArch::Encdec] {
            let (mut m, inst) = model(arch, 0.0, 2);
            let before = m.params.clone();
            train_rel(&mut m, &inst, 1).unwrap();
            for (name, t) in before.iter() {
                assert_eq!(m.params.get(name).unwrap(), t, "{name}");
            }
        }
    }

    #[test]
    fn tagger_memorizes_one_window() {
        let (mut m, inst) = model(RelArch::Seq2seq, 0.01, 200);
        let losses = train_rel(&mut m, &inst, 2).unwrap();
        assert!(*losses.last().unwrap() < 0.01, "{:?}", &losses[losses.len() - 5..]);
        let RelationOutput::Tagged(out) = extract(&m, &inst[0]).unwrap() else { panic!("tagger output") };
        assert_eq!(out, inst[0].gold);
    }

    #[test]
    fn encdec_memorizes_one_window() {
        for kind in [AttentionKind::Bahdanau, AttentionKind::Luong] {
            let (mut m, inst) = model(RelArch::Encdec, 0.01, 200);
            m.config.attention = kind;
            let m0 = RelModel::build(m.config.clone(), &toy_matrix(&sample_words(), 16, 5), 5).unwrap();
            m.params = m0.params;
            let losses = train_rel(&mut m, &inst, 3).unwrap();
            assert!(*losses.last().unwrap() < 0.01, "{kind:?}: {:?}", &losses[losses.len() - 5..]);
            let RelationOutput::Generated(out) = extract(&m, &inst[0]).unwrap() else { panic!("generated output") };
            assert_eq!(out, ["81", "mg", "po", "daily", "pain"]);
            assert_eq!(m.lookup.get("mg"), Some(FieldLabel::Dosage));
        }
    }

    #[test]
    fn training_repeats_under_a_seed() {
        let (mut a, inst) = model(RelArch::Seq2seq, 0.01, 3);
        let mut b = a.clone();
        assert_eq!(train_rel(&mut a, &inst, 9).unwrap(), train_rel(&mut b, &inst, 9).unwrap());
        assert_eq!(a.params, b.params);
        assert!(matches!(train_rel(&mut a, &[], 9), Err(RelError::NoInstances)));
    }
}
