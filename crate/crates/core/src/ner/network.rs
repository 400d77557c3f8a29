use super::{Architecture, NerConfig, NerInstance};
use crate::numkit::cells::lstm_step;
use crate::numkit::{LstmWeights, NumError, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Concatenated embedding rows of a window, left to right.
pub fn ffn_input(emb: &Tensor, window: &[usize]) -> Vec<f64> {
    window.iter().flat_map(|&id| emb.row_slice(id).iter().copied()).collect()
}

fn rows_leaf(tape: &mut Tape, emb: &Tensor, ids: impl Iterator<Item = usize>, width: usize) -> Var {
    let mut data = Vec::new();
    let mut n = 0;
    for id in ids {
        data.extend_from_slice(emb.row_slice(id));
        n += 1;
    }
    tape.leaf(Tensor::new(vec![n, width], data).expect("whole rows"))
}

/// Per-position `batch x m` inputs, through the trainable table when the
/// store carries one.
fn position_inputs(
    tape: &mut Tape,
    store: &ParamStore,
    shared: &Tensor,
    windows: &[&[usize]],
) -> Result<Vec<Var>, NumError> {
    let len = windows[0].len();
    if store.contains("emb") {
        let table = tape.param(store, "emb")?;
        (0..len)
            .map(|k| {
                let ids: Vec<usize> = windows.iter().map(|w| w[k]).collect();
                tape.gather(table, &ids)
            })
            .collect()
    } else {
        let m = shared.cols();
        Ok((0..len).map(|k| rows_leaf(tape, shared, windows.iter().map(|w| w[k]), m)).collect())
    }
}

/// Unnormalized class scores, one row per window. Passing an RNG enables
/// dropout (training mode).
pub fn forward_logits(
    tape: &mut Tape,
    cfg: &NerConfig,
    store: &ParamStore,
    shared: &Tensor,
    windows: &[&[usize]],
    mut rng: Option<&mut Rng>,
) -> Result<Var, NumError> {
    let len = cfg.window_len();
    if windows.is_empty() || windows.iter().any(|w| w.len() != len) {
        return Err(NumError::ShapeMismatch { op: "ner_forward", detail: format!("windows must have length {len}") });
    }
    let train = rng.is_some();
    let mut dropout = |tape: &mut Tape, x: Var| -> Result<Var, NumError> {
        match rng.as_deref_mut() {
            Some(r) => tape.dropout(x, cfg.dropout, train, r),
            None => Ok(x),
        }
    };
    let features = match cfg.arch {
        Architecture::Rnn => {
            let w = LstmWeights::bind(tape, store, "lstm", true)?;
            let xs = position_inputs(tape, store, shared, windows)?;
            let n = windows.len();
            let mut h = tape.leaf(Tensor::zeros(n, w.hidden));
            let mut c = tape.leaf(Tensor::zeros(n, w.hidden));
            for x in xs {
                (h, c) = lstm_step(tape, &w, x, h, c)?;
            }
            dropout(tape, h)?
        }
        _ => {
            let mut x = if store.contains("emb") {
                let parts = position_inputs(tape, store, shared, windows)?;
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat(&parts)?
                }
            } else {
                let data: Vec<f64> = windows.iter().flat_map(|w| ffn_input(shared, w)).collect();
                tape.leaf(Tensor::new(vec![windows.len(), len * shared.cols()], data)?)
            };
            for i in 0..cfg.layers() {
                let w = tape.param(store, &format!("l{i}.w"))?;
                let b = tape.param(store, &format!("l{i}.b"))?;
                x = tape.affine(x, w, b)?;
                x = tape.activation(x, cfg.activation)?;
                x = dropout(tape, x)?;
            }
            x
        }
    };
    let ow = tape.param(store, "out.w")?;
    let ob = tape.param(store, "out.b")?;
    tape.affine(features, ow, ob)
}

/// Mean cross-entropy over `instances`.
pub fn instance_loss(
    tape: &mut Tape,
    cfg: &NerConfig,
    store: &ParamStore,
    shared: &Tensor,
    instances: &[NerInstance],
    rng: Option<&mut Rng>,
) -> Result<Var, NumError> {
    let windows: Vec<&[usize]> = instances.iter().map(|i| i.window.as_slice()).collect();
    let logits = forward_logits(tape, cfg, store, shared, &windows, rng)?;
    let targets: Vec<usize> = instances.iter().map(|i| i.target).collect();
    let weights = vec![1.0 / instances.len() as f64; instances.len()];
    tape.cross_entropy(logits, &targets, Some(&weights))
}
