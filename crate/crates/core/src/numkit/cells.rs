//! LSTM and GRU cells recorded on a [`Tape`]. Inputs are `batch x features`.

use super::{NumError, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

fn bind(tape: &mut Tape, store: &ParamStore, name: &str, trainable: bool) -> Result<Var, NumError> {
    if trainable {
        tape.param(store, name)
    } else {
        tape.frozen(store, name)
    }
}

/// Gate order in the packed weights: input, forget, cell candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

impl LstmWeights {
    /// Registers `{prefix}.wx` (input x 4h, Glorot), `{prefix}.wh` (h x 4h,
    /// one orthogonal block per gate) and `{prefix}.b` (1 x 4h, zeros except
    /// a forget-gate bias of 1).
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) {
        store.insert(format!("{prefix}.wx"), Tensor::glorot(input, 4 * hidden, rng));
        let blocks: Vec<Tensor> = (0..4).map(|_| Tensor::orthogonal(hidden, rng)).collect();
        let mut wh = Tensor::zeros(hidden, 4 * hidden);
        for (g, block) in blocks.iter().enumerate() {
            for r in 0..hidden {
                for c in 0..hidden {
                    wh.set(r, g * hidden + c, block.get(r, c));
                }
            }
        }
        store.insert(format!("{prefix}.wh"), wh);
        let mut b = Tensor::zeros(1, 4 * hidden);
        (hidden..2 * hidden).for_each(|c| b.set(0, c, 1.0));
        store.insert(format!("{prefix}.b"), b);
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str, trainable: bool) -> Result<Self, NumError> {
        let wx = bind(tape, store, &format!("{prefix}.wx"), trainable)?;
        let wh = bind(tape, store, &format!("{prefix}.wh"), trainable)?;
        let b = bind(tape, store, &format!("{prefix}.b"), trainable)?;
        let hidden = tape.value(wh).rows();
        Ok(LstmWeights { wx, wh, b, hidden })
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        4 * (input + hidden + 1) * hidden
    }
}

/// One LSTM step; returns `(h', c')`.
pub fn lstm_step(tape: &mut Tape, w: &LstmWeights, x: Var, h: Var, c: Var) -> Result<(Var, Var), NumError> {
    let n = w.hidden;
    let zx = tape.affine(x, w.wx, w.b)?;
    let zh = tape.matmul(h, w.wh)?;
    let z = tape.add(zx, zh)?;
    let i = tape.slice_cols(z, 0, n)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice_cols(z, n, 2 * n)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice_cols(z, 2 * n, 3 * n)?;
    let g = tape.tanh(g)?;
    let o = tape.slice_cols(z, 3 * n, 4 * n)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Gate order: update, reset, candidate. The reset gate scales the previous
/// state before its projection.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    pub wx: Var,
    pub b: Var,
    pub wh_zr: Var,
    pub wh_n: Var,
    pub hidden: usize,
}

impl GruWeights {
    /// Registers `{prefix}.wx` (input x 3h), `{prefix}.wh` (h x 3h) and
    /// `{prefix}.b` (1 x 3h).
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) {
        store.insert(format!("{prefix}.wx"), Tensor::glorot(input, 3 * hidden, rng));
        store.insert(format!("{prefix}.wh"), Tensor::glorot(hidden, 3 * hidden, rng));
        store.insert(format!("{prefix}.b"), Tensor::zeros(1, 3 * hidden));
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str, trainable: bool) -> Result<Self, NumError> {
        let wx = bind(tape, store, &format!("{prefix}.wx"), trainable)?;
        let wh = bind(tape, store, &format!("{prefix}.wh"), trainable)?;
        let b = bind(tape, store, &format!("{prefix}.b"), trainable)?;
        let hidden = tape.value(wh).rows();
        let wh_zr = tape.slice_cols(wh, 0, 2 * hidden)?;
        let wh_n = tape.slice_cols(wh, 2 * hidden, 3 * hidden)?;
        Ok(GruWeights { wx, b, wh_zr, wh_n, hidden })
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        3 * (input + hidden + 1) * hidden
    }
}

/// One GRU step: `h' = (1 - z) * n + z * h`.
pub fn gru_step(tape: &mut Tape, w: &GruWeights, x: Var, h: Var) -> Result<Var, NumError> {
    let n = w.hidden;
    let zx = tape.affine(x, w.wx, w.b)?;
    let zh = tape.matmul(h, w.wh_zr)?;
    let zx_zr = tape.slice_cols(zx, 0, 2 * n)?;
    let gates = tape.add(zx_zr, zh)?;
    let gates = tape.sigmoid(gates)?;
    let z = tape.slice_cols(gates, 0, n)?;
    let r = tape.slice_cols(gates, n, 2 * n)?;
    let rh = tape.mul(r, h)?;
    let rh_w = tape.matmul(rh, w.wh_n)?;
    let zx_n = tape.slice_cols(zx, 2 * n, 3 * n)?;
    let cand = tape.add(zx_n, rh_w)?;
    let cand = tape.tanh(cand)?;
    let diff = tape.sub(h, cand)?;
    let keep = tape.mul(z, diff)?;
    tape.add(cand, keep)
}

/// Row-wise select: `mask * new + (1 - mask) * old` for a `batch x 1` mask
/// of zeros and ones. Padded steps carry the previous state through.
pub fn carry(tape: &mut Tape, new: Var, old: Var, mask: Var, inv_mask: Var) -> Result<Var, NumError> {
    let a = tape.mul_col(new, mask)?;
    let b = tape.mul_col(old, inv_mask)?;
    tape.add(a, b)
}
