//! Central-difference gradient oracle.

use super::{NumError, ParamStore, Precision, Tape, Var};

/// `|a - n| / max(|a|, |n|, 1e-4)`. The floor keeps round-off on
/// near-zero gradients from reading as large relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

fn eval<F>(forward: &F, store: &ParamStore) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumError>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(NumError::ShapeMismatch { op: "finite_diff_check", detail: format!("loss shape {:?}", v.shape()) });
    }
    let value = v.data()[0];
    if !value.is_finite() {
        return Err(NumError::NonFiniteValue { op: "finite_diff_check" });
    }
    Ok(value)
}

/// Records `forward` once for analytic gradients, then perturbs every
/// scalar of every parameter by `±h`. Returns the largest relative error.
/// Parameters the loss does not reach are compared against a zero gradient.
/// The forward must be deterministic; the store is evaluated in 64-bit.
pub fn finite_diff_check<F>(forward: F, params: &ParamStore, h: f64) -> Result<f64, NumError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumError>,
{
    let mut store = params.clone();
    store.set_precision(Precision::F64);
    let mut tape = Tape::new();
    let loss = forward(&mut tape, &store)?;
    let grads = tape.backward(loss)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.len());
        for i in 0..n {
            let orig = store.get(&name).expect("present").data()[i];
            store.get_mut(&name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&forward, &store)?;
            store.get_mut(&name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&forward, &store)?;
            store.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{Activation, Tensor};
    use crate::rng::{seeded, Rng};
    use rand::Rng as _;

    fn store_with(rng: &mut Rng, shapes: &[(&str, usize, usize)]) -> ParamStore {
        let mut s = ParamStore::with_precision(Precision::F64);
        for &(name, r, c) in shapes {
            s.insert(name, Tensor::uniform(r, c, 1.0, rng));
        }
        s
    }

    #[test]
    fn linear_square_model() {
        let mut s = ParamStore::with_precision(Precision::F64);
        s.insert("w", Tensor::scalar(1.0));
        let fwd = |t: &mut Tape, s: &ParamStore| {
            let w = t.param(s, "w")?;
            let x = t.leaf(Tensor::scalar(2.0));
            let y = t.matmul(x, w)?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        };
        let mut t = Tape::new();
        let l = fwd(&mut t, &s).unwrap();
        assert!((t.backward(l).unwrap()["w"].data()[0] - 8.0).abs() < 1e-12);
        assert!(finite_diff_check(fwd, &s, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn flat_surface_has_zero_error() {
        let mut s = ParamStore::with_precision(Precision::F64);
        s.insert("w", Tensor::row(vec![0.3, -0.7]));
        let fwd = |t: &mut Tape, s: &ParamStore| {
            let w = t.param(s, "w")?;
            let z = t.scale(w, 0.0)?;
            t.sum(z)
        };
        assert_eq!(finite_diff_check(fwd, &s, 1e-5).unwrap(), 0.0);
    }

    fn squared(t: &mut Tape, v: Var) -> Result<Var, NumError> {
        let sq = t.mul(v, v)?;
        t.sum(sq)
    }

    /// Each op, fed from trainable inputs of random small shapes, reduced to
    /// a scalar with a nonlinear readout so every gradient path is exercised.
    fn op_loss(op: usize, t: &mut Tape, s: &ParamStore) -> Result<Var, NumError> {
        let a = t.param(s, "a")?;
        let b = t.param(s, "b")?;
        let w = t.param(s, "w")?;
        let bias = t.param(s, "bias")?;
        let col = t.param(s, "col")?;
        let out = match op {
            0 => t.affine(a, w, bias)?,
            1 => t.matmul(a, w)?,
            2 => t.add(a, b)?,
            3 => t.sub(a, b)?,
            4 => t.mul(a, b)?,
            5 => t.scale(a, -1.7)?,
            6 => t.activation(a, Activation::Sigmoid)?,
            7 => t.activation(a, Activation::Tanh)?,
            8 => t.activation(a, Activation::Relu)?,
            9 => {
                let sm = t.softmax(a)?;
                t.mul(sm, b)?
            }
            10 => t.concat(&[a, b, a])?,
            11 => t.slice_cols(a, 1, 3)?,
            12 => t.gather(w, &[0, 2, 2, 1])?,
            13 => t.mul_col(a, col)?,
            14 => t.sum_cols(a)?,
            15 => {
                let targets: Vec<usize> = (0..t.value(a).rows()).map(|r| r % 4).collect();
                let weights: Vec<f64> = (0..targets.len()).map(|r| 0.5 + r as f64).collect();
                return t.cross_entropy(a, &targets, Some(&weights));
            }
            _ => unreachable!(),
        };
        squared(t, out)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = seeded(seed);
            let rows = rng.random_range(1..4);
            let s = store_with(
                &mut rng,
                &[("a", rows, 4), ("b", rows, 4), ("w", 4, 3), ("bias", 1, 3), ("col", rows, 1)],
            );
            for op in 0..16 {
                let err = finite_diff_check(|t, s| op_loss(op, t, s), &s, 1e-5).unwrap();
                assert!(err < 1e-4, "seed {seed} op {op}: {err}");
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = seeded(9);
        for _ in 0..50 {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::uniform(3, 7, 30.0, &mut rng));
            let y = t.softmax(x).unwrap();
            let v = t.value(y);
            for r in 0..3 {
                assert!(v.row_slice(r).iter().all(|p| *p >= 0.0));
                assert!((v.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = seeded(4);
        let input = Tensor::filled(1, 50, 2.0);
        let masks = 10_000;
        let mut total = 0.0;
        for _ in 0..masks {
            let mut t = Tape::new();
            let x = t.leaf(input.clone());
            let y = t.dropout(x, 0.3, true, &mut rng).unwrap();
            total += t.value(y).sum();
        }
        let mean = total / (masks * 50) as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "{mean}");
    }
}
