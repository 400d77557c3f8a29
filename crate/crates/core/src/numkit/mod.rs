//! Dense numerics for the models: tensors, a gradient tape, recurrent cells,
//! Adam, learning-rate decay, gradient clipping and a finite-difference
//! gradient oracle.

pub mod cells;
pub mod checkpoint;
pub mod gradcheck;
mod tape;
mod tensor;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cells::{GruWeights, LstmWeights};
pub use gradcheck::{finite_diff_check, relative_error};
pub(crate) use tape::sigmoid;
pub use tape::{Activation, Grads, Tape, Var};
pub use tensor::{matmul, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Storage precision of trained parameters. Arithmetic is always 64-bit;
/// with `F32` every parameter is rounded to single precision after each
/// optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    #[default]
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named trainable tensors with their Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
    precision: Precision,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        ParamStore { precision, ..Default::default() }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
        self.round_to_precision();
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let zeros = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()]).expect("same shape");
        let mut slot = Slot { m: zeros.clone(), v: zeros, value };
        if self.precision == Precision::F32 {
            round_f32(&mut slot.value);
        }
        self.slots.insert(name.into(), slot);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    fn round_to_precision(&mut self) {
        if self.precision == Precision::F32 {
            for slot in self.slots.values_mut() {
                round_f32(&mut slot.value);
            }
        }
    }

    /// One bias-corrected Adam update. Parameters absent from `grads` are
    /// left untouched, moments included.
    pub fn adam_step(&mut self, grads: &Grads, lr: f64, cfg: &AdamConfig) -> Result<(), NumError> {
        for (name, g) in grads {
            let slot = self.slots.get(name).ok_or_else(|| NumError::UnknownParameter(name.clone()))?;
            if !slot.value.same_shape(g) {
                return Err(NumError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: {:?} vs {:?}", slot.value.shape(), g.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads {
            let slot = self.slots.get_mut(name).expect("checked above");
            let (value, m, v) = (slot.value.data_mut(), slot.m.data_mut(), slot.v.data_mut());
            for i in 0..value.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            if self.precision == Precision::F32 {
                round_f32(&mut slot.value);
            }
            if !slot.value.is_finite() {
                return Err(NumError::NonFiniteValue { op: "adam_step" });
            }
        }
        Ok(())
    }
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

/// Power decay: `lr0 / (1 + decay * t)`, `t` in epochs.
pub fn lr_schedule(lr0: f64, decay: f64, t: usize) -> f64 {
    lr0 / (1.0 + decay * t as f64)
}

/// Element-wise clamp of every gradient to `[-c, c]`.
pub fn clip_gradients(grads: &mut Grads, c: f64) {
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grads(name: &str, values: Vec<f64>) -> Grads {
        let mut g = Grads::new();
        g.insert(name.to_string(), Tensor::row(values));
        g
    }

    fn store64(name: &str, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::with_precision(Precision::F64);
        s.insert(name, Tensor::row(values));
        s
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut s = store64("p", vec![0.0]);
        s.adam_step(&grads("p", vec![1.0]), 0.001, &AdamConfig::default()).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((s.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_two_steps_by_hand() {
        let mut s = store64("p", vec![0.5]);
        let cfg = AdamConfig::default();
        let g = grads("p", vec![0.3]);
        s.adam_step(&g, 0.01, &cfg).unwrap();
        s.adam_step(&g, 0.01, &cfg).unwrap();
        // step 1: m = 0.03, v = 0.00009; m_hat = 0.3, v_hat = 0.09 -> delta 0.01*0.3/(0.3+eps)
        // step 2: m = 0.057, v = 0.00017991; m_hat = 0.057/0.19 = 0.3,
        //         v_hat = 0.00017991/0.001999 = 0.09 -> same delta
        let d = 0.01 * 0.3 / (0.3 + 1e-8);
        assert!((s.get("p").unwrap().data()[0] - (0.5 - 2.0 * d)).abs() < 1e-12);
        assert_eq!(s.step(), 2);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut s = store64("p", vec![0.0, 1.0]);
        let err = s.adam_step(&grads("p", vec![1.0]), 0.1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, NumError::ShapeMismatch { .. }));
        assert!(s.adam_step(&grads("q", vec![1.0]), 0.1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn f32_storage_rounds() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::row(vec![0.1]));
        assert_eq!(s.get("p").unwrap().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0.01, 0.0, 50), 0.01);
        assert!((lr_schedule(0.001, 1e-5, 100) - 0.001 / 1.001).abs() < 1e-18);
        assert!((lr_schedule(0.001, 1e-5, 100) - 0.000_999_001).abs() < 1e-9);
        assert!((lr_schedule(0.01, 0.002, 5) - 0.01 / 1.01).abs() < 1e-18);
    }

    #[test]
    fn clip_values() {
        let mut g = grads("p", vec![7.2, -3.0, -12.0]);
        clip_gradients(&mut g, 5.0);
        assert_eq!(g["p"].data(), &[5.0, -3.0, -5.0]);
    }

    proptest! {
        #[test]
        fn zero_gradient_adam_is_identity(values in prop::collection::vec(-10.0f64..10.0, 1..20), lr in 0.0f64..1.0) {
            let mut s = store64("p", values.clone());
            let n = values.len();
            s.adam_step(&grads("p", vec![0.0; n]), lr, &AdamConfig::default()).unwrap();
            prop_assert_eq!(s.get("p").unwrap().data(), &values[..]);
        }

        #[test]
        fn clipping_bounds(values in prop::collection::vec(-100.0f64..100.0, 1..50)) {
            let mut g = grads("p", values.clone());
            clip_gradients(&mut g, 5.0);
            for (out, inp) in g["p"].data().iter().zip(&values) {
                prop_assert!(out.abs() <= 5.0);
                if inp.abs() <= 5.0 {
                    prop_assert_eq!(out, inp);
                }
            }
        }
    }
}
