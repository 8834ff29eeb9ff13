//! Small reverse-mode differentiation engine.
//!
//! Values are `f64` vectors; parameters are row-major matrices living in a
//! [`ParamStore`]. A [`Tape`] records one forward pass and replays it
//! backwards to fill parameter gradients.

mod gradcheck;
mod param;
mod tape;

pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use param::{AdamConfig, ParamId, ParamStore, Parameter};
pub use tape::{matvec_bias, NodeId, Tape};

use crate::error::{DailError, Result};
use crate::rng::Rng;

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(DailError::invalid("softmax of an empty vector"));
    }
    let mut out = vec![0.0; logits.len()];
    tape::softmax_into(logits, &mut out);
    Ok(out)
}

/// Shift-invariant `log Σ exp(v)`, computed around the maximum.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(DailError::invalid("logsumexp of an empty vector"));
    }
    Ok(tape::log_sum_exp(values))
}

/// Fully connected layer, weights uniform in ±1/sqrt(fan_in).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add_uniform(&format!("{name}.w"), fan_out, fan_in, bound, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), fan_out, 1, bound, rng)?;
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        tape.dense(store, self.w, self.b, x)
    }

    /// Same layer applied to an indicator vector with ones at `active`.
    pub fn forward_indicator(&self, tape: &mut Tape, store: &ParamStore, active: &[usize]) -> Result<NodeId> {
        tape.sparse_dense(store, self.w, self.b, active)
    }
}

/// Lookup table with rows drawn from N(0, 0.02²).
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let table = store.add_normal(name, rows, dim, 0.02, rng)?;
        Ok(Embedding { table, rows, dim })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, id: usize) -> Result<NodeId> {
        tape.embed(store, self.table, id)
    }
}

/// Elman cell `h' = tanh(W_h h + W_x x + b)`.
#[derive(Debug, Clone, Copy)]
pub struct RnnCell {
    pub w_h: ParamId,
    pub w_x: ParamId,
    pub b: ParamId,
    pub hidden: usize,
    pub input: usize,
}

impl RnnCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let bound_h = 0.5 / (hidden as f64).sqrt();
        let bound_x = 1.0 / (input as f64).sqrt();
        let w_h = store.add_uniform(&format!("{name}.w_h"), hidden, hidden, bound_h, rng)?;
        let w_x = store.add_uniform(&format!("{name}.w_x"), hidden, input, bound_x, rng)?;
        let b = store.add_uniform(&format!("{name}.b"), hidden, 1, bound_x, rng)?;
        Ok(RnnCell {
            w_h,
            w_x,
            b,
            hidden,
            input,
        })
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, h: NodeId, x: NodeId) -> Result<NodeId> {
        tape.rnn_step(store, self.w_h, self.w_x, self.b, h, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    #[test]
    fn dense_identity_and_constant() {
        let mut store = ParamStore::new();
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let w = store.add("w", 3, 3, eye).unwrap();
        let b = store.add_zeros("b", 3, 1).unwrap();
        let wz = store.add_zeros("wz", 3, 3).unwrap();
        let bc = store.add("bc", 3, 1, vec![2.5; 3]).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0]);
        let y = tape.dense(&store, w, b, x).unwrap();
        assert_eq!(tape.value(y), &[1.0, -2.0, 3.0]);
        let y = tape.dense(&store, wz, bc, x).unwrap();
        assert_eq!(tape.value(y), &[2.5, 2.5, 2.5]);
        let bad = tape.leaf(vec![1.0]);
        assert!(matches!(tape.dense(&store, w, b, bad), Err(DailError::Shape(_))));
    }

    #[test]
    fn dense_matches_triple_loop_oracle() {
        let mut r = rng::seeded(5);
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "l", 7, 5, &mut r).unwrap();
        let xs: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(xs.clone());
        let y = layer.forward(&mut tape, &store, x).unwrap();
        let w = &store.get(layer.w).values;
        let b = &store.get(layer.b).values;
        for i in 0..5 {
            let mut acc = b[i];
            for j in 0..7 {
                acc += w[i * 7 + j] * xs[j];
            }
            assert!((tape.value(y)[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_dense_equals_dense_on_one_hot() {
        let mut r = rng::seeded(2);
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "l", 6, 4, &mut r).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let dense = layer.forward(&mut tape, &store, x).unwrap();
        let sparse = layer.forward_indicator(&mut tape, &store, &[2]).unwrap();
        for (a, b) in tape.value(dense).iter().zip(tape.value(sparse)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_lookup_and_gradient_accumulation() {
        let mut store = ParamStore::new();
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let table = store.add("emb", 3, 3, eye).unwrap();
        let emb = Embedding { table, rows: 3, dim: 3 };
        let mut tape = Tape::new();
        let a = emb.forward(&mut tape, &store, 0).unwrap();
        assert_eq!(tape.value(a), &[1.0, 0.0, 0.0]);
        let b = emb.forward(&mut tape, &store, 0).unwrap();
        let pa = tape.pick(a, 1).unwrap();
        let pb = tape.pick(b, 1).unwrap();
        let s = tape.weighted_sum(&[(pa, 1.0), (pb, 1.0)]);
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(table).grad, vec![0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            emb.forward(&mut tape, &store, 3),
            Err(DailError::Index { index: 3, len: 3, .. })
        ));
    }

    #[test]
    fn rnn_step_zero_cases() {
        let mut store = ParamStore::new();
        let w_h = store.add_zeros("wh", 2, 2).unwrap();
        let w_x = store.add_zeros("wx", 2, 3).unwrap();
        let b = store.add("b", 2, 1, vec![0.3, -0.7]).unwrap();
        let bz = store.add_zeros("bz", 2, 1).unwrap();
        let mut tape = Tape::new();
        let h = tape.leaf(vec![0.5, -1.0]);
        let x = tape.leaf(vec![1.0, 2.0, 3.0]);
        let y = tape.rnn_step(&store, w_h, w_x, b, h, x).unwrap();
        assert_eq!(tape.value(y), &[0.3f64.tanh(), (-0.7f64).tanh()]);

        let mut r = rng::seeded(1);
        let cell = RnnCell::new(&mut store, "cell", 3, 2, &mut r).unwrap();
        let h0 = tape.leaf(vec![0.0; 2]);
        let x0 = tape.leaf(vec![0.0; 3]);
        let y = tape.rnn_step(&store, cell.w_h, cell.w_x, bz, h0, x0).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let bad = tape.leaf(vec![0.0; 4]);
        assert!(cell.step(&mut tape, &store, h0, bad).is_err());
    }

    #[test]
    fn softmax_and_logsumexp_examples() {
        let p = softmax(&[0.3; 4]).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
        assert!((logsumexp(&[0.0, 0.0, 0.0]).unwrap() - 3f64.ln()).abs() < 1e-15);
        let x = [0.1, -2.0, 3.5, 0.7];
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.25).collect();
        let d = logsumexp(&shifted).unwrap() - logsumexp(&x).unwrap();
        assert!((d - 123.25).abs() < 1e-12);
        assert!(softmax(&[]).is_err());
        assert!(logsumexp(&[]).is_err());
        // large inputs do not overflow
        assert!(logsumexp(&[1000.0, 1000.0]).unwrap().is_finite());
    }

    #[test]
    fn adam_zero_grad_leaves_values() {
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        store.adam_step(AdamConfig::with_lr(0.1), 1).unwrap();
        assert_eq!(store.get(w).values, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        store.get_mut(w).grad = vec![0.3, -7.0, 1e-3];
        store.adam_step(AdamConfig::with_lr(0.01), 1).unwrap();
        let v = &store.get(w).values;
        assert!((v[0] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((v[1] - (-2.0 + 0.01)).abs() < 1e-6);
        assert!((v[2] - (0.5 - 0.01)).abs() < 1e-4);
        assert_eq!(store.get(w).grad, vec![0.0; 3]);
    }

    #[test]
    fn adam_descends_a_parabola() {
        let mut store = ParamStore::new();
        let w = store.add("w", 1, 1, vec![1.0]).unwrap();
        for t in 1..=100 {
            let x = store.get(w).values[0];
            store.get_mut(w).grad[0] = 2.0 * x;
            store.adam_step(AdamConfig::with_lr(0.05), t).unwrap();
        }
        assert!(store.get(w).values[0].abs() < 0.3);
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut store = ParamStore::new();
        let w = store.add("layer.w", 1, 2, vec![1.0, 1.0]).unwrap();
        store.get_mut(w).grad[1] = f64::NAN;
        match store.adam_step(AdamConfig::with_lr(0.1), 1) {
            Err(DailError::Numeric(name)) => assert_eq!(name, "layer.w"),
            other => panic!("{other:?}"),
        }
        assert!(store.adam_step(AdamConfig::with_lr(0.1), 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let mut r = rng::seeded(3);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "a", 4, 3, &mut r).unwrap();
        Embedding::new(&mut store, "e", 5, 2, &mut r).unwrap();
        let mut bytes = Vec::new();
        store.write_checkpoint(&mut bytes).unwrap();
        let back = ParamStore::read_checkpoint(bytes.as_slice()).unwrap();
        assert!(back.same_values(&store));
        assert!(ParamStore::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ParamStore::read_checkpoint(bad.as_slice()).is_err());
        bytes.push(0);
        assert!(ParamStore::read_checkpoint(bytes.as_slice()).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut r = rng::seeded(11);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "l1", 5, 8, &mut r).unwrap();
        let cell = RnnCell::new(&mut store, "c", 8, 8, &mut r).unwrap();
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![0.1, 0.2, -0.3, 0.4, 0.5]);
            let u = l1.forward(&mut tape, store, x).unwrap();
            let h0 = tape.leaf(vec![0.0; 8]);
            let h1 = cell.step(&mut tape, store, h0, u).unwrap();
            let h2 = cell.step(&mut tape, store, h1, u).unwrap();
            tape.value(h2).to_vec()
        };
        let a = run(&store);
        let b = run(&store);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
