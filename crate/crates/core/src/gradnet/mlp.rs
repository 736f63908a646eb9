use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{affine, Tape, Var};
use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

/// How parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Trainable leaves; gradients are reported for them.
    Train,
    /// Constant copies; gradient can still flow through the input.
    Frozen,
}

/// Dense network with tanh hidden layers.
///
/// Weights live in a [`ParamStore`] under `{prefix}.l{i}.w` (shape
/// `[out, in]`) and `{prefix}.l{i}.b`. The struct itself only remembers
/// tensor indices, so one `Mlp` can read any store with the same layout
/// (online and target copies share it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    output: Activation,
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Registers the layers in `store`, initialized uniformly in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(config(format!("mlp {prefix}: invalid widths {widths:?}")));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f32).sqrt();
            let w = store.add_uniform(&format!("{prefix}.l{i}.w"), &[fan_out, fan_in], bound, rng)?;
            let b = store.add_uniform(&format!("{prefix}.l{i}.b"), &[fan_out], bound, rng)?;
            layers.push((w, b));
        }
        Ok(Mlp {
            widths: widths.to_vec(),
            output,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Indices of every `(weight, bias)` pair, input layer first.
    pub fn layers(&self) -> &[(usize, usize)] {
        &self.layers
    }

    fn activate(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Tanh
        }
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, bind: Bind) -> Var {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = match bind {
                Bind::Train => (tape.param(store, w), tape.param(store, b)),
                Bind::Frozen => (tape.frozen(store, w), tape.frozen(store, b)),
            };
            h = tape.linear(wv, bv, h);
            if self.activate(i) == Activation::Tanh {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Straight evaluation without a tape; bitwise equal to [`Mlp::forward`].
    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "mlp input width");
        let mut h = x.to_vec();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = affine(&store.tensor(w).data, &store.tensor(b).data, &h);
            if self.activate(i) == Activation::Tanh {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        h
    }

    /// Checked forward on a fresh tape with trainable leaves.
    pub fn forward_tape(&self, store: &ParamStore, input: &[f64]) -> Result<(Tape, Var)> {
        if input.len() != self.input_dim() {
            return Err(config(format!(
                "mlp expects input width {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut tape = Tape::new();
        let x = tape.input(input.to_vec());
        let y = self.forward(&mut tape, store, x, Bind::Train);
        Ok((tape, y))
    }

    /// Zeroes the final layer so the output is the activation of zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let &(w, b) = self.layers.last().unwrap();
        store.tensor_mut(w).data.fill(0.0);
        store.tensor_mut(b).data.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new("m");
        let m = Mlp::new(&mut s, "id", &[3, 3], Activation::Identity, &mut rng).unwrap();
        let (w, b) = m.layers()[0];
        s.tensor_mut(w).data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        s.tensor_mut(b).data = vec![0.0; 3];
        assert_eq!(m.eval(&s, &[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new("m");
        let m = Mlp::new(&mut s, "z", &[4, 5, 2], Activation::Tanh, &mut rng).unwrap();
        for i in 0..s.len() {
            s.tensor_mut(i).data.fill(0.0);
        }
        assert_eq!(m.eval(&s, &[0.3, -1.0, 2.0, 9.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn matches_straight_line_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new("m");
        let m = Mlp::new(&mut s, "net", &[3, 4, 2], Activation::Identity, &mut rng).unwrap();
        let x = [0.5, -0.25, 1.5];
        // independent scalar recomputation
        let w0 = &s.tensor(0).data;
        let b0 = &s.tensor(1).data;
        let w1 = &s.tensor(2).data;
        let b1 = &s.tensor(3).data;
        let mut h = [0.0f64; 4];
        for i in 0..4 {
            let mut z = b0[i] as f64;
            for j in 0..3 {
                z += w0[i * 3 + j] as f64 * x[j];
            }
            h[i] = z.tanh();
        }
        let mut want = [0.0f64; 2];
        for i in 0..2 {
            let mut z = b1[i] as f64;
            for j in 0..4 {
                z += w1[i * 4 + j] as f64 * h[j];
            }
            want[i] = z;
        }
        let got = m.eval(&s, &x);
        for i in 0..2 {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
        let (tape, y) = m.forward_tape(&s, &x).unwrap();
        assert_eq!(tape.value(y), got.as_slice());
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new("m");
        let m = Mlp::new(&mut s, "n", &[3, 2], Activation::Tanh, &mut rng).unwrap();
        assert!(matches!(m.forward_tape(&s, &[1.0]), Err(crate::Error::Config(_))));
    }
}
