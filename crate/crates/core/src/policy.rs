//! Base policy on the policy latent `Z^p`.
//!
//! Discrete: a softmax over action logits. Continuous: a tanh-squashed
//! Gaussian, `a = tanh(m(z) + sigma * eps)`, with a state-independent
//! learned log standard deviation.

use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{health, Result};
use crate::gradnet::{softmax, Activation, Bind, Mlp, ParamStore, Tape, Var};
use crate::sim::{Action, EnvKind};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;
const LOG_STD_INIT: f32 = -0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    kind: EnvKind,
    net: Mlp,
    log_std: Option<usize>,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, kind: EnvKind, d_m: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let out = if kind.is_discrete() { kind.action_dim() } else { 1 };
        let net = Mlp::new(store, "pi", &[d_m, hidden, out], Activation::Identity, rng)?;
        let log_std = if kind.is_discrete() {
            None
        } else {
            Some(store.add("pi.log_std", &[1], vec![LOG_STD_INIT])?)
        };
        Ok(Policy { kind, net, log_std })
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    /// Discrete action probabilities `pi(. | z_p)`.
    pub fn probs(&self, store: &ParamStore, zp: &[f64]) -> Result<Vec<f64>> {
        let p = softmax(&self.net.eval(store, zp));
        if p.iter().any(|v| !v.is_finite()) {
            return Err(health("non-finite policy output"));
        }
        Ok(p)
    }

    /// Continuous: pre-squash mean and standard deviation.
    pub fn gaussian(&self, store: &ParamStore, zp: &[f64]) -> Result<(f64, f64)> {
        let m = self.net.eval(store, zp)[0];
        let ls = (store.tensor(self.log_std.expect("continuous policy")).data[0] as f64).clamp(LOG_STD_MIN, LOG_STD_MAX);
        if !m.is_finite() {
            return Err(health("non-finite policy mean"));
        }
        Ok((m, ls.exp()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, store: &ParamStore, zp: &[f64], rng: &mut R) -> Result<Action> {
        if self.kind.is_discrete() {
            let p = self.probs(store, zp)?;
            let dist = WeightedIndex::new(&p).map_err(|e| health(format!("policy weights: {e}")))?;
            Ok(Action::Discrete(dist.sample(rng)))
        } else {
            let (m, s) = self.gaussian(store, zp)?;
            let eps: f64 = StandardNormal.sample(rng);
            Ok(Action::Continuous((m + s * eps).tanh()))
        }
    }

    /// Logits (discrete) or pre-squash mean (continuous) on the tape.
    pub fn head_on(&self, tape: &mut Tape, store: &ParamStore, zp: Var, bind: Bind) -> Var {
        self.net.forward(tape, store, zp, bind)
    }

    /// Clamped log standard deviation on the tape.
    pub fn log_std_on(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let v = tape.param(store, self.log_std.expect("continuous policy"));
        tape.clamp(v, LOG_STD_MIN, LOG_STD_MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn discrete_probs_sum_to_one() {
        let mut s = ParamStore::new("policy");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Policy::new(&mut s, EnvKind::Gridworld, 4, 8, &mut rng).unwrap();
        let pr = p.probs(&s, &[0.1, -0.2, 0.3, 0.0]).unwrap();
        assert_eq!(pr.len(), 5);
        assert!((pr.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(p.sample(&s, &[0.0; 4], &mut rng).unwrap(), Action::Discrete(i) if i < 5));
    }

    #[test]
    fn continuous_samples_stay_in_range() {
        let mut s = ParamStore::new("policy");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = Policy::new(&mut s, EnvKind::Velocity, 4, 8, &mut rng).unwrap();
        for _ in 0..1000 {
            let Action::Continuous(a) = p.sample(&s, &[0.5, -0.2, 0.3, 0.9], &mut rng).unwrap() else { panic!() };
            assert!((-1.0..=1.0).contains(&a));
        }
        let (_, sd) = p.gaussian(&s, &[0.0; 4]).unwrap();
        assert!((sd - (LOG_STD_INIT as f64).exp()).abs() < 1e-12);
    }
}
