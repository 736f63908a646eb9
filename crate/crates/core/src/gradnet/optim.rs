use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{config, health, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected adaptive-moment update of every tensor in `store`.
///
/// Tensors without a gradient entry are treated as having zero gradient.
/// Any non-finite gradient aborts the step before anything is written.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(config(format!("adam state does not match store {}", store.group())));
    }
    for i in 0..store.len() {
        if let Some(g) = grads.of(store, i) {
            if g.len() != store.tensor(i).data.len() {
                return Err(config(format!("gradient for {}/{} has wrong length", store.group(), store.tensor(i).name)));
            }
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(health(format!(
                    "non-finite gradient {}/{}[{j}] = {}",
                    store.group(),
                    store.tensor(i).name,
                    g[j]
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..store.len() {
        let g = grads.of(store, i).map(<[f64]>::to_vec);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = &mut store.tensor_mut(i).data;
        for j in 0..data.len() {
            let gj = g.as_ref().map_or(0.0, |g| g[j]);
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] = (data[j] as f64 - cfg.lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
    }
    store.bump_version();
    store.check_finite()
}

/// `target <- (1 - tau) * target + tau * online`, elementwise.
pub fn polyak_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(config(format!("polyak tau {tau} outside [0, 1]")));
    }
    if !target.same_layout(online) {
        return Err(config(format!(
            "polyak: {} and {} have different layouts",
            target.group(),
            online.group()
        )));
    }
    for i in 0..online.len() {
        let src = &online.tensor(i).data;
        let dst = &mut target.tensor_mut(i).data;
        for (d, s) in dst.iter_mut().zip(src) {
            *d = ((1.0 - tau) * *d as f64 + tau * *s as f64) as f32;
        }
    }
    target.bump_version();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new("p");
        s.add("x", &[1], vec![v]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::default();
        g.insert(s.key(0), vec![0.0]);
        adam_step(&mut s, &mut st, &g, &AdamConfig::default()).unwrap();
        assert!((s.tensor(0).data[0] - 0.7).abs() as f64 <= 1e-12);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Closed form: mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps).
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::default();
        g.insert(s.key(0), vec![1.0]);
        let cfg = AdamConfig { lr: 0.001, ..Default::default() };
        adam_step(&mut s, &mut st, &g, &cfg).unwrap();
        let moved = -(s.tensor(0).data[0] as f64);
        assert!((moved - 0.001).abs() <= 1e-9, "{moved}");
    }

    #[test]
    fn cloned_state_is_bitwise_deterministic() {
        let mut s = scalar_store(0.3);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::default();
        g.insert(s.key(0), vec![0.25]);
        let (mut s2, mut st2) = (s.clone(), st.clone());
        for _ in 0..5 {
            adam_step(&mut s, &mut st, &g, &AdamConfig::default()).unwrap();
            adam_step(&mut s2, &mut st2, &g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.tensor(0).data[0].to_bits(), s2.tensor(0).data[0].to_bits());
    }

    #[test]
    fn nan_gradient_aborts_without_writing() {
        let mut s = scalar_store(0.3);
        let mut st = AdamState::new(&s);
        let mut g = Gradients::default();
        g.insert(s.key(0), vec![f64::NAN]);
        assert!(adam_step(&mut s, &mut st, &g, &AdamConfig::default()).is_err());
        assert_eq!(s.tensor(0).data[0], 0.3);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn polyak_endpoints_and_midpoint() {
        let online = scalar_store(2.0);
        let mut t = scalar_store(0.0);
        polyak_update(&mut t, &online, 0.5).unwrap();
        assert_eq!(t.tensor(0).data[0], 1.0);
        polyak_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.tensor(0).data[0], 1.0);
        polyak_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t.tensor(0).data[0], 2.0);
    }

    #[test]
    fn polyak_shape_mismatch() {
        let online = scalar_store(2.0);
        let mut t = ParamStore::new("q");
        t.add("x", &[2], vec![0.0; 2]).unwrap();
        assert!(matches!(polyak_update(&mut t, &online, 0.5), Err(crate::Error::Config(_))));
    }
}
