//! Latent dynamics with reward and cost heads, and the alignment losses
//! between the two projection heads.
//!
//! One trunk reads `(z_w, action)`; its last layer emits the predictive mean,
//! the per-dimension log standard deviation, `R_hat` and `C_hat`. The next
//! latent is modeled as a diagonal Gaussian.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecParams};
use crate::error::{contract, health, Result};
use crate::gradnet::{Activation, Bind, Mlp, ParamStore, Tape, Var};

pub const MIN_STD: f64 = 0.1;
pub const MAX_STD: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPrediction {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
}

impl LatentPrediction {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|v| v.exp()).collect()
    }

    /// `log p_z(target)` under the diagonal Gaussian.
    pub fn log_density(&self, target: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .zip(target)
            .map(|((m, ls), x)| {
                let s = ls.exp();
                -0.5 * ((x - m) / s).powi(2) - ls - 0.5 * (2.0 * PI).ln()
            })
            .sum()
    }
}

/// Tape handles of one prediction.
#[derive(Debug, Clone, Copy)]
pub struct PredictionVars {
    pub mean: Var,
    pub log_std: Var,
    pub reward: Var,
    pub cost: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    d_m: usize,
    action_dim: usize,
    net: Mlp,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        d_m: usize,
        action_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let net = Mlp::new(store, "dyn", &[d_m + action_dim, hidden, 2 * d_m + 2], Activation::Identity, rng)?;
        Ok(WorldModel { d_m, action_dim, net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn split(&self, out: &[f64]) -> LatentPrediction {
        let d = self.d_m;
        LatentPrediction {
            mean: out[..d].to_vec(),
            log_std: out[d..2 * d]
                .iter()
                .map(|v| v.clamp(MIN_STD.ln(), MAX_STD.ln()))
                .collect(),
            reward: out[2 * d],
            cost: out[2 * d + 1],
        }
    }

    pub fn predict(&self, store: &ParamStore, zw: &[f64], action: &[f64]) -> Result<LatentPrediction> {
        if zw.iter().any(|v| !v.is_finite()) {
            return Err(health("non-finite world latent"));
        }
        let mut x = zw.to_vec();
        x.extend_from_slice(action);
        let out = self.net.eval(store, &x);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(health("non-finite world-model output"));
        }
        Ok(self.split(&out))
    }

    /// Predictive mean `f_z(z_w, a)`.
    pub fn mean(&self, store: &ParamStore, zw: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict(store, zw, action)?.mean)
    }

    pub fn predict_on(&self, tape: &mut Tape, store: &ParamStore, zw: Var, action: &[f64], bind: Bind) -> PredictionVars {
        let a = tape.input(action.to_vec());
        let x = tape.concat(&[zw, a]);
        let out = self.net.forward(tape, store, x, bind);
        let d = self.d_m;
        let raw = tape.slice(out, d, d);
        PredictionVars {
            mean: tape.slice(out, 0, d),
            log_std: tape.clamp(raw, MIN_STD.ln(), MAX_STD.ln()),
            reward: tape.slice(out, 2 * d, 1),
            cost: tape.slice(out, 2 * d + 1, 1),
        }
    }
}

/// `-log p_z(target)` for one prediction on the tape.
pub fn nll_on(tape: &mut Tape, p: &PredictionVars, target: Var) -> Var {
    let diff = tape.sub(target, p.mean);
    let inv = tape.scale(p.log_std, -1.0);
    let inv = tape.exp(inv);
    let zsc = tape.mul(diff, inv);
    let sq = tape.square(zsc);
    let half = tape.scale(sq, 0.5);
    let per = tape.add(half, p.log_std);
    let per = tape.shift(per, 0.5 * (2.0 * PI).ln());
    tape.sum(per)
}

/// One world-model training example.
#[derive(Debug, Clone, PartialEq)]
pub struct WmSample {
    pub zw: Vec<f64>,
    pub action: Vec<f64>,
    pub zw_next: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    /// Include the dynamics term (false across episode boundaries).
    pub dynamics: bool,
}

/// Per-sample pieces of `L_wm`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmTerms {
    pub nll: f64,
    pub reward_sq: f64,
    pub cost_sq: f64,
}

pub fn wm_terms(p: &LatentPrediction, s: &WmSample) -> WmTerms {
    WmTerms {
        nll: if s.dynamics { -p.log_density(&s.zw_next) } else { 0.0 },
        reward_sq: (p.reward - s.reward).powi(2),
        cost_sq: (p.cost - s.cost).powi(2),
    }
}

/// `L_wm = mean[m * -log p_z] + mean[(R_hat - R)^2] + mean[(C_hat - C)^2]`
/// with `m = 0` across episode boundaries. All means divide by the batch size.
pub fn wm_loss(model: &WorldModel, store: &ParamStore, batch: &[WmSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("wm_loss on an empty batch"));
    }
    let n = batch.len() as f64;
    let (mut nll, mut r, mut c) = (0.0, 0.0, 0.0);
    for s in batch {
        let t = wm_terms(&model.predict(store, &s.zw, &s.action)?, s);
        nll += t.nll;
        r += t.reward_sq;
        c += t.cost_sq;
    }
    Ok((nll + r + c) / n)
}

/// `||zp - sg(zw)||^2`, with `zp` already computed from a detached `Z`.
pub fn distill_on(tape: &mut Tape, zp: Var, zw: Var) -> Var {
    let zw = tape.stop_grad(zw);
    tape.sq_dist(zp, zw)
}

/// `||(zp_next - zp) - sg(zw_next - zw)||^2`, with both policy views
/// computed from detached latents.
pub fn conj_on(tape: &mut Tape, zp: Var, zp_next: Var, zw: Var, zw_next: Var) -> Var {
    let dp = tape.sub(zp_next, zp);
    let dw = tape.sub(zw_next, zw);
    let dw = tape.stop_grad(dw);
    tape.sq_dist(dp, dw)
}

/// Batch mean of `||g_psi(z) - g_omega(z)||^2` over detached latents.
pub fn distill_loss(codec: &Codec, p: CodecParams<'_>, zs: &[Vec<f64>]) -> Result<f64> {
    if zs.is_empty() {
        return Err(contract("distill_loss on an empty batch"));
    }
    let total: f64 = zs
        .iter()
        .map(|z| {
            let (zw, zp) = codec.project(p, z);
            zp.iter().zip(&zw).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(total / zs.len() as f64)
}

/// Batch mean of the difference-of-differences alignment over pairs
/// `(z, z')` of detached latents.
pub fn conjugacy_loss(codec: &Codec, p: CodecParams<'_>, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(contract("conjugacy_loss on an empty batch"));
    }
    let total: f64 = pairs
        .iter()
        .map(|(z, z1)| {
            let (w0, p0) = codec.project(p, z);
            let (w1, p1) = codec.project(p, z1);
            (0..w0.len())
                .map(|i| ((p1[i] - p0[i]) - (w1[i] - w0[i])).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(total / pairs.len() as f64)
}

/// Policy-projection gradient of the distillation loss for one latent.
pub fn distill_tape(codec: &Codec, p: CodecParams<'_>, z: &[f64]) -> (Tape, Var) {
    let mut tape = Tape::new();
    let zd = tape.input(z.to_vec());
    let zw = codec.world_on(&mut tape, p.world, zd, Bind::Train);
    let zp = codec.policy_on(&mut tape, p.policy, zd, Bind::Train);
    let l = distill_on(&mut tape, zp, zw);
    (tape, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (WorldModel, ParamStore) {
        let mut s = ParamStore::new("dynamics");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = WorldModel::new(&mut s, 3, 2, 4, &mut rng).unwrap();
        (m, s)
    }

    #[test]
    fn zero_net_gives_bias_image() {
        let (m, mut s) = model();
        m.net().zero_output_layer(&mut s);
        let &(_, b) = m.net().layers().last().unwrap();
        s.tensor_mut(b).data = vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0, 0.5, -0.5];
        let p = m.predict(&s, &[0.3, 0.1, -0.2], &[1.0, 0.0]).unwrap();
        assert_eq!(p.mean, vec![0.1f32 as f64, 0.2f32 as f64, 0.3f32 as f64]);
        assert_eq!(p.std(), vec![(-1.0f64).exp(), 1.0, 1.0f64.exp()]);
        assert_eq!((p.reward, p.cost), (0.5, -0.5));
    }

    #[test]
    fn density_at_mean() {
        let p = LatentPrediction {
            mean: vec![0.5, -1.0],
            log_std: vec![0.2, -0.3],
            reward: 0.0,
            cost: 0.0,
        };
        let want: f64 = p.log_std.iter().map(|ls| -ls - 0.5 * (2.0 * PI).ln()).sum();
        assert!((p.log_density(&p.mean.clone()) - want).abs() < 1e-15);
    }

    #[test]
    fn std_is_clamped() {
        let (m, mut s) = model();
        m.net().zero_output_layer(&mut s);
        let &(_, b) = m.net().layers().last().unwrap();
        s.tensor_mut(b).data = vec![0.0, 0.0, 0.0, -50.0, 50.0, 0.0, 0.0, 0.0];
        let p = m.predict(&s, &[0.0; 3], &[0.0, 0.0]).unwrap();
        assert!((p.std()[0] - MIN_STD).abs() < 1e-15);
        assert!((p.std()[1] - MAX_STD).abs() < 1e-12);
    }

    #[test]
    fn reward_term_half() {
        let (m, mut s) = model();
        for i in 0..s.len() {
            s.tensor_mut(i).data.fill(0.0);
        }
        let mk = |r: f64| WmSample {
            zw: vec![0.0; 3],
            action: vec![0.0, 1.0],
            zw_next: vec![0.0; 3],
            reward: r,
            cost: 0.0,
            dynamics: false,
        };
        let l = wm_loss(&m, &s, &[mk(0.0), mk(1.0)]).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        assert!(matches!(wm_loss(&m, &s, &[]), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn perfect_predictor_has_zero_squared_error() {
        let (m, s) = model();
        let data: Vec<WmSample> = [[0.1, 0.2, 0.3], [-0.4, 0.0, 0.9]]
            .iter()
            .map(|z| {
                let p = m.predict(&s, z, &[0.0, 1.0]).unwrap();
                WmSample {
                    zw: z.to_vec(),
                    action: vec![0.0, 1.0],
                    zw_next: p.mean.clone(),
                    reward: p.reward,
                    cost: p.cost,
                    dynamics: true,
                }
            })
            .collect();
        for d in &data {
            let t = wm_terms(&m.predict(&s, &d.zw, &d.action).unwrap(), d);
            assert_eq!((t.reward_sq, t.cost_sq), (0.0, 0.0));
        }
    }

    #[test]
    fn tape_nll_matches_density() {
        let (m, s) = model();
        let p = m.predict(&s, &[0.2, -0.1, 0.4], &[1.0, 0.0]).unwrap();
        let target = [0.3, 0.3, -0.7];
        let mut tape = Tape::new();
        let zw = tape.input(vec![0.2, -0.1, 0.4]);
        let pv = m.predict_on(&mut tape, &s, zw, &[1.0, 0.0], Bind::Train);
        let t = tape.input(target.to_vec());
        let l = nll_on(&mut tape, &pv, t);
        assert!((tape.scalar(l) + p.log_density(&target)).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_mean_matches_prediction() {
        use rand_distr::{Distribution, StandardNormal};
        let (m, s) = model();
        let p = m.predict(&s, &[0.2, -0.1, 0.4], &[1.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let std = p.std();
        let mut acc = vec![0.0; 3];
        for _ in 0..n {
            for i in 0..3 {
                let e: f64 = StandardNormal.sample(&mut rng);
                acc[i] += p.mean[i] + std[i] * e;
            }
        }
        for i in 0..3 {
            let mc = acc[i] / n as f64;
            assert!((mc - p.mean[i]).abs() <= 3.0 * std[i] / (n as f64).sqrt());
        }
    }
}
