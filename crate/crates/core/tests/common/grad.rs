//! Finite-difference gradient checks shared by the test targets.

use qbarrier::gradnet::{Gradients, ParamStore, Var};
use qbarrier::model::{Model, ModelSpec, Stores};
use qbarrier::sim::{Action, EnvKind};
use qbarrier::trainer::{prepare, sample_tape, LossSettings, LossVars, Prepared, SampleInput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const STEP: f32 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub enum Loss {
    Wm,
    Critic,
    Actor,
    Distill,
    Conj,
}

impl Loss {
    pub const ALL: [Loss; 5] = [Loss::Wm, Loss::Critic, Loss::Actor, Loss::Distill, Loss::Conj];

    pub fn var(self, v: &LossVars) -> Var {
        match self {
            Loss::Wm => v.wm,
            Loss::Critic => v.critic,
            Loss::Actor => v.actor,
            Loss::Distill => v.distill,
            Loss::Conj => v.conj,
        }
    }

    /// Parameter groups the loss is meant to train.
    pub fn groups(self) -> &'static [&'static str] {
        match self {
            Loss::Wm => &["encoder", "world_proj", "dynamics"],
            Loss::Critic => &["encoder", "world_proj", "reward_critic", "cost_critic"],
            Loss::Actor => &["policy_proj", "policy"],
            Loss::Distill | Loss::Conj => &["policy_proj"],
        }
    }
}

pub fn spec(kind: EnvKind) -> ModelSpec {
    ModelSpec {
        kind,
        grid_size: 4,
        window: 2,
        d_z: 5,
        d_m: 3,
        encoder_hidden: 6,
        hidden: 6,
        ensemble: 3,
    }
}

pub fn settings() -> LossSettings {
    LossSettings {
        lambda_c: 0.7,
        k_c: 2,
        ..LossSettings::default()
    }
}

pub fn sample(model: &Model, action: Action, d_ctx: bool, seed: u64) -> Prepared {
    let n = model.codec.spec().input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = SampleInput {
        features: (0..n).map(|i| ((i * 7 + seed as usize) % 5) as f64 * 0.3 - 0.6).collect(),
        next_features: (0..n).map(|i| ((i * 3 + 1) % 7) as f64 * 0.2 - 0.5).collect(),
        action,
        reward: 0.4,
        cost: 1.0,
        done: false,
        d_ctx,
    };
    prepare(model, &settings(), input, &mut rng).unwrap()
}

pub fn store_mut<'a>(stores: &'a mut Stores, group: &str) -> &'a mut ParamStore {
    let i = Stores::GROUPS.iter().position(|g| *g == group).unwrap();
    stores.trainable_mut().into_iter().nth(i).unwrap()
}

pub fn loss_value(model: &Model, p: &Prepared, loss: Loss) -> f64 {
    let (tape, v) = sample_tape(model, p, &settings());
    tape.scalar(loss.var(&v))
}

pub fn analytic(model: &Model, p: &Prepared, loss: Loss) -> Gradients {
    let (mut tape, v) = sample_tape(model, p, &settings());
    tape.backward(loss.var(&v)).unwrap()
}

/// Worst per-tensor relative error `‖g - g_fd‖ / max(‖g‖, ‖g_fd‖)` over
/// the groups `loss` trains.
pub fn worst_error(model: &mut Model, p: &Prepared, loss: Loss) -> (f64, usize) {
    let grads = analytic(model, p, loss);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for group in loss.groups() {
        let store = store_mut(&mut model.stores, group).clone();
        for ti in 0..store.len() {
            let key = store.key(ti);
            let zeros = vec![0.0; store.tensor(ti).numel()];
            let g = grads.get(&key).unwrap_or(&zeros).to_vec();
            let mut fd = vec![0.0; g.len()];
            for (i, slot) in fd.iter_mut().enumerate() {
                let orig = store.tensor(ti).data[i];
                let (hi, lo) = (orig + STEP, orig - STEP);
                store_mut(&mut model.stores, group).tensor_mut(ti).data[i] = hi;
                let up = loss_value(model, p, loss);
                store_mut(&mut model.stores, group).tensor_mut(ti).data[i] = lo;
                let down = loss_value(model, p, loss);
                store_mut(&mut model.stores, group).tensor_mut(ti).data[i] = orig;
                *slot = (up - down) / (hi as f64 - lo as f64);
            }
            let diff = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = norm(&g).max(norm(&fd));
            if scale > 0.0 {
                worst = worst.max(diff / scale);
            }
            checked += g.len();
        }
    }
    (worst, checked)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

