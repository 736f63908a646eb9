//! Collection and update cycle.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use super::losses::{lagrange_update, prepare, sample_tape, LossSettings, LossValues, SampleInput};
use crate::config::RunConfig;
use crate::error::{contract, health, Error, Result};
use crate::gradnet::{adam_step, clip_global_norm, polyak_update, AdamState, Gradients};
use crate::model::Model;
use crate::seeding::{self, tag};
use crate::shield::{select_action, ShieldConfig, ShieldMode};
use crate::sim::{run_context, sample_task, Action, DecisionPoint, EnvKind, Transition, GRID_ACTIONS};

pub const OPTIM_FILE: &str = "optim.bin";
pub const BUFFER_FILE: &str = "buffer.json";

/// Losses of one update batch (means over the batch) and the gradient norm
/// before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(flatten)]
    pub losses: LossValues,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub batches: Vec<LossReport>,
    /// Multiplier after this epoch's dual step.
    pub lambda_c: f64,
    pub collect_steps: usize,
    pub collect_episodes: usize,
    /// Per-episode means over the collected episodes.
    pub collect_return: f64,
    pub collect_cost: f64,
    pub collect_delta: f64,
}

impl EpochReport {
    /// Mean of the batch reports; `None` without update batches.
    pub fn mean_losses(&self) -> Option<LossReport> {
        if self.batches.is_empty() {
            return None;
        }
        let n = self.batches.len() as f64;
        let mut acc = LossValues::default();
        let mut g = 0.0;
        for b in &self.batches {
            acc.add(&b.losses);
            g += b.grad_norm;
        }
        Some(LossReport {
            losses: acc.scaled(1.0 / n),
            grad_norm: g / n,
        })
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    /// One state per trainable group, in `Stores::trainable` order.
    pub adam: Vec<AdamState>,
    pub lambda_c: f64,
    /// Completed epochs.
    pub epoch: usize,
    pub buffer: ReplayBuffer,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let model = Model::new(cfg.model_spec(), cfg.seed)?;
        let adam = model.stores.trainable().iter().map(|s| AdamState::new(s)).collect();
        Ok(Trainer {
            lambda_c: cfg.lambda_init,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            cfg,
            model,
            adam,
            epoch: 0,
        })
    }

    pub fn settings(&self) -> LossSettings {
        let c = &self.cfg;
        LossSettings {
            lambda_critic: c.lambda_critic,
            lambda_wm: c.lambda_wm,
            lambda_distill: c.lambda_distill,
            lambda_conj: c.lambda_conj,
            alpha_bc: c.alpha_bc,
            awbc_clip: c.awbc_clip,
            lambda_c: self.lambda_c,
            gamma_r: c.gamma_r,
            k_c: c.k_c,
            cost_target: c.cost_target,
            detach_wm_target: c.detach_wm_target,
            actor_to_encoder: c.actor_to_encoder,
            critic_to_encoder: c.critic_to_encoder,
        }
    }

    /// Runs contexts with the current policy until at least
    /// `collect_steps` transitions were gathered.
    pub fn collect(&self) -> Result<Vec<Vec<Transition>>> {
        let cfg = &self.cfg;
        let horizon = cfg.horizon();
        let per_context = cfg.episodes * horizon;
        let mut out = Vec::new();
        let (mut steps, mut next_id) = (0usize, 0u64);
        while steps < cfg.collect_steps {
            let n = (cfg.collect_steps - steps).div_ceil(per_context).max(1) as u64;
            let ids: Vec<u64> = (next_id..next_id + n).collect();
            next_id += n;
            let runs = ids
                .par_iter()
                .map(|c| self.collect_one(*c))
                .collect::<Result<Vec<_>>>()?;
            for r in runs {
                steps += r.len();
                out.push(r);
            }
        }
        Ok(out)
    }

    fn collect_one(&self, c: u64) -> Result<Vec<Transition>> {
        let cfg = &self.cfg;
        let e = self.epoch as u64;
        let task_seed = seeding::derive(cfg.seed, &[tag::TASK, e, c]);
        let task = sample_task(cfg.env, cfg.alpha_train, cfg.grid_size, cfg.n_obstacles, task_seed)?;
        let (lo, hi) = cfg.budget_range();
        let delta = if hi > lo {
            seeding::stream(cfg.seed, &[tag::BUDGET, e, c]).random_range(lo..=hi)
        } else {
            lo
        };
        let mut rng = seeding::stream(cfg.seed, &[tag::COLLECT, e, c]);
        let shield = ShieldConfig {
            mode: cfg.train_shield,
            n_samples: cfg.n_samples,
            beta: cfg.shield_temperature,
        };
        let model = &self.model;
        let kind = cfg.env;
        let mut actor = |p: &DecisionPoint<'_>| -> Result<Action> {
            if rng.random::<f64>() < cfg.epsilon {
                return Ok(random_action(kind, &mut rng));
            }
            let w = model.codec.window(p.history, p.state, p.t, p.horizon);
            if shield.mode == ShieldMode::Off {
                let lat = model.encode(&w)?;
                model.policy.sample(&model.stores.policy, &lat.zp, &mut rng)
            } else {
                Ok(select_action(model, &w, p.budget, &shield, &mut rng)?.action)
            }
        };
        let id = (e << 32) | c;
        let run = run_context(&mut actor, &task, cfg.episodes, cfg.horizon(), delta, id).map_err(Error::from)?;
        Ok(run.transitions().cloned().collect())
    }

    /// One gradient step on a batch drawn with stream `(epoch, batch)`.
    pub fn update(&mut self, batch: usize) -> Result<LossReport> {
        let cfg = &self.cfg;
        if self.buffer.len() < cfg.batch_size {
            return Err(contract(format!(
                "replay buffer holds {} transitions, fewer than one batch of {}",
                self.buffer.len(),
                cfg.batch_size
            )));
        }
        let e = self.epoch as u64;
        let b = batch as u64;
        let mut rng = seeding::stream(cfg.seed, &[tag::BATCH, e, b]);
        let slots = self.buffer.sample(cfg.batch_size, &mut rng)?;
        let horizon = cfg.horizon();
        let inputs: Vec<SampleInput> = slots
            .iter()
            .map(|s| {
                let tr = self.buffer.get(*s);
                let (now, next) = self.buffer.windows(&self.model.codec, *s, horizon);
                SampleInput {
                    features: now.features(),
                    next_features: next.features(),
                    action: tr.action,
                    reward: tr.reward,
                    cost: tr.cost,
                    done: tr.done,
                    d_ctx: tr.d_ctx,
                }
            })
            .collect();
        let settings = self.settings();
        let scale = 1.0 / cfg.batch_size as f64;
        let model = &self.model;
        let seed = cfg.seed;
        let results = inputs
            .into_par_iter()
            .enumerate()
            .map(|(i, input)| {
                let mut r = seeding::stream(seed, &[tag::SAMPLE, e, b, i as u64]);
                let p = prepare(model, &settings, input, &mut r)?;
                let (mut tape, vars) = sample_tape(model, &p, &settings);
                let vals = LossValues::read(&tape, &vars);
                if !vals.total.is_finite() {
                    return Err(health(format!("non-finite loss {vals:?}")));
                }
                Ok((tape.backward_with(vars.total, &[scale])?, vals))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = Gradients::default();
        let mut sum = LossValues::default();
        for (g, v) in results {
            grads.merge(g);
            sum.add(&v);
        }
        if !grads.is_finite() {
            return Err(health("non-finite gradient"));
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        let adam_cfg = cfg.adam();
        for (store, state) in self.model.stores.trainable_mut().into_iter().zip(&mut self.adam) {
            adam_step(store, state, &grads, &adam_cfg)?;
        }
        let s = &mut self.model.stores;
        polyak_update(&mut s.target_policy, &s.policy, cfg.tau)?;
        polyak_update(&mut s.target_reward_critic, &s.reward_critic, cfg.tau)?;
        polyak_update(&mut s.target_cost_critic, &s.cost_critic, cfg.tau)?;
        Ok(LossReport {
            losses: sum.scaled(scale),
            grad_norm,
        })
    }

    /// Collection, dual step, then `update_batches` updates.
    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        let contexts = self.collect()?;
        let mut episodes = 0usize;
        let (mut ret, mut cost, mut delta, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for ctx in &contexts {
            steps += ctx.len();
            let d = ctx[0].budget;
            for tr in ctx {
                ret += tr.reward;
                cost += tr.cost;
                if tr.d_ctx {
                    episodes += 1;
                    delta += d;
                }
            }
        }
        let n = episodes.max(1) as f64;
        let (ret, cost, delta) = (ret / n, cost / n, delta / n);
        self.lambda_c = lagrange_update(self.lambda_c, self.cfg.lambda_lr, cost, delta);
        for ctx in contexts {
            self.buffer.push(ctx);
        }
        let mut batches = Vec::with_capacity(self.cfg.update_batches);
        for b in 0..self.cfg.update_batches {
            batches.push(self.update(b)?);
        }
        let report = EpochReport {
            epoch: self.epoch,
            batches,
            lambda_c: self.lambda_c,
            collect_steps: steps,
            collect_episodes: episodes,
            collect_return: ret,
            collect_cost: cost,
            collect_delta: delta,
        };
        self.epoch += 1;
        Ok(report)
    }

    /// Writes parameters, optimizer moments, the replay buffer and trainer
    /// state, so [`Trainer::resume`] continues exactly where this left off.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "epoch": self.epoch,
            "lambda_c": self.lambda_c,
            "config": self.cfg.to_toml(),
            "config_digest": self.cfg.digest(),
        });
        self.model.save(dir, meta)?;
        fs::write(dir.join(OPTIM_FILE), encode_adam(&self.adam))?;
        fs::write(dir.join(BUFFER_FILE), serde_json::to_vec(&self.buffer)?)?;
        Ok(())
    }

    pub fn resume(dir: &Path) -> Result<Self> {
        let (model, meta) = Model::load(dir)?;
        let text = meta["config"]
            .as_str()
            .ok_or_else(|| Error::Checkpoint("metadata lacks the run config".into()))?;
        let cfg = RunConfig::from_toml(text)?;
        if cfg.model_spec() != model.spec {
            return Err(Error::Checkpoint("config and checkpoint architectures differ".into()));
        }
        let epoch = meta["epoch"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("metadata lacks the epoch".into()))? as usize;
        let lambda_c = meta["lambda_c"]
            .as_f64()
            .ok_or_else(|| Error::Checkpoint("metadata lacks lambda_c".into()))?;
        let adam = decode_adam(&fs::read(dir.join(OPTIM_FILE))?, &model)?;
        let buffer: ReplayBuffer = serde_json::from_slice(&fs::read(dir.join(BUFFER_FILE))?)?;
        Ok(Trainer {
            cfg,
            model,
            adam,
            lambda_c,
            epoch,
            buffer,
        })
    }
}

fn random_action<R: Rng + ?Sized>(kind: EnvKind, rng: &mut R) -> Action {
    match kind {
        EnvKind::Gridworld => Action::Discrete(rng.random_range(0..GRID_ACTIONS)),
        EnvKind::Velocity => Action::Continuous(rng.random_range(-1.0..=1.0)),
    }
}

fn encode_adam(states: &[AdamState]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend((states.len() as u64).to_le_bytes());
    for s in states {
        out.extend(s.step.to_le_bytes());
        out.extend((s.m.len() as u64).to_le_bytes());
        for (m, v) in s.m.iter().zip(&s.v) {
            out.extend((m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend(x.to_le_bytes());
            }
        }
    }
    out
}

fn decode_adam(bytes: &[u8], model: &Model) -> Result<Vec<AdamState>> {
    let bad = || Error::Checkpoint(format!("{OPTIM_FILE} is truncated or does not match the model"));
    let mut pos = 0usize;
    let mut word = || -> Result<[u8; 8]> {
        let w = bytes.get(pos..pos + 8).ok_or_else(bad)?;
        pos += 8;
        Ok(w.try_into().expect("8 bytes"))
    };
    let stores = model.stores.trainable();
    if u64::from_le_bytes(word()?) as usize != stores.len() {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(stores.len());
    for store in stores {
        let mut st = AdamState::new(store);
        st.step = u64::from_le_bytes(word()?);
        if u64::from_le_bytes(word()?) as usize != st.m.len() {
            return Err(bad());
        }
        for i in 0..st.m.len() {
            let n = u64::from_le_bytes(word()?) as usize;
            if n != st.m[i].len() {
                return Err(bad());
            }
            for j in 0..n {
                st.m[i][j] = f64::from_le_bytes(word()?);
            }
            for j in 0..n {
                st.v[i][j] = f64::from_le_bytes(word()?);
            }
        }
        out.push(st);
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(out)
}
