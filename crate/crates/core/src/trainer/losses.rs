//! Per-sample training objective.
//!
//! Each transition gets its own tape. Everything random or detached
//! (Bellman targets, next latents, actor weights and baselines,
//! reparameterization noise) is computed first into a [`Prepared`] sample,
//! so rebuilding the tape with perturbed parameters evaluates exactly the
//! function whose gradient the tape reports.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::LatentTriple;
use crate::critic::{critic_loss_on, make_target, max_of, mean_of, BellmanTarget, CostTargetRule, TargetInput, TargetNets};
use crate::error::{health, Result};
use crate::gradnet::{Bind, Tape, Var};
use crate::model::Model;
use crate::sim::Action;
use crate::world::{conj_on, distill_on, nll_on};

/// Loss weights and gradient routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub lambda_critic: f64,
    pub lambda_wm: f64,
    pub lambda_distill: f64,
    pub lambda_conj: f64,
    pub alpha_bc: f64,
    pub awbc_clip: f64,
    /// Current cost multiplier in the actor objective.
    pub lambda_c: f64,
    pub gamma_r: f64,
    pub k_c: usize,
    pub cost_target: CostTargetRule,
    pub detach_wm_target: bool,
    pub actor_to_encoder: bool,
    pub critic_to_encoder: bool,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            lambda_critic: 10.0,
            lambda_wm: 1.0,
            lambda_distill: 0.1,
            lambda_conj: 0.1,
            alpha_bc: 0.1,
            awbc_clip: 20.0,
            lambda_c: 0.0,
            gamma_r: 0.99,
            k_c: 1,
            cost_target: CostTargetRule::Mean,
            detach_wm_target: true,
            actor_to_encoder: false,
            critic_to_encoder: true,
        }
    }
}

/// One replayed transition with its encoder inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub features: Vec<f64>,
    pub next_features: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
    pub d_ctx: bool,
}

/// Detached quantities used by the actor objective.
#[derive(Debug, Clone, PartialEq)]
pub enum ActorConsts {
    Discrete {
        /// Mean reward-critic value per action.
        q_r: Vec<f64>,
        /// Cost aggregate per action.
        q_plus: Vec<f64>,
        awbc_weight: f64,
    },
    Continuous {
        z: Vec<f64>,
        zw: Vec<f64>,
        eps: f64,
        awbc_weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub input: SampleInput,
    pub now: LatentTriple,
    pub next: LatentTriple,
    pub target: BellmanTarget,
    pub actor: ActorConsts,
}

/// Computes targets and detached actor terms with the current parameters.
pub fn prepare<R: Rng + ?Sized>(model: &Model, s: &LossSettings, input: SampleInput, rng: &mut R) -> Result<Prepared> {
    let st = &model.stores;
    let now = model.codec.encode_features(model.codec_params(), &input.features)?;
    let next = model.codec.encode_features(model.codec_params(), &input.next_features)?;
    let next_actions = (0..s.k_c)
        .map(|_| model.policy.sample(&st.target_policy, &next.zp, rng))
        .collect::<Result<Vec<_>>>()?;
    let nets = TargetNets {
        reward: &model.reward_critic,
        reward_store: &st.target_reward_critic,
        cost: &model.cost_critic,
        cost_store: &st.target_cost_critic,
        k_c: s.k_c,
        gamma_r: s.gamma_r,
        rule: s.cost_target,
    };
    let t_in = TargetInput {
        reward: input.reward,
        cost: input.cost,
        done: input.done,
        d_ctx: input.d_ctx,
        z_next: next.z.clone(),
        zw_next: next.zw.clone(),
    };
    let target = make_target(&nets, &t_in, next_actions, rng)?;
    let clip = |adv: f64| adv.exp().clamp(0.0, s.awbc_clip);
    let actor = match input.action {
        Action::Discrete(a) => {
            let table = model.reward_critic.head_table(&st.reward_critic, &now.z);
            let q_r: Vec<f64> = (0..table[0].len())
                .map(|j| mean_of(&table.iter().map(|h| h[j]).collect::<Vec<_>>()))
                .collect();
            let cost = model.cost_critic.head_table(&st.cost_critic, &now.zw);
            let q_plus: Vec<f64> = (0..cost[0].len())
                .map(|j| max_of(&cost.iter().map(|h| h[j]).collect::<Vec<_>>()))
                .collect();
            let pi = model.policy.probs(&st.policy, &now.zp)?;
            let baseline: f64 = pi.iter().zip(&q_r).map(|(p, q)| p * q).sum();
            ActorConsts::Discrete {
                awbc_weight: clip(q_r[a] - baseline),
                q_r,
                q_plus,
            }
        }
        Action::Continuous(a) => {
            let eps: f64 = StandardNormal.sample(rng);
            let (m, sd) = model.policy.gaussian(&st.policy, &now.zp)?;
            let sampled = Action::Continuous((m + sd * eps).tanh());
            let adv = model.reward_critic.q_mean(&st.reward_critic, &now.z, Action::Continuous(a))
                - model.reward_critic.q_mean(&st.reward_critic, &now.z, sampled);
            ActorConsts::Continuous {
                z: now.z.clone(),
                zw: now.zw.clone(),
                eps,
                awbc_weight: clip(adv),
            }
        }
    };
    if !actor_consts_finite(&actor) {
        return Err(health("non-finite actor statistics"));
    }
    Ok(Prepared {
        input,
        now,
        next,
        target,
        actor,
    })
}

fn actor_consts_finite(a: &ActorConsts) -> bool {
    match a {
        ActorConsts::Discrete { q_r, q_plus, awbc_weight } => {
            q_r.iter().chain(q_plus).all(|v| v.is_finite()) && awbc_weight.is_finite()
        }
        ActorConsts::Continuous { awbc_weight, .. } => awbc_weight.is_finite(),
    }
}

/// Tape handles of every term of one sample's objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub actor: Var,
    pub critic: Var,
    pub wm: Var,
    pub distill: Var,
    pub conj: Var,
    pub total: Var,
    /// Expected (discrete) or sampled (continuous) cost aggregate under the
    /// policy, before the multiplier.
    pub penalty: Var,
}

/// Scalar values of [`LossVars`], summed or averaged over samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub actor: f64,
    pub critic: f64,
    pub wm: f64,
    pub distill: f64,
    pub conj: f64,
    pub total: f64,
    pub penalty: f64,
}

impl LossValues {
    pub fn read(tape: &Tape, v: &LossVars) -> Self {
        LossValues {
            actor: tape.scalar(v.actor),
            critic: tape.scalar(v.critic),
            wm: tape.scalar(v.wm),
            distill: tape.scalar(v.distill),
            conj: tape.scalar(v.conj),
            total: tape.scalar(v.total),
            penalty: tape.scalar(v.penalty),
        }
    }

    pub fn add(&mut self, o: &LossValues) {
        self.actor += o.actor;
        self.critic += o.critic;
        self.wm += o.wm;
        self.distill += o.distill;
        self.conj += o.conj;
        self.total += o.total;
        self.penalty += o.penalty;
    }

    pub fn scaled(mut self, k: f64) -> Self {
        for v in [
            &mut self.actor,
            &mut self.critic,
            &mut self.wm,
            &mut self.distill,
            &mut self.conj,
            &mut self.total,
            &mut self.penalty,
        ] {
            *v *= k;
        }
        self
    }

    /// Weighted sum of the components under `s`.
    pub fn recombine(&self, s: &LossSettings) -> f64 {
        self.actor + s.lambda_critic * self.critic + s.lambda_wm * self.wm + s.lambda_distill * self.distill + s.lambda_conj * self.conj
    }
}

/// Records one sample's objective.
pub fn sample_tape(model: &Model, p: &Prepared, s: &LossSettings) -> (Tape, LossVars) {
    let st = &model.stores;
    let codec = &model.codec;
    let mut tape = Tape::new();
    let t = &mut tape;

    let x = t.input(p.input.features.clone());
    let z = codec.encoder_net().forward(t, &st.encoder, x, Bind::Train);
    let zw = codec.world_on(t, &st.world_proj, z, Bind::Train);
    let z_sg = t.stop_grad(z);
    let zp_sg = codec.policy_on(t, &st.policy_proj, z_sg, Bind::Train);
    let zp_actor = if s.actor_to_encoder {
        codec.policy_on(t, &st.policy_proj, z, Bind::Train)
    } else {
        zp_sg
    };

    let (actor, penalty) = actor_on(t, model, p, s, zp_actor);

    let (zr, zc) = if s.critic_to_encoder {
        (z, zw)
    } else {
        (z_sg, t.stop_grad(zw))
    };
    let qr = model.reward_critic.heads_on(t, &st.reward_critic, zr, p.input.action, Bind::Train);
    let qc = model.cost_critic.heads_on(t, &st.cost_critic, zc, p.input.action, Bind::Train);
    let critic = critic_loss_on(t, &qr, &qc, &p.target);

    let a_emb = codec.embed_action(p.input.action);
    let pred = model.world.predict_on(t, &st.dynamics, zw, &a_emb, Bind::Train);
    let mut wm_terms = Vec::with_capacity(3);
    if !p.input.d_ctx {
        let target = if s.detach_wm_target {
            t.input(p.next.zw.clone())
        } else {
            let xn = t.input(p.input.next_features.clone());
            let zn = codec.encoder_net().forward(t, &st.encoder, xn, Bind::Train);
            codec.world_on(t, &st.world_proj, zn, Bind::Train)
        };
        wm_terms.push((1.0, nll_on(t, &pred, target)));
    }
    let dr = t.shift(pred.reward, -p.input.reward);
    let dc = t.shift(pred.cost, -p.input.cost);
    let dr = t.square(dr);
    let dc = t.square(dc);
    wm_terms.push((1.0, t.sum(dr)));
    wm_terms.push((1.0, t.sum(dc)));
    let wm = t.weighted_sum(&wm_terms);

    let distill = distill_on(t, zp_sg, zw);

    let zn = t.input(p.next.z.clone());
    let zpn = codec.policy_on(t, &st.policy_proj, zn, Bind::Train);
    let zwn = t.input(p.next.zw.clone());
    let conj = conj_on(t, zp_sg, zpn, zw, zwn);

    let total = t.weighted_sum(&[
        (1.0, actor),
        (s.lambda_critic, critic),
        (s.lambda_wm, wm),
        (s.lambda_distill, distill),
        (s.lambda_conj, conj),
    ]);
    let vars = LossVars {
        actor,
        critic,
        wm,
        distill,
        conj,
        total,
        penalty,
    };
    (tape, vars)
}

/// Actor objective; returns `(loss, penalty)`.
fn actor_on(t: &mut Tape, model: &Model, p: &Prepared, s: &LossSettings, zp: Var) -> (Var, Var) {
    let st = &model.stores;
    match (&p.actor, p.input.action) {
        (
            ActorConsts::Discrete {
                q_r,
                q_plus,
                awbc_weight,
            },
            Action::Discrete(a),
        ) => {
            let logits = model.policy.head_on(t, &st.policy, zp, Bind::Train);
            let logp = t.log_softmax(logits);
            let pi = t.exp(logp);
            let qv = t.input(q_r.clone());
            let ev = t.mul(pi, qv);
            let ev = t.sum(ev);
            let cv = t.input(q_plus.clone());
            let pen = t.mul(pi, cv);
            let pen = t.sum(pen);
            let lp = t.index(logp, a);
            let loss = t.weighted_sum(&[(-1.0, ev), (-s.alpha_bc * awbc_weight, lp), (s.lambda_c, pen)]);
            (loss, pen)
        }
        (ActorConsts::Continuous { z, zw, eps, awbc_weight }, Action::Continuous(a_log)) => {
            let mean = model.policy.head_on(t, &st.policy, zp, Bind::Train);
            let ls = model.policy.log_std_on(t, &st.policy);
            let sd = t.exp(ls);
            let e = t.input(vec![*eps]);
            let noise = t.mul(sd, e);
            let u = t.add(mean, noise);
            let a = t.tanh(u);
            let zc = t.input(z.clone());
            let qr = model.reward_critic.heads_at(t, &st.reward_critic, zc, a, Bind::Frozen);
            let m = qr.len() as f64;
            let q_mean = t.weighted_sum(&qr.iter().map(|q| (1.0 / m, *q)).collect::<Vec<_>>());
            let zwc = t.input(zw.clone());
            let qc = model.cost_critic.heads_at(t, &st.cost_critic, zwc, a, Bind::Frozen);
            let qc = t.concat(&qc);
            let pen = t.max(qc);
            // log-density of the logged action's pre-squash value
            let u_log = a_log.clamp(-1.0 + 1e-6, 1.0 - 1e-6).atanh();
            let diff = t.scale(mean, -1.0);
            let diff = t.shift(diff, u_log);
            let inv = t.scale(ls, -1.0);
            let inv = t.exp(inv);
            let zs = t.mul(diff, inv);
            let zs = t.square(zs);
            let lp = t.weighted_sum(&[(-0.5, zs), (-1.0, ls)]);
            let lp = t.shift(lp, -0.5 * (2.0 * std::f64::consts::PI).ln());
            let lp = t.sum(lp);
            let loss = t.weighted_sum(&[(-1.0, q_mean), (-s.alpha_bc * awbc_weight, lp), (s.lambda_c, pen)]);
            (loss, pen)
        }
        _ => unreachable!("actor constants match the action kind"),
    }
}

/// Expected value `-sum_a pi(a) q(a)` of the discrete improvement term.
pub fn policy_improvement(probs: &[f64], q_r: &[f64]) -> f64 {
    -probs.iter().zip(q_r).map(|(p, q)| p * q).sum::<f64>()
}

/// Projected dual ascent on the cost multiplier:
/// `lambda <- max(0, lambda + lr * (mean_cost - delta))`.
pub fn lagrange_update(lambda: f64, lr: f64, mean_cost: f64, delta: f64) -> f64 {
    (lambda + lr * (mean_cost - delta)).max(0.0)
}
