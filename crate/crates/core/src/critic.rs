//! Critic ensembles, Bellman targets and the pessimistic cost aggregate.
//!
//! A discrete head maps a latent to one value per action; a continuous head
//! maps `concat(latent, action)` to a single value.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, health, Result};
use crate::gradnet::{Activation, Bind, Mlp, ParamStore, Tape, Var};
use crate::sim::{Action, EnvKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    kind: EnvKind,
    input_dim: usize,
    heads: Vec<Mlp>,
}

impl Ensemble {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: EnvKind,
        input_dim: usize,
        hidden: usize,
        m: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if m < 2 {
            return Err(config(format!("ensemble needs at least 2 heads, got {m}")));
        }
        let widths = match kind {
            EnvKind::Gridworld => [input_dim, hidden, kind.action_dim()],
            EnvKind::Velocity => [input_dim + 1, hidden, 1],
        };
        let heads = (0..m)
            .map(|i| Mlp::new(store, &format!("h{i}"), &widths, Activation::Identity, rng))
            .collect::<Result<_>>()?;
        Ok(Ensemble { kind, input_dim, heads })
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn heads(&self) -> &[Mlp] {
        &self.heads
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// `Q_i(z, a)` for every head.
    pub fn head_values(&self, store: &ParamStore, z: &[f64], action: Action) -> Vec<f64> {
        match action {
            Action::Discrete(a) => self.heads.iter().map(|h| h.eval(store, z)[a]).collect(),
            Action::Continuous(a) => {
                let mut x = z.to_vec();
                x.push(a);
                self.heads.iter().map(|h| h.eval(store, &x)[0]).collect()
            }
        }
    }

    /// Discrete only: `table[i][a] = Q_i(z, a)`.
    pub fn head_table(&self, store: &ParamStore, z: &[f64]) -> Vec<Vec<f64>> {
        debug_assert!(self.kind.is_discrete());
        self.heads.iter().map(|h| h.eval(store, z)).collect()
    }

    /// Per-head values for a list of candidate actions: `out[c][i]`.
    pub fn candidate_values(&self, store: &ParamStore, z: &[f64], actions: &[Action]) -> Vec<Vec<f64>> {
        if self.kind.is_discrete() {
            let table = self.head_table(store, z);
            actions
                .iter()
                .map(|a| {
                    let i = a.index().expect("discrete candidate");
                    table.iter().map(|row| row[i]).collect()
                })
                .collect()
        } else {
            actions.iter().map(|a| self.head_values(store, z, *a)).collect()
        }
    }

    /// Pessimistic aggregate `Q+(z, a) = max_i Q_i(z, a)`.
    pub fn q_plus(&self, store: &ParamStore, z: &[f64], action: Action) -> f64 {
        max_of(&self.head_values(store, z, action))
    }

    pub fn q_mean(&self, store: &ParamStore, z: &[f64], action: Action) -> f64 {
        mean_of(&self.head_values(store, z, action))
    }

    /// One scalar per head on the tape.
    pub fn heads_on(&self, tape: &mut Tape, store: &ParamStore, z: Var, action: Action, bind: Bind) -> Vec<Var> {
        match action {
            Action::Discrete(a) => self
                .heads
                .iter()
                .map(|h| {
                    let q = h.forward(tape, store, z, bind);
                    tape.index(q, a)
                })
                .collect(),
            Action::Continuous(a) => {
                let av = tape.input(vec![a]);
                self.heads_at(tape, store, z, av, bind)
            }
        }
    }

    /// Continuous only: heads evaluated at an action that is itself a tape
    /// variable (for reparameterized policy gradients).
    pub fn heads_at(&self, tape: &mut Tape, store: &ParamStore, z: Var, action: Var, bind: Bind) -> Vec<Var> {
        let x = tape.concat(&[z, action]);
        self.heads.iter().map(|h| h.forward(tape, store, x, bind)).collect()
    }
}

pub fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// How the cost bootstrap aggregates target heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostTargetRule {
    /// Mean over all target heads.
    Mean,
    /// Maximum over two target heads drawn at random per sample.
    TwoHeadMax,
}

/// Inputs for one transition's Bellman targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetInput {
    pub reward: f64,
    pub cost: f64,
    pub done: bool,
    pub d_ctx: bool,
    /// Next shared latent `Z'`.
    pub z_next: Vec<f64>,
    /// Next world latent `Z'^w`.
    pub zw_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BellmanTarget {
    pub y_r: f64,
    pub y_c: f64,
    /// `K_c` target-policy action samples.
    pub next_actions: Vec<Action>,
    /// Bootstrapped cost value before masking.
    pub v_c: f64,
}

/// Target networks and settings for [`make_target`].
#[derive(Debug, Clone, Copy)]
pub struct TargetNets<'a> {
    pub reward: &'a Ensemble,
    pub reward_store: &'a ParamStore,
    pub cost: &'a Ensemble,
    pub cost_store: &'a ParamStore,
    pub k_c: usize,
    pub gamma_r: f64,
    pub rule: CostTargetRule,
}

/// `Y^C = C + (1 - d_ctx) * V_C(Z'^w)` (undiscounted) and
/// `Y^R = R + gamma_r * (1 - done) * mean_j Qbar_R,j(Z', A'_1)`, where
/// `V_C` averages the cost aggregate over the `K_c` next actions.
/// `next_actions` are draws from the target policy at `Z'^p`.
pub fn make_target<R: Rng + ?Sized>(
    nets: &TargetNets<'_>,
    input: &TargetInput,
    next_actions: Vec<Action>,
    rng: &mut R,
) -> Result<BellmanTarget> {
    if nets.k_c == 0 || next_actions.len() != nets.k_c {
        return Err(contract(format!("need K_c = {} >= 1 target actions, got {}", nets.k_c, next_actions.len())));
    }
    let mut v_c = 0.0;
    for a in &next_actions {
        let heads = nets.cost.head_values(nets.cost_store, &input.zw_next, *a);
        v_c += match nets.rule {
            CostTargetRule::Mean => mean_of(&heads),
            CostTargetRule::TwoHeadMax => {
                let pick = sample_indices(rng, heads.len(), 2);
                heads[pick.index(0)].max(heads[pick.index(1)])
            }
        };
    }
    v_c /= nets.k_c as f64;
    let v_r = nets.reward.q_mean(nets.reward_store, &input.z_next, next_actions[0]);
    let y_c = input.cost + if input.d_ctx { 0.0 } else { v_c };
    let y_r = input.reward + if input.done { 0.0 } else { nets.gamma_r * v_r };
    if !y_c.is_finite() || !y_r.is_finite() {
        return Err(health("non-finite Bellman target"));
    }
    Ok(BellmanTarget {
        y_r,
        y_c,
        next_actions,
        v_c,
    })
}

/// Per-sample critic loss `(1/M) sum_i [(Q_C,i - Y^C)^2 + (Q_R,i - Y^R)^2]`.
pub fn critic_loss_on(tape: &mut Tape, reward_heads: &[Var], cost_heads: &[Var], target: &BellmanTarget) -> Var {
    let m = cost_heads.len() as f64;
    let mut terms = Vec::with_capacity(2 * cost_heads.len());
    for (q, y) in cost_heads
        .iter()
        .map(|q| (*q, target.y_c))
        .chain(reward_heads.iter().map(|q| (*q, target.y_r)))
    {
        let d = tape.shift(q, -y);
        terms.push((1.0 / m, tape.square(d)));
    }
    tape.weighted_sum(&terms)
}

/// Batch critic loss evaluated without a tape.
pub fn critic_loss(
    reward: (&Ensemble, &ParamStore),
    cost: (&Ensemble, &ParamStore),
    batch: &[(Vec<f64>, Vec<f64>, Action)],
    targets: &[BellmanTarget],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(contract("critic_loss on an empty batch"));
    }
    let m = cost.0.len() as f64;
    let mut total = 0.0;
    for ((z, zw, a), y) in batch.iter().zip(targets) {
        let qc = cost.0.head_values(cost.1, zw, *a);
        let qr = reward.0.head_values(reward.1, z, *a);
        total += qc.iter().map(|q| (q - y.y_c).powi(2)).sum::<f64>() / m;
        total += qr.iter().map(|q| (q - y.y_r).powi(2)).sum::<f64>() / m;
    }
    Ok(total / batch.len() as f64)
}
