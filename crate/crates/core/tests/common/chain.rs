//! A deterministic four-state chain with a known cost-to-go, used to check
//! that the cost ensemble can satisfy its Bellman upper bound.
//!
//! States `0 -> 1 -> 2 -> 3`; every action moves one state right and the
//! episode ends on entering state 3.

use std::time::{Duration, Instant};

use qbarrier::critic::{critic_loss_on, BellmanTarget, Ensemble};
use qbarrier::gradnet::{adam_step, polyak_update, AdamConfig, AdamState, Bind, ParamStore, Tape};
use qbarrier::sim::{Action, EnvKind, GRID_ACTIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STATES: usize = 4;
/// Cost of leaving state `i`.
pub const COSTS: [f64; 3] = [1.0, 0.0, 1.0];

pub fn cost_to_go(state: usize) -> f64 {
    COSTS[state.min(3)..].iter().sum()
}

fn one_hot(state: usize) -> Vec<f64> {
    let mut v = vec![0.0; STATES];
    v[state] = 1.0;
    v
}

#[derive(Debug, Clone)]
pub struct ChainFit {
    pub transitions: usize,
    /// Transitions with hinge residual at most 1e-3.
    pub within_tol: usize,
    /// Transitions with hinge residual at most 1e-6.
    pub satisfied: usize,
    pub max_residual: f64,
    /// Largest `|Q+ - cost-to-go|` over state-action pairs.
    pub max_value_error: f64,
    pub steps: usize,
    pub elapsed: Duration,
}

pub struct Chain {
    pub critic: Ensemble,
    pub store: ParamStore,
    target: ParamStore,
    adam: AdamState,
    cfg: AdamConfig,
}

impl Chain {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new("cost_critic");
        let critic = Ensemble::new(&mut store, EnvKind::Gridworld, STATES, 16, 4, &mut rng).unwrap();
        let target = store.clone_as("target_cost_critic");
        let adam = AdamState::new(&store);
        Chain {
            critic,
            store,
            target,
            adam,
            cfg: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
        }
    }

    /// One full-batch update over every state-action pair. Targets average
    /// the target heads over a uniform next action.
    pub fn step(&mut self) {
        let mut tape = Tape::new();
        let mut terms = Vec::new();
        for s in 0..3 {
            let v_c = if s + 1 == 3 {
                0.0
            } else {
                let next = one_hot(s + 1);
                (0..GRID_ACTIONS)
                    .map(|a| self.critic.q_mean(&self.target, &next, Action::Discrete(a)))
                    .sum::<f64>()
                    / GRID_ACTIONS as f64
            };
            let target = BellmanTarget {
                y_r: 0.0,
                y_c: COSTS[s] + v_c,
                next_actions: Vec::new(),
                v_c,
            };
            for a in 0..GRID_ACTIONS {
                let z = tape.input(one_hot(s));
                let heads = self.critic.heads_on(&mut tape, &self.store, z, Action::Discrete(a), Bind::Train);
                terms.push((1.0 / 15.0, critic_loss_on(&mut tape, &[], &heads, &target)));
            }
        }
        let loss = tape.weighted_sum(&terms);
        let grads = tape.backward(loss).unwrap();
        adam_step(&mut self.store, &mut self.adam, &grads, &self.cfg).unwrap();
        polyak_update(&mut self.target, &self.store, 0.05).unwrap();
    }

    pub fn q_plus(&self, s: usize, a: usize) -> f64 {
        self.critic.q_plus(&self.store, &one_hot(s), Action::Discrete(a))
    }

    /// `[C + V+(s') - Q+(s, a)]_+` with `V+(3) = 0`.
    pub fn residual(&self, s: usize, a: usize) -> f64 {
        let v_next = if s + 1 == 3 {
            0.0
        } else {
            (0..GRID_ACTIONS).map(|b| self.q_plus(s + 1, b)).fold(f64::INFINITY, f64::min)
        };
        (COSTS[s] + v_next - self.q_plus(s, a)).max(0.0)
    }
}

/// Trains for `steps` updates, then scores `episodes` random-action
/// episodes of the chain.
pub fn fit_chain(seed: u64, steps: usize, episodes: usize) -> ChainFit {
    let start = Instant::now();
    let mut chain = Chain::new(seed);
    for _ in 0..steps {
        chain.step();
    }
    let elapsed = start.elapsed();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut fit = ChainFit {
        transitions: 0,
        within_tol: 0,
        satisfied: 0,
        max_residual: 0.0,
        max_value_error: 0.0,
        steps,
        elapsed,
    };
    for _ in 0..episodes {
        for s in 0..3 {
            let r = chain.residual(s, rng.random_range(0..GRID_ACTIONS));
            fit.transitions += 1;
            fit.within_tol += (r <= 1e-3) as usize;
            fit.satisfied += (r <= 1e-6) as usize;
            fit.max_residual = fit.max_residual.max(r);
        }
    }
    for s in 0..3 {
        for a in 0..GRID_ACTIONS {
            fit.max_value_error = fit.max_value_error.max((chain.q_plus(s, a) - cost_to_go(s)).abs());
        }
    }
    fit
}
