//! Shielded evaluation rollouts over tasks, budgets and shield arms.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::seeding::{self, tag};
use crate::shield::{select_action, ShieldConfig, ShieldDecision};
use crate::sim::{run_context, sample_task, Action, Actor, ContextRun, DecisionPoint, EnvKind};

/// A named shield setting compared against the others on the same tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub shield: ShieldConfig,
}

/// Frozen model plus shield; records every decision.
pub struct ShieldActor<'a, R> {
    pub model: &'a Model,
    pub shield: ShieldConfig,
    pub rng: R,
}

impl<R: rand::Rng> Actor for ShieldActor<'_, R> {
    type Record = ShieldDecision;

    fn act(&mut self, p: &DecisionPoint<'_>) -> Result<(Action, ShieldDecision)> {
        let w = self.model.codec.window(p.history, p.state, p.t, p.horizon);
        let d = select_action(self.model, &w, p.budget, &self.shield, &mut self.rng)?;
        Ok((d.action, d))
    }
}

/// Budget assignment for evaluation contexts. The budget stays fixed for
/// every episode of a context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Budgets {
    /// Every task is run at every listed budget.
    Grid(Vec<f64>),
    /// One budget per task, uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl Budgets {
    pub fn count(&self) -> usize {
        match self {
            Budgets::Grid(d) => d.len(),
            Budgets::Uniform { .. } => 1,
        }
    }

    /// Budget of the `index`-th context of `task`.
    pub fn get(&self, seed: u64, task: usize, index: usize) -> f64 {
        match self {
            Budgets::Grid(d) => d[index],
            Budgets::Uniform { lo, hi } => {
                let mut rng = seeding::stream(seed, &[tag::EVAL, tag::BUDGET, task as u64]);
                if hi > lo {
                    rng.random_range(*lo..=*hi)
                } else {
                    *lo
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSpec {
    pub env: EnvKind,
    pub alpha: f64,
    pub grid_size: usize,
    pub n_obstacles: usize,
    pub horizon: usize,
    pub episodes: usize,
    pub tasks: usize,
    pub budgets: Budgets,
    pub arms: Vec<Arm>,
    pub seed: u64,
}

/// One context of one arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextResult {
    pub task: usize,
    pub task_seed: u64,
    pub delta_index: usize,
    pub delta: f64,
    pub arm: usize,
    pub run: ContextRun<ShieldDecision>,
}

/// Per-episode summary of a [`ContextResult`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub task: usize,
    pub task_seed: u64,
    pub delta: f64,
    pub arm: usize,
    pub k: usize,
    pub ret: f64,
    pub cost: f64,
    pub steps: usize,
    pub fallbacks: usize,
}

impl EpisodeOutcome {
    pub fn fallback_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.fallbacks as f64 / self.steps as f64
        }
    }
}

impl ContextResult {
    pub fn outcomes(&self) -> Vec<EpisodeOutcome> {
        self.run
            .episodes
            .iter()
            .zip(&self.run.records)
            .enumerate()
            .map(|(k, (ep, recs))| EpisodeOutcome {
                task: self.task,
                task_seed: self.task_seed,
                delta: self.delta,
                arm: self.arm,
                k,
                ret: ep.total_return(),
                cost: ep.total_cost(),
                steps: ep.len(),
                fallbacks: recs.iter().filter(|d| d.fallback).count(),
            })
            .collect()
    }
}

pub fn task_seed(seed: u64, task: usize) -> u64 {
    seeding::derive(seed, &[tag::EVAL, task as u64])
}

fn run_job(model: &Model, spec: &EvalSpec, task: usize, di: usize, arm: usize) -> Result<ContextResult> {
    let ts = task_seed(spec.seed, task);
    let t = sample_task(spec.env, spec.alpha, spec.grid_size, spec.n_obstacles, ts)?;
    // arms share the action stream of a (task, budget) pair
    let mut actor = ShieldActor {
        model,
        shield: spec.arms[arm].shield,
        rng: seeding::stream(spec.seed, &[tag::EVAL, task as u64, di as u64]),
    };
    let delta = spec.budgets.get(spec.seed, task, di);
    let run = run_context(&mut actor, &t, spec.episodes, spec.horizon, delta, task as u64).map_err(Error::from)?;
    Ok(ContextResult {
        task,
        task_seed: ts,
        delta_index: di,
        delta,
        arm,
        run,
    })
}

/// Runs every (task, budget, arm) context in parallel and hands results to
/// `sink` in that nested order. Memory stays bounded by the chunk size.
pub fn evaluate(model: &Model, spec: &EvalSpec, mut sink: impl FnMut(ContextResult) -> Result<()>) -> Result<()> {
    let jobs: Vec<(usize, usize, usize)> = (0..spec.tasks)
        .flat_map(|t| (0..spec.budgets.count()).flat_map(move |d| (0..spec.arms.len()).map(move |a| (t, d, a))))
        .collect();
    for chunk in jobs.chunks(256) {
        let done = chunk
            .par_iter()
            .map(|&(t, d, a)| run_job(model, spec, t, d, a))
            .collect::<Result<Vec<_>>>()?;
        for r in done {
            sink(r)?;
        }
    }
    Ok(())
}

/// Convenience wrapper collecting only the per-episode outcomes.
pub fn evaluate_outcomes(model: &Model, spec: &EvalSpec) -> Result<Vec<EpisodeOutcome>> {
    let mut out = Vec::new();
    evaluate(model, spec, |r| {
        out.extend(r.outcomes());
        Ok(())
    })?;
    Ok(out)
}
