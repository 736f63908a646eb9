use serde::{Deserialize, Serialize};

use super::task::{Action, TaskSpec};
use crate::error::{contract, Error, Result};

/// One environment step together with its place in a context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub context_id: u64,
    pub episode: usize,
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
    /// Last transition of the whole context.
    pub done: bool,
    /// Last transition of an episode.
    pub d_ctx: bool,
    /// Remaining budget `B_t` when the action was chosen.
    pub budget: f64,
}

impl Transition {
    /// Remaining budget after paying this step's cost.
    pub fn budget_after(&self) -> f64 {
        self.budget - self.cost
    }
}

/// Episode budget bookkeeping: `B_0 = delta`, `B_{t+1} = B_t - C_{t+1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetState {
    pub delta: f64,
    pub spent: f64,
    pub remaining: f64,
}

impl BudgetState {
    pub fn new(delta: f64) -> Self {
        BudgetState {
            delta,
            spent: 0.0,
            remaining: delta,
        }
    }

    pub fn charge(&mut self, cost: f64) {
        self.spent += cost;
        self.remaining -= cost;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub transitions: Vec<Transition>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// `G(tau)`.
    pub fn total_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// `G_c(tau)`.
    pub fn total_cost(&self) -> f64 {
        self.transitions.iter().map(|t| t.cost).sum()
    }

    fn to_go(&self, f: impl Fn(&Transition) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let mut acc = 0.0;
        for (i, t) in self.transitions.iter().enumerate().rev() {
            acc += f(t);
            out[i] = acc;
        }
        out
    }

    /// `G_t` for each step.
    pub fn returns_to_go(&self) -> Vec<f64> {
        self.to_go(|t| t.reward)
    }

    /// `G_{c,t}` for each step.
    pub fn costs_to_go(&self) -> Vec<f64> {
        self.to_go(|t| t.cost)
    }

    /// `[B_0, ..., B_T]`.
    pub fn budget_trace(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.transitions.iter().map(|t| t.budget).collect();
        if let Some(last) = self.transitions.last() {
            out.push(last.budget_after());
        }
        out
    }
}

/// Everything the action selector may look at.
#[derive(Debug, Clone, Copy)]
pub struct DecisionPoint<'a> {
    /// Every earlier transition of the context, oldest first.
    pub history: &'a [Transition],
    pub state: &'a [f64],
    pub episode: usize,
    pub t: usize,
    pub horizon: usize,
    pub budget: f64,
}

pub trait Actor {
    /// Extra data kept per decision, e.g. a shield decision.
    type Record;

    fn act(&mut self, point: &DecisionPoint<'_>) -> Result<(Action, Self::Record)>;
}

impl<F> Actor for F
where
    F: FnMut(&DecisionPoint<'_>) -> Result<Action>,
{
    type Record = ();

    fn act(&mut self, point: &DecisionPoint<'_>) -> Result<(Action, ())> {
        Ok((self(point)?, ()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextRun<R> {
    pub context_id: u64,
    pub delta: f64,
    pub episodes: Vec<EpisodeLog>,
    /// Per episode, one record per transition.
    pub records: Vec<Vec<R>>,
}

impl<R> ContextRun<R> {
    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flat_map(|e| e.transitions.iter())
    }

    pub fn budget_traces(&self) -> Vec<Vec<f64>> {
        self.episodes.iter().map(EpisodeLog::budget_trace).collect()
    }
}

/// A rollout stopped by a failing actor or step, with what was logged so far.
#[derive(Debug)]
pub struct RolloutAbort<R> {
    pub partial: ContextRun<R>,
    pub error: Error,
}

impl<R> From<RolloutAbort<R>> for Error {
    fn from(a: RolloutAbort<R>) -> Error {
        a.error
    }
}

/// Runs `k` episodes of `task` with a shared, growing history.
///
/// The budget resets to `delta` at every episode start. An episode ends at
/// the goal or after `horizon` steps; its last transition carries `d_ctx`,
/// and the last transition of the context also carries `done`.
pub fn run_context<A: Actor>(
    actor: &mut A,
    task: &TaskSpec,
    k: usize,
    horizon: usize,
    delta: f64,
    context_id: u64,
) -> Result<ContextRun<A::Record>, RolloutAbort<A::Record>> {
    let mut run = ContextRun {
        context_id,
        delta,
        episodes: Vec::with_capacity(k),
        records: Vec::with_capacity(k),
    };
    if k == 0 || horizon == 0 || !(delta >= 0.0) || !delta.is_finite() {
        return Err(RolloutAbort {
            partial: run,
            error: contract(format!("run_context needs K >= 1, T >= 1, delta >= 0 (got {k}, {horizon}, {delta})")),
        });
    }
    let mut history: Vec<Transition> = Vec::with_capacity(k * horizon);
    for episode in 0..k {
        let mut state = task.reset();
        let mut budget = BudgetState::new(delta);
        let mut records = Vec::new();
        let start = history.len();
        for t in 0..horizon {
            let obs = task.observe(&state);
            let point = DecisionPoint {
                history: &history,
                state: &obs,
                episode,
                t,
                horizon,
                budget: budget.remaining,
            };
            let stepped = actor
                .act(&point)
                .and_then(|(a, rec)| task.step(&state, a).map(|out| (a, rec, out)));
            let (action, rec, out) = match stepped {
                Ok(v) => v,
                Err(error) => {
                    run.episodes.push(EpisodeLog {
                        transitions: history[start..].to_vec(),
                    });
                    run.records.push(records);
                    return Err(RolloutAbort { partial: run, error });
                }
            };
            let end = out.terminal || t + 1 == horizon;
            history.push(Transition {
                context_id,
                episode,
                t,
                state: obs,
                next_state: task.observe(&out.next),
                action,
                reward: out.reward,
                cost: out.cost,
                done: end && episode + 1 == k,
                d_ctx: end,
                budget: budget.remaining,
            });
            records.push(rec);
            budget.charge(out.cost);
            state = out.next;
            if end {
                break;
            }
        }
        run.episodes.push(EpisodeLog {
            transitions: history[start..].to_vec(),
        });
        run.records.push(records);
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::task::{Cell, TaskLayout};

    fn grid(obstacles: Vec<Cell>) -> TaskSpec {
        TaskSpec {
            alpha: 0.0,
            seed: 0,
            layout: TaskLayout::Grid {
                size: 3,
                start: Cell { x: 1, y: 1 },
                goal: Cell { x: 2, y: 2 },
                obstacles,
            },
        }
    }

    fn scripted(actions: Vec<usize>) -> impl FnMut(&DecisionPoint<'_>) -> Result<Action> {
        let mut i = 0;
        move |_| {
            let a = actions[i % actions.len()];
            i += 1;
            Ok(Action::Discrete(a))
        }
    }

    #[test]
    fn zero_cost_keeps_budget() {
        let mut stay = scripted(vec![0]);
        let run = run_context(&mut stay, &grid(vec![]), 2, 5, 3.0, 0).unwrap();
        for e in &run.episodes {
            assert_eq!(e.budget_trace(), vec![3.0; 6]);
            assert_eq!(e.total_cost(), 0.0);
            assert_eq!(e.total_return(), 0.0);
        }
    }

    #[test]
    fn budget_recursion_example() {
        // Costs [1, 2, 0] against delta = 5; a hand-written task emits them.
        let mut costs = [1.0, 2.0, 0.0].into_iter();
        let mut budgets = vec![];
        let mut b = BudgetState::new(5.0);
        budgets.push(b.remaining);
        for c in costs.by_ref() {
            b.charge(c);
            budgets.push(b.remaining);
        }
        assert_eq!(budgets, vec![5.0, 4.0, 2.0, 2.0]);

        // Same trace through the rollout engine: right onto an obstacle
        // twice, then left off it.
        let task = grid(vec![Cell { x: 2, y: 1 }]);
        let mut pol = scripted(vec![4, 0, 3]);
        let run = run_context(&mut pol, &task, 1, 3, 5.0, 0).unwrap();
        let ep = &run.episodes[0];
        let cs: Vec<f64> = ep.transitions.iter().map(|t| t.cost).collect();
        assert_eq!(cs, vec![1.0, 1.0, 0.0]);
        assert_eq!(ep.budget_trace(), vec![5.0, 4.0, 3.0, 3.0]);
        assert_eq!(ep.costs_to_go(), vec![2.0, 1.0, 0.0]);
    }

    #[test]
    fn flags_and_history() {
        let mut seen = vec![];
        let mut pol = |p: &DecisionPoint<'_>| {
            seen.push(p.history.len());
            Ok(Action::Discrete(1))
        };
        // (1,1) -> (1,2) -> wall; goal at (2,2) is never reached.
        let run = run_context(&mut pol, &grid(vec![]), 3, 4, 1.0, 9).unwrap();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        let all: Vec<&Transition> = run.transitions().collect();
        assert_eq!(all.len(), 12);
        for (i, t) in all.iter().enumerate() {
            assert_eq!(t.d_ctx, t.t == 3, "row {i}");
            assert_eq!(t.done, i == 11);
            assert_eq!(t.context_id, 9);
        }
    }

    #[test]
    fn goal_ends_episode_early() {
        let mut pol = scripted(vec![1, 4]);
        let run = run_context(&mut pol, &grid(vec![]), 2, 30, 1.0, 0).unwrap();
        assert_eq!(run.episodes[0].len(), 2);
        assert_eq!(run.episodes[0].total_return(), 1.0);
        assert!(run.episodes[0].transitions[1].d_ctx);
    }

    #[test]
    fn failing_actor_keeps_partial_log() {
        let mut n = 0;
        let mut pol = |_: &DecisionPoint<'_>| {
            n += 1;
            if n == 4 {
                Err(Error::ModelHealth("boom".into()))
            } else {
                Ok(Action::Discrete(0))
            }
        };
        let abort = run_context(&mut pol, &grid(vec![]), 2, 2, 1.0, 0).unwrap_err();
        assert_eq!(abort.partial.transitions().count(), 3);
        assert_eq!(abort.partial.episodes.len(), 2);
        assert!(matches!(abort.error, Error::ModelHealth(_)));
    }

    #[test]
    fn invalid_arguments() {
        let mut pol = scripted(vec![0]);
        assert!(run_context(&mut pol, &grid(vec![]), 0, 1, 1.0, 0).is_err());
        assert!(run_context(&mut pol, &grid(vec![]), 1, 0, 1.0, 0).is_err());
        assert!(run_context(&mut pol, &grid(vec![]), 1, 1, -1.0, 0).is_err());
    }
}
