use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Gridworld,
    Velocity,
}

impl EnvKind {
    pub fn is_discrete(self) -> bool {
        self == EnvKind::Gridworld
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::Gridworld => 2,
            EnvKind::Velocity => 1,
        }
    }

    /// Number of discrete actions, or 1 for the scalar continuous action.
    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::Gridworld => GRID_ACTIONS,
            EnvKind::Velocity => 1,
        }
    }
}

impl std::str::FromStr for EnvKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gridworld" => Ok(EnvKind::Gridworld),
            "velocity" => Ok(EnvKind::Velocity),
            _ => Err(crate::error::config(format!("unknown env kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Gridworld => "gridworld",
            EnvKind::Velocity => "velocity",
        })
    }
}

pub const GRID_ACTIONS: usize = 5;
/// Velocity clip of the toy dynamics.
pub const V_MAX: f64 = 3.0;
/// Velocity change per unit of acceleration.
pub const ACCEL_GAIN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(f64),
}

impl Action {
    /// Scalar used in logs: the index for discrete actions, the value
    /// otherwise.
    pub fn as_f64(self) -> f64 {
        match self {
            Action::Discrete(i) => i as f64,
            Action::Continuous(v) => v,
        }
    }

    pub fn index(self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(i),
            Action::Continuous(_) => None,
        }
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::Discrete(i) => write!(f, "{i}"),
            Action::Continuous(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskLayout {
    Grid {
        size: usize,
        start: Cell,
        goal: Cell,
        obstacles: Vec<Cell>,
    },
    /// Desk-scale continuous toy: a 1-D point accelerates towards a hidden
    /// target speed and pays for exceeding the speed limit.
    Velocity { target: f64, limit: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub alpha: f64,
    pub seed: u64,
    pub layout: TaskLayout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvState {
    Grid(Cell),
    Velocity(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub cost: f64,
    /// The episode ended before the time limit.
    pub terminal: bool,
}

impl TaskSpec {
    pub fn kind(&self) -> EnvKind {
        match self.layout {
            TaskLayout::Grid { .. } => EnvKind::Gridworld,
            TaskLayout::Velocity { .. } => EnvKind::Velocity,
        }
    }

    pub fn reset(&self) -> EnvState {
        match &self.layout {
            TaskLayout::Grid { start, .. } => EnvState::Grid(*start),
            TaskLayout::Velocity { .. } => EnvState::Velocity(0.0),
        }
    }

    /// What the agent sees: its grid position, or its speed. Goal,
    /// obstacles and target speed stay hidden.
    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        match state {
            EnvState::Grid(c) => vec![c.x as f64, c.y as f64],
            EnvState::Velocity(v) => vec![*v],
        }
    }

    /// Gridworld actions: 0 stay, 1 up (+y), 2 down (-y), 3 left (-x),
    /// 4 right (+x). Moves off the grid leave the agent in place.
    pub fn step(&self, state: &EnvState, action: Action) -> Result<StepOutcome> {
        match (&self.layout, state, action) {
            (TaskLayout::Grid { size, goal, obstacles, .. }, EnvState::Grid(c), Action::Discrete(a)) => {
                let n = *size as isize;
                let (dx, dy) = match a {
                    0 => (0, 0),
                    1 => (0, 1),
                    2 => (0, -1),
                    3 => (-1, 0),
                    4 => (1, 0),
                    _ => return Err(contract(format!("gridworld action {a} outside 0..{GRID_ACTIONS}"))),
                };
                let (nx, ny) = (c.x as isize + dx, c.y as isize + dy);
                let next = if (0..n).contains(&nx) && (0..n).contains(&ny) {
                    Cell {
                        x: nx as usize,
                        y: ny as usize,
                    }
                } else {
                    *c
                };
                let at_goal = next == *goal;
                Ok(StepOutcome {
                    next: EnvState::Grid(next),
                    reward: if at_goal { 1.0 } else { 0.0 },
                    cost: if obstacles.contains(&next) { 1.0 } else { 0.0 },
                    terminal: at_goal,
                })
            }
            (TaskLayout::Velocity { target, limit }, EnvState::Velocity(v), Action::Continuous(a)) => {
                if !(-1.0..=1.0).contains(&a) {
                    return Err(contract(format!("acceleration {a} outside [-1, 1]")));
                }
                let nv = (v + ACCEL_GAIN * a).clamp(-V_MAX, V_MAX);
                Ok(StepOutcome {
                    next: EnvState::Velocity(nv),
                    reward: -(nv - target).abs(),
                    cost: (nv.abs() - limit).max(0.0),
                    terminal: false,
                })
            }
            (_, _, a) => Err(contract(format!("action {a:?} does not fit the task's action space"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TaskSpec {
        TaskSpec {
            alpha: 0.0,
            seed: 0,
            layout: TaskLayout::Grid {
                size: 3,
                start: Cell { x: 0, y: 0 },
                goal: Cell { x: 2, y: 2 },
                obstacles: vec![Cell { x: 1, y: 0 }],
            },
        }
    }

    #[test]
    fn wall_bump_stays_put() {
        let t = grid();
        let s = t.reset();
        let out = t.step(&s, Action::Discrete(3)).unwrap();
        assert_eq!(out.next, s);
        assert_eq!((out.reward, out.cost, out.terminal), (0.0, 0.0, false));
    }

    #[test]
    fn obstacle_costs_one() {
        let t = grid();
        let out = t.step(&t.reset(), Action::Discrete(4)).unwrap();
        assert_eq!(out.cost, 1.0);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn goal_rewards_and_terminates() {
        let t = grid();
        let out = t.step(&EnvState::Grid(Cell { x: 2, y: 1 }), Action::Discrete(1)).unwrap();
        assert_eq!((out.reward, out.terminal), (1.0, true));
    }

    #[test]
    fn bad_actions_are_contract_violations() {
        let t = grid();
        assert!(matches!(t.step(&t.reset(), Action::Discrete(5)), Err(crate::Error::Contract(_))));
        assert!(matches!(t.step(&t.reset(), Action::Continuous(0.0)), Err(crate::Error::Contract(_))));
        let v = TaskSpec {
            alpha: 0.0,
            seed: 0,
            layout: TaskLayout::Velocity { target: 1.0, limit: 1.0 },
        };
        assert!(matches!(v.step(&v.reset(), Action::Continuous(1.5)), Err(crate::Error::Contract(_))));
        assert!(v.step(&v.reset(), Action::Continuous(f64::NAN)).is_err());
    }

    #[test]
    fn velocity_hinge_boundary() {
        let v = TaskSpec {
            alpha: 0.0,
            seed: 0,
            layout: TaskLayout::Velocity { target: 0.5, limit: 1.0 },
        };
        let out = v.step(&EnvState::Velocity(1.0), Action::Continuous(0.0)).unwrap();
        assert_eq!(out.cost, 0.0);
        assert_eq!(out.reward, -0.5);
        let out = v.step(&EnvState::Velocity(1.0), Action::Continuous(1.0)).unwrap();
        assert!((out.cost - 0.25).abs() < 1e-15);
    }

    #[test]
    fn observation_is_position_only() {
        let t = grid();
        assert_eq!(t.observe(&t.reset()), vec![0.0, 0.0]);
    }
}
