//! Flat key-value run configuration.
//!
//! Every key is optional; unknown keys are rejected. A few defaults depend
//! on the environment (horizon, budget range, budget grid) and are filled
//! in by [`RunConfig::resolve`]. Runs write the resolved file next to their
//! outputs, so a config plus a checkpoint digest identifies every result.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::critic::CostTargetRule;
use crate::error::{config, Result};
use crate::gradnet::AdamConfig;
use crate::model::ModelSpec;
use crate::shield::{ShieldConfig, ShieldMode};
use crate::sim::EnvKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    pub grid_size: usize,
    pub n_obstacles: usize,
    /// Episode time limit; 30 for the gridworld, 75 for the velocity toy.
    pub horizon: Option<usize>,
    /// Episodes per context.
    pub episodes: usize,
    pub alpha_train: f64,
    pub alpha_test: f64,
    /// Budget range; [1, 15] for the gridworld, [0, 5] for the velocity toy.
    pub budget_min: Option<f64>,
    pub budget_max: Option<f64>,

    pub window: usize,
    pub d_z: usize,
    pub d_m: usize,
    pub encoder_hidden: usize,
    pub hidden: usize,
    pub ensemble: usize,

    pub epochs: usize,
    pub collect_steps: usize,
    pub update_batches: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub tau: f64,
    pub gamma_r: f64,
    pub k_c: usize,
    pub cost_target: CostTargetRule,
    pub lambda_critic: f64,
    pub lambda_wm: f64,
    pub lambda_distill: f64,
    pub lambda_conj: f64,
    pub alpha_bc: f64,
    pub awbc_clip: f64,
    pub lambda_init: f64,
    pub lambda_lr: f64,
    /// Probability of a uniformly random action during collection.
    pub epsilon: f64,
    pub detach_wm_target: bool,
    pub actor_to_encoder: bool,
    pub critic_to_encoder: bool,
    pub train_shield: ShieldMode,

    pub shield: ShieldMode,
    pub n_samples: usize,
    pub shield_temperature: f64,
    pub eval_tasks: usize,
    /// Episodes per evaluation context.
    pub eval_episodes: usize,
    pub diag_tasks: usize,
    pub budget_grid: Option<Vec<f64>>,
    pub ns_grid: Vec<usize>,
    /// Margin for the consecutive safe-set overlap check.
    pub overlap_eta: f64,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvKind::Gridworld,
            grid_size: 5,
            n_obstacles: 3,
            horizon: None,
            episodes: 4,
            alpha_train: -0.5,
            alpha_test: 0.5,
            budget_min: None,
            budget_max: None,
            window: 20,
            d_z: 32,
            d_m: 16,
            encoder_hidden: 64,
            hidden: 32,
            ensemble: 4,
            epochs: 50,
            collect_steps: 300,
            update_batches: 100,
            batch_size: 32,
            buffer_capacity: 20_000,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            grad_clip: 1.0,
            tau: 0.005,
            gamma_r: 0.99,
            k_c: 1,
            cost_target: CostTargetRule::Mean,
            lambda_critic: 10.0,
            lambda_wm: 1.0,
            lambda_distill: 0.1,
            lambda_conj: 0.1,
            alpha_bc: 0.1,
            awbc_clip: 20.0,
            lambda_init: 0.0,
            lambda_lr: 0.05,
            epsilon: 0.1,
            detach_wm_target: true,
            actor_to_encoder: false,
            critic_to_encoder: true,
            train_shield: ShieldMode::Off,
            shield: ShieldMode::Soft,
            n_samples: 8,
            shield_temperature: 1.0,
            eval_tasks: 100,
            eval_episodes: 10,
            diag_tasks: 50,
            budget_grid: None,
            ns_grid: vec![4, 8, 16, 32],
            overlap_eta: 0.5,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Fills environment-dependent defaults and validates.
    pub fn resolve(mut self) -> Result<Self> {
        let (h, lo, hi) = match self.env {
            EnvKind::Gridworld => (30, 1.0, 15.0),
            EnvKind::Velocity => (75, 0.0, 5.0),
        };
        self.horizon.get_or_insert(h);
        self.budget_min.get_or_insert(lo);
        self.budget_max.get_or_insert(hi);
        if self.budget_grid.is_none() {
            let step = match self.env {
                EnvKind::Gridworld => 1.0,
                EnvKind::Velocity => 0.5,
            };
            let n = (hi / step).round() as usize;
            self.budget_grid = Some((0..=n).map(|i| i as f64 * step).collect());
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(config(m.to_string()));
        if self.grid_size < 3 {
            return bad("grid_size must be at least 3");
        }
        if self.horizon() == 0 || self.episodes == 0 || self.eval_episodes == 0 {
            return bad("horizon and episodes must be positive");
        }
        let (lo, hi) = self.budget_range();
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return bad("budget range must satisfy 0 <= budget_min <= budget_max");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch_size must be positive and fit in the buffer");
        }
        if self.ensemble < 2 {
            return bad("ensemble needs at least 2 heads");
        }
        if self.k_c == 0 {
            return bad("k_c must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.epsilon) {
            return bad("tau and epsilon must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.lambda_lr < 0.0 || self.lambda_init < 0.0 {
            return bad("lr and grad_clip must be positive; lambda_lr and lambda_init nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.n_samples == 0 || self.ns_grid.contains(&0) {
            return bad("candidate counts must be positive");
        }
        if !(self.shield_temperature >= 0.0) {
            return bad("shield_temperature must be nonnegative");
        }
        if self.budget_grid.as_ref().is_some_and(|g| g.is_empty() || g.iter().any(|d| !(*d >= 0.0))) {
            return bad("budget_grid must be a nonempty list of nonnegative budgets");
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon.unwrap_or(30)
    }

    pub fn budget_range(&self) -> (f64, f64) {
        (self.budget_min.unwrap_or(1.0), self.budget_max.unwrap_or(15.0))
    }

    pub fn budget_grid(&self) -> Vec<f64> {
        self.budget_grid.clone().unwrap_or_default()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            kind: self.env,
            grid_size: self.grid_size,
            window: self.window,
            d_z: self.d_z,
            d_m: self.d_m,
            encoder_hidden: self.encoder_hidden,
            hidden: self.hidden,
            ensemble: self.ensemble,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn shield_config(&self) -> ShieldConfig {
        ShieldConfig {
            mode: self.shield,
            n_samples: self.n_samples,
            beta: self.shield_temperature,
        }
    }
}
