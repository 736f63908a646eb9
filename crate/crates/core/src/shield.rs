//! Runtime Q-barrier shield over a finite candidate set.
//!
//! For remaining budget `B` and pessimistic cost `Q+(z_w, A)`, the margins
//! are `b_Q(A) = B - Q+(A)` and `b_V = B - min_A Q+(A)`. The soft shield
//! reweights the base weights `rho` by `exp(-beta * [-b_Q]_+)`; the hard
//! shield keeps only candidates with `b_Q >= 0` and falls back to the
//! cheapest candidates when none is affordable.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::ContextWindow;
use crate::error::{config, contract, health, Result};
use crate::model::Model;
use crate::sim::{Action, GRID_ACTIONS};

pub const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShieldMode {
    /// Base policy; candidates are still scored for logging.
    Off,
    Soft,
    Hard,
}

impl std::str::FromStr for ShieldMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(ShieldMode::Off),
            "soft" => Ok(ShieldMode::Soft),
            "hard" => Ok(ShieldMode::Hard),
            _ => Err(config(format!("unknown shield mode {s:?} (off, soft, hard)"))),
        }
    }
}

impl std::fmt::Display for ShieldMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ShieldMode::Off => "off",
            ShieldMode::Soft => "soft",
            ShieldMode::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateOrigin {
    /// Whole discrete action space with `rho = pi`.
    Enumerated,
    /// Policy samples with `rho = 1`; duplicates are kept.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub actions: Vec<Action>,
    pub rho: Vec<f64>,
    pub origin: CandidateOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShieldConfig {
    pub mode: ShieldMode,
    /// Candidate count for continuous actions.
    pub n_samples: usize,
    /// Temperature on the soft-shield hinge.
    pub beta: f64,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        ShieldConfig {
            mode: ShieldMode::Soft,
            n_samples: 8,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldDecision {
    pub candidates: CandidateSet,
    pub q_plus: Vec<f64>,
    /// Ensemble-mean cost per candidate, kept for the mean-critic comparison.
    pub q_mean: Vec<f64>,
    pub b_q: Vec<f64>,
    pub b_v: f64,
    pub budget: f64,
    pub probs: Vec<f64>,
    pub chosen: usize,
    pub action: Action,
    pub mode: ShieldMode,
    pub fallback: bool,
    /// Candidates within [`TIE_TOL`] of the smallest `Q+`.
    pub tie_set: Vec<usize>,
}

impl ShieldDecision {
    /// `min_A Q+(z, A)` over the candidate set.
    pub fn v_plus(&self) -> f64 {
        self.q_plus.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Number of candidates with `b_Q >= 0`.
    pub fn safe_count(&self) -> usize {
        self.b_q.iter().filter(|b| **b >= 0.0).count()
    }
}

/// `(b_V, b_Q)` for candidate costs `q_plus` at budget `budget`.
pub fn barriers(q_plus: &[f64], budget: f64) -> Result<(f64, Vec<f64>)> {
    if q_plus.is_empty() {
        return Err(contract("barriers over an empty candidate set"));
    }
    let b_q: Vec<f64> = q_plus.iter().map(|q| budget - q).collect();
    let qmin = q_plus.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((budget - qmin, b_q))
}

/// Normalized `rho * exp(-beta * [-b_Q]_+)`, computed in log space so
/// large violations cannot underflow every weight at once.
pub fn soft_shield(rho: &[f64], b_q: &[f64], beta: f64) -> Result<Vec<f64>> {
    if rho.len() != b_q.len() || rho.is_empty() {
        return Err(contract("soft_shield: rho and margins must be nonempty and aligned"));
    }
    if rho.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(contract("soft_shield: base weights must be finite and nonnegative"));
    }
    let logw: Vec<f64> = rho
        .iter()
        .zip(b_q)
        .map(|(r, b)| if *r > 0.0 { r.ln() - beta * (-b).max(0.0) } else { f64::NEG_INFINITY })
        .collect();
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return Err(contract("soft_shield: every base weight is zero"));
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// Hard filter with lowest-cost fallback. Returns the distribution, the
/// fallback flag and the tie set `A_min`.
pub fn hard_shield(rho: &[f64], b_q: &[f64], q_plus: &[f64]) -> Result<(Vec<f64>, bool, Vec<usize>)> {
    if rho.len() != b_q.len() || rho.len() != q_plus.len() || rho.is_empty() {
        return Err(contract("hard_shield: inputs must be nonempty and aligned"));
    }
    let ties = tie_set(q_plus);
    let safe_mass: f64 = rho.iter().zip(b_q).filter(|(_, b)| **b >= 0.0).map(|(r, _)| r).sum();
    if safe_mass > 0.0 {
        let p = rho
            .iter()
            .zip(b_q)
            .map(|(r, b)| if *b >= 0.0 { r / safe_mass } else { 0.0 })
            .collect();
        Ok((p, false, ties))
    } else {
        let mut p = vec![0.0; rho.len()];
        for &i in &ties {
            p[i] = 1.0 / ties.len() as f64;
        }
        Ok((p, true, ties))
    }
}

pub fn tie_set(q_plus: &[f64]) -> Vec<usize> {
    let qmin = q_plus.iter().copied().fold(f64::INFINITY, f64::min);
    (0..q_plus.len()).filter(|&i| q_plus[i] - qmin <= TIE_TOL).collect()
}

/// Builds the candidate set at policy latent `zp`.
pub fn candidates<R: Rng + ?Sized>(model: &Model, zp: &[f64], mode: ShieldMode, n_samples: usize, rng: &mut R) -> Result<CandidateSet> {
    if model.spec.kind.is_discrete() {
        Ok(CandidateSet {
            actions: (0..GRID_ACTIONS).map(Action::Discrete).collect(),
            rho: model.policy.probs(&model.stores.policy, zp)?,
            origin: CandidateOrigin::Enumerated,
        })
    } else {
        let n = if mode == ShieldMode::Off { 1 } else { n_samples };
        if n == 0 {
            return Err(config("continuous shielding needs n_samples >= 1"));
        }
        let actions = (0..n)
            .map(|_| model.policy.sample(&model.stores.policy, zp, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(CandidateSet {
            rho: vec![1.0; actions.len()],
            actions,
            origin: CandidateOrigin::Sampled,
        })
    }
}

/// Scores a candidate set at world latent `zw` and budget `budget` and
/// samples one candidate.
pub fn decide<R: Rng + ?Sized>(
    model: &Model,
    zw: &[f64],
    cands: CandidateSet,
    budget: f64,
    cfg: &ShieldConfig,
    rng: &mut R,
) -> Result<ShieldDecision> {
    let heads = model
        .cost_critic
        .candidate_values(&model.stores.cost_critic, zw, &cands.actions);
    let q_plus: Vec<f64> = heads.iter().map(|h| crate::critic::max_of(h)).collect();
    let q_mean: Vec<f64> = heads.iter().map(|h| crate::critic::mean_of(h)).collect();
    if q_plus.iter().any(|q| !q.is_finite()) {
        return Err(health("non-finite cost critic output; shield refuses to act"));
    }
    let (b_v, b_q) = barriers(&q_plus, budget)?;
    let (probs, fallback, tie_set) = match cfg.mode {
        ShieldMode::Off => {
            let z: f64 = cands.rho.iter().sum();
            (cands.rho.iter().map(|r| r / z).collect(), false, tie_set(&q_plus))
        }
        ShieldMode::Soft => (soft_shield(&cands.rho, &b_q, cfg.beta)?, false, tie_set(&q_plus)),
        ShieldMode::Hard => hard_shield(&cands.rho, &b_q, &q_plus)?,
    };
    let chosen = WeightedIndex::new(&probs)
        .map_err(|e| health(format!("shield distribution: {e}")))?
        .sample(rng);
    Ok(ShieldDecision {
        action: cands.actions[chosen],
        candidates: cands,
        q_plus,
        q_mean,
        b_q,
        b_v,
        budget,
        probs,
        chosen,
        mode: cfg.mode,
        fallback,
        tie_set,
    })
}

/// Encodes the window, builds candidates, applies the shield and samples an
/// action. Parameters are only read.
pub fn select_action<R: Rng + ?Sized>(
    model: &Model,
    window: &ContextWindow,
    budget: f64,
    cfg: &ShieldConfig,
    rng: &mut R,
) -> Result<ShieldDecision> {
    let lat = model.encode(window)?;
    let cands = candidates(model, &lat.zp, cfg.mode, cfg.n_samples, rng)?;
    decide(model, &lat.zw, cands, budget, cfg, rng)
}
