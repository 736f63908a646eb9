//! Post-hoc diagnostics over decision logs with a frozen model.
//!
//! Every logged step is re-encoded from its context history. The world
//! latent of the next step in the same episode is the realized `z_w'`; the
//! world model's predictive mean at `(z_w, a)` is `f`. Both are scored on
//! the candidate set the shield actually used at the next step, so
//! `V+(f)` and `V+(z_w')` differ only through the latent.
//!
//! The last step of an episode has no successor: its continuation value is
//! zero and the prediction error is undefined.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critic::{max_of, mean_of};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::probe::log::{LogHeader, LoggedContext};

/// Denominator offset of the local sensitivity ratio.
pub const EPS_LOCAL: f64 = 1e-8;
/// A step satisfies the learned Bellman upper bound when its residual is at
/// most this.
pub const BELLMAN_SAT: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-4;
/// Slack for float rounding in the inequality checks, which hold exactly in
/// real arithmetic.
pub const ROUNDING_TOL: f64 = 1e-9;
/// Largest allowed gap between logged and recomputed critic values.
pub const REPLAY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagOptions {
    /// Replace `f` by the realized next latent.
    pub oracle_dynamics: bool,
    /// Margin of the safe-set overlap check.
    pub eta: f64,
}

impl Default for DiagOptions {
    fn default() -> Self {
        DiagOptions {
            oracle_dynamics: false,
            eta: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRecord {
    /// Index of the context in the log.
    pub context: usize,
    pub row: usize,
    pub episode: usize,
    pub t: usize,
    pub terminal: bool,
    /// `B_t`.
    pub budget: f64,
    /// `C_{t+1}`.
    pub cost: f64,
    /// `B_{t+1}`: the next logged budget, or `B_t - C_{t+1}` at the last step.
    pub budget_next: f64,
    pub q_sel: f64,
    /// `V+` over the current candidates.
    pub v_plus: f64,
    pub b_q: f64,
    pub b_v: f64,
    pub delta_sel: f64,
    /// `V+(f)` over the next candidates.
    pub v_pred: f64,
    /// `V+(z_w')` over the next candidates.
    pub v_next: f64,
    pub b_v_next: f64,
    pub e_pred: Option<f64>,
    pub e_v: f64,
    pub l_local: Option<f64>,
    pub bell: f64,
    pub q_sel_mean: f64,
    pub v_pred_mean: f64,
    pub bell_mean: f64,
}

impl DiagRecord {
    /// Residual of the exact one-step margin decomposition.
    pub fn identity_residual(&self) -> f64 {
        let rhs = self.b_q + (self.q_sel - self.cost - self.v_pred) + (self.v_pred - self.v_next);
        (self.b_v_next - rhs).abs()
    }

    /// `b_V(t+1) - (b_Q(t) - bell - e_V)`; negative means a violation.
    pub fn margin_slack(&self) -> f64 {
        self.b_v_next - (self.b_q - self.bell - self.e_v)
    }

    pub fn bellman_satisfied(&self) -> bool {
        self.bell <= BELLMAN_SAT
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Per-context intermediate: records plus the world latents they were
/// computed from.
struct ContextDiag {
    records: Vec<DiagRecord>,
    zw: Vec<Vec<f64>>,
}

fn diagnose_context(model: &Model, header: &LogHeader, ci: usize, ctx: &LoggedContext, opts: &DiagOptions) -> Result<ContextDiag> {
    let refuse = |row: usize, msg: &str| Error::Diagnostics(format!("row {row}: {msg}"));
    let trs = ctx.transitions();
    let store = &model.stores.cost_critic;
    let mut zw = Vec::with_capacity(trs.len());
    for (i, tr) in trs.iter().enumerate() {
        let w = model.codec.window(&trs[..i], &tr.state, tr.t, header.horizon);
        let lat = model.encode(&w)?;
        let d = &ctx.steps[i].decision;
        let heads = model.cost_critic.candidate_values(store, &lat.zw, &d.candidates.actions);
        for (h, q) in heads.iter().zip(&d.q_plus) {
            let r = max_of(h);
            if !((r - q).abs() <= REPLAY_TOL * q.abs().max(1.0)) {
                return Err(refuse(
                    ctx.steps[i].row,
                    &format!("checkpoint gives Q+ = {r}, log has {q}; model and log do not match"),
                ));
            }
        }
        zw.push(lat.zw);
    }

    let mut records = Vec::with_capacity(trs.len());
    for (i, step) in ctx.steps.iter().enumerate() {
        let tr = &step.transition;
        let d = &step.decision;
        let q_sel = d.q_plus[d.chosen];
        let q_sel_mean = d.q_mean[d.chosen];
        let v_plus = d.v_plus();
        let b_q = d.b_q[d.chosen];
        let mut rec = DiagRecord {
            context: ci,
            row: step.row,
            episode: tr.episode,
            t: tr.t,
            terminal: tr.d_ctx,
            budget: tr.budget,
            cost: tr.cost,
            budget_next: tr.budget_after(),
            q_sel,
            v_plus,
            b_q,
            b_v: d.b_v,
            delta_sel: q_sel - v_plus,
            v_pred: 0.0,
            v_next: 0.0,
            b_v_next: 0.0,
            e_pred: None,
            e_v: 0.0,
            l_local: None,
            bell: 0.0,
            q_sel_mean,
            v_pred_mean: 0.0,
            bell_mean: 0.0,
        };
        if !tr.d_ctx {
            let next = ctx
                .steps
                .get(i + 1)
                .ok_or_else(|| refuse(step.row, "next decision missing; cannot score the continuation"))?;
            let nd = &next.decision;
            if nd.candidates.actions.is_empty() {
                return Err(refuse(next.row, "next candidate set is empty"));
            }
            rec.budget_next = next.transition.budget;
            let f = if opts.oracle_dynamics {
                zw[i + 1].clone()
            } else {
                model
                    .world
                    .mean(&model.stores.dynamics, &zw[i], &model.codec.embed_action(tr.action))?
            };
            let heads_f = model.cost_critic.candidate_values(store, &f, &nd.candidates.actions);
            let qf: Vec<f64> = heads_f.iter().map(|h| max_of(h)).collect();
            let qf_mean: Vec<f64> = heads_f.iter().map(|h| mean_of(h)).collect();
            rec.v_pred = min_of(&qf);
            rec.v_pred_mean = min_of(&qf_mean);
            rec.v_next = nd.v_plus();
            let e_pred = dist(&f, &zw[i + 1]);
            rec.e_pred = Some(e_pred);
            rec.e_v = (rec.v_pred - rec.v_next).abs();
            let worst = qf
                .iter()
                .zip(&nd.q_plus)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            rec.l_local = Some(worst / (e_pred + EPS_LOCAL));
        }
        rec.b_v_next = rec.budget_next - rec.v_next;
        rec.bell = (tr.cost + rec.v_pred - q_sel).max(0.0);
        rec.bell_mean = (tr.cost + rec.v_pred_mean - q_sel_mean).max(0.0);
        records.push(rec);
    }
    Ok(ContextDiag { records, zw })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMarginReport {
    pub checked: usize,
    pub max_residual: f64,
    /// Rows whose identity residual exceeds [`IDENTITY_TOL`].
    pub identity_failures: Vec<usize>,
    /// Rows where `b_V(t+1) < b_Q(t) - bell - e_V`.
    pub inequality_violations: Vec<usize>,
}

impl StepMarginReport {
    pub fn passed(&self) -> bool {
        self.identity_failures.is_empty() && self.inequality_violations.is_empty()
    }
}

pub fn check_step_margins(records: &[DiagRecord]) -> StepMarginReport {
    let mut r = StepMarginReport::default();
    for rec in records {
        r.checked += 1;
        let res = rec.identity_residual();
        r.max_residual = r.max_residual.max(res);
        if !(res <= IDENTITY_TOL) {
            r.identity_failures.push(rec.row);
        }
        if !(rec.margin_slack() >= -ROUNDING_TOL) {
            r.inequality_violations.push(rec.row);
        }
    }
    r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBoundReport {
    pub context: usize,
    pub episode: usize,
    pub first_row: usize,
    pub steps: usize,
    /// Realized episode cost `G_c`.
    pub g_c: f64,
    pub delta: f64,
    pub b_v0: f64,
    /// Sum of selection gaps, Bellman residuals and value perturbations.
    pub residual_sum: f64,
    /// `(-b_V0 + residual_sum) - (G_c - delta)`.
    pub slack: f64,
}

impl EpisodeBoundReport {
    pub fn from_records(records: &[DiagRecord]) -> Self {
        let first = &records[0];
        let g_c: f64 = records.iter().map(|r| r.cost).sum();
        let residual_sum: f64 = records.iter().map(|r| r.delta_sel + r.bell + r.e_v).sum();
        let delta = first.budget;
        EpisodeBoundReport {
            context: first.context,
            episode: first.episode,
            first_row: first.row,
            steps: records.len(),
            g_c,
            delta,
            b_v0: first.b_v,
            residual_sum,
            slack: (-first.b_v + residual_sum) - (g_c - delta),
        }
    }
}

/// Holds when the slack is nonnegative up to rounding. Requires the last
/// step to be terminal.
pub fn check_episode_bound(r: &EpisodeBoundReport) -> bool {
    r.slack >= -ROUNDING_TOL * (1.0 + r.steps as f64)
}

/// Splits records into episodes and builds one report per episode.
pub fn episode_reports(records: &[DiagRecord]) -> Vec<EpisodeBoundReport> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, r) in records.iter().enumerate() {
        if r.terminal {
            out.push(EpisodeBoundReport::from_records(&records[start..=i]));
            start = i + 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetFault {
    pub row: usize,
    pub expected: f64,
    pub found: f64,
}

/// Replays `B_0 = delta`, `B_{t+1} = B_t - C_{t+1}` with the simulator's
/// arithmetic and reports every row whose logged budget differs.
pub fn check_budget(ctx: &LoggedContext) -> Vec<BudgetFault> {
    let mut faults = Vec::new();
    let mut remaining = ctx.delta;
    for s in &ctx.steps {
        let tr = &s.transition;
        if tr.t == 0 {
            remaining = ctx.delta;
        }
        if tr.budget != remaining {
            faults.push(BudgetFault {
                row: s.row,
                expected: remaining,
                found: tr.budget,
            });
        }
        remaining -= tr.cost;
    }
    faults
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    /// Consecutive (step, action) pairs where the action is in both sets.
    pub pairs: usize,
    /// Pairs meeting the margin and drift conditions.
    pub applicable: usize,
    /// Applicable pairs whose action left the safe set; rows listed.
    pub failures: Vec<usize>,
    /// Largest measured per-pair sensitivity `|dQ+| / |dz_w|`.
    pub max_ratio: f64,
}

impl OverlapReport {
    pub fn applicability(&self) -> f64 {
        if self.pairs == 0 {
            0.0
        } else {
            self.applicable as f64 / self.pairs as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn merge(&mut self, o: OverlapReport) {
        self.pairs += o.pairs;
        self.applicable += o.applicable;
        self.failures.extend(o.failures);
        self.max_ratio = self.max_ratio.max(o.max_ratio);
    }
}

/// One consecutive pair: the action's `Q+` and latent/budget at both steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapPair {
    pub q_now: f64,
    pub q_next: f64,
    pub latent_shift: f64,
    pub budget_now: f64,
    pub budget_next: f64,
}

/// `None` when the precondition fails, otherwise whether the action stayed
/// safe.
pub fn overlap_verdict(p: &OverlapPair, eta: f64) -> Option<bool> {
    if p.q_now > p.budget_now - eta {
        return None;
    }
    // the per-pair ratio times the shift is the realized change itself
    let drift = (p.q_next - p.q_now).abs();
    if drift + (p.budget_next - p.budget_now).abs() > eta {
        return None;
    }
    Some(p.q_next <= p.budget_next)
}

fn overlap_context(ctx: &LoggedContext, zw: &[Vec<f64>], eta: f64) -> OverlapReport {
    let mut r = OverlapReport::default();
    for i in 0..ctx.steps.len().saturating_sub(1) {
        if ctx.steps[i].transition.d_ctx {
            continue;
        }
        let (a, b) = (&ctx.steps[i], &ctx.steps[i + 1]);
        let shift = dist(&zw[i], &zw[i + 1]);
        for (ja, act) in a.decision.candidates.actions.iter().enumerate() {
            let Some(jb) = b.decision.candidates.actions.iter().position(|x| x == act) else {
                continue;
            };
            r.pairs += 1;
            let p = OverlapPair {
                q_now: a.decision.q_plus[ja],
                q_next: b.decision.q_plus[jb],
                latent_shift: shift,
                budget_now: a.transition.budget,
                budget_next: b.transition.budget,
            };
            if shift > 0.0 {
                r.max_ratio = r.max_ratio.max((p.q_next - p.q_now).abs() / shift);
            }
            match overlap_verdict(&p, eta) {
                None => {}
                Some(true) => r.applicable += 1,
                Some(false) => {
                    r.applicable += 1;
                    r.failures.push(b.row);
                }
            }
        }
    }
    r
}

/// Mean and standard error across rollouts of a rollout-level mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub mean: f64,
    pub se: f64,
    /// Rollouts that contributed.
    pub n: usize,
}

pub const SUMMARY_METRICS: [&str; 8] = [
    "e_pred",
    "e_v",
    "l_local",
    "bell_sat_pct",
    "bell",
    "bell_sat_mean_pct",
    "bell_mean",
    "delta_sel",
];

fn rollout_values(name: &str, recs: &[DiagRecord]) -> Vec<f64> {
    match name {
        "e_pred" => recs.iter().filter_map(|r| r.e_pred).collect(),
        "l_local" => recs.iter().filter_map(|r| r.l_local).collect(),
        "e_v" => recs.iter().map(|r| r.e_v).collect(),
        "bell" => recs.iter().map(|r| r.bell).collect(),
        "bell_mean" => recs.iter().map(|r| r.bell_mean).collect(),
        "bell_sat_pct" => recs.iter().map(|r| if r.bell <= BELLMAN_SAT { 100.0 } else { 0.0 }).collect(),
        "bell_sat_mean_pct" => recs
            .iter()
            .map(|r| if r.bell_mean <= BELLMAN_SAT { 100.0 } else { 0.0 })
            .collect(),
        "delta_sel" => recs.iter().map(|r| r.delta_sel).collect(),
        _ => Vec::new(),
    }
}

/// Averages each metric within a rollout (one context), then reports the
/// mean and standard error of those rollout means.
pub fn summarize(records: &[DiagRecord]) -> Vec<Metric> {
    let mut groups: Vec<&[DiagRecord]> = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].context != records[start].context {
            groups.push(&records[start..i]);
            start = i;
        }
    }
    SUMMARY_METRICS
        .iter()
        .map(|name| {
            let means: Vec<f64> = groups
                .iter()
                .filter_map(|g| {
                    let v = rollout_values(name, g);
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            let (mean, se) = mean_se(&means);
            Metric {
                name: name.to_string(),
                mean,
                se,
                n: means.len(),
            }
        })
        .collect()
}

/// Sample mean and standard error; the error is 0 for fewer than two values.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub records: Vec<DiagRecord>,
    pub step_margins: StepMarginReport,
    pub episodes: Vec<EpisodeBoundReport>,
    /// Rows of episodes that break the telescoped bound (first row of each).
    pub episode_violations: Vec<usize>,
    pub budget_faults: Vec<BudgetFault>,
    pub overlap: OverlapReport,
    pub summary: Vec<Metric>,
    /// Largest one-step prediction error: the empirical grounding constant.
    pub max_e_pred: f64,
}

impl DiagnoseReport {
    /// True when every identity-level check passed.
    pub fn passed(&self) -> bool {
        self.step_margins.passed() && self.episode_violations.is_empty() && self.budget_faults.is_empty() && self.overlap.passed()
    }
}

/// Runs every diagnostic on a parsed log. Contexts are processed in
/// parallel; output order follows the log.
pub fn diagnose(model: &Model, header: &LogHeader, contexts: &[LoggedContext], opts: &DiagOptions) -> Result<DiagnoseReport> {
    if header.env != model.spec.kind {
        return Err(Error::Diagnostics(format!(
            "log is for {} but the checkpoint is a {} model",
            header.env, model.spec.kind
        )));
    }
    let parts = contexts
        .par_iter()
        .enumerate()
        .map(|(ci, ctx)| {
            let d = diagnose_context(model, header, ci, ctx, opts)?;
            let overlap = overlap_context(ctx, &d.zw, opts.eta);
            Ok((d.records, overlap, check_budget(ctx)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    let mut overlap = OverlapReport::default();
    let mut budget_faults = Vec::new();
    for (r, o, b) in parts {
        records.extend(r);
        overlap.merge(o);
        budget_faults.extend(b);
    }
    let step_margins = check_step_margins(&records);
    let episodes = episode_reports(&records);
    let episode_violations = episodes
        .iter()
        .filter(|e| !check_episode_bound(e))
        .map(|e| e.first_row)
        .collect();
    let summary = summarize(&records);
    let max_e_pred = records.iter().filter_map(|r| r.e_pred).fold(0.0, f64::max);
    Ok(DiagnoseReport {
        records,
        step_margins,
        episodes,
        episode_violations,
        budget_faults,
        overlap,
        summary,
        max_e_pred,
    })
}
