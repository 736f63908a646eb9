//! The batch commands behind the command-line tool. Each writes its CSVs,
//! a copy of the resolved config and, where it makes sense, an SVG chart
//! into an output directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::Rng;
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::eval::{evaluate, Arm, Budgets, ContextResult, EvalSpec};
use super::report::{cols, line_charts, num, Meta, Series, Table};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::probe::{self, DiagOptions, DiagnoseReport, LogHeader, LogWriter};
use crate::seeding::{self, tag};
use crate::shield::{ShieldConfig, ShieldMode};
use crate::sim::{sample_task, EnvKind, SpawnLaw, TaskLayout, GRID_ACTIONS};
use crate::trainer::{EpochReport, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// A frozen model and the digest of its parameters.
pub struct Checkpoint {
    pub model: Model,
    pub digest: String,
    pub path: PathBuf,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let (model, _) = Model::load(path)?;
        Ok(Checkpoint {
            digest: model.digest(),
            model,
            path: path.to_path_buf(),
        })
    }

    /// Refuses a config whose environment or architecture differs from the
    /// checkpoint's.
    pub fn check(&self, cfg: &RunConfig) -> Result<()> {
        if self.model.spec != cfg.model_spec() {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different environment or architecture than the config describes",
                self.path.display()
            )));
        }
        Ok(())
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

fn meta(cfg: &RunConfig, command: &str, checkpoint: Option<&str>) -> Meta {
    let m = Meta::new()
        .with("command", command)
        .with("config_digest", cfg.digest())
        .with("seed", cfg.seed)
        .with("env", cfg.env);
    match checkpoint {
        Some(d) => m.with("checkpoint_digest", d),
        None => m,
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

// ---------------------------------------------------------------- train

pub const TRAIN_COLUMNS: [&str; 15] = [
    "epoch",
    "lambda_c",
    "collect_steps",
    "collect_episodes",
    "collect_return",
    "collect_cost",
    "collect_delta",
    "loss_total",
    "loss_actor",
    "loss_critic",
    "loss_wm",
    "loss_distill",
    "loss_conj",
    "penalty",
    "grad_norm",
];

fn train_row(r: &EpochReport) -> Vec<String> {
    let mut row = vec![
        r.epoch.to_string(),
        num(r.lambda_c),
        r.collect_steps.to_string(),
        r.collect_episodes.to_string(),
        num(r.collect_return),
        num(r.collect_cost),
        num(r.collect_delta),
    ];
    match r.mean_losses() {
        Some(m) => {
            let l = m.losses;
            row.extend([l.total, l.actor, l.critic, l.wm, l.distill, l.conj, l.penalty, m.grad_norm].map(num));
        }
        None => row.extend(std::iter::repeat_n(String::new(), 8)),
    }
    row
}

/// Trains for `cfg.epochs` epochs, or up to that many when resuming from
/// `resume`. Writes `train_log.csv` and the checkpoint under
/// `out/checkpoint`. If an epoch fails on non-finite values the last
/// healthy state is still saved before the error is returned.
pub fn train(cfg: &RunConfig, resume: Option<&Path>, out: &Path, mut progress: impl FnMut(&EpochReport)) -> Result<Trainer> {
    let mut t = match resume {
        Some(p) => {
            let mut t = Trainer::resume(p)?;
            if t.cfg.model_spec() != cfg.model_spec() {
                return Err(Error::Checkpoint("resume config describes a different architecture".into()));
            }
            let done = t.epoch;
            t.cfg = cfg.clone();
            t.epoch = done;
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    prepare_out(out, cfg)?;
    let ck = out.join(CHECKPOINT_DIR);
    let mut log = Table::create(
        &out.join("train_log.csv"),
        "train-log",
        &meta(cfg, "train", None),
        &cols(&TRAIN_COLUMNS),
    )?;
    while t.epoch < cfg.epochs {
        match t.train_epoch() {
            Ok(r) => {
                log.row(&train_row(&r))?;
                progress(&r);
            }
            Err(e) => {
                log.finish()?;
                t.save(&ck)?;
                return Err(e);
            }
        }
    }
    log.finish()?;
    t.save(&ck)?;
    Ok(t)
}

// ---------------------------------------------------------------- evaluation tables

/// Per-(task, k) rows with one column group per arm.
fn arm_columns(arms: &[Arm]) -> Vec<String> {
    let mut c = cols(&["task", "task_seed", "delta", "k"]);
    for a in arms {
        for f in ["return", "cost", "steps", "fallback_rate"] {
            c.push(format!("{}_{f}", a.name));
        }
    }
    c
}

#[derive(Debug, Clone, Default)]
struct Acc {
    ret: Vec<f64>,
    cost: Vec<f64>,
    fallback: Vec<f64>,
}

/// Streams evaluation results into a wide per-episode table and keeps the
/// per-(budget index, arm, k) samples for summaries.
struct ArmsTable {
    table: Table<BufWriter<File>>,
    narms: usize,
    pending: Vec<ContextResult>,
    /// Keyed by (delta index, arm, k).
    acc: BTreeMap<(usize, usize, usize), Acc>,
    /// Per (delta index, arm): per-task cumulative return and mean cost.
    per_task: BTreeMap<(usize, usize), Acc>,
    deltas: BTreeMap<usize, f64>,
}

impl ArmsTable {
    fn new(path: &Path, schema: &str, meta: &Meta, arms: &[Arm]) -> Result<Self> {
        Ok(ArmsTable {
            table: Table::create(path, schema, meta, &arm_columns(arms))?,
            narms: arms.len(),
            pending: Vec::new(),
            acc: BTreeMap::new(),
            per_task: BTreeMap::new(),
            deltas: BTreeMap::new(),
        })
    }

    fn push(&mut self, r: ContextResult) -> Result<()> {
        self.pending.push(r);
        if self.pending.len() < self.narms {
            return Ok(());
        }
        let group = std::mem::take(&mut self.pending);
        let outs: Vec<_> = group.iter().map(|g| g.outcomes()).collect();
        let first = &group[0];
        self.deltas.insert(first.delta_index, first.delta);
        for k in 0..outs[0].len() {
            let mut row = vec![
                first.task.to_string(),
                first.task_seed.to_string(),
                num(first.delta),
                k.to_string(),
            ];
            for o in &outs {
                let e = &o[k];
                row.extend([num(e.ret), num(e.cost), e.steps.to_string(), num(e.fallback_rate())]);
                let a = self.acc.entry((first.delta_index, e.arm, k)).or_default();
                a.ret.push(e.ret);
                a.cost.push(e.cost);
                a.fallback.push(e.fallback_rate());
            }
            self.table.row(&row)?;
        }
        for (g, o) in group.iter().zip(&outs) {
            let a = self.per_task.entry((g.delta_index, g.arm)).or_default();
            let n = o.len() as f64;
            a.ret.push(o.iter().map(|e| e.ret).sum());
            a.cost.push(o.iter().map(|e| e.cost).sum::<f64>() / n);
            a.fallback.push(o.iter().map(|e| e.fallback_rate()).sum::<f64>() / n);
        }
        Ok(())
    }

    fn finish(self) -> Result<Summaries> {
        self.table.finish()?;
        Ok(Summaries {
            acc: self.acc,
            per_task: self.per_task,
            deltas: self.deltas,
        })
    }
}

struct Summaries {
    acc: BTreeMap<(usize, usize, usize), Acc>,
    per_task: BTreeMap<(usize, usize), Acc>,
    deltas: BTreeMap<usize, f64>,
}

/// Mean and standard error of one arm at one episode index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KSummary {
    pub k: usize,
    pub return_mean: f64,
    pub return_se: f64,
    pub cost_mean: f64,
    pub cost_se: f64,
    pub fallback_rate: f64,
    pub n: usize,
}

/// Per-arm curves over the episode index `k`, pooled over budgets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub arms: Vec<Arm>,
    pub curves: Vec<Vec<KSummary>>,
}

fn k_curves(s: &Summaries, narms: usize) -> Vec<Vec<KSummary>> {
    let mut pooled: BTreeMap<(usize, usize), Acc> = BTreeMap::new();
    for ((_, arm, k), a) in &s.acc {
        let p = pooled.entry((*arm, *k)).or_default();
        p.ret.extend(&a.ret);
        p.cost.extend(&a.cost);
        p.fallback.extend(&a.fallback);
    }
    (0..narms)
        .map(|arm| {
            pooled
                .range((arm, 0)..(arm + 1, 0))
                .map(|((_, k), a)| {
                    let (rm, rs) = probe::mean_se(&a.ret);
                    let (cm, cs) = probe::mean_se(&a.cost);
                    KSummary {
                        k: *k,
                        return_mean: rm,
                        return_se: rs,
                        cost_mean: cm,
                        cost_se: cs,
                        fallback_rate: probe::mean_se(&a.fallback).0,
                        n: a.ret.len(),
                    }
                })
                .collect()
        })
        .collect()
}

fn write_k_summary(path: &Path, schema: &str, meta: &Meta, arms: &[Arm], curves: &[Vec<KSummary>]) -> Result<()> {
    let mut c = cols(&["k"]);
    for a in arms {
        for f in ["return_mean", "return_se", "cost_mean", "cost_se", "fallback_rate", "n"] {
            c.push(format!("{}_{f}", a.name));
        }
    }
    let mut t = Table::create(path, schema, meta, &c)?;
    for k in 0..curves.first().map_or(0, |c| c.len()) {
        let mut row = vec![k.to_string()];
        for cur in curves {
            let s = &cur[k];
            row.extend([
                num(s.return_mean),
                num(s.return_se),
                num(s.cost_mean),
                num(s.cost_se),
                num(s.fallback_rate),
                s.n.to_string(),
            ]);
        }
        t.row(&row)?;
    }
    t.finish()?;
    Ok(())
}

fn k_chart(title: &str, arms: &[Arm], curves: &[Vec<KSummary>]) -> String {
    let series = |f: &dyn Fn(&KSummary) -> (f64, f64)| -> Vec<Series> {
        arms.iter()
            .zip(curves)
            .map(|(a, c)| Series {
                name: a.name.clone(),
                points: c.iter().map(|s| (s.k as f64 + 1.0, f(s).0)).collect(),
                err: Some(c.iter().map(|s| f(s).1).collect()),
            })
            .collect()
    };
    line_charts(
        title,
        "episode",
        &[
            ("return", series(&|s| (s.return_mean, s.return_se))),
            ("cost", series(&|s| (s.cost_mean, s.cost_se))),
        ],
    )
}

fn arm(name: &str, mode: ShieldMode, n_samples: usize, beta: f64) -> Arm {
    Arm {
        name: name.to_string(),
        shield: ShieldConfig { mode, n_samples, beta },
    }
}

fn eval_spec(cfg: &RunConfig, budgets: Budgets, arms: Vec<Arm>, tasks: usize) -> EvalSpec {
    EvalSpec {
        env: cfg.env,
        alpha: cfg.alpha_test,
        grid_size: cfg.grid_size,
        n_obstacles: cfg.n_obstacles,
        horizon: cfg.horizon(),
        episodes: cfg.eval_episodes,
        tasks,
        budgets,
        arms,
        seed: cfg.seed,
    }
}

fn uniform_budgets(cfg: &RunConfig) -> Budgets {
    let (lo, hi) = cfg.budget_range();
    Budgets::Uniform { lo, hi }
}

/// The unshielded base policy plus the configured shield, unless that is
/// off too.
pub fn adapt_arms(cfg: &RunConfig) -> Vec<Arm> {
    let mut arms = vec![arm("off", ShieldMode::Off, cfg.n_samples, cfg.shield_temperature)];
    if cfg.shield != ShieldMode::Off {
        arms.push(arm(&cfg.shield.to_string(), cfg.shield, cfg.n_samples, cfg.shield_temperature));
    }
    arms
}

fn run_arms_table(
    model: &Model,
    spec: &EvalSpec,
    path: &Path,
    schema: &str,
    meta: &Meta,
    mut extra: impl FnMut(&ContextResult) -> Result<()>,
) -> Result<Summaries> {
    let mut table = ArmsTable::new(path, schema, meta, &spec.arms)?;
    evaluate(model, spec, |r| {
        extra(&r)?;
        table.push(r)
    })?;
    table.finish()
}

/// In-context adaptation curves on `eval_tasks` test tasks, one budget per
/// task drawn from the budget range.
pub fn eval_adapt(ck: &Checkpoint, cfg: &RunConfig, out: &Path) -> Result<AdaptReport> {
    ck.check(cfg)?;
    prepare_out(out, cfg)?;
    let arms = adapt_arms(cfg);
    let spec = eval_spec(cfg, uniform_budgets(cfg), arms.clone(), cfg.eval_tasks);
    let m = meta(cfg, "eval-adapt", Some(&ck.digest)).with("alpha", cfg.alpha_test);
    let s = run_arms_table(&ck.model, &spec, &out.join("adapt.csv"), "adapt", &m, |_| Ok(()))?;
    let curves = k_curves(&s, arms.len());
    write_k_summary(&out.join("adapt_summary.csv"), "adapt-summary", &m, &arms, &curves)?;
    fs::write(out.join("adapt.svg"), k_chart("in-context adaptation", &arms, &curves))?;
    Ok(AdaptReport { arms, curves })
}

/// One (budget, arm) point of a budget sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetPoint {
    pub delta: f64,
    pub arm: usize,
    /// Sum of returns over the K episodes of a context, averaged over tasks.
    pub cum_return_mean: f64,
    pub cum_return_se: f64,
    /// Mean episode cost of a context, averaged over tasks.
    pub cost_mean: f64,
    pub cost_se: f64,
    pub fallback_rate: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetReport {
    pub arms: Vec<Arm>,
    pub points: Vec<BudgetPoint>,
    /// Rescored states whose safe-set size ever decreased along the grid.
    pub non_monotone_states: usize,
}

fn budget_points(s: &Summaries) -> Vec<BudgetPoint> {
    s.per_task
        .iter()
        .map(|((di, arm), a)| {
            let delta = s.deltas[di];
            let (rm, rs) = probe::mean_se(&a.ret);
            let (cm, cs) = probe::mean_se(&a.cost);
            BudgetPoint {
                delta,
                arm: *arm,
                cum_return_mean: rm,
                cum_return_se: rs,
                cost_mean: cm,
                cost_se: cs,
                fallback_rate: probe::mean_se(&a.fallback).0,
                satisfied: cm <= delta,
            }
        })
        .collect()
}

/// Number of states rescored across the budget grid.
pub const RESCORED_STATES: usize = 10;

/// Budget sweep over `budget_grid` on `eval_tasks` test tasks.
pub fn eval_budget(ck: &Checkpoint, cfg: &RunConfig, out: &Path) -> Result<BudgetReport> {
    ck.check(cfg)?;
    prepare_out(out, cfg)?;
    let grid = cfg.budget_grid();
    let arms = adapt_arms(cfg);
    let spec = eval_spec(cfg, Budgets::Grid(grid.clone()), arms.clone(), cfg.eval_tasks);
    let m = meta(cfg, "eval-budget", Some(&ck.digest)).with("alpha", cfg.alpha_test);
    let mut states: Vec<(usize, Vec<f64>)> = Vec::new();
    let s = run_arms_table(&ck.model, &spec, &out.join("budget.csv"), "budget", &m, |r| {
        if r.arm == 0 && r.delta_index == 0 && states.len() < RESCORED_STATES {
            if let Some(d) = r.run.records.first().and_then(|e| e.first()) {
                states.push((r.task, d.q_plus.clone()));
            }
        }
        Ok(())
    })?;
    let points = budget_points(&s);

    let mut c = cols(&["delta", "arm", "cum_return_mean", "cum_return_se", "cost_mean", "cost_se", "fallback_rate", "satisfied"]);
    let mut t = Table::create(&out.join("budget_summary.csv"), "budget-summary", &m, &c)?;
    for p in &points {
        t.row(&[
            num(p.delta),
            arms[p.arm].name.clone(),
            num(p.cum_return_mean),
            num(p.cum_return_se),
            num(p.cost_mean),
            num(p.cost_se),
            num(p.fallback_rate),
            (p.satisfied as u8).to_string(),
        ])?;
    }
    t.finish()?;

    // safe-set size of fixed logged states as the budget grows
    c = cols(&["state", "task", "delta", "safe_count", "nondecreasing"]);
    let mut t = Table::create(&out.join("safe_set.csv"), "safe-set", &m, &c)?;
    let mut sorted = grid.clone();
    sorted.sort_by(f64::total_cmp);
    let mut non_monotone_states = 0;
    for (i, (task, q)) in states.iter().enumerate() {
        let mut prev = 0usize;
        let mut ok = true;
        for d in &sorted {
            let (_, b_q) = crate::shield::barriers(q, *d)?;
            let count = b_q.iter().filter(|b| **b >= 0.0).count();
            ok &= count >= prev;
            prev = count;
            t.row(&[i.to_string(), task.to_string(), num(*d), count.to_string(), (ok as u8).to_string()])?;
        }
        if !ok {
            non_monotone_states += 1;
        }
    }
    t.finish()?;

    let series = |f: &dyn Fn(&BudgetPoint) -> (f64, f64)| -> Vec<Series> {
        arms.iter()
            .enumerate()
            .map(|(ai, a)| {
                let ps: Vec<&BudgetPoint> = points.iter().filter(|p| p.arm == ai).collect();
                Series {
                    name: a.name.clone(),
                    points: ps.iter().map(|p| (p.delta, f(p).0)).collect(),
                    err: Some(ps.iter().map(|p| f(p).1).collect()),
                }
            })
            .collect()
    };
    let mut cost = series(&|p| (p.cost_mean, p.cost_se));
    cost.push(Series {
        name: "budget".into(),
        points: sorted.iter().map(|d| (*d, *d)).collect(),
        err: None,
    });
    let svg = line_charts(
        "budget sweep",
        "budget",
        &[
            ("cumulative return", series(&|p| (p.cum_return_mean, p.cum_return_se))),
            ("episode cost", cost),
        ],
    );
    fs::write(out.join("budget.svg"), svg)?;
    Ok(BudgetReport {
        arms,
        points,
        non_monotone_states,
    })
}

// ---------------------------------------------------------------- ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Soft against hard shielding.
    Shield,
    /// Candidate-set size sweep; continuous actions only.
    CandidateCount,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shield" => Ok(AblationAxis::Shield),
            "ns" => Ok(AblationAxis::CandidateCount),
            _ => Err(Error::Usage(format!("unknown ablation axis {s:?} (shield, ns)"))),
        }
    }
}

/// Both axes for continuous actions, only the shield axis otherwise.
pub fn default_axes(env: EnvKind) -> Vec<AblationAxis> {
    if env.is_discrete() {
        vec![AblationAxis::Shield]
    } else {
        vec![AblationAxis::Shield, AblationAxis::CandidateCount]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub arms: Vec<Arm>,
    pub curves: Vec<Vec<KSummary>>,
    /// SHA-256 of each arm's decision log (candidate-count axis only).
    pub log_digests: Vec<String>,
}

pub fn max_candidates(env: EnvKind, arms: &[Arm]) -> usize {
    if env.is_discrete() {
        GRID_ACTIONS
    } else {
        arms.iter().map(|a| a.shield.n_samples).max().unwrap_or(1)
    }
}

pub fn ablate(ck: &Checkpoint, cfg: &RunConfig, axes: &[AblationAxis], out: &Path) -> Result<Vec<AblationReport>> {
    ck.check(cfg)?;
    if cfg.env.is_discrete() && axes.contains(&AblationAxis::CandidateCount) {
        return Err(Error::Usage(
            "the candidate-count sweep needs continuous actions; discrete shields enumerate every action".into(),
        ));
    }
    prepare_out(out, cfg)?;
    let beta = cfg.shield_temperature;
    let mut reports = Vec::new();
    for &axis in axes {
        let (name, arms) = match axis {
            AblationAxis::Shield => (
                "ablate_shield",
                vec![
                    arm("soft", ShieldMode::Soft, cfg.n_samples, beta),
                    arm("hard", ShieldMode::Hard, cfg.n_samples, beta),
                ],
            ),
            AblationAxis::CandidateCount => (
                "ablate_ns",
                cfg.ns_grid
                    .iter()
                    .map(|n| arm(&format!("ns{n}"), cfg.shield, *n, beta))
                    .collect(),
            ),
        };
        let spec = eval_spec(cfg, uniform_budgets(cfg), arms.clone(), cfg.eval_tasks);
        let m = meta(cfg, "ablate", Some(&ck.digest)).with("axis", name);
        let mut logs = Vec::new();
        let mut log_paths = Vec::new();
        if axis == AblationAxis::CandidateCount {
            let dir = out.join("ablate_ns_logs");
            fs::create_dir_all(&dir)?;
            for a in &arms {
                let p = dir.join(format!("{}.csv", a.name));
                let header = LogHeader {
                    env: cfg.env,
                    horizon: cfg.horizon(),
                    max_candidates: max_candidates(cfg.env, &arms),
                    meta: m.clone().with("arm", &a.name).0,
                };
                logs.push(LogWriter::new(BufWriter::new(File::create(&p)?), &header)?);
                log_paths.push(p);
            }
        }
        let s = run_arms_table(&ck.model, &spec, &out.join(format!("{name}.csv")), "adapt", &m, |r| {
            if let Some(w) = logs.get_mut(r.arm) {
                w.write_context(&spec.arms[r.arm].name, r.task, r.task_seed, &r.run)?;
            }
            Ok(())
        })?;
        for w in logs {
            w.finish()?;
        }
        let curves = k_curves(&s, arms.len());
        write_k_summary(&out.join(format!("{name}_summary.csv")), "adapt-summary", &m, &arms, &curves)?;
        fs::write(out.join(format!("{name}.svg")), k_chart(name, &arms, &curves))?;
        let mut log_digests = Vec::new();
        if !log_paths.is_empty() {
            let mut t = Table::create(
                &out.join("ablate_ns_digests.csv"),
                "log-digests",
                &m,
                &cols(&["arm", "n_samples", "log_sha256"]),
            )?;
            for (a, p) in arms.iter().zip(&log_paths) {
                let d = sha256_file(p)?;
                t.row(&[a.name.clone(), a.shield.n_samples.to_string(), d.clone()])?;
                log_digests.push(d);
            }
            t.finish()?;
        }
        reports.push(AblationReport {
            axis,
            arms,
            curves,
            log_digests,
        });
    }
    Ok(reports)
}

// ---------------------------------------------------------------- diagnostics

pub const DECISION_LOG: &str = "decisions.csv";

/// Rolls out the configured shield on `diag_tasks` test tasks and writes
/// the decision log.
pub fn write_decision_log(ck: &Checkpoint, cfg: &RunConfig, path: &Path) -> Result<()> {
    let arms = vec![arm(&cfg.shield.to_string(), cfg.shield, cfg.n_samples, cfg.shield_temperature)];
    let spec = eval_spec(cfg, uniform_budgets(cfg), arms.clone(), cfg.diag_tasks);
    let header = LogHeader {
        env: cfg.env,
        horizon: cfg.horizon(),
        max_candidates: max_candidates(cfg.env, &arms),
        meta: meta(cfg, "diagnose", Some(&ck.digest)).with("alpha", cfg.alpha_test).0,
    };
    let mut w = LogWriter::new(BufWriter::new(File::create(path)?), &header)?;
    evaluate(&ck.model, &spec, |r| w.write_context(&arms[0].name, r.task, r.task_seed, &r.run))?;
    w.finish()?;
    Ok(())
}

pub const DIAG_COLUMNS: [&str; 24] = [
    "context", "row", "episode", "t", "terminal", "budget", "cost", "budget_next", "q_sel", "v_plus", "b_q", "b_v",
    "delta_sel", "v_pred", "v_next", "b_v_next", "e_pred", "e_v", "l_local", "bell", "q_sel_mean", "v_pred_mean",
    "bell_mean", "identity_residual",
];

/// Diagnoses `log`, or a freshly written log when `None`. Writes
/// `diag_records.csv`, `diag_summary.csv` and `diag_verdicts.csv`.
pub fn diagnose(ck: &Checkpoint, cfg: &RunConfig, log: Option<&Path>, out: &Path) -> Result<DiagnoseReport> {
    ck.check(cfg)?;
    prepare_out(out, cfg)?;
    let path = match log {
        Some(p) => p.to_path_buf(),
        None => {
            let p = out.join(DECISION_LOG);
            write_decision_log(ck, cfg, &p)?;
            p
        }
    };
    let (header, contexts) = probe::load_log(&path)?;
    if header.horizon != cfg.horizon() {
        return Err(Error::Diagnostics("log horizon differs from the config".into()));
    }
    let opts = DiagOptions {
        oracle_dynamics: false,
        eta: cfg.overlap_eta,
    };
    let rep = probe::diagnose(&ck.model, &header, &contexts, &opts)?;
    let m = meta(cfg, "diagnose", Some(&ck.digest)).with("log_sha256", sha256_file(&path)?);

    let mut t = Table::create(&out.join("diag_records.csv"), "diag-records", &m, &cols(&DIAG_COLUMNS))?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    for r in &rep.records {
        t.row(&[
            r.context.to_string(),
            r.row.to_string(),
            r.episode.to_string(),
            r.t.to_string(),
            (r.terminal as u8).to_string(),
            num(r.budget),
            num(r.cost),
            num(r.budget_next),
            num(r.q_sel),
            num(r.v_plus),
            num(r.b_q),
            num(r.b_v),
            num(r.delta_sel),
            num(r.v_pred),
            num(r.v_next),
            num(r.b_v_next),
            opt(r.e_pred),
            num(r.e_v),
            opt(r.l_local),
            num(r.bell),
            num(r.q_sel_mean),
            num(r.v_pred_mean),
            num(r.bell_mean),
            num(r.identity_residual()),
        ])?;
    }
    t.finish()?;

    let mut t = Table::create(&out.join("diag_summary.csv"), "diag-summary", &m, &cols(&["metric", "mean", "se", "rollouts"]))?;
    for x in &rep.summary {
        t.row(&[x.name.clone(), num(x.mean), num(x.se), x.n.to_string()])?;
    }
    t.row(&["max_e_pred".into(), num(rep.max_e_pred), String::new(), String::new()])?;
    t.finish()?;

    let mut t = Table::create(
        &out.join("diag_verdicts.csv"),
        "diag-verdicts",
        &m,
        &cols(&["check", "checked", "violations", "first_row", "detail"]),
    )?;
    let first = |v: &[usize]| v.first().map(|r| r.to_string()).unwrap_or_default();
    let th = &rep.step_margins;
    t.row(&[
        "margin_identity".into(),
        th.checked.to_string(),
        th.identity_failures.len().to_string(),
        first(&th.identity_failures),
        format!("max_residual={}", th.max_residual),
    ])?;
    t.row(&[
        "margin_inequality".into(),
        th.checked.to_string(),
        th.inequality_violations.len().to_string(),
        first(&th.inequality_violations),
        String::new(),
    ])?;
    let min_slack = rep.episodes.iter().map(|e| e.slack).fold(f64::INFINITY, f64::min);
    t.row(&[
        "episode_bound".into(),
        rep.episodes.len().to_string(),
        rep.episode_violations.len().to_string(),
        first(&rep.episode_violations),
        format!("min_slack={min_slack}"),
    ])?;
    let budget_rows: Vec<usize> = rep.budget_faults.iter().map(|f| f.row).collect();
    t.row(&[
        "budget_identity".into(),
        th.checked.to_string(),
        budget_rows.len().to_string(),
        first(&budget_rows),
        rep.budget_faults
            .first()
            .map(|f| format!("expected={} found={}", f.expected, f.found))
            .unwrap_or_default(),
    ])?;
    t.row(&[
        "safe_set_overlap".into(),
        rep.overlap.applicable.to_string(),
        rep.overlap.failures.len().to_string(),
        first(&rep.overlap.failures),
        format!(
            "pairs={} applicability={} max_ratio={}",
            rep.overlap.pairs,
            rep.overlap.applicability(),
            rep.overlap.max_ratio
        ),
    ])?;
    t.finish()?;
    Ok(rep)
}

// ---------------------------------------------------------------- spawn check

pub const SPAWN_GRID: usize = 9;
pub const SPAWN_ALPHAS: [f64; 3] = [-0.5, 0.0, 0.5];
pub const SPAWN_DRAWS: u64 = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnCheck {
    pub alpha: f64,
    pub draws: u64,
    pub tv: f64,
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Empirical spawn histogram against the analytic law.
pub fn spawn_fidelity(size: usize, alpha: f64, draws: u64, seed: u64, index: u64) -> Result<(SpawnCheck, Vec<u64>, SpawnLaw)> {
    let law = SpawnLaw::new(size, alpha)?;
    let sampler = law.sampler();
    let mut rng = seeding::stream(seed, &[tag::SPAWN, index]);
    let mut counts = vec![0u64; size * size];
    for _ in 0..draws {
        counts[rng.sample(&sampler)] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(law.probs())
        .map(|(o, p)| {
            let e = p * draws as f64;
            (*o as f64 - e).powi(2) / e
        })
        .sum();
    let dof = size * size - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Sampling(e.to_string()))?;
    let check = SpawnCheck {
        alpha,
        draws,
        tv: law.tv_distance(&counts),
        chi2,
        dof,
        p_value: 1.0 - dist.cdf(chi2),
    };
    Ok((check, counts, law))
}

/// Mean Euclidean distance of sampled goals from the grid center.
pub fn mean_goal_distance(cfg: &RunConfig, alpha: f64, tasks: usize) -> Result<f64> {
    let c = (cfg.grid_size as f64 - 1.0) / 2.0;
    let mut s = 0.0;
    for i in 0..tasks {
        let t = sample_task(EnvKind::Gridworld, alpha, cfg.grid_size, cfg.n_obstacles, super::eval::task_seed(cfg.seed, i))?;
        if let TaskLayout::Grid { goal, .. } = t.layout {
            s += ((goal.x as f64 - c).powi(2) + (goal.y as f64 - c).powi(2)).sqrt();
        }
    }
    Ok(s / tasks as f64)
}

pub fn spawn_check(cfg: &RunConfig, out: &Path) -> Result<Vec<SpawnCheck>> {
    prepare_out(out, cfg)?;
    let m = meta(cfg, "spawn-check", None);
    let mut summary = Table::create(
        &out.join("spawn_check.csv"),
        "spawn-check",
        &m,
        &cols(&["alpha", "grid", "draws", "tv", "chi2", "dof", "p_value"]),
    )?;
    let mut cells = Table::create(
        &out.join("spawn_cells.csv"),
        "spawn-cells",
        &m,
        &cols(&["alpha", "x", "y", "expected", "observed"]),
    )?;
    let mut checks = Vec::new();
    for (i, alpha) in SPAWN_ALPHAS.iter().enumerate() {
        let (c, counts, law) = spawn_fidelity(SPAWN_GRID, *alpha, SPAWN_DRAWS, cfg.seed, i as u64)?;
        summary.row(&[
            num(c.alpha),
            SPAWN_GRID.to_string(),
            c.draws.to_string(),
            num(c.tv),
            num(c.chi2),
            c.dof.to_string(),
            num(c.p_value),
        ])?;
        for (j, n) in counts.iter().enumerate() {
            let cell = law.cell(j);
            cells.row(&[
                num(*alpha),
                cell.x.to_string(),
                cell.y.to_string(),
                num(law.probs()[j]),
                num(*n as f64 / c.draws as f64),
            ])?;
        }
        checks.push(c);
    }
    summary.finish()?;
    cells.finish()?;
    let mut t = Table::create(
        &out.join("spawn_tasks.csv"),
        "spawn-tasks",
        &m,
        &cols(&["split", "alpha", "tasks", "mean_goal_distance"]),
    )?;
    for (split, alpha) in [("train", cfg.alpha_train), ("test", cfg.alpha_test)] {
        t.row(&[
            split.into(),
            num(alpha),
            cfg.eval_tasks.to_string(),
            num(mean_goal_distance(cfg, alpha, cfg.eval_tasks)?),
        ])?;
    }
    t.finish()?;
    Ok(checks)
}

// ---------------------------------------------------------------- threads

pub const THREADS_ENV: &str = "QBARRIER_THREADS";

/// Caps the global thread pool at `QBARRIER_THREADS` when it is set.
/// Returns the cap. Call once, before any parallel work.
pub fn init_thread_pool() -> Result<Option<usize>> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(e.to_string()))?;
    Ok(Some(n))
}
