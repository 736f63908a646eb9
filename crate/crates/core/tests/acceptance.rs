//! Exit criteria for the whole library, one line per criterion.
//!
//! `cargo test --test acceptance` runs everything; trailing numbers select a
//! subset (`cargo test --test acceptance -- 3 7`). Failing criteria are
//! reported on stdout. Set `QBARRIER_ACCEPTANCE_STRICT=1` to turn any
//! failure into a nonzero exit status.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use qbarrier::bench::commands::{self, AblationAxis, Checkpoint, SPAWN_ALPHAS, SPAWN_DRAWS, SPAWN_GRID};
use qbarrier::bench::report::read_csv;
use qbarrier::bench::{evaluate, evaluate_outcomes, Arm, Budgets, ContextResult, EvalSpec};
use qbarrier::config::RunConfig;
use qbarrier::model::Model;
use qbarrier::probe::{self, DiagOptions, DiagnoseReport, LogHeader, LogWriter, LoggedContext};
use qbarrier::shield::{barriers, hard_shield, soft_shield, ShieldConfig, ShieldMode};
use qbarrier::sim::{Action, EnvKind};
use qbarrier::trainer::Trainer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::chain::fit_chain;
use common::grad::{analytic, sample, spec, worst_error, Loss, TOL};
use common::shield_oracle::{instances, oracle};

const STRICT_ENV: &str = "QBARRIER_ACCEPTANCE_STRICT";

/// Seeds and budgets of the behavioral check.
const BEHAVIOR_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BEHAVIOR_BUDGETS: [f64; 3] = [1.0, 3.0, 5.0];
const LAST_EPISODES: usize = 5;
const MIN_LOGGED: usize = 10_000;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

/// Models trained once and shared between criteria.
#[derive(Default)]
struct Shared {
    gridworld: BTreeMap<u64, (Model, Duration)>,
    logs: Option<(LogHeader, Vec<LoggedContext>, DiagnoseReport)>,
}

fn gridworld_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
    .resolve()
    .unwrap()
}

impl Shared {
    fn trained(&mut self, seed: u64) -> &Model {
        &self
            .gridworld
            .entry(seed)
            .or_insert_with(|| {
                let start = Instant::now();
                let cfg = gridworld_config(seed);
                let mut t = Trainer::new(cfg.clone()).unwrap();
                for _ in 0..cfg.epochs {
                    t.train_epoch().unwrap();
                }
                (t.model, start.elapsed())
            })
            .0
    }

    /// Shielded rollouts of the seed-0 model on test tasks, logged, parsed
    /// back and diagnosed.
    fn diagnosed(&mut self) -> &(LogHeader, Vec<LoggedContext>, DiagnoseReport) {
        if self.logs.is_none() {
            let cfg = gridworld_config(0);
            let model = self.trained(0).clone();
            let mut tasks = 40;
            let (header, contexts) = loop {
                let text = log_rollouts(&model, &cfg, tasks);
                let (h, c) = probe::read_log(text.as_bytes(), "acceptance.csv").unwrap();
                if c.iter().map(|c| c.steps.len()).sum::<usize>() >= MIN_LOGGED {
                    break (h, c);
                }
                tasks *= 2;
            };
            let rep = probe::diagnose(&model, &header, &contexts, &DiagOptions::default()).unwrap();
            self.logs = Some((header, contexts, rep));
        }
        self.logs.as_ref().unwrap()
    }
}

fn log_rollouts(model: &Model, cfg: &RunConfig, tasks: usize) -> String {
    let spec = EvalSpec {
        env: cfg.env,
        alpha: cfg.alpha_test,
        grid_size: cfg.grid_size,
        n_obstacles: cfg.n_obstacles,
        horizon: cfg.horizon(),
        episodes: cfg.eval_episodes,
        tasks,
        budgets: Budgets::Grid(BEHAVIOR_BUDGETS.to_vec()),
        arms: vec![Arm {
            name: "soft".into(),
            shield: cfg.shield_config(),
        }],
        seed: cfg.seed,
    };
    let header = LogHeader {
        env: cfg.env,
        horizon: cfg.horizon(),
        max_candidates: commands::max_candidates(cfg.env, &spec.arms),
        meta: vec![("config_digest".into(), cfg.digest())],
    };
    let mut w = LogWriter::new(Vec::new(), &header).unwrap();
    evaluate(model, &spec, |r: ContextResult| w.write_context("soft", r.task, r.task_seed, &r.run)).unwrap();
    String::from_utf8(w.finish().unwrap()).unwrap()
}

// 1
fn gradient_suite(_: &mut Shared) -> Verdict {
    let start = Instant::now();
    let cases = [
        (EnvKind::Gridworld, Action::Discrete(2), false),
        (EnvKind::Gridworld, Action::Discrete(0), true),
        (EnvKind::Velocity, Action::Continuous(0.35), false),
    ];
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut checked = 0;
    let mut largest_net = 0;
    for (seed, (kind, action, d_ctx)) in cases.into_iter().enumerate() {
        let mut model = Model::new(spec(kind), seed as u64 + 1).unwrap();
        largest_net = model.stores.trainable().iter().map(|s| s.num_params()).max().unwrap().max(largest_net);
        let p = sample(&model, action, d_ctx, seed as u64);
        for loss in Loss::ALL {
            let (err, n) = worst_error(&mut model, &p, loss);
            checked += n;
            let e = worst.entry(format!("{loss:?}")).or_insert(0.0);
            *e = e.max(err);
        }
    }
    let elapsed = start.elapsed();
    let max = worst.values().copied().fold(0.0, f64::max);
    let listed: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    verdict(
        max <= TOL && elapsed.as_secs_f64() <= 60.0 && largest_net <= 1000,
        format!(
            "{checked} entries, largest net {largest_net} params, worst relative error {} ({:.1} s)",
            listed.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

// 2
fn routing(_: &mut Shared) -> Verdict {
    let mut leaks = Vec::new();
    let mut samples = 0;
    for (kind, action) in [(EnvKind::Gridworld, Action::Discrete(4)), (EnvKind::Velocity, Action::Continuous(-0.6))] {
        for seed in 0..5 {
            let model = Model::new(spec(kind), 40 + seed).unwrap();
            let p = sample(&model, action, seed % 2 == 1, seed);
            let distill = analytic(&model, &p, Loss::Distill);
            let conj = analytic(&model, &p, Loss::Conj);
            for (name, g, group) in [
                ("distill", &distill, "encoder"),
                ("conj", &conj, "encoder"),
                ("distill", &distill, "world_proj"),
            ] {
                let m = g.max_abs_in_group(group);
                if m != 0.0 {
                    leaks.push(format!("{kind} {name} -> {group}: {m:e}"));
                }
            }
            samples += 1;
        }
    }
    verdict(
        leaks.is_empty(),
        if leaks.is_empty() {
            format!("{samples} samples, every blocked gradient is exactly zero")
        } else {
            leaks.join("; ")
        },
    )
}

// 3
fn shield_oracle(_: &mut Shared) -> Verdict {
    let all = instances(1000, 2024);
    let mut worst: f64 = 0.0;
    let mut flag_mismatch = 0;
    let (mut fallbacks, mut ties) = (0, 0);
    for inst in &all {
        let want = oracle(inst);
        let (b_v, b_q) = barriers(&inst.q_plus, inst.budget).unwrap();
        let soft = soft_shield(&inst.rho, &b_q, inst.beta).unwrap();
        let (hard, fallback, tie_set) = hard_shield(&inst.rho, &b_q, &inst.q_plus).unwrap();
        worst = worst.max((b_v - want.b_v).abs());
        for i in 0..inst.rho.len() {
            worst = worst.max((soft[i] - want.soft[i]).abs()).max((hard[i] - want.hard[i]).abs());
        }
        flag_mismatch += (fallback != want.fallback || tie_set != want.ties) as usize;
        fallbacks += want.fallback as usize;
        ties += (want.fallback && want.ties.len() > 1) as usize;
    }
    verdict(
        worst <= 1e-9 && flag_mismatch == 0 && fallbacks > 0 && ties > 0,
        format!(
            "{} instances ({fallbacks} empty safe sets, {ties} tied fallbacks), max entry error {worst:.1e}, {flag_mismatch} flag mismatches",
            all.len()
        ),
    )
}

// 4
fn margin_identity(s: &mut Shared) -> Verdict {
    let (_, _, rep) = s.diagnosed();
    let t = &rep.step_margins;
    verdict(
        t.checked >= MIN_LOGGED && t.max_residual <= 1e-4 && t.identity_failures.is_empty() && t.inequality_violations.is_empty(),
        format!(
            "{} logged transitions, max identity residual {:.1e}, {} inequality violations",
            t.checked,
            t.max_residual,
            t.inequality_violations.len()
        ),
    )
}

// 5
fn episode_bound(s: &mut Shared) -> Verdict {
    let (_, _, rep) = s.diagnosed();
    let min_slack = rep.episodes.iter().map(|e| e.slack).fold(f64::INFINITY, f64::min);
    verdict(
        !rep.episodes.is_empty() && rep.episode_violations.is_empty(),
        format!(
            "{} episodes, {} violations, smallest slack {min_slack:.3}",
            rep.episodes.len(),
            rep.episode_violations.len()
        ),
    )
}

// 6
fn pessimism_and_budget(s: &mut Shared) -> Verdict {
    let model = s.trained(0).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut below = 0;
    for _ in 0..10_000 {
        let z: Vec<f64> = (0..model.cost_critic.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = Action::Discrete(rng.random_range(0..5));
        let heads = model.cost_critic.head_values(&model.stores.cost_critic, &z, a);
        let q = model.cost_critic.q_plus(&model.stores.cost_critic, &z, a);
        below += heads.iter().any(|h| q < *h) as usize;
    }
    let (_, contexts, rep) = s.diagnosed();
    let mut sum_breaks = 0;
    let mut steps = 0;
    for c in contexts {
        for ep in c.episodes() {
            let mut spent = 0.0;
            for step in &c.steps[ep] {
                steps += 1;
                sum_breaks += (step.transition.budget + spent != c.delta) as usize;
                spent += step.transition.cost;
            }
        }
    }
    verdict(
        below == 0 && sum_breaks == 0 && rep.budget_faults.is_empty(),
        format!(
            "10000 critic inputs with {below} head above the aggregate; {steps} logged steps, {sum_breaks} budget sum breaks, {} replay faults",
            rep.budget_faults.len()
        ),
    )
}

// 7
fn spawner(_: &mut Shared) -> Verdict {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, alpha) in SPAWN_ALPHAS.iter().enumerate() {
        let (c, _, _) = commands::spawn_fidelity(SPAWN_GRID, *alpha, SPAWN_DRAWS, 0, i as u64).unwrap();
        ok &= c.tv <= 0.01;
        parts.push(format!("alpha {alpha:+}: TV {:.4} (chi2 p {:.2})", c.tv, c.p_value));
    }
    verdict(ok, format!("{SPAWN_DRAWS} draws on {SPAWN_GRID}x{SPAWN_GRID}; {}", parts.join(", ")))
}

// 8
fn tabular_bellman(_: &mut Shared) -> Verdict {
    let fit = fit_chain(0, 3000, 1000);
    let frac = fit.within_tol as f64 / fit.transitions as f64;
    let sat = fit.satisfied as f64 / fit.transitions as f64;
    verdict(
        frac >= 0.99 && fit.elapsed.as_secs_f64() <= 120.0,
        format!(
            "{:.1}% of {} transitions within 1e-3 ({:.1}% within 1e-6), max residual {:.1e}, max |Q+ - CTG| {:.1e}, {} updates in {:.1} s",
            100.0 * frac,
            fit.transitions,
            100.0 * sat,
            fit.max_residual,
            fit.max_value_error,
            fit.steps,
            fit.elapsed.as_secs_f64()
        ),
    )
}

// 9
fn behavior(s: &mut Shared) -> Verdict {
    let start = Instant::now();
    // models trained by an earlier criterion still count towards the limit
    let earlier: Duration = BEHAVIOR_SEEDS.iter().filter_map(|k| s.gridworld.get(k)).map(|m| m.1).sum();
    let mut train_time = Duration::ZERO;
    // per budget: seeds where soft <= off, seeds where soft <= delta
    let mut not_worse = [0usize; 3];
    let mut within = [0usize; 3];
    let mut table = Vec::new();
    for seed in BEHAVIOR_SEEDS {
        let cfg = gridworld_config(seed);
        let model = s.trained(seed).clone();
        train_time += s.gridworld[&seed].1;
        let shield = |mode| ShieldConfig {
            mode,
            ..cfg.shield_config()
        };
        let spec = EvalSpec {
            env: cfg.env,
            alpha: cfg.alpha_test,
            grid_size: cfg.grid_size,
            n_obstacles: cfg.n_obstacles,
            horizon: cfg.horizon(),
            episodes: cfg.eval_episodes,
            tasks: cfg.eval_tasks,
            budgets: Budgets::Grid(BEHAVIOR_BUDGETS.to_vec()),
            arms: vec![
                Arm {
                    name: "off".into(),
                    shield: shield(ShieldMode::Off),
                },
                Arm {
                    name: "soft".into(),
                    shield: shield(ShieldMode::Soft),
                },
            ],
            seed: cfg.seed,
        };
        let outcomes = evaluate_outcomes(&model, &spec).unwrap();
        let first_kept = cfg.eval_episodes - LAST_EPISODES;
        for (di, delta) in BEHAVIOR_BUDGETS.iter().enumerate() {
            let mean = |arm: usize| {
                let v: Vec<f64> = outcomes
                    .iter()
                    .filter(|o| o.arm == arm && o.delta == *delta && o.k >= first_kept)
                    .map(|o| o.cost)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let (off, soft) = (mean(0), mean(1));
            not_worse[di] += (soft <= off) as usize;
            within[di] += (soft <= *delta) as usize;
            table.push(format!("s{seed}/d{delta}: {soft:.2} vs {off:.2}"));
        }
    }
    let elapsed = start.elapsed() + earlier;
    let directional = not_worse.iter().all(|n| *n >= 4);
    let budgeted = BEHAVIOR_BUDGETS
        .iter()
        .zip(&within)
        .filter(|(d, _)| **d >= 3.0)
        .all(|(_, n)| *n >= 4);
    verdict(
        directional && budgeted && elapsed.as_secs_f64() <= 1800.0,
        format!(
            "soft <= off in {:?} of 5 seeds, soft <= delta in {:?} of 5 seeds for delta {:?}; {:.0} s ({:.0} s training); soft vs off cost: {}",
            not_worse,
            within,
            BEHAVIOR_BUDGETS,
            elapsed.as_secs_f64(),
            train_time.as_secs_f64(),
            table.join(", ")
        ),
    )
}

// 10
fn ablations(_: &mut Shared) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        env: EnvKind::Velocity,
        epochs: 5,
        eval_tasks: 20,
        ..RunConfig::default()
    }
    .resolve()
    .unwrap();
    commands::train(&cfg, None, &dir.path().join("train"), |_| {}).unwrap();
    let ck = Checkpoint::load(&dir.path().join("train").join(commands::CHECKPOINT_DIR)).unwrap();
    let out = dir.path().join("ablate");
    let reports = commands::ablate(&ck, &cfg, &[AblationAxis::Shield, AblationAxis::CandidateCount], &out).unwrap();
    let mut problems = Vec::new();
    for (file, schema) in [
        ("ablate_shield.csv", "adapt/1"),
        ("ablate_shield_summary.csv", "adapt-summary/1"),
        ("ablate_ns.csv", "adapt/1"),
        ("ablate_ns_summary.csv", "adapt-summary/1"),
        ("ablate_ns_digests.csv", "log-digests/1"),
    ] {
        if let Err(e) = schema_valid(&out.join(file), schema) {
            problems.push(format!("{file}: {e}"));
        }
    }
    let shield = read_csv(&fs::read_to_string(out.join("ablate_shield.csv")).unwrap()).unwrap();
    let fallback = shield.numbers("hard_fallback_rate").unwrap_or_default();
    let mean_fallback = fallback.iter().sum::<f64>() / fallback.len().max(1) as f64;
    if fallback.is_empty() {
        problems.push("no hard fallback rate column".into());
    }
    let ns = reports.iter().find(|r| r.axis == AblationAxis::CandidateCount).unwrap();
    let digest = |n: usize| {
        ns.arms
            .iter()
            .position(|a| a.shield.n_samples == n)
            .map(|i| ns.log_digests[i].clone())
    };
    let (d4, d32) = (digest(4), digest(32));
    let distinct = d4.is_some() && d32.is_some() && d4 != d32;
    for n in [4, 8, 16, 32] {
        if !out.join("ablate_ns_logs").join(format!("ns{n}.csv")).exists() {
            problems.push(format!("missing decision log for ns{n}"));
        }
    }
    verdict(
        problems.is_empty() && distinct,
        format!(
            "{} arms over {} tasks; mean hard fallback rate {:.3}; ns4 and ns32 log digests {}{}",
            ns.arms.len() + 2,
            cfg.eval_tasks,
            mean_fallback,
            if distinct { "differ" } else { "MATCH" },
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

/// Schema row, metadata, a header and rows of the header's width with
/// finite numeric cells wherever the column name says so.
fn schema_valid(path: &Path, schema: &str) -> Result<(), String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let t = read_csv(&text).map_err(|e| e.to_string())?;
    if t.meta.get("schema") != Some(schema) {
        return Err(format!("schema {:?}", t.meta.get("schema")));
    }
    for key in ["config_digest", "checkpoint_digest", "seed"] {
        if t.meta.get(key).is_none() {
            return Err(format!("missing {key}"));
        }
    }
    if t.rows.is_empty() {
        return Err("no rows".into());
    }
    for (i, r) in t.rows.iter().enumerate() {
        if r.len() != t.header.len() {
            return Err(format!("row {i} has {} cells", r.len()));
        }
        for (h, c) in t.header.iter().zip(r) {
            let numeric = !(h == "arm" || h.ends_with("sha256"));
            if numeric && !c.is_empty() && !c.parse::<f64>().is_ok_and(f64::is_finite) {
                return Err(format!("row {i} column {h} holds {c:?}"));
            }
        }
    }
    Ok(())
}

// 11
fn determinism(_: &mut Shared) -> Verdict {
    let run = |seed: u64| {
        let cfg = RunConfig {
            seed,
            epochs: 2,
            ..RunConfig::default()
        }
        .resolve()
        .unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        t.train_epoch().unwrap();
        t.train_epoch().unwrap();
        t
    };
    let (a, b, c) = (run(21), run(21), run(22));
    let same = a.model.digest() == b.model.digest();
    let differs = a.model.digest() != c.model.digest();
    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let (loaded, _) = Model::load(dir.path()).unwrap();
    let bitwise = loaded
        .stores
        .all()
        .iter()
        .zip(a.model.stores.all())
        .all(|(x, y)| {
            x.tensors()
                .iter()
                .zip(y.tensors())
                .all(|(p, q)| p.data.iter().map(|v| v.to_bits()).eq(q.data.iter().map(|v| v.to_bits())))
        })
        && loaded == a.model;
    verdict(
        same && differs && bitwise,
        format!(
            "same seed digests {}, other seed {}, checkpoint round trip {}",
            if same { "match" } else { "DIFFER" },
            if differs { "differs" } else { "MATCHES" },
            if bitwise { "bitwise exact" } else { "NOT exact" }
        ),
    )
}

type Criterion = fn(&mut Shared) -> Verdict;

fn main() {
    commands::init_thread_pool().unwrap();
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Criterion); 11] = [
        (1, "gradient check", gradient_suite),
        (2, "stop-gradient routing", routing),
        (3, "shield oracle", shield_oracle),
        (4, "margin identity", margin_identity),
        (5, "episode cost bound", episode_bound),
        (6, "pessimism and budget accounting", pessimism_and_budget),
        (7, "spawner fidelity", spawner),
        (8, "tabular Bellman sanity", tabular_bellman),
        (9, "shielded cost direction", behavior),
        (10, "ablation plumbing", ablations),
        (11, "determinism and persistence", determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = run(&mut shared);
        ran += 1;
        println!(
            "criterion {n:>2} {name:<32} {} [{:.1} s] {}",
            if v.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.passed {
            failed.push(n);
        }
    }
    println!("{} of {ran} criteria passed; failed: {failed:?}", ran - failed.len());
    if !failed.is_empty() && std::env::var_os(STRICT_ENV).is_some_and(|v| v != "0") {
        std::process::exit(1);
    }
}
