//! Decision logs: one CSV row per transition with the full shield decision.
//!
//! Metadata rows start with `#` and hold `key=value` pairs. Candidate
//! columns are repeated `max_candidates` times; unused slots are empty.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shield::{barriers, tie_set, CandidateOrigin, CandidateSet, ShieldDecision, ShieldMode};
use crate::sim::{Action, ContextRun, EnvKind, Transition};

/// Reads `path` with [`read_log`].
pub fn load_log(path: &std::path::Path) -> Result<(LogHeader, Vec<LoggedContext>)> {
    let f = std::fs::File::open(path)?;
    read_log(std::io::BufReader::new(f), &path.display().to_string())
}

pub const LOG_FORMAT: &str = "qbarrier-decision-log/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub env: EnvKind,
    pub horizon: usize,
    pub max_candidates: usize,
    /// Extra metadata, written after the required keys.
    pub meta: Vec<(String, String)>,
}

impl LogHeader {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedStep {
    /// Zero-based data row index in the file.
    pub row: usize,
    pub transition: Transition,
    pub decision: ShieldDecision,
}

/// One context of one arm, rows in rollout order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedContext {
    pub arm: String,
    pub task: usize,
    pub task_seed: u64,
    pub delta: f64,
    pub steps: Vec<LoggedStep>,
}

impl LoggedContext {
    pub fn transitions(&self) -> Vec<Transition> {
        self.steps.iter().map(|s| s.transition.clone()).collect()
    }

    /// Ranges of `steps` belonging to each episode.
    pub fn episodes(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, s) in self.steps.iter().enumerate() {
            if s.transition.d_ctx {
                out.push(start..i + 1);
                start = i + 1;
            }
        }
        out
    }
}

pub fn columns(env: EnvKind, max_candidates: usize) -> Vec<String> {
    let mut c: Vec<String> = ["arm", "task", "task_seed", "delta", "context_id", "episode", "t"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    c.extend((0..env.obs_dim()).map(|i| format!("state_{i}")));
    c.extend(["action", "reward", "cost"].map(String::from));
    c.extend((0..env.obs_dim()).map(|i| format!("next_state_{i}")));
    c.extend(["done", "d_ctx", "budget", "mode", "n_candidates", "chosen", "fallback"].map(String::from));
    for i in 0..max_candidates {
        for f in ["action", "rho", "q_plus", "q_mean", "prob"] {
            c.push(format!("cand{i}_{f}"));
        }
    }
    c
}

fn fmt_action(a: Action) -> String {
    match a {
        Action::Discrete(i) => i.to_string(),
        Action::Continuous(x) => x.to_string(),
    }
}

pub struct LogWriter<W: Write> {
    out: csv::Writer<W>,
    env: EnvKind,
    max_candidates: usize,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut w: W, header: &LogHeader) -> Result<Self> {
        writeln!(w, "# format={LOG_FORMAT}")?;
        writeln!(w, "# env={}", header.env)?;
        writeln!(w, "# horizon={}", header.horizon)?;
        writeln!(w, "# max_candidates={}", header.max_candidates)?;
        for (k, v) in &header.meta {
            writeln!(w, "# {k}={v}")?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(columns(header.env, header.max_candidates)).map_err(csv_err)?;
        Ok(LogWriter {
            out,
            env: header.env,
            max_candidates: header.max_candidates,
        })
    }

    pub fn write_context(&mut self, arm: &str, task: usize, task_seed: u64, run: &ContextRun<ShieldDecision>) -> Result<()> {
        for (ep, recs) in run.episodes.iter().zip(&run.records) {
            for (tr, d) in ep.transitions.iter().zip(recs) {
                self.write_row(arm, task, task_seed, run.delta, tr, d)?;
            }
        }
        Ok(())
    }

    fn write_row(&mut self, arm: &str, task: usize, task_seed: u64, delta: f64, tr: &Transition, d: &ShieldDecision) -> Result<()> {
        let n = d.candidates.actions.len();
        if n > self.max_candidates {
            return Err(Error::Usage(format!("decision has {n} candidates, log holds {}", self.max_candidates)));
        }
        let mut r: Vec<String> = vec![
            arm.to_string(),
            task.to_string(),
            task_seed.to_string(),
            delta.to_string(),
            tr.context_id.to_string(),
            tr.episode.to_string(),
            tr.t.to_string(),
        ];
        debug_assert_eq!(tr.state.len(), self.env.obs_dim());
        r.extend(tr.state.iter().map(f64::to_string));
        r.push(fmt_action(tr.action));
        r.push(tr.reward.to_string());
        r.push(tr.cost.to_string());
        r.extend(tr.next_state.iter().map(f64::to_string));
        r.push((tr.done as u8).to_string());
        r.push((tr.d_ctx as u8).to_string());
        r.push(tr.budget.to_string());
        r.push(d.mode.to_string());
        r.push(n.to_string());
        r.push(d.chosen.to_string());
        r.push((d.fallback as u8).to_string());
        for i in 0..self.max_candidates {
            if i < n {
                r.push(fmt_action(d.candidates.actions[i]));
                r.push(d.candidates.rho[i].to_string());
                r.push(d.q_plus[i].to_string());
                r.push(d.q_mean[i].to_string());
                r.push(d.probs[i].to_string());
            } else {
                r.extend(std::iter::repeat_n(String::new(), 5));
            }
        }
        self.out.write_record(&r).map_err(csv_err)
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        self.out.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Parses a log written by [`LogWriter`]. `path` only labels errors.
pub fn read_log(mut input: impl Read, path: &str) -> Result<(LogHeader, Vec<LoggedContext>)> {
    let bad = |msg: String| Error::Log { path: path.into(), msg };
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let mut meta = Vec::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        let body = line.trim_start_matches('#').trim();
        if let Some((k, v)) = body.split_once('=') {
            meta.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let find = |k: &str| meta.iter().find(|(a, _)| a == k).map(|(_, v)| v.clone());
    if find("format").as_deref() != Some(LOG_FORMAT) {
        return Err(bad(format!("not a decision log (expected format={LOG_FORMAT})")));
    }
    let env: EnvKind = find("env").ok_or_else(|| bad("missing env".into()))?.parse()?;
    let horizon: usize = find("horizon")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing horizon".into()))?;
    let max_candidates: usize = find("max_candidates")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing max_candidates".into()))?;
    let extra = meta
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "format" | "env" | "horizon" | "max_candidates"))
        .cloned()
        .collect();
    let header = LogHeader {
        env,
        horizon,
        max_candidates,
        meta: extra,
    };

    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let cols = columns(env, max_candidates);
    let head: Vec<String> = rdr.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    if head != cols {
        return Err(bad("column header does not match the declared layout".into()));
    }
    let obs = env.obs_dim();
    let mut contexts: Vec<LoggedContext> = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(format!("row {row}: {e}")))?;
        let mut it = rec.iter();
        let mut next = |name: &str| -> Result<String> {
            it.next()
                .map(String::from)
                .ok_or_else(|| bad(format!("row {row}: missing column {name}")))
        };
        macro_rules! num {
            ($name:expr, $t:ty) => {{
                let s = next($name)?;
                s.parse::<$t>()
                    .map_err(|_| bad(format!("row {row}: column {} has invalid value {s:?}", $name)))?
            }};
        }
        let parse_action = |s: &str| -> Result<Action> {
            if env.is_discrete() {
                s.parse::<usize>()
                    .map(Action::Discrete)
                    .map_err(|_| bad(format!("row {row}: invalid action {s:?}")))
            } else {
                s.parse::<f64>()
                    .map(Action::Continuous)
                    .map_err(|_| bad(format!("row {row}: invalid action {s:?}")))
            }
        };
        let arm = next("arm")?;
        let task = num!("task", usize);
        let task_seed = num!("task_seed", u64);
        let delta = num!("delta", f64);
        let context_id = num!("context_id", u64);
        let episode = num!("episode", usize);
        let t = num!("t", usize);
        let state: Vec<f64> = (0..obs).map(|_| Ok(num!("state", f64))).collect::<Result<_>>()?;
        let action = parse_action(&next("action")?)?;
        let reward = num!("reward", f64);
        let cost = num!("cost", f64);
        let next_state: Vec<f64> = (0..obs).map(|_| Ok(num!("next_state", f64))).collect::<Result<_>>()?;
        let done = num!("done", u8) == 1;
        let d_ctx = num!("d_ctx", u8) == 1;
        let budget = num!("budget", f64);
        let mode: ShieldMode = next("mode")?.parse()?;
        let n = num!("n_candidates", usize);
        let chosen = num!("chosen", usize);
        let fallback = num!("fallback", u8) == 1;
        if n == 0 || n > max_candidates || chosen >= n {
            return Err(bad(format!("row {row}: inconsistent candidate count {n} / chosen {chosen}")));
        }
        let (mut actions, mut rho, mut q_plus, mut q_mean, mut probs) = (vec![], vec![], vec![], vec![], vec![]);
        for i in 0..n {
            let a = next("cand_action")?;
            if a.is_empty() {
                return Err(bad(format!("row {row}: candidate {i} is missing")));
            }
            actions.push(parse_action(&a)?);
            rho.push(num!("cand_rho", f64));
            q_plus.push(num!("cand_q_plus", f64));
            q_mean.push(num!("cand_q_mean", f64));
            probs.push(num!("cand_prob", f64));
        }
        if actions[chosen] != action {
            return Err(bad(format!("row {row}: chosen candidate differs from the executed action")));
        }
        let (b_v, b_q) = barriers(&q_plus, budget).map_err(|e| bad(format!("row {row}: {e}")))?;
        let decision = ShieldDecision {
            candidates: CandidateSet {
                actions,
                rho,
                origin: if env.is_discrete() {
                    CandidateOrigin::Enumerated
                } else {
                    CandidateOrigin::Sampled
                },
            },
            tie_set: tie_set(&q_plus),
            q_plus,
            q_mean,
            b_q,
            b_v,
            budget,
            probs,
            chosen,
            action,
            mode,
            fallback,
        };
        let transition = Transition {
            context_id,
            episode,
            t,
            state,
            action,
            reward,
            cost,
            next_state,
            done,
            d_ctx,
            budget,
        };
        let same = contexts
            .last()
            .is_some_and(|c| c.arm == arm && c.task == task && c.delta == delta && c.steps[0].transition.context_id == context_id);
        if !same {
            contexts.push(LoggedContext {
                arm,
                task,
                task_seed,
                delta,
                steps: Vec::new(),
            });
        }
        contexts.last_mut().expect("pushed").steps.push(LoggedStep { row, transition, decision });
    }
    for c in &contexts {
        check_order(c).map_err(bad)?;
    }
    Ok((header, contexts))
}

/// Rows of a context must run `t = 0, 1, ...` within each episode, with
/// episodes consecutive and the last row closing an episode.
fn check_order(c: &LoggedContext) -> std::result::Result<(), String> {
    let (mut ep, mut t) = (0usize, 0usize);
    for s in &c.steps {
        let tr = &s.transition;
        if tr.episode != ep || tr.t != t {
            return Err(format!(
                "row {}: expected episode {ep} step {t}, found episode {} step {}; the log is incomplete",
                s.row, tr.episode, tr.t
            ));
        }
        if tr.d_ctx {
            ep += 1;
            t = 0;
        } else {
            t += 1;
        }
    }
    match c.steps.last() {
        Some(s) if s.transition.d_ctx => Ok(()),
        Some(s) => Err(format!("row {}: context ends mid-episode; the log is incomplete", s.row)),
        None => Err("empty context".into()),
    }
}
