use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qbarrier::bench::commands::{self, AblationAxis, Checkpoint};
use qbarrier::config::RunConfig;
use qbarrier::shield::ShieldMode;
use qbarrier::{Error, Result};

/// Train, evaluate and diagnose budget-aware Q-barrier shields.
#[derive(Parser)]
#[command(name = "qbarrier", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; `--checkpoint` resumes from a saved run.
    Train(Common),
    /// Per-episode return and cost of the base policy and the shield.
    EvalAdapt(Common),
    /// Return and cost over a grid of budgets.
    EvalBudget(Common),
    /// Soft against hard shielding, and the candidate-count sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Ablation axis (shield, ns); repeatable. Defaults to every axis
        /// the environment supports.
        #[arg(long)]
        axis: Vec<AblationAxis>,
    },
    /// Margin diagnostics and identity checks on a decision log.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Decision log to diagnose; a fresh one is rolled out when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compare sampled spawn cells with the analytic law.
    SpawnCheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    shield: Option<ShieldMode>,
    /// Candidates per decision for continuous actions.
    #[arg(long)]
    ns: Option<usize>,
    /// Spawn exponent of the evaluation tasks.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Comma-separated budgets, e.g. `0,1,2.5`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    budget_grid: Option<Vec<f64>>,
    /// Number of evaluation tasks.
    #[arg(long)]
    tasks: Option<usize>,
    /// Episodes per evaluation context.
    #[arg(long)]
    episodes: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::from_toml("")?,
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.shield {
            cfg.shield = v;
        }
        if let Some(v) = self.ns {
            cfg.n_samples = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha_test = v;
        }
        if let Some(v) = &self.budget_grid {
            cfg.budget_grid = Some(v.clone());
        }
        if let Some(v) = self.tasks {
            cfg.eval_tasks = v;
            cfg.diag_tasks = v;
        }
        if let Some(v) = self.episodes {
            cfg.eval_episodes = v;
        }
        cfg.resolve()
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let p = self
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Usage("--checkpoint is required".into()))?;
        Checkpoint::load(p)
    }
}

fn report(out: &Path) {
    eprintln!("outputs written to {}", out.display());
}

fn run(cli: Cli) -> Result<bool> {
    commands::init_thread_pool()?;
    match cli.cmd {
        Cmd::Train(c) => {
            let cfg = c.config()?;
            let t = commands::train(&cfg, c.checkpoint.as_deref(), &c.out, |r| {
                let l = r.mean_losses();
                eprintln!(
                    "epoch {:>4}  return {:.3}  cost {:.3}  lambda {:.3}  loss {}",
                    r.epoch,
                    r.collect_return,
                    r.collect_cost,
                    r.lambda_c,
                    l.map(|l| format!("{:.4}", l.losses.total)).unwrap_or_else(|| "-".into())
                );
            })?;
            println!("{}", t.model.digest());
            report(&c.out);
        }
        Cmd::EvalAdapt(c) => {
            let cfg = c.config()?;
            let rep = commands::eval_adapt(&c.checkpoint()?, &cfg, &c.out)?;
            for (a, curve) in rep.arms.iter().zip(&rep.curves) {
                if let Some(last) = curve.last() {
                    println!("{}: final-episode return {:.3}, cost {:.3}", a.name, last.return_mean, last.cost_mean);
                }
            }
            report(&c.out);
        }
        Cmd::EvalBudget(c) => {
            let cfg = c.config()?;
            let rep = commands::eval_budget(&c.checkpoint()?, &cfg, &c.out)?;
            for p in &rep.points {
                println!(
                    "{} delta {}: cost {:.3} satisfied {}",
                    rep.arms[p.arm].name, p.delta, p.cost_mean, p.satisfied
                );
            }
            report(&c.out);
        }
        Cmd::Ablate { common: c, axis } => {
            let cfg = c.config()?;
            let axes = if axis.is_empty() {
                commands::default_axes(cfg.env)
            } else {
                axis
            };
            commands::ablate(&c.checkpoint()?, &cfg, &axes, &c.out)?;
            report(&c.out);
        }
        Cmd::Diagnose { common: c, log } => {
            let cfg = c.config()?;
            let rep = commands::diagnose(&c.checkpoint()?, &cfg, log.as_deref(), &c.out)?;
            println!(
                "{} transitions, {} episodes; identity failures {}, inequality violations {}, episode-bound violations {}, budget faults {}, overlap failures {}",
                rep.step_margins.checked,
                rep.episodes.len(),
                rep.step_margins.identity_failures.len(),
                rep.step_margins.inequality_violations.len(),
                rep.episode_violations.len(),
                rep.budget_faults.len(),
                rep.overlap.failures.len()
            );
            if let Some(f) = rep.budget_faults.first() {
                println!("budget identity broken at row {}: expected {}, found {}", f.row, f.expected, f.found);
            }
            report(&c.out);
            return Ok(rep.passed());
        }
        Cmd::SpawnCheck(c) => {
            let cfg = c.config()?;
            for s in commands::spawn_check(&cfg, &c.out)? {
                println!("alpha {:+}: tv {:.5}, chi2 {:.1} (p = {:.3})", s.alpha, s.tv, s.chi2, s.p_value);
            }
            report(&c.out);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("diagnostic checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
