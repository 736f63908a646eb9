//! Decision logs and the post-hoc margin diagnostics computed from them.

pub mod diag;
pub mod log;

pub use diag::{
    check_budget, check_episode_bound, check_step_margins, diagnose, episode_reports, mean_se, overlap_verdict, summarize,
    BudgetFault, DiagOptions, DiagRecord, DiagnoseReport, EpisodeBoundReport, Metric, OverlapPair, OverlapReport,
    StepMarginReport, BELLMAN_SAT, EPS_LOCAL, IDENTITY_TOL,
};
pub use log::{columns, load_log, read_log, LogHeader, LogWriter, LoggedContext, LoggedStep, LOG_FORMAT};
