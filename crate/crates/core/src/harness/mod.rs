//! Deterministic simulator for serverless applications: runs scripted
//! functions and services to record traces or to exercise the guards
//! and controller end to end.

mod attack;
pub mod fixtures;
mod sim;
mod spec;

use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attack::{inject, AttackReport, Scenario};
pub use sim::USER;
pub use spec::{
    invocation_url, invoked_function, render, AppSpec, Capture, Directive, FunctionSpec, InputSpec, Repeat,
    ResponseRule, SendSpec, ServiceSpec, TemplateScope, TriggerRule, LAMBDA_HOST,
};

use crate::builder::{coverage_curve, BuildOptions, PolicySet};
use crate::controller::{ApplicationConfig, Controller, ControllerConfig, ControllerError};
use crate::enforcer::{DenyReason, EnforcementMode, Verdict};
use crate::model::{write_trace_log, AppExecution, Direction, HttpOp};
use crate::protocol::ProtocolError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid application: {0}")]
    Spec(String),
    #[error("script error: {0}")]
    Script(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    pub requests: usize,
    /// Spacing between user requests. Zero runs them all concurrently.
    pub request_gap_ns: u64,
    pub step_ns: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { seed: 0, requests: 1, request_gap_ns: 1_000_000_000, step_ns: 1_000_000 }
    }
}

/// An invocation not caused by any user request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtraInvocation {
    pub function: String,
    pub source: String,
    /// Starts once this many request slots have passed.
    pub after_requests: usize,
    pub delay_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Function,
    Service,
    External,
}

/// A message as received by its destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub request: usize,
    pub side: Side,
    pub name: String,
    pub url: String,
    pub message: String,
    /// For sent messages, the bytes as the function produced them.
    pub origin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub request: usize,
    pub function: String,
    pub instance: String,
    pub direction: Direction,
    pub url: String,
    pub op: HttpOp,
    pub verdict: Verdict,
    pub reason: Option<DenyReason>,
    pub at_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Events per request, as the functions performed them.
    pub executions: Vec<AppExecution>,
    /// Guard verdicts, in order. Empty for record runs.
    pub decisions: Vec<DecisionRecord>,
    pub alarms: Vec<crate::controller::Alarm>,
    pub deliveries: Vec<Delivery>,
    /// Functions whose cold start was refused.
    pub throttled: Vec<String>,
    pub errors: Vec<String>,
}

impl RunReport {
    pub fn denials(&self) -> impl Iterator<Item = &DecisionRecord> {
        self.decisions.iter().filter(|d| d.verdict == Verdict::Deny)
    }

    /// Writes one trace log per request into `dir`.
    pub fn write_traces(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for ex in &self.executions {
            let f = std::fs::File::create(dir.join(format!("{}.jsonl", ex.id)))?;
            let mut w = io::BufWriter::new(f);
            write_trace_log(&mut w, &ex.events)?;
            w.flush()?;
        }
        Ok(())
    }
}

/// Runs the application without guards and returns its traces.
pub fn record(app: &AppSpec, opts: &RunOptions) -> Result<RunReport, HarnessError> {
    sim::Sim::new(app, opts, None)?.run(&[])
}

/// Runs the application with a guard on every instance.
pub fn enforce(
    app: &AppSpec,
    controller: Arc<Controller>,
    opts: &RunOptions,
    extra: &[ExtraInvocation],
) -> Result<RunReport, HarnessError> {
    sim::Sim::new(app, opts, Some(controller))?.run(extra)
}

/// Controller configuration for a single simulated application.
pub fn controller_config(app: &AppSpec, policies: Option<PolicySet>, mode: EnforcementMode) -> ControllerConfig {
    ControllerConfig {
        applications: vec![ApplicationConfig {
            name: app.name.clone(),
            functions: app.function_names(),
            topology: app.topology(),
            policies,
            fail_mode: mode,
            credentials: app.credentials.clone(),
        }],
        fan_out: app.fan_out.clone(),
        rate_limits: app.rate_limits.clone(),
        heartbeat: Default::default(),
    }
}

pub fn controller_for(app: &AppSpec, policies: Option<PolicySet>, mode: EnforcementMode) -> Result<Arc<Controller>, HarnessError> {
    Ok(Arc::new(Controller::new(controller_config(app, policies, mode))?))
}

/// Records `rounds` rounds of `per_round` requests, round `r` seeded
/// with `seed + r`.
pub fn record_rounds(app: &AppSpec, rounds: usize, per_round: usize, seed: u64) -> Result<Vec<Vec<AppExecution>>, HarnessError> {
    (0..rounds)
        .map(|r| {
            let opts = RunOptions { seed: seed.wrapping_add(r as u64), requests: per_round, ..Default::default() };
            Ok(record(app, &opts)?.executions)
        })
        .collect()
}

/// Error curve: for each training size `n`, how many later rounds the
/// policies learned from the first `n` reject.
pub fn eval_rounds(app: &AppSpec, rounds: usize, per_round: usize, seed: u64) -> Result<Vec<(usize, usize)>, HarnessError> {
    let data = record_rounds(app, rounds, per_round, seed)?;
    Ok(coverage_curve(&data, &app.topology(), BuildOptions::default()))
}

pub fn write_curve_csv(mut w: impl Write, curve: &[(usize, usize)]) -> io::Result<()> {
    writeln!(w, "n,errors")?;
    for (n, e) in curve {
        writeln!(w, "{n},{e}")?;
    }
    Ok(())
}
