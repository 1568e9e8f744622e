use serde::{Deserialize, Serialize};

use super::spec::{AppSpec, Directive, Repeat, SendSpec};
use super::{controller_for, enforce, DecisionRecord, ExtraInvocation, HarnessError, RunOptions, RunReport};
use crate::builder::PolicySet;
use crate::controller::{Alarm, AlarmKind};
use crate::enforcer::{EnforcementMode, Verdict};
use crate::model::{normalize_url, Direction, HttpOp};

/// A deviation injected into an otherwise benign run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    /// The function also posts to `url` before returning.
    Exfiltrate { function: String, url: String },
    /// One send of the function (the first, or the first whose URL starts
    /// with `prefix`) is repeated `times` times.
    Repeat {
        function: String,
        times: u32,
        #[serde(default)]
        prefix: Option<String>,
    },
    /// The function is started by `source` with no request behind it.
    Bypass { function: String, source: String },
    /// The function performs its sends in reverse order.
    OutOfOrder { function: String },
}

impl Scenario {
    pub fn function(&self) -> &str {
        match self {
            Scenario::Exfiltrate { function, .. }
            | Scenario::Repeat { function, .. }
            | Scenario::Bypass { function, .. }
            | Scenario::OutOfOrder { function } => function,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub scenario: Scenario,
    pub detected: bool,
    pub first_denial: Option<DecisionRecord>,
    /// For `Repeat`: which send of the repeated URL was denied first (1-based).
    pub occurrence: Option<usize>,
    pub alarms: Vec<Alarm>,
    pub run: RunReport,
}

fn template_prefix(url: &str) -> String {
    let lit = url.split('{').next().unwrap_or(url);
    normalize_url(lit).unwrap_or_else(|_| lit.to_string())
}

fn sends_mut(app: &mut AppSpec, function: &str) -> Result<Vec<usize>, HarnessError> {
    let f = app
        .function(function)
        .ok_or_else(|| HarnessError::Spec(format!("unknown function {function}")))?;
    Ok(f.script
        .iter()
        .enumerate()
        .filter(|(_, d)| matches!(d, Directive::Send(_)))
        .map(|(i, _)| i)
        .collect())
}

/// Applies `scenario` to a copy of `app`, runs it closed-mode under
/// `policies` and reports whether the deviation was caught.
pub fn inject(app: &AppSpec, policies: &PolicySet, scenario: &Scenario, opts: &RunOptions) -> Result<AttackReport, HarnessError> {
    let mut app = app.clone();
    let mut extra = Vec::new();
    let mut watched_prefix = None;
    match scenario {
        Scenario::Exfiltrate { function, url } => {
            let f = app
                .function_mut(function)
                .ok_or_else(|| HarnessError::Spec(format!("unknown function {function}")))?;
            let at = f.script.iter().position(|d| matches!(d, Directive::Return)).unwrap_or(f.script.len());
            f.script.insert(at, Directive::Send(SendSpec::new(url.clone(), HttpOp::Post)));
        }
        Scenario::Repeat { function, times, prefix } => {
            let sends = sends_mut(&mut app, function)?;
            let f = app.function_mut(function).expect("checked");
            let target = sends
                .into_iter()
                .find(|&i| match (&f.script[i], prefix) {
                    (Directive::Send(s), Some(p)) => s.url.starts_with(p.as_str()),
                    _ => true,
                })
                .ok_or_else(|| HarnessError::Spec(format!("{function} has no matching send")))?;
            if let Directive::Send(s) = &mut f.script[target] {
                s.repeat = Repeat::Count(*times);
                watched_prefix = Some(template_prefix(&s.url));
            }
        }
        Scenario::Bypass { function, source } => {
            if app.function(function).is_none() {
                return Err(HarnessError::Spec(format!("unknown function {function}")));
            }
            extra.push(ExtraInvocation {
                function: function.clone(),
                source: source.clone(),
                after_requests: opts.requests,
                delay_ns: 0,
            });
        }
        Scenario::OutOfOrder { function } => {
            let sends = sends_mut(&mut app, function)?;
            let f = app.function_mut(function).expect("checked");
            let original: Vec<Directive> = sends.iter().map(|&i| f.script[i].clone()).collect();
            let mut reversed = original.clone();
            reversed.reverse();
            if reversed == original {
                return Err(HarnessError::Spec(format!("{function} has nothing to reorder")));
            }
            for (slot, d) in sends.into_iter().zip(reversed) {
                f.script[slot] = d;
            }
        }
    }

    let controller = controller_for(&app, Some(policies.clone()), EnforcementMode::Closed)?;
    let run = enforce(&app, controller, opts, &extra)?;
    let target = scenario.function();
    let mine = |d: &&DecisionRecord| d.function == target;
    let first_denial = run.denials().find(mine).cloned();
    let mut occurrence = None;
    let detected = match scenario {
        Scenario::Exfiltrate { url, .. } => {
            let url = normalize_url(url).unwrap_or_else(|_| url.clone());
            run.denials().any(|d| mine(&d) && d.direction == Direction::Send && d.url == url)
        }
        Scenario::Repeat { .. } => {
            let prefix = watched_prefix.unwrap_or_default();
            let Some(first) = run
                .decisions
                .iter()
                .find(|d| mine(d) && d.direction == Direction::Send && d.url.starts_with(&prefix))
            else {
                return Err(HarnessError::Spec(format!("{target} never ran")));
            };
            // Count within the first attacked execution.
            let sends: Vec<&DecisionRecord> = run
                .decisions
                .iter()
                .filter(|d| d.instance == first.instance && d.request == first.request)
                .filter(|d| d.direction == Direction::Send && d.url.starts_with(&prefix))
                .collect();
            occurrence = sends.iter().position(|d| d.verdict == Verdict::Deny).map(|p| p + 1);
            occurrence.is_some()
        }
        Scenario::Bypass { .. } => {
            let request = opts.requests;
            run.alarms.iter().any(|a| {
                a.function == target && matches!(a.kind, AlarmKind::NoPredecessorAvailable | AlarmKind::UnexpectedSource)
            }) || run.denials().any(|d| mine(&d) && d.request == request && d.direction == Direction::In)
        }
        Scenario::OutOfOrder { .. } => first_denial.is_some(),
    };
    Ok(AttackReport { scenario: scenario.clone(), detected, first_denial, occurrence, alarms: run.alarms.clone(), run })
}
