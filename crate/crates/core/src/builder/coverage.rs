use std::collections::BTreeMap;

use super::{build_policies, check_app_trace, BuildOptions, PolicySet};
use crate::enforcer::{EnforcementMode, PolicyEngine};
use crate::model::{extract_traces, AppExecution, Topology};

/// All application executions of one test round.
pub type Round = Vec<AppExecution>;

/// Whether any flow of `round` would be blocked under `policies`. Without
/// policies every flow is blocked.
pub fn round_rejected(policies: Option<&PolicySet>, round: &[AppExecution], topology: &Topology) -> bool {
    let Some(policies) = policies else {
        return round.iter().any(|ex| !ex.events.is_empty());
    };
    let engines: BTreeMap<&str, PolicyEngine> = policies
        .local
        .iter()
        .filter_map(|(f, g)| PolicyEngine::new(g).ok().map(|e| (f.as_str(), e)))
        .collect();
    for ex in round {
        if check_app_trace(&policies.global, &ex.app_trace(), topology).is_err() {
            return true;
        }
        for trace in extract_traces(&ex.events) {
            let Some(engine) = engines.get(trace.function.as_str()) else {
                return true;
            };
            let Ok(mut state) = engine.begin(&trace.source, EnforcementMode::Closed) else {
                return true;
            };
            for f in &trace.flows {
                if !engine.step(&mut state, &f.url, f.op).is_allow() {
                    return true;
                }
            }
            if trace.completed && !engine.end(&mut state).is_allow() {
                return true;
            }
        }
    }
    false
}

/// Error curve: for every prefix size `n` in `0..=rounds.len()`, the number
/// of rounds after the prefix that graphs built from the first `n` rounds
/// would block.
pub fn coverage_curve(rounds: &[Round], topology: &Topology, opts: BuildOptions) -> Vec<(usize, usize)> {
    let mut curve = Vec::with_capacity(rounds.len() + 1);
    for n in 0..=rounds.len() {
        let training: Vec<AppExecution> = rounds[..n].iter().flatten().cloned().collect();
        let policies = if training.is_empty() {
            None
        } else {
            build_policies(&training, topology, opts).ok()
        };
        let errors = rounds[n..]
            .iter()
            .filter(|r| round_rejected(policies.as_ref(), r, topology))
            .count();
        curve.push((n, errors));
    }
    curve
}
