//! Per-execution policy engine run by the guard.
//!
//! The local flow graph is simulated as an NFA. The state is a set of
//! candidate positions, each a node plus its repetition progress, so that
//! locally ambiguous graphs never cause false denials. On linear graphs the
//! set holds a single position.

use std::collections::HashMap;
use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Edge, FlowNode, FlowPattern, GraphError, HttpOp, LocalFlowGraph, NodeKind, UNKNOWN_SOURCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    NoMatchingSuccessor,
    LoopCounterExceeded,
    GroupOrderViolation,
    IncompletePath,
    SourceMismatch,
    NoPolicy,
    RateLimited,
    NoPredecessorAvailable,
    BadTag,
    NotLive,
    CredentialFailure,
    ControllerUnavailable,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::NoMatchingSuccessor => "no successor matches",
            DenyReason::LoopCounterExceeded => "loop counter exceeded",
            DenyReason::GroupOrderViolation => "grouped flow out of order",
            DenyReason::IncompletePath => "incomplete path",
            DenyReason::SourceMismatch => "source mismatch",
            DenyReason::NoPolicy => "no policy",
            DenyReason::RateLimited => "rate limited",
            DenyReason::NoPredecessorAvailable => "no predecessor available",
            DenyReason::BadTag => "bad tag",
            DenyReason::NotLive => "execution not live",
            DenyReason::CredentialFailure => "credential rewrite failed",
            DenyReason::ControllerUnavailable => "controller unavailable",
        }
    }
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Extra work the runtime performs with an allowed operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Send or deliver these bytes instead of the original message.
    UpdateMessage(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub verdict: Verdict,
    pub action: Option<Action>,
    /// Why the operation was (or, in fail-open mode, would have been) denied.
    pub reason: Option<DenyReason>,
}

impl Decision {
    pub fn allow() -> Self {
        Decision { verdict: Verdict::Allow, action: None, reason: None }
    }

    pub fn deny(reason: DenyReason) -> Self {
        Decision { verdict: Verdict::Deny, action: None, reason: Some(reason) }
    }

    pub fn with_action(mut self, action: Action) -> Self {
        self.action = Some(action);
        self
    }

    pub fn is_allow(&self) -> bool {
        self.verdict == Verdict::Allow
    }

    pub fn reason_str(&self) -> &'static str {
        self.reason.map(DenyReason::as_str).unwrap_or("ok")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnforcementMode {
    #[default]
    #[serde(alias = "fail_closed")]
    Closed,
    #[serde(alias = "fail_open")]
    Open,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnforceError {
    #[error("m_in source {got:?} not among accepted sources {expected:?}")]
    SourceMismatch { expected: Vec<String>, got: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Position {
    node: u32,
    /// Completed repetitions of the node.
    reps: u32,
    /// Index of the next expected flow within a group body, 0 at a
    /// repetition boundary.
    offset: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub event_index: usize,
    pub reason: DenyReason,
}

#[derive(Debug, Clone)]
pub struct EnforcementState {
    frontier: Vec<Position>,
    // Buffer for the next frontier, kept to avoid allocating per step.
    spare: Vec<Position>,
    pub mode: EnforcementMode,
    pub violations: Vec<Violation>,
    /// The entry accepted an unknown source; the controller must confirm.
    pub needs_controller_check: bool,
    events: usize,
    finished: bool,
}

impl EnforcementState {
    pub fn is_live(&self) -> bool {
        !self.finished && !self.frontier.is_empty()
    }

    pub fn frontier_len(&self) -> usize {
        self.frontier.len()
    }
}

struct CompiledNode {
    kind: NodeKind,
    body: Vec<FlowPattern>,
    counter: u32,
    successors: Vec<u32>,
    to_exit: bool,
}

/// A validated local graph ready for simulation.
pub struct PolicyEngine {
    function: String,
    nodes: Vec<CompiledNode>,
    entry: u32,
    sources: Vec<String>,
}

impl PolicyEngine {
    pub fn new(graph: &LocalFlowGraph) -> Result<Self, GraphError> {
        graph.validate()?;
        let index: HashMap<u32, u32> = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i as u32))
            .collect();
        let mut nodes: Vec<CompiledNode> = graph
            .nodes
            .iter()
            .map(|n: &FlowNode| CompiledNode {
                kind: n.kind,
                body: n.body(),
                counter: n.counter,
                successors: Vec::new(),
                to_exit: false,
            })
            .collect();
        for &Edge { from, to } in &graph.edges {
            let (f, t) = (index[&from], index[&to]);
            if to == graph.exit {
                nodes[f as usize].to_exit = true;
            } else {
                nodes[f as usize].successors.push(t);
            }
        }
        let entry_node = graph.node(graph.entry).expect("validated");
        Ok(PolicyEngine {
            function: graph.function.clone(),
            nodes,
            entry: index[&graph.entry],
            sources: entry_node.sources().into_iter().map(str::to_string).collect(),
        })
    }

    pub fn function(&self) -> &str {
        &self.function
    }

    pub fn accepts_source(&self, source: &str) -> bool {
        self.sources.iter().any(|s| s == source)
    }

    fn start(&self, mode: EnforcementMode, needs_check: bool) -> EnforcementState {
        EnforcementState {
            frontier: vec![Position { node: self.entry, reps: 0, offset: 0 }],
            spare: Vec::new(),
            mode,
            violations: Vec::new(),
            needs_controller_check: needs_check,
            events: 0,
            finished: false,
        }
    }

    /// Starts an execution whose `m_in` came from `in_source`.
    ///
    /// An entry that lists the unknown source `?` accepts anything but flags
    /// the state for a controller check.
    pub fn begin(&self, in_source: &str, mode: EnforcementMode) -> Result<EnforcementState, EnforceError> {
        if self.accepts_source(in_source) {
            Ok(self.start(mode, false))
        } else if self.accepts_source(UNKNOWN_SOURCE) {
            Ok(self.start(mode, true))
        } else {
            Err(EnforceError::SourceMismatch { expected: self.sources.clone(), got: in_source.to_string() })
        }
    }

    /// Live state for an execution the controller approved after a source
    /// mismatch.
    pub fn begin_escalated(&self, mode: EnforcementMode) -> EnforcementState {
        self.start(mode, false)
    }

    fn can_leave(&self, p: &Position) -> bool {
        match self.nodes[p.node as usize].kind {
            NodeKind::Entry => true,
            NodeKind::Flow | NodeKind::Group => p.reps >= 1 && p.offset == 0,
            NodeKind::Exit => false,
        }
    }

    fn advance(&self, p: &Position, reps: u32, offset: u32) -> Position {
        let len = self.nodes[p.node as usize].body.len() as u32;
        if offset == len {
            Position { node: p.node, reps: reps + 1, offset: 0 }
        } else {
            Position { node: p.node, reps, offset }
        }
    }

    /// Checks one outgoing flow.
    pub fn step(&self, state: &mut EnforcementState, url: &str, op: HttpOp) -> Decision {
        let index = state.events;
        state.events += 1;
        if state.finished {
            return self.verdict(state, index, DenyReason::NotLive);
        }
        let mut next = std::mem::take(&mut state.spare);
        let mut counter_hit = false;
        let mut group_broken = false;
        for p in &state.frontier {
            let node = &self.nodes[p.node as usize];
            if matches!(node.kind, NodeKind::Flow | NodeKind::Group) {
                let want = &node.body[p.offset as usize];
                if want.matches(url, op) {
                    if p.offset > 0 {
                        next.push(self.advance(p, p.reps, p.offset + 1));
                    } else if p.reps < node.counter {
                        next.push(self.advance(p, p.reps, 1));
                    } else {
                        counter_hit = true;
                    }
                } else if p.offset > 0 {
                    group_broken = true;
                }
            }
            if self.can_leave(p) {
                for &s in &node.successors {
                    let succ = &self.nodes[s as usize];
                    if succ.body.first().is_some_and(|f| f.matches(url, op)) {
                        next.push(self.advance(&Position { node: s, reps: 0, offset: 0 }, 0, 1));
                    }
                }
            }
        }
        if next.is_empty() {
            state.spare = next;
            let reason = if counter_hit {
                DenyReason::LoopCounterExceeded
            } else if group_broken {
                DenyReason::GroupOrderViolation
            } else {
                DenyReason::NoMatchingSuccessor
            };
            return self.verdict(state, index, reason);
        }
        next.sort_unstable();
        next.dedup();
        let mut old = std::mem::replace(&mut state.frontier, next);
        old.clear();
        state.spare = old;
        Decision::allow()
    }

    /// Checks that the execution may return now.
    pub fn end(&self, state: &mut EnforcementState) -> Decision {
        let index = state.events;
        state.events += 1;
        if state.finished {
            return self.verdict(state, index, DenyReason::NotLive);
        }
        let complete = state
            .frontier
            .iter()
            .any(|p| self.can_leave(p) && self.nodes[p.node as usize].to_exit);
        state.finished = true;
        if complete {
            Decision::allow()
        } else {
            self.verdict(state, index, DenyReason::IncompletePath)
        }
    }

    fn verdict(&self, state: &mut EnforcementState, index: usize, reason: DenyReason) -> Decision {
        state.violations.push(Violation { event_index: index, reason });
        match state.mode {
            EnforcementMode::Closed => Decision::deny(reason),
            EnforcementMode::Open => Decision { verdict: Verdict::Allow, action: None, reason: Some(reason) },
        }
    }
}

/// Linear graph `entry -> 1 -> ... -> n -> exit` with distinct URLs.
pub fn chain_graph(n: usize) -> LocalFlowGraph {
    let mut nodes = vec![FlowNode::entry(0, &["user".to_string()])];
    let mut edges = Vec::with_capacity(n + 1);
    for i in 1..=n as u32 {
        nodes.push(FlowNode::flow(i, chain_url(i as usize), HttpOp::Get, 1));
        edges.push(Edge { from: i - 1, to: i });
    }
    let exit = n as u32 + 1;
    nodes.push(FlowNode::exit(exit));
    edges.push(Edge { from: n as u32, to: exit });
    LocalFlowGraph { function: "bench".into(), nodes, edges, entry: 0, exit }
}

fn chain_url(i: usize) -> String {
    format!("https://bench.example.com/step/{i}")
}

/// Runs `iterations` policy checks against an `n`-node chain and returns
/// the elapsed wall time. Executions restart when the chain is exhausted.
pub fn bench_check(n: usize, iterations: usize) -> Duration {
    let n = n.max(1);
    let engine = PolicyEngine::new(&chain_graph(n)).expect("chain graph is valid");
    let urls: Vec<String> = (1..=n).map(chain_url).collect();
    let start = Instant::now();
    let mut state = engine.begin("user", EnforcementMode::Closed).expect("source accepted");
    let mut pos = 0;
    for _ in 0..iterations {
        if pos == n {
            state = engine.begin("user", EnforcementMode::Closed).expect("source accepted");
            pos = 0;
        }
        let d = engine.step(&mut state, &urls[pos], HttpOp::Get);
        debug_assert!(d.is_allow());
        pos += 1;
    }
    start.elapsed()
}
