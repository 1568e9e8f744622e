use std::collections::{BTreeMap, BTreeSet};

use super::BuildError;
use crate::model::{
    topo_sort, AppStep, AppTrace, EdgeKind, GlobalEdge, GlobalFlowGraph, GlobalNode, GlobalNodeKind,
    Topology,
};

/// How the message starting an execution reached the function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Function,
    Service,
    External,
}

pub fn classify_source(source: &str, functions: &BTreeSet<&str>, topology: &Topology) -> SourceKind {
    if functions.contains(source) {
        SourceKind::Function
    } else if topology.is_service(source) {
        SourceKind::Service
    } else {
        SourceKind::External
    }
}

struct Builder {
    nodes: BTreeMap<String, GlobalNode>,
    edges: BTreeSet<GlobalEdge>,
    entries: BTreeSet<String>,
}

impl Builder {
    fn reaches(&self, from: &str, to: &str) -> bool {
        let mut stack = vec![from.to_string()];
        let mut seen = BTreeSet::new();
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if !seen.insert(n.clone()) {
                continue;
            }
            for e in self.edges.iter().filter(|e| e.from == n) {
                stack.push(e.to.clone());
            }
        }
        false
    }

    fn occurrence(function: &str, k: usize) -> String {
        if k == 1 {
            function.to_string()
        } else {
            format!("{function}#{k}")
        }
    }

    fn ensure_function(&mut self, name: &str, function: &str) {
        self.nodes.entry(name.to_string()).or_insert_with(|| GlobalNode {
            name: name.to_string(),
            kind: GlobalNodeKind::Function,
            target: function.to_string(),
        });
    }

    /// Adds `from -> function`, duplicating `function` when the edge would
    /// close a cycle. Returns the node used for `function`.
    fn link(&mut self, from: &str, function: &str, kind: EdgeKind, via: Option<&str>) -> String {
        let mut k = 1;
        loop {
            let name = Self::occurrence(function, k);
            if name != from && !self.reaches(&name, from) {
                self.ensure_function(&name, function);
                self.edges.insert(GlobalEdge {
                    from: from.to_string(),
                    to: name.clone(),
                    kind,
                    via: via.map(str::to_string),
                });
                return name;
            }
            k += 1;
        }
    }
}

/// Builds the application's global flow graph from its execution orders.
///
/// Index of the step a service-started step `k` depends on: the latest
/// earlier execution that had already sent to that service, or else the
/// one started immediately before.
pub fn implicit_parent(steps: &[AppStep], k: usize, topology: &Topology) -> Option<usize> {
    let step = steps.get(k)?;
    let sent = |j: usize| {
        steps[j]
            .sends
            .iter()
            .any(|(ts, url)| *ts <= step.start && topology.resolve(url) == Some(step.source.as_str()))
    };
    (0..k).rev().find(|&j| sent(j)).or(k.checked_sub(1))
}

/// A function started by another function gets an explicit edge from its
/// caller. A function started by a service depends on the function that
/// triggered it, found by [`implicit_parent`], and gets an implicit edge
/// labelled with the service. Functions started externally, or by a service with nothing
/// before them, are entries.
pub fn build_global_graph(
    app_traces: &[AppTrace],
    topology: &Topology,
) -> Result<GlobalFlowGraph, BuildError> {
    if app_traces.is_empty() {
        return Err(BuildError::EmptyTraceSet);
    }
    let functions: BTreeSet<&str> = app_traces
        .iter()
        .flat_map(|t| t.function_sequence.iter().map(|s| s.function.as_str()))
        .collect();
    let mut b = Builder { nodes: BTreeMap::new(), edges: BTreeSet::new(), entries: BTreeSet::new() };
    let mut services_used = BTreeSet::new();
    for trace in app_traces {
        // Node currently standing for each function in this execution.
        let mut current: BTreeMap<&str, String> = BTreeMap::new();
        let steps = &trace.function_sequence;
        for (k, step) in steps.iter().enumerate() {
            let f = step.function.as_str();
            let previous = implicit_parent(steps, k, topology).map(|j| steps[j].function.as_str());
            let parent = match classify_source(&step.source, &functions, topology) {
                SourceKind::Function => current
                    .get(step.source.as_str())
                    .cloned()
                    .map(|p| (p, EdgeKind::Explicit, None))
                    .or_else(|| Some((step.source.clone(), EdgeKind::Explicit, None))),
                SourceKind::Service => {
                    services_used.insert(step.source.clone());
                    previous.map(|p| {
                        (
                            current.get(p).cloned().unwrap_or_else(|| p.to_string()),
                            EdgeKind::Implicit,
                            Some(step.source.as_str()),
                        )
                    })
                }
                SourceKind::External => None,
            };
            let node = match parent {
                Some((p, kind, via)) => {
                    let target = b.nodes.get(&p).map(|n| n.target.clone()).unwrap_or_else(|| p.clone());
                    b.ensure_function(&p, &target);
                    b.link(&p, f, kind, via)
                }
                None => {
                    b.ensure_function(f, f);
                    b.entries.insert(f.to_string());
                    f.to_string()
                }
            };
            current.insert(f, node);
        }
    }
    for s in services_used {
        b.nodes.insert(
            s.clone(),
            GlobalNode { name: s.clone(), kind: GlobalNodeKind::Service, target: s },
        );
    }
    let graph = GlobalFlowGraph {
        nodes: b.nodes.into_values().collect(),
        edges: b.edges.into_iter().collect(),
        entries: b.entries.into_iter().collect(),
    };
    topo_sort(
        graph.nodes.iter().map(|n| n.name.as_str()),
        graph.edges.iter().map(|e| (e.from.as_str(), e.to.as_str())),
    )
    .map_err(BuildError::Graph)?;
    Ok(graph)
}

/// Checks one application execution order against a global graph.
pub fn check_app_trace(
    graph: &GlobalFlowGraph,
    trace: &AppTrace,
    topology: &Topology,
) -> Result<(), String> {
    let functions: BTreeSet<&str> = graph
        .nodes
        .iter()
        .filter(|n| n.kind == GlobalNodeKind::Function)
        .map(|n| n.target.as_str())
        .collect();
    let steps = &trace.function_sequence;
    for (k, step) in steps.iter().enumerate() {
        let f = step.function.as_str();
        let previous = implicit_parent(steps, k, topology).map(|j| steps[j].function.as_str());
        if !functions.contains(f) {
            return Err(format!("{f} is not part of the application graph"));
        }
        let ok = match classify_source(&step.source, &functions, topology) {
            SourceKind::Function => graph
                .predecessors(f, EdgeKind::Explicit)
                .iter()
                .any(|(p, _)| *p == step.source),
            SourceKind::Service => {
                let via_pred = previous.is_some_and(|prev| {
                    graph
                        .predecessors(f, EdgeKind::Implicit)
                        .iter()
                        .any(|(p, via)| *p == prev && *via == Some(step.source.as_str()))
                });
                via_pred || graph.is_entry_function(f)
            }
            SourceKind::External => graph.is_entry_function(f),
        };
        if !ok {
            return Err(format!("{f} started from {} out of order", step.source));
        }
    }
    Ok(())
}
