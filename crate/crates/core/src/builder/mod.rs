//! Flow-graph generation from recorded executions.
//!
//! The pipeline per function is: group URLs by longest common prefix,
//! rewrite flows to their group pattern, fold repeated subsequences into
//! counted units, merge traces of the same shape, and build the acyclic
//! local graph. The application's global graph comes from the function
//! start order of each execution.

mod compress;
mod coverage;
mod global;
mod lcp;
mod local;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use compress::{compress_trace, merge_traces, CompressedTrace, Item, Unit};
pub use coverage::{coverage_curve, round_rejected, Round};
pub use global::{build_global_graph, check_app_trace, classify_source, implicit_parent, SourceKind};
pub use lcp::{lcp_group, lcp_len, UrlGroup, UrlRewriter, DEFAULT_T_LCP};
pub use local::build_local_graph;

use crate::model::{
    extract_traces, AppExecution, Flow, GlobalFlowGraph, GraphError, LocalFlowGraph, Topology, Trace,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("no traces to build from")]
    EmptyTraceSet,
    #[error("url {0:?} is not covered by any url group")]
    UnknownUrl(String),
    #[error("built graph is invalid: {0}")]
    Graph(GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub t_lcp: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { t_lcp: DEFAULT_T_LCP }
    }
}

/// Local graphs for every function plus the application's global graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySet {
    pub local: BTreeMap<String, LocalFlowGraph>,
    pub global: GlobalFlowGraph,
}

/// Runs the whole local pipeline for one function's traces. Executions
/// that did not complete are skipped.
pub fn build_function_graph(
    function: &str,
    traces: &[&Trace],
    opts: BuildOptions,
) -> Result<LocalFlowGraph, BuildError> {
    let complete: Vec<&Trace> = traces.iter().copied().filter(|t| t.completed).collect();
    if complete.is_empty() {
        return Err(BuildError::EmptyTraceSet);
    }
    let groups = lcp_group(
        complete.iter().flat_map(|t| t.flows.iter().map(|f| f.url.as_str())),
        opts.t_lcp,
    );
    let rewriter = UrlRewriter::new(&groups);
    let compressed: Vec<CompressedTrace<Flow>> = complete
        .iter()
        .map(|t| {
            let rewritten: Vec<Flow> = t
                .flows
                .iter()
                .map(|f| Flow::new(rewriter.rewrite(&f.url).unwrap_or(&f.url), f.op))
                .collect();
            compress_trace(&rewritten)
        })
        .collect();
    let merged = merge_traces(&compressed);
    let sources: Vec<String> = complete.iter().map(|t| t.source.clone()).collect();
    build_local_graph(function, &sources, &merged, &groups)
}

/// Builds all policies of an application from recorded executions.
pub fn build_policies(
    executions: &[AppExecution],
    topology: &Topology,
    opts: BuildOptions,
) -> Result<PolicySet, BuildError> {
    if executions.is_empty() {
        return Err(BuildError::EmptyTraceSet);
    }
    let mut by_function: BTreeMap<String, Vec<Trace>> = BTreeMap::new();
    for ex in executions {
        for t in extract_traces(&ex.events) {
            by_function.entry(t.function.clone()).or_default().push(t);
        }
    }
    let mut local = BTreeMap::new();
    for (function, traces) in &by_function {
        let refs: Vec<&Trace> = traces.iter().collect();
        match build_function_graph(function, &refs, opts) {
            Ok(g) => {
                local.insert(function.clone(), g);
            }
            // A function that never completed has no legitimate path.
            Err(BuildError::EmptyTraceSet) => {}
            Err(e) => return Err(e),
        }
    }
    let app_traces: Vec<_> = executions.iter().map(AppExecution::app_trace).collect();
    let global = build_global_graph(&app_traces, topology)?;
    Ok(PolicySet { local, global })
}
