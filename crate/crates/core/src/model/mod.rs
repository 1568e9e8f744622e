//! Domain types shared by every other module: flow events and the trace
//! log format, per-execution traces, and the local and global flow graphs.

mod event;
mod graph;
mod topology;
mod trace;
mod url;

pub use event::{
    parse_trace_log, read_trace_log, write_trace_log, Direction, FlowEvent, HttpOp, TraceLogError,
};
pub use graph::{
    is_generalized, pattern_matches, Edge, EdgeKind, FlowNode, FlowPattern, GlobalEdge,
    GlobalFlowGraph, GlobalNode, GlobalNodeKind, GraphError, LocalFlowGraph, NodeKind,
};
pub(crate) use graph::topo_sort;
pub use topology::{ServiceEndpoint, Topology};
pub use trace::{AppExecution, extract_app_trace, extract_traces, AppStep, AppTrace, Flow, Step, Trace, UNKNOWN_SOURCE};
pub use url::{normalize_url, MalformedUrl};
