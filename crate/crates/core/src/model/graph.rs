use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::event::HttpOp;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph has no node with id {0}")]
    MissingNode(u32),
    #[error("duplicate node id {0}")]
    DuplicateId(u32),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("node {0} is not on any entry-to-exit path")]
    Unreachable(u32),
    #[error("invalid node {id}: {reason}")]
    InvalidNode { id: u32, reason: String },
    #[error("entry/exit misplaced: {0}")]
    Endpoints(String),
    #[error("json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Entry,
    Exit,
    Flow,
    Group,
}

/// Pattern test for a URL: a trailing `*` marks an LCP prefix, anything
/// else must match exactly.
pub fn pattern_matches(pattern: &str, url: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => url.starts_with(prefix),
        None => pattern == url,
    }
}

pub fn is_generalized(pattern: &str) -> bool {
    pattern.ends_with('*')
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowPattern {
    pub pattern: String,
    pub op: HttpOp,
}

impl FlowPattern {
    pub fn new(pattern: impl Into<String>, op: HttpOp) -> Self {
        FlowPattern { pattern: pattern.into(), op }
    }

    pub fn matches(&self, url: &str, op: HttpOp) -> bool {
        self.op == op && pattern_matches(&self.pattern, url)
    }
}

fn is_one(c: &u32) -> bool {
    *c == 1
}

fn one() -> u32 {
    1
}

/// A local-graph node. `Flow` nodes carry `pattern` and `op`, `Group`
/// nodes carry an ordered `group_body`, the entry node's `pattern` lists
/// the accepted sources of `m_in` separated by `|`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowNode {
    pub id: u32,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<HttpOp>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub counter: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_body: Vec<FlowPattern>,
}

impl FlowNode {
    pub fn entry(id: u32, sources: &[String]) -> Self {
        FlowNode {
            id,
            kind: NodeKind::Entry,
            pattern: sources.join("|"),
            op: None,
            counter: 1,
            group_body: Vec::new(),
        }
    }

    pub fn exit(id: u32) -> Self {
        FlowNode {
            id,
            kind: NodeKind::Exit,
            pattern: String::new(),
            op: None,
            counter: 1,
            group_body: Vec::new(),
        }
    }

    pub fn flow(id: u32, pattern: impl Into<String>, op: HttpOp, counter: u32) -> Self {
        FlowNode {
            id,
            kind: NodeKind::Flow,
            pattern: pattern.into(),
            op: Some(op),
            counter,
            group_body: Vec::new(),
        }
    }

    pub fn group(id: u32, body: Vec<FlowPattern>, counter: u32) -> Self {
        FlowNode {
            id,
            kind: NodeKind::Group,
            pattern: String::new(),
            op: None,
            counter,
            group_body: body,
        }
    }

    /// Sources accepted by an entry node.
    pub fn sources(&self) -> Vec<&str> {
        if self.pattern.is_empty() {
            return Vec::new();
        }
        self.pattern.split('|').collect()
    }

    /// The flow patterns of one repetition of this node.
    pub fn body(&self) -> Vec<FlowPattern> {
        match self.kind {
            NodeKind::Flow => vec![FlowPattern::new(self.pattern.clone(), self.op.unwrap_or(HttpOp::Other))],
            NodeKind::Group => self.group_body.clone(),
            _ => Vec::new(),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            NodeKind::Entry => format!("entry [{}]", self.pattern),
            NodeKind::Exit => "exit".to_string(),
            NodeKind::Flow => {
                let op = self.op.map(|o| o.as_str()).unwrap_or("?");
                if self.counter > 1 {
                    format!("{op} {} x{}", self.pattern, self.counter)
                } else {
                    format!("{op} {}", self.pattern)
                }
            }
            NodeKind::Group => {
                let body: Vec<String> = self
                    .group_body
                    .iter()
                    .map(|p| format!("{} {}", p.op, p.pattern))
                    .collect();
                format!("{{{}}} x{}", body.join(", "), self.counter)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: u32,
    pub to: u32,
}

/// Acyclic NFA over `(url pattern, op)` nodes for one function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalFlowGraph {
    pub function: String,
    pub nodes: Vec<FlowNode>,
    pub edges: Vec<Edge>,
    pub entry: u32,
    pub exit: u32,
}

impl LocalFlowGraph {
    pub fn node(&self, id: u32) -> Option<&FlowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let g: LocalFlowGraph =
            serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    /// Node ids in a topological order, or `Cycle`.
    pub fn topo_order(&self) -> Result<Vec<u32>, GraphError> {
        topo_sort(
            self.nodes.iter().map(|n| n.id),
            self.edges.iter().map(|e| (e.from, e.to)),
        )
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id) {
                return Err(GraphError::DuplicateId(n.id));
            }
            let bad = |reason: &str| GraphError::InvalidNode { id: n.id, reason: reason.into() };
            if n.counter < 1 {
                return Err(bad("counter must be at least 1"));
            }
            match n.kind {
                NodeKind::Flow if n.op.is_none() || n.pattern.is_empty() => {
                    return Err(bad("flow node needs pattern and op"))
                }
                NodeKind::Group if n.group_body.is_empty() => {
                    return Err(bad("group body is empty"))
                }
                NodeKind::Entry if n.id != self.entry => return Err(bad("stray entry node")),
                NodeKind::Exit if n.id != self.exit => return Err(bad("stray exit node")),
                _ => {}
            }
        }
        for id in [self.entry, self.exit] {
            if !ids.contains(&id) {
                return Err(GraphError::MissingNode(id));
            }
        }
        if self.node(self.entry).map(|n| n.kind) != Some(NodeKind::Entry) {
            return Err(GraphError::Endpoints("entry id does not name an entry node".into()));
        }
        if self.node(self.exit).map(|n| n.kind) != Some(NodeKind::Exit) {
            return Err(GraphError::Endpoints("exit id does not name an exit node".into()));
        }
        for e in &self.edges {
            for id in [e.from, e.to] {
                if !ids.contains(&id) {
                    return Err(GraphError::MissingNode(id));
                }
            }
            if e.to == self.entry {
                return Err(GraphError::Endpoints("edge into entry".into()));
            }
            if e.from == self.exit {
                return Err(GraphError::Endpoints("edge out of exit".into()));
            }
        }
        self.topo_order()?;
        let fwd = reach(self.entry, self.edges.iter().map(|e| (e.from, e.to)));
        let back = reach(self.exit, self.edges.iter().map(|e| (e.to, e.from)));
        for id in ids {
            if !fwd.contains(&id) || !back.contains(&id) {
                return Err(GraphError::Unreachable(id));
            }
        }
        Ok(())
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph \"{}\" {{", escape_dot(&self.function));
        for n in &self.nodes {
            let shape = match n.kind {
                NodeKind::Entry | NodeKind::Exit => "doublecircle",
                NodeKind::Group => "box3d",
                NodeKind::Flow => "box",
            };
            let _ = writeln!(
                s,
                "  n{} [shape={shape}, label=\"{}\"];",
                n.id,
                escape_dot(&n.label())
            );
        }
        for e in &self.edges {
            let _ = writeln!(s, "  n{} -> n{};", e.from, e.to);
        }
        s.push_str("}\n");
        s
    }
}

fn escape_dot(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn reach(start: u32, edges: impl Iterator<Item = (u32, u32)>) -> BTreeSet<u32> {
    let mut adj: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
    }
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        for &m in adj.get(&n).into_iter().flatten() {
            if seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen
}

pub(crate) fn topo_sort<T: Ord + Copy>(
    nodes: impl Iterator<Item = T>,
    edges: impl Iterator<Item = (T, T)>,
) -> Result<Vec<T>, GraphError> {
    let mut indeg: BTreeMap<T, usize> = nodes.map(|n| (n, 0)).collect();
    let mut adj: BTreeMap<T, Vec<T>> = BTreeMap::new();
    for (a, b) in edges {
        adj.entry(a).or_default().push(b);
        *indeg.entry(b).or_default() += 1;
        indeg.entry(a).or_default();
    }
    let mut ready: VecDeque<T> = indeg.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(n) = ready.pop_front() {
        order.push(n);
        for &m in adj.get(&n).into_iter().flatten() {
            let d = indeg.get_mut(&m).expect("node registered");
            *d -= 1;
            if *d == 0 {
                ready.push_back(m);
            }
        }
    }
    if order.len() == indeg.len() {
        Ok(order)
    } else {
        Err(GraphError::Cycle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalNodeKind {
    Function,
    Service,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalNode {
    /// Unique node name. Repeated occurrences of a function get `name#k`.
    pub name: String,
    pub kind: GlobalNodeKind,
    /// Function or service this node stands for.
    pub target: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    /// Service that carried an implicit flow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<String>,
}

/// Function-level execution-order graph of an application.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalFlowGraph {
    pub nodes: Vec<GlobalNode>,
    pub edges: Vec<GlobalEdge>,
    /// Nodes that start an application execution.
    pub entries: Vec<String>,
}

impl GlobalFlowGraph {
    pub fn validate(&self) -> Result<(), GraphError> {
        let names: BTreeSet<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        if names.len() != self.nodes.len() {
            return Err(GraphError::Json("duplicate global node name".into()));
        }
        for e in &self.edges {
            for n in [&e.from, &e.to] {
                if !names.contains(n.as_str()) {
                    return Err(GraphError::Json(format!("edge endpoint {n:?} undeclared")));
                }
            }
        }
        for n in &self.entries {
            if !names.contains(n.as_str()) {
                return Err(GraphError::Json(format!("entry {n:?} undeclared")));
            }
        }
        topo_sort(
            self.nodes.iter().map(|n| n.name.as_str()),
            self.edges.iter().map(|e| (e.from.as_str(), e.to.as_str())),
        )?;
        Ok(())
    }

    fn targets_of(&self, node: &str) -> Option<&str> {
        self.nodes.iter().find(|n| n.name == node).map(|n| n.target.as_str())
    }

    /// Function names with an edge of `kind` into function `to`, with the
    /// carrying service for implicit edges.
    pub fn predecessors(&self, to: &str, kind: EdgeKind) -> Vec<(&str, Option<&str>)> {
        let mut out: Vec<(&str, Option<&str>)> = Vec::new();
        for e in &self.edges {
            if e.kind == kind && self.targets_of(&e.to) == Some(to) {
                if let Some(from) = self.targets_of(&e.from) {
                    let item = (from, e.via.as_deref());
                    if !out.contains(&item) {
                        out.push(item);
                    }
                }
            }
        }
        out
    }

    pub fn is_entry_function(&self, function: &str) -> bool {
        self.entries.iter().any(|n| self.targets_of(n) == Some(function))
    }

    pub fn has_function(&self, function: &str) -> bool {
        self.nodes
            .iter()
            .any(|n| n.kind == GlobalNodeKind::Function && n.target == function)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph \"global\" {\n");
        for n in &self.nodes {
            let shape = match n.kind {
                GlobalNodeKind::Function => "box",
                GlobalNodeKind::Service => "ellipse",
            };
            let _ = writeln!(s, "  \"{}\" [shape={shape}];", escape_dot(&n.name));
        }
        for e in &self.edges {
            let style = match e.kind {
                EdgeKind::Explicit => "solid",
                EdgeKind::Implicit => "dashed",
            };
            let label = e.via.as_deref().map(|v| format!(", label=\"{}\"", escape_dot(v))).unwrap_or_default();
            let _ = writeln!(s, "  \"{}\" -> \"{}\" [style={style}{label}];", escape_dot(&e.from), escape_dot(&e.to));
        }
        s.push_str("}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let g: GlobalFlowGraph =
            serde_json::from_str(text).map_err(|e| GraphError::Json(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }
}
