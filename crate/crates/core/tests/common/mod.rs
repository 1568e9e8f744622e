//! Reference implementations the library is checked against. They favour
//! obviousness over speed and share no code with the crate.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use seclambda::builder::{Item, Unit};
use seclambda::enforcer::{EnforcementMode, PolicyEngine};
use seclambda::model::{AppExecution, Edge, FlowNode, FlowPattern, HttpOp, LocalFlowGraph, NodeKind};

/// Every entry-to-exit word of `g`, found by walking all paths and
/// choosing every repetition count of every node.
pub fn language(g: &LocalFlowGraph) -> BTreeSet<Vec<FlowPattern>> {
    let mut succ: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for e in &g.edges {
        succ.entry(e.from).or_default().push(e.to);
    }
    let nodes: BTreeMap<u32, &FlowNode> = g.nodes.iter().map(|n| (n.id, n)).collect();
    let mut out = BTreeSet::new();
    let mut stack = vec![(g.entry, Vec::new())];
    while let Some((at, word)) = stack.pop() {
        for &next in succ.get(&at).into_iter().flatten() {
            let node = nodes[&next];
            if node.kind == NodeKind::Exit {
                out.insert(word.clone());
                continue;
            }
            let body: Vec<FlowPattern> = match node.kind {
                NodeKind::Flow => vec![FlowPattern::new(node.pattern.clone(), node.op.unwrap())],
                _ => node.group_body.clone(),
            };
            let mut w = word.clone();
            for _ in 0..node.counter {
                w.extend(body.iter().cloned());
                stack.push((next, w.clone()));
            }
        }
    }
    out
}

/// Compares the engine with [`language`] on every word over `alphabet`
/// that extends an accepted prefix by one letter: each step must be
/// allowed exactly when the extended word is a prefix of an accepted word,
/// and `end` must succeed exactly on accepted words.
pub fn engine_matches_language(g: &LocalFlowGraph, alphabet: &[FlowPattern]) -> Result<(), String> {
    let words = language(g);
    let prefixes: BTreeSet<Vec<FlowPattern>> =
        words.iter().flat_map(|w| (0..=w.len()).map(move |k| w[..k].to_vec())).collect();
    let engine = PolicyEngine::new(g).map_err(|e| e.to_string())?;
    let start = engine.begin("user", EnforcementMode::Closed).map_err(|e| e.to_string())?;
    let mut stack = vec![(start, Vec::<FlowPattern>::new())];
    while let Some((state, word)) = stack.pop() {
        let mut done = state.clone();
        let ended = engine.end(&mut done).is_allow();
        if ended != words.contains(&word) {
            return Err(format!("end after {} : engine {ended}", show(&word)));
        }
        for letter in alphabet {
            let mut s = state.clone();
            let allowed = engine.step(&mut s, &letter.pattern, letter.op).is_allow();
            let mut next = word.clone();
            next.push(letter.clone());
            let expected = prefixes.contains(&next);
            if allowed != expected {
                return Err(format!("step to {} : engine {allowed}, oracle {expected}", show(&next)));
            }
            if allowed {
                stack.push((s, next));
            }
        }
    }
    Ok(())
}

fn show(word: &[FlowPattern]) -> String {
    let w: Vec<&str> = word.iter().map(|f| f.pattern.as_str()).collect();
    format!("[{}]", w.join(" "))
}

/// Graph over single-flow nodes `1..=labels.len()` in topological order,
/// entry 0 and exit `labels.len() + 1`.
pub fn flow_graph(labels: &[(&str, u32)], edges: &[(u32, u32)]) -> LocalFlowGraph {
    let exit = labels.len() as u32 + 1;
    let mut nodes = vec![FlowNode::entry(0, &["user".to_string()])];
    for (i, (l, c)) in labels.iter().enumerate() {
        nodes.push(FlowNode::flow(i as u32 + 1, *l, HttpOp::Get, *c));
    }
    nodes.push(FlowNode::exit(exit));
    LocalFlowGraph {
        function: "f".into(),
        nodes,
        edges: edges.iter().map(|&(from, to)| Edge { from, to }).collect(),
        entry: 0,
        exit,
    }
}

/// URL grouping by pairwise comparison: two URLs share a group when their
/// common prefix is as long as either can get with any other URL.
pub fn lcp_groups(urls: &[String], t_lcp: usize) -> BTreeSet<(BTreeSet<String>, String, bool)> {
    let set: Vec<&String> = urls.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let lcp = |a: &str, b: &str| a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count();
    let nearest: Vec<Option<usize>> = set
        .iter()
        .map(|u| set.iter().filter(|v| v != &u).map(|v| lcp(u, v)).max())
        .collect();
    let mut assigned = vec![false; set.len()];
    let mut out = BTreeSet::new();
    for i in 0..set.len() {
        if assigned[i] {
            continue;
        }
        let members: Vec<usize> = (0..set.len())
            .filter(|&j| {
                j == i || {
                    let d = lcp(set[i], set[j]);
                    nearest[i] == Some(d) && nearest[j] == Some(d)
                }
            })
            .collect();
        for &j in &members {
            assigned[j] = true;
        }
        let names: BTreeSet<String> = members.iter().map(|&j| set[j].clone()).collect();
        let prefix = if members.len() == 1 { set[i].clone() } else { set[i][..nearest[i].unwrap()].to_string() };
        let generalized = members.len() > 1 && members.len() > t_lcp;
        out.insert((names, prefix, generalized));
    }
    out
}

/// Expansion of a compressed trace written out by hand.
pub fn expand<T: Clone>(items: &[Item<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for it in items {
        let body = match &it.unit {
            Unit::Single(x) => vec![x.clone()],
            Unit::Group(xs) => xs.clone(),
        };
        for _ in 0..it.counter {
            out.extend(body.iter().cloned());
        }
    }
    out
}

/// Replays every training trace against its own graphs.
pub fn replay(executions: &[AppExecution], policies: &seclambda::builder::PolicySet, topology: &seclambda::model::Topology) -> Result<(), String> {
    for ex in executions {
        for t in seclambda::model::extract_traces(&ex.events) {
            if !t.completed {
                continue;
            }
            let g = policies.local.get(&t.function).ok_or_else(|| format!("no graph for {}", t.function))?;
            let engine = PolicyEngine::new(g).map_err(|e| e.to_string())?;
            let mut st = engine
                .begin(&t.source, EnforcementMode::Closed)
                .map_err(|e| format!("{} {}: {e}", ex.id, t.function))?;
            for f in &t.flows {
                let d = engine.step(&mut st, &f.url, f.op);
                if !d.is_allow() {
                    return Err(format!("{} {}: {f} denied ({})", ex.id, t.function, d.reason_str()));
                }
            }
            if !engine.end(&mut st).is_allow() {
                return Err(format!("{} {}: exit denied", ex.id, t.function));
            }
        }
        seclambda::builder::check_app_trace(&policies.global, &ex.app_trace(), topology)
            .map_err(|e| format!("{}: {e}", ex.id))?;
    }
    Ok(())
}
