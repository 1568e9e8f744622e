use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use super::compress::{CompressedTrace, Unit};
use super::lcp::{UrlGroup, UrlRewriter};
use super::BuildError;
use crate::model::{Edge, Flow, FlowNode, FlowPattern, LocalFlowGraph};

type Label = (Unit<FlowPattern>, u32);

struct TrieNode {
    label: Option<Label>,
    children: BTreeMap<Label, usize>,
    terminal: bool,
}

/// Builds the local flow graph of `function`.
///
/// Every trace becomes an entry-to-exit chain of counted units with URLs
/// rewritten to their group pattern. Chains are merged from the entry side
/// (shared prefixes become one path) and then from the exit side (nodes
/// with the same label and the same continuations become one node). Both
/// merges keep the accepted language equal to the union of the traces.
pub fn build_local_graph(
    function: &str,
    sources: &[String],
    merged: &[CompressedTrace<Flow>],
    groups: &[UrlGroup],
) -> Result<LocalFlowGraph, BuildError> {
    if merged.is_empty() {
        return Err(BuildError::EmptyTraceSet);
    }
    let rewriter = UrlRewriter::new(groups);
    let rewrite = |f: &Flow| -> Result<FlowPattern, BuildError> {
        rewriter
            .rewrite(&f.url)
            .map(|p| FlowPattern::new(p, f.op))
            .ok_or_else(|| BuildError::UnknownUrl(f.url.clone()))
    };

    let mut trie = vec![TrieNode { label: None, children: BTreeMap::new(), terminal: false }];
    for trace in merged {
        let mut at = 0;
        for item in &trace.items {
            let unit = match &item.unit {
                Unit::Single(f) => Unit::Single(rewrite(f)?),
                Unit::Group(fs) => Unit::Group(fs.iter().map(rewrite).collect::<Result<_, _>>()?),
            };
            let label = (unit, item.counter);
            at = match trie[at].children.get(&label) {
                Some(&next) => next,
                None => {
                    let next = trie.len();
                    trie.push(TrieNode {
                        label: Some(label.clone()),
                        children: BTreeMap::new(),
                        terminal: false,
                    });
                    trie[at].children.insert(label, next);
                    next
                }
            };
        }
        trie[at].terminal = true;
    }

    // Exit-side merge: equal (label, terminal, continuation classes) share
    // a class. Children always have larger indices than their parent.
    let mut class_of = vec![0usize; trie.len()];
    let mut signatures: HashMap<(Option<Label>, bool, Vec<usize>), usize> = HashMap::new();
    let mut classes: Vec<usize> = Vec::new(); // class -> representative trie node
    for idx in (0..trie.len()).rev() {
        let node = &trie[idx];
        let kids: Vec<usize> = node.children.values().map(|&c| class_of[c]).collect();
        let sig = (node.label.clone(), node.terminal, kids);
        let next = classes.len();
        let class = *signatures.entry(sig).or_insert(next);
        if class == next {
            classes.push(idx);
        }
        class_of[idx] = class;
    }

    // Canonical numbering: breadth-first from the entry, children in label
    // order, exit last.
    let root_class = class_of[0];
    let mut id_of: BTreeMap<usize, u32> = BTreeMap::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::from([root_class]);
    id_of.insert(root_class, 0);
    while let Some(c) = queue.pop_front() {
        order.push(c);
        for &child in trie[classes[c]].children.values() {
            let cc = class_of[child];
            if !id_of.contains_key(&cc) {
                id_of.insert(cc, id_of.len() as u32);
                queue.push_back(cc);
            }
        }
    }
    let exit = order.len() as u32;

    let mut srcs: BTreeSet<&str> = sources.iter().map(String::as_str).collect();
    if srcs.is_empty() {
        srcs.insert(crate::model::UNKNOWN_SOURCE);
    }
    let srcs: Vec<String> = srcs.into_iter().map(str::to_string).collect();

    let mut nodes = Vec::with_capacity(order.len() + 1);
    let mut edges = BTreeSet::new();
    for &c in &order {
        let rep = &trie[classes[c]];
        let id = id_of[&c];
        nodes.push(match &rep.label {
            None => FlowNode::entry(id, &srcs),
            Some((Unit::Single(p), counter)) => FlowNode::flow(id, p.pattern.clone(), p.op, *counter),
            Some((Unit::Group(body), counter)) => FlowNode::group(id, body.clone(), *counter),
        });
        for &child in rep.children.values() {
            edges.insert(Edge { from: id, to: id_of[&class_of[child]] });
        }
        if rep.terminal {
            edges.insert(Edge { from: id, to: exit });
        }
    }
    nodes.push(FlowNode::exit(exit));
    let graph = LocalFlowGraph {
        function: function.to_string(),
        nodes,
        edges: edges.into_iter().collect(),
        entry: 0,
        exit,
    };
    graph.validate().map_err(BuildError::Graph)?;
    Ok(graph)
}
