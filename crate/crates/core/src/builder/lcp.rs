//! URL generalization by longest common prefix.
//!
//! URLs are grouped as maximal trie subtrees: at every branching point of
//! the URL trie, the members whose branch holds no other URL ("free"
//! members) are mutual nearest neighbours by LCP length. Two or more free
//! members at the same branching point form one group sharing that point as
//! their LCP; a lone free member forms a singleton group. Branches holding
//! several URLs are grouped recursively one level deeper.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

/// Default minimum group size (exclusive) before a group is generalized.
pub const DEFAULT_T_LCP: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UrlGroup {
    pub members: BTreeSet<String>,
    pub lcp: String,
    pub generalized: bool,
}

impl UrlGroup {
    /// Pattern flows in this group are rewritten to.
    pub fn pattern(&self) -> String {
        if self.generalized {
            format!("{}*", self.lcp)
        } else {
            // Exact groups are singletons unless t_lcp kept a multi-member
            // group exact, in which case members keep their own URL.
            self.lcp.clone()
        }
    }
}

/// Byte length of the longest common prefix, rounded down to a char boundary.
pub fn lcp_len(a: &str, b: &str) -> usize {
    let n = a
        .bytes()
        .zip(b.bytes())
        .take_while(|(x, y)| x == y)
        .count();
    floor_boundary(a, n)
}

fn floor_boundary(s: &str, mut n: usize) -> usize {
    while !s.is_char_boundary(n) {
        n -= 1;
    }
    n
}

/// Partitions `urls` into LCP groups; groups with more than `t_lcp` members
/// are generalized. Output is sorted.
pub fn lcp_group<'a, I>(urls: I, t_lcp: usize) -> Vec<UrlGroup>
where
    I: IntoIterator<Item = &'a str>,
{
    let set: BTreeSet<&str> = urls.into_iter().collect();
    let sorted: Vec<&str> = set.into_iter().collect();
    let mut raw: Vec<Vec<&str>> = Vec::new();
    if !sorted.is_empty() {
        split(&sorted, &mut raw);
    }
    let mut groups: Vec<UrlGroup> = raw
        .into_iter()
        .map(|members| {
            let lcp_bytes = members
                .iter()
                .skip(1)
                .fold(members[0].len(), |acc, m| acc.min(lcp_len(members[0], m)));
            let lcp = members[0][..lcp_bytes].to_string();
            let generalized = members.len() > t_lcp && members.len() > 1;
            UrlGroup {
                members: members.into_iter().map(str::to_string).collect(),
                lcp,
                generalized,
            }
        })
        .collect();
    groups.sort();
    groups
}

/// `urls` is sorted, unique and non-empty.
fn split<'a>(urls: &[&'a str], out: &mut Vec<Vec<&'a str>>) {
    if urls.len() == 1 {
        out.push(vec![urls[0]]);
        return;
    }
    // In a sorted list the common prefix of all members is the common
    // prefix of the first and last.
    let depth = common_bytes(urls[0], urls[urls.len() - 1]);
    let mut branches: BTreeMap<Option<u8>, Vec<&'a str>> = BTreeMap::new();
    for u in urls {
        branches.entry(u.as_bytes().get(depth).copied()).or_default().push(u);
    }
    let mut free = Vec::new();
    for (_, members) in branches {
        if members.len() == 1 {
            free.push(members[0]);
        } else {
            split(&members, out);
        }
    }
    if !free.is_empty() {
        out.push(free);
    }
}

fn common_bytes(a: &str, b: &str) -> usize {
    a.bytes().zip(b.bytes()).take_while(|(x, y)| x == y).count()
}

/// Maps each URL to the pattern of its group.
#[derive(Debug, Clone, Default)]
pub struct UrlRewriter {
    map: BTreeMap<String, String>,
    patterns: BTreeSet<String>,
}

impl UrlRewriter {
    pub fn new(groups: &[UrlGroup]) -> Self {
        let mut map = BTreeMap::new();
        let mut patterns = BTreeSet::new();
        for g in groups {
            for m in &g.members {
                let p = if g.generalized { g.pattern() } else { m.clone() };
                patterns.insert(p.clone());
                map.insert(m.clone(), p);
            }
        }
        UrlRewriter { map, patterns }
    }

    /// Pattern for `url`; a URL that already is a group pattern maps to
    /// itself.
    pub fn rewrite(&self, url: &str) -> Option<&str> {
        self.map
            .get(url)
            .map(String::as_str)
            .or_else(|| self.patterns.get(url).map(String::as_str))
    }
}
