//! Undirected communication graph with distance-k queries and dynamic
//! membership.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Globally unique sensor identifier. Never reused within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

// Accepts the string form too: JSON map keys reach us as strings when the
// map sits inside an internally tagged enum.
impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = NodeId;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a node id")
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<NodeId, E> {
                u32::try_from(v)
                    .map(NodeId)
                    .map_err(|_| E::custom(format!("node id {v} out of range")))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<NodeId, E> {
                u32::try_from(v)
                    .map(NodeId)
                    .map_err(|_| E::custom(format!("node id {v} out of range")))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<NodeId, E> {
                v.parse()
                    .map(NodeId)
                    .map_err(|_| E::custom(format!("bad node id `{v}`")))
            }
        }
        d.deserialize_any(V)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("no such node: {0}")]
    NoSuchNode(NodeId),
    #[error("id in use: {0}")]
    IdInUse(NodeId),
    #[error("invalid edge: {0} {1}")]
    InvalidEdge(NodeId, NodeId),
    #[error("invalid distance {0}: must be 1, 2 or 3")]
    InvalidDistance(usize),
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid generator parameters: {0}")]
    Params(String),
}

/// Adjacency-set graph. Edges are stored in both endpoint sets, which keeps
/// the relation symmetric by construction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Topology {
    adj: BTreeMap<NodeId, BTreeSet<NodeId>>,
    retired: BTreeSet<NodeId>,
    version: u64,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a topology from explicit node and edge lists. Edge endpoints
    /// missing from `nodes` are added implicitly.
    pub fn from_edges(
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Result<Self, TopologyError> {
        let mut t = Topology::new();
        for n in nodes {
            t.adj.entry(n).or_default();
        }
        for (a, b) in edges {
            t.insert_edge(a, b)?;
        }
        Ok(t)
    }

    fn insert_edge(&mut self, a: NodeId, b: NodeId) -> Result<(), TopologyError> {
        if a == b {
            return Err(TopologyError::InvalidEdge(a, b));
        }
        self.adj.entry(a).or_default().insert(b);
        self.adj.entry(b).or_default().insert(a);
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    pub fn contains(&self, u: NodeId) -> bool {
        self.adj.contains_key(&u)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    /// Each undirected edge once, as `(low, high)`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.adj
            .iter()
            .flat_map(|(&u, vs)| vs.iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn max_node_id(&self) -> Option<NodeId> {
        self.adj.keys().next_back().copied()
    }

    pub fn max_degree(&self) -> usize {
        self.adj.values().map(BTreeSet::len).max().unwrap_or(0)
    }

    pub fn neighbors(&self, u: NodeId) -> Result<&BTreeSet<NodeId>, TopologyError> {
        self.adj.get(&u).ok_or(TopologyError::NoSuchNode(u))
    }

    /// All nodes within `k` hops of `u`, excluding `u`.
    pub fn distance_neighborhood(&self, u: NodeId, k: usize) -> Result<BTreeSet<NodeId>, TopologyError> {
        if !(1..=3).contains(&k) {
            return Err(TopologyError::InvalidDistance(k));
        }
        Ok(self.ball(u, k)?.into_keys().filter(|&v| v != u).collect())
    }

    /// BFS distances from `u`, truncated at `k` hops (includes `u` at 0).
    pub fn ball(&self, u: NodeId, k: usize) -> Result<BTreeMap<NodeId, usize>, TopologyError> {
        if !self.contains(u) {
            return Err(TopologyError::NoSuchNode(u));
        }
        let mut dist = BTreeMap::new();
        dist.insert(u, 0);
        let mut queue = VecDeque::from([u]);
        while let Some(x) = queue.pop_front() {
            let d = dist[&x];
            if d == k {
                continue;
            }
            for &y in &self.adj[&x] {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(y) {
                    e.insert(d + 1);
                    queue.push_back(y);
                }
            }
        }
        Ok(dist)
    }

    /// Shortest-path distance, or `None` when disconnected or unknown.
    pub fn distance(&self, a: NodeId, b: NodeId) -> Option<usize> {
        let all = self.ball(a, usize::MAX).ok()?;
        all.get(&b).copied()
    }

    /// True when `a != b` and they are at most `k` hops apart.
    pub fn within(&self, a: NodeId, b: NodeId, k: usize) -> bool {
        a != b && self.ball(a, k).is_ok_and(|m| m.contains_key(&b))
    }

    pub fn add_node(&mut self, u: NodeId, attach_to: &BTreeSet<NodeId>) -> Result<(), TopologyError> {
        if self.contains(u) || self.retired.contains(&u) {
            return Err(TopologyError::IdInUse(u));
        }
        if let Some(&missing) = attach_to.iter().find(|v| !self.contains(**v)) {
            return Err(TopologyError::NoSuchNode(missing));
        }
        self.adj.insert(u, BTreeSet::new());
        for &v in attach_to {
            self.insert_edge(u, v)?;
        }
        self.version += 1;
        Ok(())
    }

    /// Removes `u` and its edges. The id is retired for the rest of the run.
    pub fn remove_node(&mut self, u: NodeId) -> Result<(), TopologyError> {
        let vs = self.adj.remove(&u).ok_or(TopologyError::NoSuchNode(u))?;
        for v in vs {
            if let Some(s) = self.adj.get_mut(&v) {
                s.remove(&u);
            }
        }
        self.retired.insert(u);
        self.version += 1;
        Ok(())
    }

    /// Size of the largest closed distance-2 neighborhood. Greedy distance-2
    /// coloring in any order never needs more colors than this.
    pub fn greedy_period_bound(&self) -> usize {
        self.nodes()
            .map(|u| self.ball(u, 2).map(|b| b.len()).unwrap_or(1))
            .max()
            .unwrap_or(1)
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for u in self.nodes() {
            if seen.contains(&u) {
                continue;
            }
            let comp: Vec<NodeId> = self.ball(u, usize::MAX).unwrap().into_keys().collect();
            seen.extend(comp.iter().copied());
            out.push(comp);
        }
        out
    }

    /// Text form: one `node <id>` or `edge <a> <b>` per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for u in self.nodes() {
            s.push_str(&format!("node {u}\n"));
        }
        for (a, b) in self.edges() {
            s.push_str(&format!("edge {a} {b}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TopologyError> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| TopologyError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let id = |s: &str| s.parse::<u32>().map(NodeId).map_err(|_| err("bad node id"));
            match parts.as_slice() {
                ["node", a] => nodes.push(id(a)?),
                ["edge", a, b] => edges.push((id(a)?, id(b)?)),
                _ => return Err(err("expected `node <id>` or `edge <id> <id>`")),
            }
        }
        Topology::from_edges(nodes, edges)
    }
}

impl FromStr for Topology {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Topology::parse(s)
    }
}
