//! Undirected client graphs: comm-key links, routing overlays, flood scopes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::topology::{ClientId, NetworkTopology};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkGraph {
    adj: BTreeMap<ClientId, BTreeSet<ClientId>>,
}

impl LinkGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_nodes(nodes: impl IntoIterator<Item = ClientId>) -> Self {
        Self {
            adj: nodes.into_iter().map(|n| (n, BTreeSet::new())).collect(),
        }
    }

    pub fn complete(nodes: &[ClientId]) -> Self {
        let mut g = Self::with_nodes(nodes.iter().copied());
        for (i, a) in nodes.iter().enumerate() {
            for b in &nodes[i + 1..] {
                g.add_edge(*a, *b);
            }
        }
        g
    }

    /// Subgraph of the radio topology induced by `nodes`.
    pub fn from_topology(topology: &NetworkTopology, nodes: &[ClientId]) -> Self {
        let set: BTreeSet<ClientId> = nodes.iter().copied().collect();
        let mut g = Self::with_nodes(nodes.iter().copied());
        for a in nodes {
            for b in topology.neighbors(*a) {
                if a < b && set.contains(b) {
                    g.add_edge(*a, *b);
                }
            }
        }
        g
    }

    pub fn add_node(&mut self, n: ClientId) {
        self.adj.entry(n).or_default();
    }

    pub fn add_edge(&mut self, a: ClientId, b: ClientId) {
        if a == b {
            return;
        }
        self.adj.entry(a).or_default().insert(b);
        self.adj.entry(b).or_default().insert(a);
    }

    pub fn remove_edge(&mut self, a: ClientId, b: ClientId) {
        if let Some(s) = self.adj.get_mut(&a) {
            s.remove(&b);
        }
        if let Some(s) = self.adj.get_mut(&b) {
            s.remove(&a);
        }
    }

    pub fn remove_node(&mut self, n: ClientId) {
        if let Some(peers) = self.adj.remove(&n) {
            for p in peers {
                if let Some(s) = self.adj.get_mut(&p) {
                    s.remove(&n);
                }
            }
        }
    }

    pub fn contains(&self, n: ClientId) -> bool {
        self.adj.contains_key(&n)
    }

    pub fn has_edge(&self, a: ClientId, b: ClientId) -> bool {
        self.adj.get(&a).is_some_and(|s| s.contains(&b))
    }

    pub fn neighbors(&self, n: ClientId) -> impl Iterator<Item = ClientId> + '_ {
        self.adj.get(&n).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn degree(&self, n: ClientId) -> usize {
        self.adj.get(&n).map_or(0, BTreeSet::len)
    }

    pub fn nodes(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.adj.keys().copied()
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn edges(&self) -> impl Iterator<Item = (ClientId, ClientId)> + '_ {
        self.adj
            .iter()
            .flat_map(|(a, s)| s.iter().filter(move |b| a < *b).map(move |b| (*a, *b)))
    }

    /// Subgraph induced by `keep`.
    pub fn restrict(&self, keep: &BTreeSet<ClientId>) -> Self {
        Self {
            adj: self
                .adj
                .iter()
                .filter(|(n, _)| keep.contains(n))
                .map(|(n, s)| (*n, s.intersection(keep).copied().collect()))
                .collect(),
        }
    }

    pub fn reachable(&self, start: ClientId) -> BTreeSet<ClientId> {
        let mut seen = BTreeSet::new();
        if !self.contains(start) {
            return seen;
        }
        seen.insert(start);
        let mut q = VecDeque::from([start]);
        while let Some(u) = q.pop_front() {
            for v in self.neighbors(u) {
                if seen.insert(v) {
                    q.push_back(v);
                }
            }
        }
        seen
    }

    pub fn is_connected(&self) -> bool {
        match self.adj.keys().next() {
            None => true,
            Some(&first) => self.reachable(first).len() == self.adj.len(),
        }
    }

    /// Fewest-hop path `from → to` (inclusive), ties broken by smallest id.
    pub fn shortest_path(&self, from: ClientId, to: ClientId) -> Option<Vec<ClientId>> {
        if !self.contains(from) || !self.contains(to) {
            return None;
        }
        let mut parent: BTreeMap<ClientId, ClientId> = BTreeMap::new();
        let mut q = VecDeque::from([from]);
        let mut seen = BTreeSet::from([from]);
        while let Some(u) = q.pop_front() {
            if u == to {
                let mut path = vec![to];
                let mut cur = to;
                while let Some(p) = parent.get(&cur) {
                    path.push(*p);
                    cur = *p;
                }
                path.reverse();
                return Some(path);
            }
            for v in self.neighbors(u) {
                if seen.insert(v) {
                    parent.insert(v, u);
                    q.push_back(v);
                }
            }
        }
        None
    }
}
