//! Network generation and cluster division.
//!
//! Clients are scattered uniformly over a square and linked when they are
//! within a common radio range. Clusters are formed by a seeded k-means pass
//! over the positions followed by a connectivity repair that moves stranded
//! components into a neighbouring cluster they touch.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, label};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClientId(pub u32);

impl ClientId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterId(pub u32);

impl ClusterId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClusterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn distance_sq(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("cluster count {requested} is invalid for {clients} clients")]
    InvalidClusterCount { requested: usize, clients: usize },
    #[error("cluster {0} has no server-adjacent member to lead it")]
    ClusterInfeasible(ClusterId),
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
}

/// Geometric radio graph: an edge joins two clients whose distance is at
/// most `range`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTopology {
    positions: Vec<Point>,
    range: f64,
    adjacency: Vec<Vec<ClientId>>,
}

impl NetworkTopology {
    pub fn from_positions(positions: Vec<Point>, range: f64) -> Self {
        let n = positions.len();
        let mut adjacency = vec![Vec::new(); n];
        let range_sq = range * range;
        for a in 0..n {
            for b in (a + 1)..n {
                if positions[a].distance_sq(&positions[b]) <= range_sq {
                    adjacency[a].push(ClientId(b as u32));
                    adjacency[b].push(ClientId(a as u32));
                }
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Self {
            positions,
            range,
            adjacency,
        }
    }

    /// Uniform placement in `[0, area_side]²`.
    pub fn generate(n_clients: usize, area_side: f64, range: f64, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[label::POSITIONS]);
        let positions = (0..n_clients)
            .map(|_| Point {
                x: rng.random::<f64>() * area_side,
                y: rng.random::<f64>() * area_side,
            })
            .collect();
        Self::from_positions(positions, range)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> {
        (0..self.positions.len() as u32).map(ClientId)
    }

    pub fn position(&self, id: ClientId) -> Point {
        self.positions[id.index()]
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn neighbors(&self, id: ClientId) -> &[ClientId] {
        &self.adjacency[id.index()]
    }

    pub fn has_edge(&self, a: ClientId, b: ClientId) -> bool {
        a != b
            && a.index() < self.len()
            && self.adjacency[a.index()].binary_search(&b).is_ok()
    }

    /// Each unordered edge once, with `a < b`.
    pub fn edges(&self) -> impl Iterator<Item = (ClientId, ClientId)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(a, list)| {
            let a = ClientId(a as u32);
            list.iter().filter(move |b| a < **b).map(move |b| (a, *b))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn mean_degree(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        2.0 * self.edge_count() as f64 / self.len() as f64
    }

    /// Clients reachable from `start` using only vertices in `within`.
    pub fn reachable_within(&self, start: ClientId, within: &BTreeSet<ClientId>) -> BTreeSet<ClientId> {
        let mut seen = BTreeSet::new();
        if !within.contains(&start) {
            return seen;
        }
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(u) = queue.pop_front() {
            for &v in self.neighbors(u) {
                if within.contains(&v) && seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Connected components of the subgraph induced by `within`, each sorted,
    /// ordered by smallest member.
    pub fn components_within(&self, within: &BTreeSet<ClientId>) -> Vec<BTreeSet<ClientId>> {
        let mut left = within.clone();
        let mut out = Vec::new();
        while let Some(&start) = left.iter().next() {
            let comp = self.reachable_within(start, within);
            for c in &comp {
                left.remove(c);
            }
            out.push(comp);
        }
        out
    }

    /// Edge-list CSV for plotting: `source,target,distance`.
    pub fn write_edge_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "target", "distance"])?;
        for (a, b) in self.edges() {
            let d = self.position(a).distance(&self.position(b));
            w.write_record([a.0.to_string(), b.0.to_string(), format!("{d:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Probability that two uniform points in the unit square lie within `r`.
/// Closed form for `r ≤ 1`; saturates at the diagonal.
fn unit_square_link_probability(r: f64) -> f64 {
    use std::f64::consts::PI;
    if r <= 0.0 {
        0.0
    } else if r <= 1.0 {
        PI * r * r - 8.0 / 3.0 * r.powi(3) + 0.5 * r.powi(4)
    } else if r >= std::f64::consts::SQRT_2 {
        1.0
    } else {
        // r in (1, √2]
        let r2 = r * r;
        let s = (r2 - 1.0).sqrt();
        1.0 / 3.0 - 2.0 * r2 - 0.5 * r2 * r2
            + 4.0 / 3.0 * (2.0 * r2 + 1.0) * s
            + 2.0 * r2 * ((1.0 / r).asin() - (1.0 / r).acos())
    }
    .clamp(0.0, 1.0)
}

/// Expected mean degree of [`NetworkTopology::generate`] including boundary
/// effects of the square.
pub fn expected_mean_degree(n_clients: usize, area_side: f64, range: f64) -> f64 {
    if n_clients < 2 || area_side <= 0.0 {
        return 0.0;
    }
    (n_clients - 1) as f64 * unit_square_link_probability(range / area_side)
}

/// Inverts [`expected_mean_degree`] by bisection.
pub fn range_for_mean_degree(n_clients: usize, area_side: f64, mean_degree: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, area_side);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected_mean_degree(n_clients, area_side, mid) < mean_degree {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: ClusterId,
    /// `U_h`, sorted.
    pub members: Vec<ClientId>,
    /// `C_h`, sorted.
    pub targets: Vec<ClientId>,
    pub leader: ClientId,
    /// Members with a direct link to the server, sorted.
    pub server_adjacent: Vec<ClientId>,
}

impl Cluster {
    pub fn is_target(&self, id: ClientId) -> bool {
        self.targets.binary_search(&id).is_ok()
    }

    pub fn is_server_adjacent(&self, id: ClientId) -> bool {
        self.server_adjacent.binary_search(&id).is_ok()
    }

    pub fn contains(&self, id: ClientId) -> bool {
        self.members.binary_search(&id).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPlan {
    pub clusters: Vec<Cluster>,
    /// Clients that could not be attached to any connected cluster core.
    /// They stay listed as members of their geometric cluster but never
    /// lead, relay or train.
    pub isolated: Vec<ClientId>,
    assignment: BTreeMap<ClientId, ClusterId>,
}

impl ClusterPlan {
    pub fn cluster_of(&self, id: ClientId) -> Option<ClusterId> {
        self.assignment.get(&id).copied()
    }

    pub fn cluster(&self, id: ClusterId) -> &Cluster {
        &self.clusters[id.index()]
    }

    pub fn cluster_mut(&mut self, id: ClusterId) -> &mut Cluster {
        &mut self.clusters[id.index()]
    }

    pub fn is_isolated(&self, id: ClientId) -> bool {
        self.isolated.binary_search(&id).is_ok()
    }

    pub fn is_leader(&self, id: ClientId) -> Option<ClusterId> {
        self.clusters.iter().find(|c| c.leader == id).map(|c| c.id)
    }

    pub fn target_count(&self) -> usize {
        self.clusters.iter().map(|c| c.targets.len()).sum()
    }

    pub fn all_targets(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.clusters.iter().flat_map(|c| c.targets.iter().copied())
    }

    /// Members that take part in the protocol (not isolated).
    pub fn active_members(&self, id: ClusterId) -> Vec<ClientId> {
        self.cluster(id)
            .members
            .iter()
            .copied()
            .filter(|m| !self.is_isolated(*m))
            .collect()
    }

    /// Picks a new leader uniformly among server-adjacent targets that are
    /// not excluded.
    pub fn elect_leader(
        &mut self,
        cluster: ClusterId,
        excluded: &BTreeSet<ClientId>,
        seed: u64,
    ) -> Result<ClientId, TopologyError> {
        let c = self.cluster(cluster);
        let candidates: Vec<ClientId> = c
            .server_adjacent
            .iter()
            .copied()
            .filter(|m| c.is_target(*m) && !excluded.contains(m))
            .collect();
        let mut rng = rng::stream(seed, &[label::LEADER, cluster.0 as u64, 1]);
        let leader = *candidates
            .choose(&mut rng)
            .ok_or(TopologyError::ClusterInfeasible(cluster))?;
        self.cluster_mut(cluster).leader = leader;
        Ok(leader)
    }

    /// Node CSV companion to the edge list:
    /// `client,x,y,cluster,target,leader,server_adjacent,isolated`.
    pub fn write_node_csv<W: Write>(&self, topology: &NetworkTopology, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "client",
            "x",
            "y",
            "cluster",
            "target",
            "leader",
            "server_adjacent",
            "isolated",
        ])?;
        for id in topology.clients() {
            let p = topology.position(id);
            let cluster = self.cluster_of(id).map(|c| self.cluster(c));
            let flag = |b: bool| if b { "1" } else { "0" }.to_string();
            w.write_record([
                id.0.to_string(),
                format!("{:.6}", p.x),
                format!("{:.6}", p.y),
                cluster.map(|c| c.id.0.to_string()).unwrap_or_default(),
                flag(cluster.is_some_and(|c| c.is_target(id))),
                flag(cluster.is_some_and(|c| c.leader == id)),
                flag(cluster.is_some_and(|c| c.is_server_adjacent(id))),
                flag(self.is_isolated(id)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How clients reach the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerLinks {
    /// `⌈fraction · z_h⌉` (at least one) members per cluster, sampled.
    Sampled { fraction: f64 },
    /// Fixed set; a cluster without any of these cannot elect a leader.
    Explicit(BTreeSet<ClientId>),
}

impl Default for ServerLinks {
    fn default() -> Self {
        ServerLinks::Sampled { fraction: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub server_links: ServerLinks,
    pub seed: u64,
}

/// Seeded k-means++ followed by Lloyd iterations. Returns a label per point;
/// every label in `0..k` is used.
fn kmeans(points: &[Point], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = rng::stream(seed, &[label::KMEANS]);
    let mut centers: Vec<Point> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)]);
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| p.distance_sq(c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a center; take any unused index.
            (0..n)
                .find(|i| centers.iter().all(|c| c.distance_sq(&points[*i]) > 0.0))
                .unwrap_or(centers.len() % n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centers.push(points[next]);
    }

    let nearest = |p: &Point, centers: &[Point]| {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in centers.iter().enumerate() {
            let d = p.distance_sq(c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    };

    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..100 {
        fill_empty_clusters(points, &mut labels, &centers, k);
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (p, &l) in points.iter().zip(&labels) {
            sums[l].0 += p.x;
            sums[l].1 += p.y;
            sums[l].2 += 1;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = Point {
                    x: s.0 / s.2 as f64,
                    y: s.1 / s.2 as f64,
                };
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    fill_empty_clusters(points, &mut labels, &centers, k);
    labels
}

/// Moves the point farthest from its center into each empty cluster.
fn fill_empty_clusters(points: &[Point], labels: &mut [usize], centers: &[Point], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = points[a].distance_sq(&centers[labels[a]]);
                let db = points[b].distance_sq(&centers[labels[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= n guarantees a donor");
        labels[donor] = empty;
    }
}

fn centroid(topology: &NetworkTopology, ids: &BTreeSet<ClientId>) -> Point {
    let n = ids.len().max(1) as f64;
    let (sx, sy) = ids.iter().fold((0.0, 0.0), |(sx, sy), id| {
        let p = topology.position(*id);
        (sx + p.x, sy + p.y)
    });
    Point { x: sx / n, y: sy / n }
}

/// Partitions all clients into `count` clusters with connected cores.
pub fn divide_clusters(
    topology: &NetworkTopology,
    count: usize,
    options: &ClusterOptions,
) -> Result<ClusterPlan, TopologyError> {
    let n = topology.len();
    if count == 0 || count > n {
        return Err(TopologyError::InvalidClusterCount {
            requested: count,
            clients: n,
        });
    }
    let labels = kmeans(topology.positions(), count, options.seed);
    let mut groups: Vec<BTreeSet<ClientId>> = vec![BTreeSet::new(); count];
    for (i, l) in labels.iter().enumerate() {
        groups[*l].insert(ClientId(i as u32));
    }

    // Connectivity repair: each cluster keeps its largest component as core;
    // other components move to a cluster whose core they touch.
    let mut isolated = BTreeSet::new();
    loop {
        let mut cores = Vec::with_capacity(count);
        let mut stragglers: Vec<(usize, BTreeSet<ClientId>)> = Vec::new();
        for (h, g) in groups.iter().enumerate() {
            let active: BTreeSet<ClientId> = g.difference(&isolated).copied().collect();
            let mut comps = topology.components_within(&active);
            // Largest first; ties go to the component holding the smallest id.
            comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a.first().cmp(&b.first())));
            let mut it = comps.into_iter();
            cores.push(it.next().unwrap_or_default());
            stragglers.extend(it.map(|c| (h, c)));
        }
        if stragglers.is_empty() {
            break;
        }
        let mut moved = false;
        for (from, comp) in stragglers {
            let touching: Vec<usize> = (0..count)
                .filter(|&h| h != from)
                .filter(|&h| {
                    comp.iter()
                        .any(|u| topology.neighbors(*u).iter().any(|v| cores[h].contains(v)))
                })
                .collect();
            let here = centroid(topology, &comp);
            let dest = touching.into_iter().min_by(|&a, &b| {
                let da = here.distance_sq(&centroid(topology, &cores[a]));
                let db = here.distance_sq(&centroid(topology, &cores[b]));
                da.total_cmp(&db).then(a.cmp(&b))
            });
            if let Some(dest) = dest {
                for u in &comp {
                    groups[from].remove(u);
                    groups[dest].insert(*u);
                    cores[dest].insert(*u);
                }
                moved = true;
                // Only one move per pass keeps the core bookkeeping exact.
                break;
            }
        }
        if !moved {
            // Nothing left can attach anywhere.
            for (h, g) in groups.iter().enumerate() {
                let active: BTreeSet<ClientId> = g.difference(&isolated).copied().collect();
                let mut comps = topology.components_within(&active);
                comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a.first().cmp(&b.first())));
                for c in comps.into_iter().skip(1) {
                    isolated.extend(c);
                }
                let _ = h;
            }
            break;
        }
    }

    // Stable labelling: order clusters by smallest member.
    groups.retain(|g| !g.is_empty());
    groups.sort_by_key(|g| *g.first().expect("non-empty"));

    let mut clusters = Vec::with_capacity(groups.len());
    let mut assignment = BTreeMap::new();
    for (h, g) in groups.iter().enumerate() {
        let id = ClusterId(h as u32);
        let active: Vec<ClientId> = g.iter().copied().filter(|m| !isolated.contains(m)).collect();
        let server_adjacent: Vec<ClientId> = match &options.server_links {
            ServerLinks::Sampled { fraction } => {
                let mut rng = rng::stream(options.seed, &[label::SERVER_LINKS, h as u64]);
                let want = ((fraction * active.len() as f64).ceil() as usize).clamp(1, active.len());
                let mut picked: Vec<ClientId> =
                    active.choose_multiple(&mut rng, want).copied().collect();
                picked.sort_unstable();
                picked
            }
            ServerLinks::Explicit(set) => active.iter().copied().filter(|m| set.contains(m)).collect(),
        };
        let mut rng = rng::stream(options.seed, &[label::LEADER, h as u64]);
        let leader = *server_adjacent
            .choose(&mut rng)
            .ok_or(TopologyError::ClusterInfeasible(id))?;
        for m in g {
            assignment.insert(*m, id);
        }
        clusters.push(Cluster {
            id,
            members: g.iter().copied().collect(),
            targets: vec![leader],
            leader,
            server_adjacent,
        });
    }

    Ok(ClusterPlan {
        clusters,
        isolated: isolated.into_iter().collect(),
        assignment,
    })
}

/// Marks `⌈fraction · z_h⌉` active members of each cluster as targets; the
/// leader is always one of them.
pub fn mark_targets(plan: &ClusterPlan, fraction: f64, seed: u64) -> Result<ClusterPlan, TopologyError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TopologyError::InvalidFraction(fraction));
    }
    let mut out = plan.clone();
    for h in 0..out.clusters.len() {
        let active = plan.active_members(ClusterId(h as u32));
        let cluster = &mut out.clusters[h];
        let want = ((fraction * active.len() as f64).ceil() as usize).clamp(1, active.len());
        let mut others: Vec<ClientId> = active.into_iter().filter(|m| *m != cluster.leader).collect();
        let mut rng = rng::stream(seed, &[label::TARGETS, h as u64]);
        others.shuffle(&mut rng);
        let mut targets: Vec<ClientId> = others.into_iter().take(want - 1).collect();
        targets.push(cluster.leader);
        targets.sort_unstable();
        cluster.targets = targets;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(seed: u64) -> ClusterOptions {
        ClusterOptions {
            server_links: ServerLinks::default(),
            seed,
        }
    }

    fn assert_partition(topology: &NetworkTopology, plan: &ClusterPlan) {
        let mut seen = BTreeSet::new();
        for c in &plan.clusters {
            for m in &c.members {
                assert!(seen.insert(*m), "{m} in two clusters");
            }
        }
        assert_eq!(seen.len(), topology.len());
    }

    fn assert_connected_clusters(topology: &NetworkTopology, plan: &ClusterPlan) {
        for c in &plan.clusters {
            let active: BTreeSet<ClientId> = plan.active_members(c.id).into_iter().collect();
            let comps = topology.components_within(&active);
            assert_eq!(comps.len(), 1, "cluster {} split into {} parts", c.id, comps.len());
        }
    }

    #[test]
    fn single_client_has_no_edges() {
        let t = NetworkTopology::generate(1, 100.0, 50.0, 3);
        assert_eq!(t.edge_count(), 0);
    }

    #[test]
    fn coincident_clients_share_an_edge() {
        let p = Point { x: 5.0, y: 5.0 };
        let t = NetworkTopology::from_positions(vec![p, p], 1.0);
        assert_eq!(t.edge_count(), 1);
        assert!(t.has_edge(ClientId(0), ClientId(1)));
        assert!(!t.has_edge(ClientId(0), ClientId(0)));
    }

    #[test]
    fn edges_follow_distance_rule() {
        let t = NetworkTopology::generate(80, 50.0, 9.0, 11);
        for a in t.clients() {
            for b in t.clients() {
                let within = a != b && t.position(a).distance(&t.position(b)) <= 9.0;
                assert_eq!(t.has_edge(a, b), within);
            }
        }
    }

    #[test]
    fn link_probability_matches_quadrature_beyond_unit_range() {
        // Continuity at r = 1 and saturation at √2.
        let below = unit_square_link_probability(1.0 - 1e-9);
        let above = unit_square_link_probability(1.0 + 1e-9);
        assert!((below - above).abs() < 1e-6, "{below} vs {above}");
        assert!((unit_square_link_probability(std::f64::consts::SQRT_2) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn complete_graph_single_cluster() {
        let positions = (0..10).map(|i| Point { x: i as f64 * 0.1, y: 0.0 }).collect();
        let t = NetworkTopology::from_positions(positions, 10.0);
        assert_eq!(t.edge_count(), 45);
        let plan = divide_clusters(&t, 1, &opts(1)).unwrap();
        assert_eq!(plan.clusters.len(), 1);
        assert_eq!(plan.clusters[0].members.len(), 10);
        assert!(plan.clusters[0].is_server_adjacent(plan.clusters[0].leader));
    }

    #[test]
    fn disjoint_components_become_clusters() {
        let mut positions = Vec::new();
        for i in 0..6 {
            positions.push(Point { x: i as f64, y: 0.0 });
            positions.push(Point { x: 100.0 + i as f64, y: 0.0 });
        }
        let t = NetworkTopology::from_positions(positions, 1.5);
        let plan = divide_clusters(&t, 2, &opts(9)).unwrap();
        assert_eq!(plan.clusters.len(), 2);
        for c in &plan.clusters {
            let xs: Vec<f64> = c.members.iter().map(|m| t.position(*m).x).collect();
            assert!(xs.iter().all(|x| *x < 50.0) || xs.iter().all(|x| *x > 50.0));
            assert_eq!(c.members.len(), 6);
        }
        assert!(plan.isolated.is_empty());
    }

    #[test]
    fn too_many_clusters_rejected() {
        let t = NetworkTopology::generate(3, 10.0, 5.0, 1);
        assert!(matches!(
            divide_clusters(&t, 4, &opts(1)),
            Err(TopologyError::InvalidClusterCount { .. })
        ));
        assert!(divide_clusters(&t, 0, &opts(1)).is_err());
    }

    #[test]
    fn cluster_without_server_link_is_infeasible() {
        let t = NetworkTopology::generate(30, 20.0, 30.0, 4);
        let options = ClusterOptions {
            server_links: ServerLinks::Explicit(BTreeSet::new()),
            seed: 4,
        };
        assert!(matches!(
            divide_clusters(&t, 2, &options),
            Err(TopologyError::ClusterInfeasible(_))
        ));
    }

    #[test]
    fn figure_five_shape_partitions_into_connected_clusters() {
        let range = range_for_mean_degree(200, 100.0, 10.0);
        for seed in 0..10 {
            let t = NetworkTopology::generate(200, 100.0, range, seed);
            let plan = divide_clusters(&t, 5, &opts(seed)).unwrap();
            assert_eq!(plan.clusters.len(), 5);
            assert_partition(&t, &plan);
            assert_connected_clusters(&t, &plan);
            for c in &plan.clusters {
                assert!(c.is_server_adjacent(c.leader));
            }
        }
    }

    #[test]
    fn targets_respect_fraction_and_leader() {
        let range = range_for_mean_degree(200, 100.0, 10.0);
        let t = NetworkTopology::generate(200, 100.0, range, 42);
        let plan = divide_clusters(&t, 5, &opts(42)).unwrap();

        let all = mark_targets(&plan, 1.0, 1).unwrap();
        for (c, full) in all.clusters.iter().zip(&plan.clusters) {
            let active = plan.active_members(full.id);
            assert_eq!(c.targets, active);
        }

        let half = mark_targets(&plan, 0.5, 1).unwrap();
        let total = half.target_count();
        let active_total = 200 - plan.isolated.len();
        assert!(total >= active_total / 2 && total <= active_total / 2 + 5, "{total}");
        for c in &half.clusters {
            assert!(c.is_target(c.leader));
        }

        let tiny = mark_targets(&plan, 1e-9, 1).unwrap();
        for c in &tiny.clusters {
            assert_eq!(c.targets, vec![c.leader]);
        }

        assert!(mark_targets(&plan, 0.0, 1).is_err());
        assert!(mark_targets(&plan, 1.5, 1).is_err());
    }

    #[test]
    fn determinism() {
        let a = NetworkTopology::generate(120, 60.0, 8.0, 77);
        let b = NetworkTopology::generate(120, 60.0, 8.0, 77);
        assert_eq!(a, b);
        let pa = mark_targets(&divide_clusters(&a, 4, &opts(5)).unwrap(), 0.5, 6).unwrap();
        let pb = mark_targets(&divide_clusters(&b, 4, &opts(5)).unwrap(), 0.5, 6).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(
            serde_json::to_string(&pa).unwrap(),
            serde_json::to_string(&pb).unwrap()
        );
    }

    #[test]
    fn sparse_graph_flags_unattachable_clients() {
        // Three far-apart pairs, two clusters: one pair can't join anything.
        let positions = vec![
            Point { x: 0.0, y: 0.0 },
            Point { x: 1.0, y: 0.0 },
            Point { x: 50.0, y: 0.0 },
            Point { x: 51.0, y: 0.0 },
            Point { x: 100.0, y: 0.0 },
            Point { x: 101.0, y: 0.0 },
        ];
        let t = NetworkTopology::from_positions(positions, 2.0);
        let plan = divide_clusters(&t, 2, &opts(3)).unwrap();
        assert_partition(&t, &plan);
        assert_eq!(plan.isolated.len(), 2);
        assert_connected_clusters(&t, &plan);
    }

    #[test]
    fn edge_csv_has_one_row_per_edge() {
        let t = NetworkTopology::generate(30, 20.0, 6.0, 2);
        let mut buf = Vec::new();
        t.write_edge_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), t.edge_count() + 1);
        assert!(text.starts_with("source,target,distance"));
    }
}
