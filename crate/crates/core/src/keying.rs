//! Random pairwise key rings, challenge–response discovery, XOR-derived
//! communication keys, vote-based revocation and re-keying.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis;
use crate::crypto::{ck_encrypt, AeKey, KEY_BYTES};
use crate::graph::LinkGraph;
use crate::rng::{self, label};
use crate::topology::{ClientId, ClusterId, ClusterPlan};

/// Hash used for voting keys; recorded in every round report.
pub const VOTE_HASH: &str = "sha256";

pub type PairwiseKey = AeKey;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyingError {
    #[error("key ring of size {ring_size} impossible in a cluster of {cluster_size}")]
    RingInfeasible { ring_size: usize, cluster_size: usize },
    #[error("no shared key to derive a communication key from")]
    NoSharedKey,
    #[error("{member} is not a voting member for {suspect}")]
    NotVotingMember { member: ClientId, suspect: ClientId },
    #[error("revoked client led cluster {cluster}; a new leader is required")]
    ClusterInfeasible {
        cluster: ClusterId,
        affected: BTreeSet<ClientId>,
    },
    #[error(transparent)]
    Domain(#[from] analysis::AnalysisError),
}

/// Unique keys from a seeded stream.
#[derive(Clone, Debug)]
pub struct KeyPool {
    rng: ChaCha8Rng,
    issued: HashSet<[u8; KEY_BYTES]>,
}

impl KeyPool {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: rng::stream(seed, &[label::KEY_POOL]),
            issued: HashSet::new(),
        }
    }

    pub fn draw(&mut self) -> PairwiseKey {
        loop {
            let mut k = [0u8; KEY_BYTES];
            self.rng.fill_bytes(&mut k);
            if k != [0u8; KEY_BYTES] && self.issued.insert(k) {
                return AeKey(k);
            }
        }
    }

    pub fn issued(&self) -> usize {
        self.issued.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingEntry {
    pub peer: ClientId,
    pub key: PairwiseKey,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRing {
    pub owner: ClientId,
    /// Sorted by peer.
    pub entries: Vec<RingEntry>,
}

impl KeyRing {
    pub fn new(owner: ClientId) -> Self {
        Self {
            owner,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn peers(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.entries.iter().map(|e| e.peer)
    }

    pub fn key_for(&self, peer: ClientId) -> Option<&PairwiseKey> {
        self.entries
            .binary_search_by_key(&peer, |e| e.peer)
            .ok()
            .map(|i| &self.entries[i].key)
    }

    fn insert(&mut self, peer: ClientId, key: PairwiseKey) {
        match self.entries.binary_search_by_key(&peer, |e| e.peer) {
            Ok(i) => self.entries[i].key = key,
            Err(i) => self.entries.insert(i, RingEntry { peer, key }),
        }
    }

    fn remove(&mut self, peer: ClientId) -> bool {
        match self.entries.binary_search_by_key(&peer, |e| e.peer) {
            Ok(i) => {
                self.entries.remove(i);
                true
            }
            Err(_) => false,
        }
    }
}

pub type KeyRings = BTreeMap<ClientId, KeyRing>;

/// How big each cluster's rings are.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RingSize {
    Fixed(usize),
    /// Threshold size for the given connectivity target.
    Connectivity(f64),
    /// Every member shares a key with every other member.
    Complete,
}

impl RingSize {
    pub fn resolve(&self, cluster_size: usize) -> Result<usize, KeyingError> {
        match *self {
            RingSize::Fixed(m) => Ok(m),
            RingSize::Complete => Ok(cluster_size.saturating_sub(1)),
            RingSize::Connectivity(_) if cluster_size <= 1 => Ok(0),
            RingSize::Connectivity(p_c) => Ok(analysis::ring_size(cluster_size, p_c)?),
        }
    }
}

impl Default for RingSize {
    fn default() -> Self {
        RingSize::Connectivity(0.999)
    }
}

fn suitable(a: usize, b: usize, adj: &[BTreeSet<usize>]) -> bool {
    a != b && !adj[a].contains(&b)
}

/// One attempt at the point-pairing process for a degree sequence.
fn try_pairing<R: Rng + ?Sized>(degrees: &[usize], rng: &mut R) -> Option<Vec<BTreeSet<usize>>> {
    let mut points: Vec<usize> = degrees
        .iter()
        .enumerate()
        .flat_map(|(v, &d)| std::iter::repeat_n(v, d))
        .collect();
    let mut adj = vec![BTreeSet::new(); degrees.len()];
    while points.len() >= 2 {
        let mut pick = None;
        for _ in 0..32 {
            let i = rng.random_range(0..points.len());
            let j = rng.random_range(0..points.len());
            if i != j && suitable(points[i], points[j], &adj) {
                pick = Some((i, j));
                break;
            }
        }
        if pick.is_none() {
            let mut cands = Vec::new();
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    if suitable(points[i], points[j], &adj) {
                        cands.push((i, j));
                    }
                }
            }
            if cands.is_empty() {
                return None;
            }
            pick = Some(cands[rng.random_range(0..cands.len())]);
        }
        let (i, j) = pick.expect("picked");
        let (a, b) = (points[i], points[j]);
        adj[a].insert(b);
        adj[b].insert(a);
        let (hi, lo) = if i > j { (i, j) } else { (j, i) };
        points.swap_remove(hi);
        points.swap_remove(lo);
    }
    points.is_empty().then_some(adj)
}

fn complement(adj: &[BTreeSet<usize>]) -> Vec<BTreeSet<usize>> {
    let n = adj.len();
    (0..n)
        .map(|a| (0..n).filter(|&b| b != a && !adj[a].contains(&b)).collect())
        .collect()
}

/// Random graph on `0..n` where every vertex has degree `m`. When `n·m` is
/// odd one uniformly chosen vertex gets `m + 1`.
pub fn random_ring_graph<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<BTreeSet<usize>>, KeyingError> {
    if m == 0 {
        return Ok(vec![BTreeSet::new(); n]);
    }
    if m >= n {
        return Err(KeyingError::RingInfeasible {
            ring_size: m,
            cluster_size: n,
        });
    }
    let mut degrees = vec![m; n];
    if (n * m) % 2 == 1 {
        degrees[rng.random_range(0..n)] += 1;
    }
    // Dense sequences pair badly; build the sparse complement instead.
    let dense = 2 * m > n - 1;
    let target: Vec<usize> = if dense {
        degrees.iter().map(|d| n - 1 - d).collect()
    } else {
        degrees
    };
    loop {
        if let Some(adj) = try_pairing(&target, rng) {
            return Ok(if dense { complement(&adj) } else { adj });
        }
    }
}

/// Matches identities inside each cluster and hands every matched pair a
/// fresh key from the pool. Isolated clients get no ring.
pub fn predistribute_keyrings(
    plan: &ClusterPlan,
    size: RingSize,
    pool: &mut KeyPool,
    seed: u64,
) -> Result<(KeyRings, BTreeMap<ClusterId, usize>), KeyingError> {
    let mut rings = KeyRings::new();
    let mut sizes = BTreeMap::new();
    for cluster in &plan.clusters {
        let members = plan.active_members(cluster.id);
        let m = size.resolve(members.len())?;
        let mut rng = rng::stream(seed, &[label::RING_MATCH, u64::from(cluster.id.0)]);
        let adj = random_ring_graph(members.len(), m, &mut rng)?;
        for &id in &members {
            rings.insert(id, KeyRing::new(id));
        }
        for (a, peers) in adj.iter().enumerate() {
            for &b in peers.range(a + 1..) {
                let key = pool.draw();
                let (ia, ib) = (members[a], members[b]);
                rings.get_mut(&ia).expect("ring").insert(ib, key);
                rings.get_mut(&ib).expect("ring").insert(ia, key);
            }
        }
        sizes.insert(cluster.id, m);
    }
    Ok((rings, sizes))
}

/// A broadcast challenge: plaintext `a` and one ciphertext per ring entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub broadcaster: ClientId,
    pub a: [u8; 16],
    pub ciphertexts: Vec<[u8; 16]>,
}

impl Challenge {
    pub fn wire_len(&self) -> usize {
        4 + 16 + 16 * self.ciphertexts.len()
    }
}

pub fn challenge(ring: &KeyRing, nonce_seed: u64) -> Challenge {
    let mut a = [0u8; 16];
    rng::stream(nonce_seed, &[label::CHALLENGE, u64::from(ring.owner.0)]).fill_bytes(&mut a);
    Challenge {
        broadcaster: ring.owner,
        a,
        ciphertexts: ring.entries.iter().map(|e| ck_encrypt(&e.key, &a)).collect(),
    }
}

/// `(responder ring index, challenge index)` for every match.
///
/// `Dec(k, c) = a` exactly when `Enc(k, a) = c`, so each own key costs one
/// encryption and a lookup instead of a pass over every ciphertext.
pub fn discover_matches(responder: &KeyRing, ch: &Challenge) -> Vec<(usize, usize)> {
    let mut index: HashMap<[u8; 16], Vec<usize>> = HashMap::with_capacity(ch.ciphertexts.len());
    for (j, c) in ch.ciphertexts.iter().enumerate() {
        index.entry(*c).or_default().push(j);
    }
    let mut out = Vec::new();
    for (i, e) in responder.entries.iter().enumerate() {
        if let Some(js) = index.get(&ck_encrypt(&e.key, &ch.a)) {
            out.extend(js.iter().map(|j| (i, *j)));
        }
    }
    out
}

/// Keys in the responder's ring that open some ciphertext to `a`.
pub fn discover_shared(responder: &KeyRing, ch: &Challenge) -> Vec<PairwiseKey> {
    let mut seen = BTreeSet::new();
    discover_matches(responder, ch)
        .into_iter()
        .filter(|(i, _)| seen.insert(*i))
        .map(|(i, _)| responder.entries[i].key)
        .collect()
}

/// Raw byte-wise XOR of all keys.
pub fn xor_fold(shared: &[PairwiseKey]) -> [u8; KEY_BYTES] {
    shared.iter().fold([0u8; KEY_BYTES], |mut acc, k| {
        for (a, b) in acc.iter_mut().zip(k.0) {
            *a ^= b;
        }
        acc
    })
}

/// XOR fold; an all-zero result falls back to the smallest shared key.
pub fn derive_comm_key(shared: &[PairwiseKey]) -> Result<AeKey, KeyingError> {
    if shared.is_empty() {
        return Err(KeyingError::NoSharedKey);
    }
    let k = AeKey(xor_fold(shared));
    if k.is_zero() {
        Ok(*shared.iter().min_by_key(|k| k.0).expect("nonempty"))
    } else {
        Ok(k)
    }
}

fn ordered(a: ClientId, b: ClientId) -> (ClientId, ClientId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CommKeyTable {
    keys: BTreeMap<(ClientId, ClientId), AeKey>,
}

impl CommKeyTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// One independent key per edge of `graph`.
    pub fn per_link(graph: &LinkGraph, pool: &mut KeyPool) -> Self {
        let mut t = Self::new();
        for (a, b) in graph.edges() {
            t.insert(a, b, pool.draw());
        }
        t
    }

    pub fn insert(&mut self, a: ClientId, b: ClientId, key: AeKey) {
        self.keys.insert(ordered(a, b), key);
    }

    pub fn get(&self, a: ClientId, b: ClientId) -> Option<&AeKey> {
        self.keys.get(&ordered(a, b))
    }

    pub fn contains(&self, a: ClientId, b: ClientId) -> bool {
        self.keys.contains_key(&ordered(a, b))
    }

    /// Drops every key touching `c`; returns the former partners.
    pub fn remove_client(&mut self, c: ClientId) -> BTreeSet<ClientId> {
        let mut partners = BTreeSet::new();
        self.keys.retain(|(a, b), _| {
            if *a == c || *b == c {
                partners.insert(if *a == c { *b } else { *a });
                false
            } else {
                true
            }
        });
        partners
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ClientId, ClientId)> + '_ {
        self.keys.keys().copied()
    }

    pub fn involves(&self, c: ClientId) -> bool {
        self.keys.keys().any(|(a, b)| *a == c || *b == c)
    }

    /// Key graph over `nodes`, using only pairs with both ends in `nodes`.
    pub fn graph_over(&self, nodes: &[ClientId]) -> LinkGraph {
        let set: BTreeSet<ClientId> = nodes.iter().copied().collect();
        let mut g = LinkGraph::with_nodes(nodes.iter().copied());
        for (a, b) in self.pairs() {
            if set.contains(&a) && set.contains(&b) {
                g.add_edge(a, b);
            }
        }
        g
    }
}

/// Counts from a key-establishment pass.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstablishStats {
    /// Clients that broadcast a challenge.
    pub challengers: Vec<ClientId>,
    /// `(responder, challenger)` for every reply announcing matched indices.
    pub replies: Vec<(ClientId, ClientId)>,
}

/// Every challenger in `challengers` broadcasts to `members`; each responder
/// with a match announces the matched indices back, and both ends derive the
/// same key.
pub fn establish_comm_keys(
    rings: &KeyRings,
    challengers: &[ClientId],
    members: &[ClientId],
    table: &mut CommKeyTable,
    nonce_seed: u64,
) -> EstablishStats {
    let mut stats = EstablishStats::default();
    for &c in challengers {
        let Some(ring) = rings.get(&c).filter(|r| !r.is_empty()) else {
            continue;
        };
        let ch = challenge(ring, nonce_seed);
        stats.challengers.push(c);
        for &r in members {
            if r == c {
                continue;
            }
            let Some(resp) = rings.get(&r) else { continue };
            let matches = discover_matches(resp, &ch);
            if matches.is_empty() {
                continue;
            }
            stats.replies.push((r, c));
            let mut own: Vec<PairwiseKey> = Vec::new();
            let mut theirs: Vec<PairwiseKey> = Vec::new();
            let mut seen_i = BTreeSet::new();
            let mut seen_j = BTreeSet::new();
            for (i, j) in matches {
                if seen_i.insert(i) {
                    theirs.push(resp.entries[i].key);
                }
                if seen_j.insert(j) {
                    own.push(ring.entries[j].key);
                }
            }
            let k_resp = derive_comm_key(&theirs).expect("nonempty");
            let k_chal = derive_comm_key(&own).expect("nonempty");
            debug_assert_eq!(k_resp, k_chal);
            table.insert(c, r, k_chal);
        }
    }
    stats
}

/// Plaintext vote: the member's voting key for the suspect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub member: ClientId,
    pub suspect: ClientId,
    pub v: [u8; 32],
}

pub fn vote_hash(v: &[u8]) -> [u8; 32] {
    Sha256::digest(v).into()
}

/// `min(m, ⌈m/2⌉ + 1)`, at least 1.
pub fn default_threshold(m: usize) -> usize {
    (m.div_ceil(2) + 1).min(m).max(1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteState {
    pub suspect: ClientId,
    pub voting_members: Vec<ClientId>,
    voting_keys: BTreeMap<ClientId, [u8; 32]>,
    /// What each member was told: hashes of the other members' keys.
    pub known_hashes: BTreeMap<ClientId, BTreeMap<ClientId, [u8; 32]>>,
    pub marked: BTreeSet<ClientId>,
    pub threshold: usize,
}

impl VoteState {
    /// Trusted setup: draws each member's voting key and hands every member
    /// the hashes of the others.
    pub fn setup(suspect: ClientId, members: &[ClientId], threshold: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[label::VOTING, u64::from(suspect.0)]);
        let mut voting_keys = BTreeMap::new();
        for &m in members {
            let mut v = [0u8; 32];
            rng.fill_bytes(&mut v);
            voting_keys.insert(m, v);
        }
        let known_hashes = members
            .iter()
            .map(|&m| {
                let others = voting_keys
                    .iter()
                    .filter(|(o, _)| **o != m)
                    .map(|(o, v)| (*o, vote_hash(v)))
                    .collect();
                (m, others)
            })
            .collect();
        Self {
            suspect,
            voting_members: members.to_vec(),
            voting_keys,
            known_hashes,
            marked: BTreeSet::new(),
            threshold,
        }
    }

    pub fn cast_vote(&self, member: ClientId) -> Result<Vote, KeyingError> {
        let v = self
            .voting_keys
            .get(&member)
            .ok_or(KeyingError::NotVotingMember {
                member,
                suspect: self.suspect,
            })?;
        Ok(Vote {
            member,
            suspect: self.suspect,
            v: *v,
        })
    }

    /// Marks the vote if its hash is known to some member and not yet
    /// marked. Returns whether the marked set grew. A sole voting member has
    /// no peer holding its hash and checks its own.
    pub fn verify_and_mark(&mut self, v: &[u8]) -> bool {
        let h = vote_hash(v);
        let owner = self
            .known_hashes
            .values()
            .flat_map(|m| m.iter())
            .find(|(_, known)| **known == h)
            .map(|(o, _)| *o)
            .or_else(|| match self.voting_members.as_slice() {
                [only] if self.voting_keys.get(only).map(|k| vote_hash(k)) == Some(h) => Some(*only),
                _ => None,
            });
        match owner {
            Some(o) => self.marked.insert(o),
            None => false,
        }
    }

    pub fn revocation_due(&self) -> bool {
        self.marked.len() >= self.threshold
    }
}

/// All key material of a scenario: rings, communication keys and the
/// revocation list.
#[derive(Clone, Debug)]
pub struct KeyState {
    rings: KeyRings,
    comm: CommKeyTable,
    pool: KeyPool,
    ring_sizes: BTreeMap<ClusterId, usize>,
    revoked: BTreeSet<ClientId>,
    seed: u64,
    epoch: u64,
}

impl KeyState {
    /// Predistribution followed by a full challenge pass in every cluster.
    pub fn establish(
        plan: &ClusterPlan,
        size: RingSize,
        seed: u64,
    ) -> Result<(Self, BTreeMap<ClusterId, EstablishStats>), KeyingError> {
        let mut pool = KeyPool::new(seed);
        let (rings, ring_sizes) = predistribute_keyrings(plan, size, &mut pool, seed)?;
        let mut comm = CommKeyTable::new();
        let mut stats = BTreeMap::new();
        for cluster in &plan.clusters {
            let members = plan.active_members(cluster.id);
            let s = establish_comm_keys(&rings, &members, &members, &mut comm, seed);
            stats.insert(cluster.id, s);
        }
        Ok((
            Self {
                rings,
                comm,
                pool,
                ring_sizes,
                revoked: BTreeSet::new(),
                seed,
                epoch: 0,
            },
            stats,
        ))
    }

    pub fn rings(&self) -> &KeyRings {
        &self.rings
    }

    pub fn ring(&self, id: ClientId) -> Option<&KeyRing> {
        self.rings.get(&id)
    }

    pub fn comm_keys(&self) -> &CommKeyTable {
        &self.comm
    }

    pub fn comm_key(&self, a: ClientId, b: ClientId) -> Option<&AeKey> {
        self.comm.get(a, b)
    }

    pub fn ring_size(&self, cluster: ClusterId) -> usize {
        self.ring_sizes.get(&cluster).copied().unwrap_or(0)
    }

    pub fn revoked(&self) -> &BTreeSet<ClientId> {
        &self.revoked
    }

    pub fn is_revoked(&self, id: ClientId) -> bool {
        self.revoked.contains(&id)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Communication-key graph over the non-revoked members of `nodes`.
    pub fn key_graph(&self, nodes: &[ClientId]) -> LinkGraph {
        let live: Vec<ClientId> = nodes
            .iter()
            .copied()
            .filter(|n| !self.revoked.contains(n))
            .collect();
        self.comm.graph_over(&live)
    }

    /// Vote state for `suspect`, whose voting members are its ring peers.
    pub fn vote_state(&self, suspect: ClientId, threshold: Option<usize>) -> Option<VoteState> {
        let ring = self.rings.get(&suspect)?;
        let members: Vec<ClientId> = ring.peers().collect();
        if members.is_empty() {
            return None;
        }
        let l = threshold.unwrap_or_else(|| default_threshold(members.len()));
        Some(VoteState::setup(
            suspect,
            &members,
            l,
            rng::derive_seed(self.seed, &[self.epoch]),
        ))
    }

    /// Cuts every key involving `suspect` and bars it from future rings.
    /// Returns the former partners. If the suspect led a cluster the
    /// revocation still takes effect and the error carries the partners.
    pub fn revoke(
        &mut self,
        plan: &ClusterPlan,
        suspect: ClientId,
    ) -> Result<BTreeSet<ClientId>, KeyingError> {
        let Some(ring) = self.rings.remove(&suspect) else {
            return Ok(BTreeSet::new());
        };
        let mut affected: BTreeSet<ClientId> = ring.peers().collect();
        for p in &affected {
            if let Some(r) = self.rings.get_mut(p) {
                r.remove(suspect);
            }
        }
        affected.extend(self.comm.remove_client(suspect));
        self.revoked.insert(suspect);
        match plan.is_leader(suspect) {
            Some(cluster) => Err(KeyingError::ClusterInfeasible { cluster, affected }),
            None => Ok(affected),
        }
    }

    /// Re-runs predistribution and discovery for `affected`: entries among
    /// affected clients are replaced by fresh matches up to the cluster's
    /// ring size; entries with unaffected clients are kept.
    pub fn rekey(&mut self, plan: &ClusterPlan, affected: &BTreeSet<ClientId>) -> Result<EstablishStats, KeyingError> {
        let mut stats = EstablishStats::default();
        if affected.is_empty() {
            return Ok(stats);
        }
        self.epoch += 1;
        let mut rng = rng::stream(self.seed, &[label::REKEY, self.epoch]);
        for cluster in &plan.clusters {
            let members: Vec<ClientId> = plan
                .active_members(cluster.id)
                .into_iter()
                .filter(|m| !self.revoked.contains(m))
                .collect();
            let group: Vec<ClientId> = members
                .iter()
                .copied()
                .filter(|m| affected.contains(m))
                .collect();
            if group.is_empty() {
                continue;
            }
            let m = self.ring_size(cluster.id);
            if m >= members.len() && m > 0 {
                return Err(KeyingError::RingInfeasible {
                    ring_size: m,
                    cluster_size: members.len(),
                });
            }
            let in_group: BTreeSet<ClientId> = group.iter().copied().collect();
            for &g in &group {
                let ring = self.rings.entry(g).or_insert_with(|| KeyRing::new(g));
                ring.entries.retain(|e| !in_group.contains(&e.peer));
                self.comm.remove_client(g);
            }
            let deficits: Vec<usize> = group
                .iter()
                .map(|g| m.saturating_sub(self.rings[g].len()))
                .collect();
            let existing: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); group.len()];
            let adj = best_effort_pairing(&deficits, &existing, &mut rng);
            for (a, peers) in adj.iter().enumerate() {
                for &b in peers.range(a + 1..) {
                    let key = self.pool.draw();
                    self.rings.get_mut(&group[a]).expect("ring").insert(group[b], key);
                    self.rings.get_mut(&group[b]).expect("ring").insert(group[a], key);
                }
            }
            let nonce_seed = rng::derive_seed(self.seed, &[label::REKEY, self.epoch, 1]);
            let s = establish_comm_keys(&self.rings, &group, &members, &mut self.comm, nonce_seed);
            stats.challengers.extend(s.challengers);
            stats.replies.extend(s.replies);
        }
        Ok(stats)
    }

    /// Secret dump for debugging.
    pub fn debug_dump(&self) -> serde_json::Value {
        let hex = |k: &AeKey| k.0.iter().map(|b| format!("{b:02x}")).collect::<String>();
        serde_json::json!({
            "epoch": self.epoch,
            "revoked": self.revoked.iter().map(|c| c.0).collect::<Vec<_>>(),
            "rings": self.rings.values().map(|r| serde_json::json!({
                "owner": r.owner.0,
                "entries": r.entries.iter().map(|e| serde_json::json!([e.peer.0, hex(&e.key)])).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "comm_keys": self.comm.keys.iter().map(|((a, b), k)| serde_json::json!([a.0, b.0, hex(k)])).collect::<Vec<_>>(),
        })
    }
}

/// Pairs up deficit points, avoiding self loops and existing edges; keeps
/// the fullest of a few attempts when no perfect pairing turns up.
fn best_effort_pairing<R: Rng + ?Sized>(
    deficits: &[usize],
    existing: &[BTreeSet<usize>],
    rng: &mut R,
) -> Vec<BTreeSet<usize>> {
    let n = deficits.len();
    let mut best: Option<(usize, Vec<BTreeSet<usize>>)> = None;
    for _ in 0..16 {
        let mut points: Vec<usize> = deficits
            .iter()
            .enumerate()
            .flat_map(|(v, &d)| std::iter::repeat_n(v, d))
            .collect();
        let mut adj = existing.to_vec();
        let mut added = vec![BTreeSet::new(); n];
        loop {
            let mut cands = Vec::new();
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    if suitable(points[i], points[j], &adj) {
                        cands.push((i, j));
                    }
                }
            }
            if cands.is_empty() {
                break;
            }
            let (i, j) = cands[rng.random_range(0..cands.len())];
            let (a, b) = (points[i], points[j]);
            adj[a].insert(b);
            adj[b].insert(a);
            added[a].insert(b);
            added[b].insert(a);
            points.swap_remove(j);
            points.swap_remove(i);
        }
        let left = points.len();
        if best.as_ref().is_none_or(|(l, _)| left < *l) {
            best = Some((left, added));
        }
        if left <= 1 {
            break;
        }
    }
    best.map(|(_, a)| a).unwrap_or_else(|| vec![BTreeSet::new(); n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ck_decrypt;
    use crate::topology::{divide_clusters, mark_targets, ClusterOptions, NetworkTopology, Point};

    fn ring_of(owner: u32, entries: &[(u32, PairwiseKey)]) -> KeyRing {
        let mut r = KeyRing::new(ClientId(owner));
        for (p, k) in entries {
            r.insert(ClientId(*p), *k);
        }
        r
    }

    fn clique_plan(n: usize) -> ClusterPlan {
        let pts = (0..n).map(|i| Point { x: i as f64 * 0.01, y: 0.0 }).collect();
        let topo = NetworkTopology::from_positions(pts, 10.0);
        let plan = divide_clusters(&topo, 1, &ClusterOptions::default()).unwrap();
        mark_targets(&plan, 1.0, 1).unwrap()
    }

    #[test]
    fn ring_graph_degrees_and_parity() {
        let mut rng = rng::stream(1, &[]);
        let adj = random_ring_graph(40, 11, &mut rng).unwrap();
        assert!(adj.iter().all(|s| s.len() == 11));
        let adj = random_ring_graph(41, 11, &mut rng).unwrap();
        let mut degs: Vec<usize> = adj.iter().map(BTreeSet::len).collect();
        degs.sort();
        assert_eq!(degs[40], 12);
        assert!(degs[..40].iter().all(|d| *d == 11));
        let full = random_ring_graph(9, 8, &mut rng).unwrap();
        assert!(full.iter().all(|s| s.len() == 8));
        assert!(matches!(
            random_ring_graph(5, 5, &mut rng),
            Err(KeyingError::RingInfeasible { .. })
        ));
        for (a, s) in adj.iter().enumerate() {
            assert!(!s.contains(&a));
            for b in s {
                assert!(adj[*b].contains(&a));
            }
        }
    }

    #[test]
    fn pair_of_two_shares_one_key() {
        let plan = clique_plan(2);
        let mut pool = KeyPool::new(3);
        let (rings, _) = predistribute_keyrings(&plan, RingSize::Fixed(1), &mut pool, 3).unwrap();
        let a = &rings[&ClientId(0)];
        let b = &rings[&ClientId(1)];
        assert_eq!(a.entries[0].peer, ClientId(1));
        assert_eq!(a.entries[0].key, b.entries[0].key);
    }

    #[test]
    fn forty_member_rings_symmetric() {
        let plan = clique_plan(40);
        let mut pool = KeyPool::new(9);
        let (rings, sizes) =
            predistribute_keyrings(&plan, RingSize::Connectivity(0.999), &mut pool, 9).unwrap();
        assert_eq!(sizes[&ClusterId(0)], 11);
        for r in rings.values() {
            assert_eq!(r.len(), 11);
            for e in &r.entries {
                assert_eq!(rings[&e.peer].key_for(r.owner), Some(&e.key));
            }
        }
        let mut all: Vec<[u8; 16]> = rings.values().flat_map(|r| r.entries.iter().map(|e| e.key.0)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 40 * 11 / 2);
        assert!(matches!(
            predistribute_keyrings(&plan, RingSize::Fixed(40), &mut pool, 9),
            Err(KeyingError::RingInfeasible { .. })
        ));
    }

    #[test]
    fn challenge_and_discovery() {
        let mut pool = KeyPool::new(1);
        let (k1, k2, k3, k4, k5) = (pool.draw(), pool.draw(), pool.draw(), pool.draw(), pool.draw());
        let single = ring_of(1, &[(2, k1)]);
        let ch = challenge(&single, 5);
        assert_eq!(ch.ciphertexts.len(), 1);
        assert_eq!(ck_decrypt(&k1, &ch.ciphertexts[0]), ch.a);

        let one_common = ring_of(2, &[(1, k1), (3, k2)]);
        assert_eq!(discover_shared(&one_common, &ch), vec![k1]);
        let disjoint = ring_of(3, &[(4, k4)]);
        assert!(discover_shared(&disjoint, &ch).is_empty());

        // Synthetic rings with three common keys in scrambled order.
        let a = ring_of(10, &[(1, k1), (2, k2), (3, k3), (4, k4)]);
        let b = ring_of(20, &[(5, k3), (6, k5), (7, k1), (8, k2)]);
        let found: BTreeSet<[u8; 16]> = discover_shared(&b, &challenge(&a, 2)).iter().map(|k| k.0).collect();
        let oracle: BTreeSet<[u8; 16]> = a
            .entries
            .iter()
            .filter(|e| b.entries.iter().any(|f| f.key == e.key))
            .map(|e| e.key.0)
            .collect();
        assert_eq!(found, oracle);
        assert_eq!(found.len(), 3);
    }

    #[test]
    fn wrong_keys_never_open_challenge() {
        let mut pool = KeyPool::new(77);
        let ring = ring_of(1, &[(2, pool.draw())]);
        let ch = challenge(&ring, 1);
        let hits = (0..10_000)
            .filter(|_| ck_decrypt(&pool.draw(), &ch.ciphertexts[0]) == ch.a)
            .count();
        assert_eq!(hits, 0);
    }

    #[test]
    fn comm_key_derivation() {
        let mut pool = KeyPool::new(4);
        let (k1, k2, k3) = (pool.draw(), pool.draw(), pool.draw());
        assert_eq!(derive_comm_key(&[k1]).unwrap(), k1);
        assert_eq!(xor_fold(&[k1, k1]), [0u8; 16]);
        let smallest = derive_comm_key(&[k1, k1]).unwrap();
        assert_eq!(smallest, k1);
        let a = derive_comm_key(&[k1, k2, k3]).unwrap();
        assert_eq!(a, derive_comm_key(&[k3, k1, k2]).unwrap());
        assert_eq!(a, derive_comm_key(&[k2, k3, k1]).unwrap());
        assert_eq!(derive_comm_key(&[]), Err(KeyingError::NoSharedKey));
    }

    #[test]
    fn establish_matches_ring_pairs() {
        let plan = clique_plan(30);
        let (ks, stats) = KeyState::establish(&plan, RingSize::Connectivity(0.999), 5).unwrap();
        let pairs: usize = ks.rings().values().map(KeyRing::len).sum::<usize>() / 2;
        assert_eq!(ks.comm_keys().len(), pairs);
        assert_eq!(stats[&ClusterId(0)].replies.len(), 2 * pairs);
        for (a, b) in ks.comm_keys().pairs() {
            assert_eq!(ks.comm_key(a, b), ks.ring(a).unwrap().key_for(b));
        }
    }

    #[test]
    fn voting_rules() {
        let members = [ClientId(1), ClientId(2), ClientId(3), ClientId(4)];
        let mut st = VoteState::setup(ClientId(9), &members, default_threshold(4), 1);
        assert_eq!(st.threshold, 3);
        assert!(matches!(
            st.cast_vote(ClientId(5)),
            Err(KeyingError::NotVotingMember { .. })
        ));
        let v1 = st.cast_vote(ClientId(1)).unwrap();
        assert!(st.verify_and_mark(&v1.v));
        assert!(!st.verify_and_mark(&v1.v));
        assert_eq!(st.marked.len(), 1);
        assert!(!st.verify_and_mark(&[0u8; 32]));
        for m in [2, 3] {
            let v = st.cast_vote(ClientId(m)).unwrap();
            assert!(!st.revocation_due());
            st.verify_and_mark(&v.v);
        }
        assert!(st.revocation_due());
        assert_eq!(st.voting_members.len(), 4);
        assert_eq!(st.known_hashes[&ClientId(1)].len(), 3);
    }

    #[test]
    fn forged_votes_rejected() {
        let members: Vec<ClientId> = (0..11).map(ClientId).collect();
        let mut st = VoteState::setup(ClientId(50), &members, 7, 2);
        let mut rng = rng::stream(8, &[]);
        for _ in 0..100_000 {
            let mut v = [0u8; 32];
            rng.fill_bytes(&mut v);
            assert!(!st.verify_and_mark(&v));
        }
        assert!(st.marked.is_empty());
    }

    #[test]
    fn threshold_clamp() {
        assert_eq!(default_threshold(1), 1);
        assert_eq!(default_threshold(2), 2);
        assert_eq!(default_threshold(11), 7);
        assert_eq!(default_threshold(12), 7);
    }

    #[test]
    fn revoke_and_rekey() {
        let plan = clique_plan(40);
        let (mut ks, _) = KeyState::establish(&plan, RingSize::Connectivity(0.999), 11).unwrap();
        let leader = plan.clusters[0].leader;
        let suspect = plan.clusters[0].members.iter().copied().find(|m| *m != leader).unwrap();
        let before = ks.rings().clone();
        let affected = ks.revoke(&plan, suspect).unwrap();
        assert_eq!(affected.len(), 11);
        assert!(!ks.comm_keys().involves(suspect));
        assert!(!ks.key_graph(&plan.clusters[0].members).contains(suspect));

        ks.rekey(&plan, &affected).unwrap();
        for (id, ring) in ks.rings() {
            if affected.contains(id) {
                assert!(ring.len() >= 10 && ring.len() <= 11, "{id}: {}", ring.len());
            } else {
                assert_eq!(ring, &before[id], "{id} changed");
            }
            assert!(ring.key_for(suspect).is_none());
        }
        for (a, b) in ks.comm_keys().pairs() {
            assert_eq!(ks.comm_key(a, b), ks.ring(a).unwrap().key_for(b));
        }
        // Unknown client: no-op.
        assert!(ks.revoke(&plan, ClientId(999)).unwrap().is_empty());
        // Empty rekey: identity.
        let snapshot = ks.rings().clone();
        ks.rekey(&plan, &BTreeSet::new()).unwrap();
        assert_eq!(&snapshot, ks.rings());
    }

    #[test]
    fn revoked_leader_surfaces_infeasible() {
        let plan = clique_plan(10);
        let (mut ks, _) = KeyState::establish(&plan, RingSize::Fixed(3), 2).unwrap();
        let leader = plan.clusters[0].leader;
        match ks.revoke(&plan, leader) {
            Err(KeyingError::ClusterInfeasible { cluster, affected }) => {
                assert_eq!(cluster, ClusterId(0));
                assert_eq!(affected.len(), 3);
            }
            other => panic!("{other:?}"),
        }
        assert!(ks.is_revoked(leader));
    }

    #[test]
    fn full_cluster_rekey_changes_every_key() {
        let plan = clique_plan(20);
        let (mut ks, _) = KeyState::establish(&plan, RingSize::Fixed(5), 4).unwrap();
        let old: BTreeSet<[u8; 16]> = ks.comm_keys().pairs().map(|(a, b)| ks.comm_key(a, b).unwrap().0).collect();
        let all: BTreeSet<ClientId> = plan.clusters[0].members.iter().copied().collect();
        ks.rekey(&plan, &all).unwrap();
        assert!(ks.comm_keys().len() >= 45);
        for (a, b) in ks.comm_keys().pairs() {
            assert!(!old.contains(&ks.comm_key(a, b).unwrap().0));
        }
    }
}
