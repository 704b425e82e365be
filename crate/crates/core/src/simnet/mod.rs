//! Deterministic discrete-event simulator: single-hop delivery with message
//! accounting, neighbourhood broadcast, dropout and hijack injection, CFL
//! rounds and the single-cycle PPT baseline.
//!
//! All randomness is derived from the configured seed; every collection is
//! ordered, so identical inputs give byte-identical reports.

mod faults;
mod queue;
mod report;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use faults::{AttackScript, FaultPlan};
pub use queue::EventQueue;
pub use report::{
    write_ndjson, write_reports_csv, ClusterReport, ClusterStatus, EavesdropRecord, Endpoint, HopObservation,
    Instrumentation, LogEvent, LogKind, MessageKind, RoundReport, TraceEntry,
};

use crate::aggregation::{
    self, draw_mask, plan_route, receive, relay_step, unmask_and_sum, AccVector, AggregationError,
    AggregationRoute, Arithmetic, ClusterSum, MaskedAccumulator, DEFAULT_MASK_BOUND,
};
use crate::crypto::{self, AeKey, Envelope, EnvelopeSealer, StampedPayload, Timestamp, NONCE_BYTES, TAG_BYTES};
use crate::graph::LinkGraph;
use crate::keying::{CommKeyTable, EstablishStats, KeyPool, KeyState, KeyingError, RingSize, VoteState, VOTE_HASH};
use crate::rng::{self, label};
use crate::topology::{ClientId, ClusterId, ClusterPlan, NetworkTopology, TopologyError};
use crate::trainer::{compute_update, DatasetShard, LocalTrainer, LogisticTrainer, ModelVector, TrainerError};

const VOTE_BYTES: usize = 4 + 4 + 32;
const REPLY_BYTES: usize = 4 + 4 + 8;

pub const WEIGHT_POLICY: &str = "p renormalised over contributing targets per cluster; q over completed clusters";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    #[default]
    Cfl,
    /// One masked cycle over every live target.
    Ppt,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{from} cannot reach {to:?} in one hop")]
    NotNeighbor { from: ClientId, to: Endpoint },
    #[error("cluster {0}: some live target is unreachable from the leader")]
    RouteInfeasible(ClusterId),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Keying(#[from] KeyingError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub protocol: Protocol,
    pub arithmetic: Arithmetic,
    /// CFL key rings; `Complete` also makes the PPT key graph complete,
    /// otherwise PPT keys every physical link.
    pub ring_size: RingSize,
    pub mask_bound: f64,
    pub latency_ms: u64,
    /// Liveness announcements are collected for this long before a cluster
    /// starts its cycle; silent targets count as dropped.
    pub announce_timeout_ms: u64,
    pub timestamp_window_ms: u64,
    /// Re-key every cluster every this many rounds; 0 disables.
    pub rekey_period: u64,
    /// Marked votes needed to revoke; default is a strict majority.
    pub vote_threshold: Option<usize>,
    /// Retry a cluster once after an authentication failure.
    pub retry_on_failure: bool,
    /// Record masks, contributions and relay observations.
    pub instrument: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Cfl,
            arithmetic: Arithmetic::Fixed,
            ring_size: RingSize::default(),
            mask_bound: DEFAULT_MASK_BOUND,
            latency_ms: 10,
            announce_timeout_ms: 50,
            timestamp_window_ms: crypto::DEFAULT_WINDOW_MS,
            rekey_period: 10,
            vote_threshold: None,
            retry_on_failure: true,
            instrument: false,
            seed: 0,
        }
    }
}

/// Model, data and trainer for a run.
#[derive(Clone)]
pub struct Workload {
    pub initial: ModelVector,
    pub shards: BTreeMap<ClientId, DatasetShard>,
    pub sizes: BTreeMap<ClientId, u64>,
    pub trainer: Arc<dyn LocalTrainer>,
}

impl Workload {
    pub fn new(initial: ModelVector, shards: Vec<DatasetShard>, trainer: Arc<dyn LocalTrainer>) -> Self {
        let sizes = shards.iter().map(|s| (s.owner, s.size() as u64)).collect();
        Self {
            initial,
            shards: shards.into_iter().map(|s| (s.owner, s)).collect(),
            sizes,
            trainer,
        }
    }

    /// Data sizes only; updates must be supplied per round.
    pub fn sizes_only(initial: ModelVector, sizes: BTreeMap<ClientId, u64>) -> Self {
        Self {
            initial,
            shards: BTreeMap::new(),
            sizes,
            trainer: Arc::new(LogisticTrainer::default()),
        }
    }
}

/// Cost of the initial key establishment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SetupReport {
    pub broadcast_messages: usize,
    pub bytes_sent: usize,
    pub comm_keys: usize,
    pub ring_sizes: BTreeMap<ClusterId, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub accepted: bool,
    pub marked: usize,
    pub threshold: usize,
    pub revoked: bool,
}

/// Per-round message counters and trace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MessageLedger {
    pub hops: usize,
    pub uploads: usize,
    pub broadcasts: usize,
    pub bytes: usize,
    pub trace: Vec<TraceEntry>,
}

impl MessageLedger {
    pub fn messages(&self) -> usize {
        self.hops + self.uploads + self.broadcasts
    }

    fn record(&mut self, entry: TraceEntry) {
        match entry.kind {
            MessageKind::Hop => self.hops += 1,
            MessageKind::Upload => self.uploads += 1,
            MessageKind::Broadcast | MessageKind::Reply => self.broadcasts += 1,
        }
        self.bytes += entry.bytes;
        self.trace.push(entry);
    }
}

/// Flood with per-client deduplication over radio links inside `within`.
/// Returns every client that received (and so retransmitted) the payload.
pub fn neighborhood_broadcast(
    topology: &NetworkTopology,
    origin: ClientId,
    within: &BTreeSet<ClientId>,
) -> BTreeSet<ClientId> {
    let mut seen = BTreeSet::from([origin]);
    let mut q = VecDeque::from([origin]);
    while let Some(u) = q.pop_front() {
        for &v in topology.neighbors(u) {
            if within.contains(&v) && seen.insert(v) {
                q.push_back(v);
            }
        }
    }
    seen
}

fn ordered(a: ClientId, b: ClientId) -> (ClientId, ClientId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

struct RoundCtx {
    ledger: MessageLedger,
    auth_failures: Vec<(ClientId, ClientId)>,
    votes: Vec<(ClientId, ClientId)>,
    revoked: Vec<ClientId>,
    rekeyed: BTreeSet<ClientId>,
    pending_revocations: BTreeSet<ClientId>,
    eavesdrop: Vec<EavesdropRecord>,
    instr: Option<Instrumentation>,
}

impl RoundCtx {
    fn new(instrument: bool) -> Self {
        Self {
            ledger: MessageLedger::default(),
            auth_failures: Vec::new(),
            votes: Vec::new(),
            revoked: Vec::new(),
            rekeyed: BTreeSet::new(),
            pending_revocations: BTreeSet::new(),
            eavesdrop: Vec::new(),
            instr: instrument.then(Instrumentation::default),
        }
    }
}

struct GroupRun {
    id: ClusterId,
    status: Option<ClusterStatus>,
    leader: Option<ClientId>,
    acting: bool,
    live_targets: usize,
    members: Vec<ClientId>,
    contributors: BTreeSet<ClientId>,
    data_size: u64,
    route: Option<AggregationRoute>,
    attempt: u32,
    mask: Option<AccVector>,
    added: BTreeSet<ClientId>,
    prefix: AccVector,
    sum: Option<AccVector>,
}

impl GroupRun {
    fn idle(id: ClusterId, status: ClusterStatus, live_targets: usize, mode: Arithmetic, d: usize) -> Self {
        Self {
            id,
            status: Some(status),
            leader: None,
            acting: false,
            live_targets,
            members: Vec::new(),
            contributors: BTreeSet::new(),
            data_size: 0,
            route: None,
            attempt: 0,
            mask: None,
            added: BTreeSet::new(),
            prefix: AccVector::zeros(mode, d),
            sum: None,
        }
    }
}

enum Ev {
    Start { g: usize },
    Hop { g: usize, attempt: u32, pos: usize, from: ClientId, to: ClientId, env: Envelope },
    Upload { g: usize },
}

pub struct Simulation {
    topology: NetworkTopology,
    plan: ClusterPlan,
    config: SimConfig,
    faults: FaultPlan,
    workload: Workload,
    keys: Option<KeyState>,
    ppt_keys: CommKeyTable,
    global: ModelVector,
    sealer: EnvelopeSealer,
    counters: BTreeMap<ClientId, u32>,
    votes: BTreeMap<ClientId, VoteState>,
    failed_edges: BTreeSet<(ClientId, ClientId)>,
    log: Vec<LogEvent>,
    log_seq: u64,
    round: u64,
    clock_ms: u64,
    setup: SetupReport,
}

impl Simulation {
    /// Establishes keys for the chosen protocol and checks that every target
    /// has a data size.
    pub fn new(
        topology: NetworkTopology,
        plan: ClusterPlan,
        config: SimConfig,
        faults: FaultPlan,
        workload: Workload,
    ) -> Result<Self, SimError> {
        if !(config.mask_bound.is_finite() && config.mask_bound >= 0.0) {
            return Err(SimError::Config(format!("mask bound {} must be finite and ≥ 0", config.mask_bound)));
        }
        if let Some(t) = plan.all_targets().find(|t| workload.sizes.get(t).is_none_or(|s| *s == 0)) {
            return Err(SimError::Config(format!("target {t} has no data")));
        }
        let mut sim = Self {
            global: workload.initial.clone(),
            topology,
            plan,
            config,
            faults,
            workload,
            keys: None,
            ppt_keys: CommKeyTable::new(),
            sealer: EnvelopeSealer::new(),
            counters: BTreeMap::new(),
            votes: BTreeMap::new(),
            failed_edges: BTreeSet::new(),
            log: Vec::new(),
            log_seq: 0,
            round: 0,
            clock_ms: 0,
            setup: SetupReport::default(),
        };
        let mut ledger = MessageLedger::default();
        match sim.config.protocol {
            Protocol::Cfl => {
                let (keys, stats) = KeyState::establish(&sim.plan, sim.config.ring_size, sim.config.seed)?;
                sim.setup.ring_sizes = sim.plan.clusters.iter().map(|c| (c.id, keys.ring_size(c.id))).collect();
                sim.setup.comm_keys = keys.comm_keys().len();
                sim.keys = Some(keys);
                for s in stats.values() {
                    sim.charge_establish(&mut ledger, 0, s)?;
                }
            }
            Protocol::Ppt => {
                let active = sim.active_clients();
                let mut pool = KeyPool::new(sim.config.seed);
                let graph = match sim.config.ring_size {
                    RingSize::Complete => LinkGraph::complete(&active),
                    _ => LinkGraph::from_topology(&sim.topology, &active),
                };
                sim.ppt_keys = CommKeyTable::per_link(&graph, &mut pool);
                sim.setup.comm_keys = sim.ppt_keys.len();
            }
        }
        sim.setup.broadcast_messages = ledger.broadcasts;
        sim.setup.bytes_sent = ledger.bytes;
        let hijacks: Vec<(ClientId, AttackScript)> = sim.faults.hijacked.iter().map(|(c, s)| (*c, *s)).collect();
        for (client, script) in hijacks {
            sim.push_log(0, LogKind::Hijack { client, script });
        }
        Ok(sim)
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn plan(&self) -> &ClusterPlan {
        &self.plan
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn keys(&self) -> Option<&KeyState> {
        self.keys.as_ref()
    }

    pub fn ppt_keys(&self) -> &CommKeyTable {
        &self.ppt_keys
    }

    pub fn global(&self) -> &ModelVector {
        &self.global
    }

    pub fn set_global(&mut self, w: ModelVector) {
        self.global = w;
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    pub fn setup_report(&self) -> &SetupReport {
        &self.setup
    }

    pub fn event_log(&self) -> &[LogEvent] {
        &self.log
    }

    pub fn write_event_log<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_ndjson(&self.log, out)
    }

    pub fn faults(&self) -> &FaultPlan {
        &self.faults
    }

    pub fn vote_state(&self, suspect: ClientId) -> Option<&VoteState> {
        self.votes.get(&suspect)
    }

    pub fn is_revoked(&self, id: ClientId) -> bool {
        self.keys.as_ref().is_some_and(|k| k.is_revoked(id))
    }

    pub fn inject_hijack(&mut self, client: ClientId, script: AttackScript) {
        self.faults.hijacked.insert(client, script);
        self.push_log(self.round, LogKind::Hijack { client, script });
    }

    /// Every non-isolated client.
    fn active_clients(&self) -> Vec<ClientId> {
        self.topology.clients().filter(|c| !self.plan.is_isolated(*c)).collect()
    }

    fn push_log(&mut self, round: u64, event: LogKind) {
        self.log.push(LogEvent {
            round,
            time_ms: self.clock_ms,
            seq: self.log_seq,
            event,
        });
        self.log_seq += 1;
    }

    fn log_at(&mut self, time_ms: u64, event: LogKind) {
        self.log.push(LogEvent {
            round: self.round,
            time_ms,
            seq: self.log_seq,
            event,
        });
        self.log_seq += 1;
    }

    fn overlay_has(&self, a: ClientId, b: ClientId) -> bool {
        match self.config.protocol {
            Protocol::Cfl => self.keys.as_ref().is_some_and(|k| k.comm_key(a, b).is_some()),
            Protocol::Ppt => self.ppt_keys.contains(a, b),
        }
    }

    fn link_key(&self, a: ClientId, b: ClientId) -> Option<AeKey> {
        match self.config.protocol {
            Protocol::Cfl => self.keys.as_ref().and_then(|k| k.comm_key(a, b).copied()),
            Protocol::Ppt => self.ppt_keys.get(a, b).copied(),
        }
    }

    fn overlay_graph(&self, members: &[ClientId]) -> LinkGraph {
        match self.config.protocol {
            Protocol::Cfl => self.keys.as_ref().map(|k| k.key_graph(members)).unwrap_or_default(),
            Protocol::Ppt => self.ppt_keys.graph_over(members),
        }
    }

    /// Records one transmission after checking the single-hop rule: a radio
    /// link, a communication-key link, or a server-adjacent client uploading.
    /// Returns the arrival time.
    #[allow(clippy::too_many_arguments)]
    pub fn deliver(
        &self,
        ledger: &mut MessageLedger,
        time_ms: u64,
        kind: MessageKind,
        cluster: Option<ClusterId>,
        from: ClientId,
        to: Endpoint,
        bytes: usize,
    ) -> Result<u64, SimError> {
        let ok = match to {
            Endpoint::Server => self
                .plan
                .cluster_of(from)
                .is_some_and(|c| self.plan.cluster(c).is_server_adjacent(from)),
            Endpoint::Client(b) => self.topology.has_edge(from, b) || self.overlay_has(from, b),
            Endpoint::Neighbors => true,
        };
        if !ok {
            return Err(SimError::NotNeighbor { from, to });
        }
        ledger.record(TraceEntry {
            time_ms,
            kind,
            cluster,
            from,
            to,
            bytes,
        });
        Ok(time_ms + self.config.latency_ms)
    }

    fn cluster_scope(&self, cluster: ClusterId) -> BTreeSet<ClientId> {
        self.plan
            .active_members(cluster)
            .into_iter()
            .filter(|m| !self.is_revoked(*m))
            .collect()
    }

    fn flood(&self, ledger: &mut MessageLedger, time_ms: u64, origin: ClientId, bytes: usize) -> usize {
        let Some(cluster) = self.plan.cluster_of(origin) else {
            return 0;
        };
        let reached = neighborhood_broadcast(&self.topology, origin, &self.cluster_scope(cluster));
        for c in &reached {
            ledger.record(TraceEntry {
                time_ms,
                kind: MessageKind::Broadcast,
                cluster: Some(cluster),
                from: *c,
                to: Endpoint::Neighbors,
                bytes,
            });
        }
        reached.len()
    }

    /// Challenge floods plus replies routed back over radio links.
    fn charge_establish(&self, ledger: &mut MessageLedger, time_ms: u64, stats: &EstablishStats) -> Result<(), SimError> {
        let mut scopes: BTreeMap<ClusterId, LinkGraph> = BTreeMap::new();
        for &c in &stats.challengers {
            let m = self.keys.as_ref().and_then(|k| k.ring(c)).map_or(0, |r| r.len());
            self.flood(ledger, time_ms, c, 4 + 16 + 16 * m);
        }
        for &(r, c) in &stats.replies {
            let Some(cluster) = self.plan.cluster_of(r) else { continue };
            let phys = scopes.entry(cluster).or_insert_with(|| {
                let scope: Vec<ClientId> = self.cluster_scope(cluster).into_iter().collect();
                LinkGraph::from_topology(&self.topology, &scope)
            });
            if let Some(path) = phys.shortest_path(r, c) {
                for w in path.windows(2) {
                    self.deliver(ledger, time_ms, MessageKind::Reply, Some(cluster), w[0], Endpoint::Client(w[1]), REPLY_BYTES)?;
                }
            }
        }
        Ok(())
    }

    fn rekey_clients(&mut self, cx: &mut RoundCtx, time_ms: u64, affected: &BTreeSet<ClientId>) -> Result<(), SimError> {
        if affected.is_empty() {
            return Ok(());
        }
        let Some(keys) = self.keys.as_mut() else {
            return Ok(());
        };
        let stats = keys.rekey(&self.plan, affected)?;
        self.charge_establish(&mut cx.ledger, time_ms, &stats)?;
        cx.rekeyed.extend(affected.iter().copied());
        self.log_at(
            time_ms,
            LogKind::Rekey {
                clients: affected.iter().copied().collect(),
            },
        );
        Ok(())
    }

    /// `observer` saw an attack from `suspect`: cast, flood and verify a vote.
    fn observe(&mut self, cx: &mut RoundCtx, time_ms: u64, observer: ClientId, suspect: ClientId) -> VoteTally {
        let mut tally = VoteTally {
            accepted: false,
            marked: 0,
            threshold: 0,
            revoked: false,
        };
        let Some(keys) = self.keys.as_ref() else {
            return tally;
        };
        if keys.is_revoked(suspect) || cx.pending_revocations.contains(&suspect) {
            tally.revoked = true;
            return tally;
        }
        if !self.votes.contains_key(&suspect) {
            match keys.vote_state(suspect, self.config.vote_threshold) {
                Some(s) => {
                    self.votes.insert(suspect, s);
                }
                None => return tally,
            }
        }
        let state = self.votes.get_mut(&suspect).expect("inserted");
        let vote = match state.cast_vote(observer) {
            Ok(v) => v,
            Err(_) => {
                tally.marked = state.marked.len();
                tally.threshold = state.threshold;
                self.log_at(time_ms, LogKind::IgnoredVote { voter: observer, suspect });
                return tally;
            }
        };
        state.verify_and_mark(&vote.v);
        tally.accepted = true;
        tally.marked = state.marked.len();
        tally.threshold = state.threshold;
        let due = state.revocation_due();
        let reached = self.flood(&mut cx.ledger, time_ms, observer, VOTE_BYTES);
        self.log_at(
            time_ms,
            LogKind::Broadcast {
                origin: observer,
                purpose: "vote".into(),
                reached,
            },
        );
        cx.votes.push((observer, suspect));
        self.log_at(
            time_ms,
            LogKind::Vote {
                voter: observer,
                suspect,
                marked: tally.marked,
                threshold: tally.threshold,
            },
        );
        if due {
            cx.pending_revocations.insert(suspect);
        }
        tally
    }

    fn apply_revocation(&mut self, cx: &mut RoundCtx, time_ms: u64, suspect: ClientId) -> Result<(), SimError> {
        let Some(keys) = self.keys.as_mut() else {
            return Ok(());
        };
        let affected = match keys.revoke(&self.plan, suspect) {
            Ok(a) => a,
            Err(KeyingError::ClusterInfeasible { cluster, affected }) => {
                let excluded = keys.revoked().clone();
                let seed = rng::derive_seed(self.config.seed, &[label::LEADER, self.round]);
                if let Ok(leader) = self.plan.elect_leader(cluster, &excluded, seed) {
                    self.log_at(
                        time_ms,
                        LogKind::LeaderChange {
                            cluster,
                            leader,
                            acting: false,
                        },
                    );
                }
                affected
            }
            Err(e) => return Err(e.into()),
        };
        self.votes.remove(&suspect);
        cx.revoked.push(suspect);
        self.log_at(
            time_ms,
            LogKind::Revocation {
                suspect,
                affected: affected.iter().copied().collect(),
            },
        );
        self.rekey_clients(cx, time_ms, &affected)
    }

    /// A vote from outside the round loop; revocation applies immediately.
    pub fn observe_attack(&mut self, observer: ClientId, suspect: ClientId) -> Result<VoteTally, SimError> {
        let mut cx = RoundCtx::new(false);
        let now = self.clock_ms;
        let mut tally = self.observe(&mut cx, now, observer, suspect);
        if cx.pending_revocations.contains(&suspect) {
            self.apply_revocation(&mut cx, now, suspect)?;
            tally.revoked = true;
        }
        Ok(tally)
    }

    fn choose<'a>(&self, items: &'a [ClientId], path: &[u64]) -> Option<&'a ClientId> {
        items.choose(&mut rng::stream(self.config.seed, path))
    }

    /// Plan leader if live, else a live server-adjacent target, else a live
    /// server-adjacent relay acting as leader.
    fn round_leader(
        &self,
        clusters: &[ClusterId],
        preferred: ClientId,
        targets: &BTreeSet<ClientId>,
        members: &BTreeSet<ClientId>,
        tag: u64,
    ) -> Option<(ClientId, bool)> {
        if targets.contains(&preferred) {
            return Some((preferred, false));
        }
        let adjacent: Vec<ClientId> = clusters
            .iter()
            .flat_map(|c| self.plan.cluster(*c).server_adjacent.iter().copied())
            .collect();
        let adj_targets: Vec<ClientId> = adjacent.iter().copied().filter(|a| targets.contains(a)).collect();
        if let Some(l) = self.choose(&adj_targets, &[label::LEADER, self.round, tag, 2]) {
            return Some((*l, false));
        }
        let relays: Vec<ClientId> = adjacent.iter().copied().filter(|a| members.contains(a)).collect();
        self.choose(&relays, &[label::LEADER, self.round, tag, 3]).map(|l| (*l, true))
    }

    fn plan_group_route(&self, run: &GroupRun) -> Result<AggregationRoute, SimError> {
        let leader = run.leader.expect("leader chosen");
        let full = self.overlay_graph(&run.members);
        let mut avoiding = full.clone();
        for (a, b) in &self.failed_edges {
            avoiding.remove_edge(*a, *b);
        }
        let mut targets = run.contributors.clone();
        targets.insert(leader);
        plan_route(run.id, &avoiding, &targets, leader)
            .or_else(|_| plan_route(run.id, &full, &targets, leader))
            .map_err(|_| SimError::RouteInfeasible(run.id))
    }

    fn build_groups(&mut self, dropped: &BTreeSet<ClientId>) -> Result<Vec<GroupRun>, SimError> {
        let mode = self.config.arithmetic;
        let d = self.global.dim();
        let live = |s: &Self, m: &ClientId| !dropped.contains(m) && !s.is_revoked(*m);
        let scopes: Vec<(ClusterId, Vec<ClusterId>)> = match self.config.protocol {
            Protocol::Cfl => self.plan.clusters.iter().map(|c| (c.id, vec![c.id])).collect(),
            Protocol::Ppt => vec![(ClusterId(0), self.plan.clusters.iter().map(|c| c.id).collect())],
        };
        let mut groups = Vec::with_capacity(scopes.len());
        for (id, clusters) in scopes {
            let members: Vec<ClientId> = clusters
                .iter()
                .flat_map(|c| self.plan.active_members(*c))
                .filter(|m| live(self, m))
                .collect();
            let targets: BTreeSet<ClientId> = clusters
                .iter()
                .flat_map(|c| self.plan.cluster(*c).targets.iter().copied())
                .filter(|m| live(self, m))
                .collect();
            if targets.is_empty() {
                groups.push(GroupRun::idle(id, ClusterStatus::NoTargets, 0, mode, d));
                continue;
            }
            let member_set: BTreeSet<ClientId> = members.iter().copied().collect();
            let preferred = self.plan.cluster(clusters[0]).leader;
            let Some((leader, acting)) = self.round_leader(&clusters, preferred, &targets, &member_set, u64::from(id.0))
            else {
                groups.push(GroupRun::idle(id, ClusterStatus::NoLeader, targets.len(), mode, d));
                continue;
            };
            if leader != preferred {
                self.log_at(self.clock_ms, LogKind::LeaderChange { cluster: id, leader, acting });
            }
            let data_size = targets.iter().map(|t| self.workload.sizes[t]).sum();
            let mut run = GroupRun {
                id,
                status: None,
                leader: Some(leader),
                acting,
                live_targets: targets.len(),
                members,
                contributors: targets,
                data_size,
                route: None,
                attempt: 0,
                mask: None,
                added: BTreeSet::new(),
                prefix: AccVector::zeros(mode, d),
                sum: None,
            };
            run.route = Some(self.plan_group_route(&run)?);
            groups.push(run);
        }
        Ok(groups)
    }

    fn train(&self, contributors: &[ClientId]) -> Result<Vec<ModelVector>, SimError> {
        let global = &self.global;
        let trainer = &self.workload.trainer;
        let shards = &self.workload.shards;
        let (seed, round) = (self.config.seed, self.round);
        contributors
            .par_iter()
            .map(|c| {
                let shard = shards
                    .get(c)
                    .ok_or_else(|| TrainerError::Dataset(format!("no shard for {c}")))?;
                let w = trainer.train(global, shard, rng::derive_seed(seed, &[label::TRAIN, round, u64::from(c.0)]))?;
                compute_update(&w, global)
            })
            .collect::<Result<Vec<_>, TrainerError>>()
            .map_err(SimError::from)
    }

    fn next_counter(&mut self, from: ClientId, to: ClientId) -> u32 {
        let c = self.counters.entry(from).or_insert(0);
        let v = *c;
        *c += 1;
        // Low bit is the link direction so both ends never share a nonce.
        (v << 1) | u32::from(from > to)
    }

    #[allow(clippy::too_many_arguments)]
    fn send_hop(
        &mut self,
        cx: &mut RoundCtx,
        q: &mut EventQueue<Ev>,
        g: usize,
        run: &GroupRun,
        pos: usize,
        acc: &MaskedAccumulator,
        own: Option<&AccVector>,
        now: u64,
    ) -> Result<(), SimError> {
        let route = run.route.as_ref().expect("route");
        let (from, to) = (route.order[pos], route.order[pos + 1]);
        let key = self
            .link_key(from, to)
            .ok_or(SimError::NotNeighbor { from, to: Endpoint::Client(to) })?;
        let counter = self.next_counter(from, to);
        let (next, mut env) = relay_step(acc, own, &mut self.sealer, &key, (from, to), counter, now)?;
        match self.faults.hijacked.get(&from) {
            Some(AttackScript::Tamper) => {
                let mut r = rng::stream(self.config.seed, &[label::ATTACK, self.round, u64::from(counter)]);
                let bit = r.random_range(0..env.sealed_bits());
                env.flip_bit(bit);
            }
            Some(AttackScript::Impersonate) => {
                let forged = crypto::ae_gen(128, rng::derive_seed(self.config.seed, &[label::ATTACK, u64::from(from.0)]))
                    .expect("128-bit");
                let payload = StampedPayload {
                    payload: next.to_bytes(),
                    timestamp: Timestamp {
                        round: next.round,
                        step: next.hop_index,
                        wall_ms: now,
                    },
                };
                env = self.sealer.encrypt(&payload, &forged, env.nonce, (from, to)).map_err(AggregationError::from)?;
            }
            Some(AttackScript::EavesdropLog) => cx.eavesdrop.push(EavesdropRecord {
                observer: from,
                cluster: run.id,
                hop: acc.hop_index,
                ciphertext: env.ciphertext.clone(),
                tag: env.tag,
                accumulator: acc.vector.clone(),
            }),
            None => {}
        }
        let bytes = env.wire_len();
        let arrival = self.deliver(&mut cx.ledger, now, MessageKind::Hop, Some(run.id), from, Endpoint::Client(to), bytes)?;
        self.log_at(now, LogKind::Deliver { cluster: run.id, from, to, bytes });
        q.push(
            arrival,
            Ev::Hop {
                g,
                attempt: run.attempt,
                pos: pos + 1,
                from,
                to,
                env,
            },
        );
        Ok(())
    }

    fn finish_group(
        &mut self,
        cx: &mut RoundCtx,
        q: &mut EventQueue<Ev>,
        g: usize,
        run: &mut GroupRun,
        acc: &MaskedAccumulator,
        now: u64,
    ) -> Result<(), SimError> {
        let sum = unmask_and_sum(acc, run.mask.as_ref().expect("mask"))?;
        let leader = run.leader.expect("leader");
        let bytes = NONCE_BYTES + sum.to_bytes().len() + TAG_BYTES;
        let arrival = self.deliver(&mut cx.ledger, now, MessageKind::Upload, Some(run.id), leader, Endpoint::Server, bytes)?;
        self.log_at(now, LogKind::Upload { cluster: run.id, from: leader, bytes });
        run.sum = Some(sum);
        q.push(arrival, Ev::Upload { g });
        Ok(())
    }

    fn start_attempt(
        &mut self,
        cx: &mut RoundCtx,
        q: &mut EventQueue<Ev>,
        g: usize,
        run: &mut GroupRun,
        contrib: &BTreeMap<ClientId, AccVector>,
        now: u64,
    ) -> Result<(), SimError> {
        run.attempt += 1;
        self.log_at(now, LogKind::Timer { cluster: run.id, attempt: run.attempt });
        if run.attempt > 1 {
            run.route = Some(self.plan_group_route(run)?);
        }
        let mode = self.config.arithmetic;
        let d = self.global.dim();
        let leader = run.leader.expect("leader");
        let lead_x = contrib.get(&leader).cloned().unwrap_or_else(|| AccVector::zeros(mode, d));
        let s = draw_mask(
            mode,
            d,
            self.config.mask_bound,
            rng::derive_seed(self.config.seed, &[label::MASK, self.round, u64::from(run.id.0), u64::from(run.attempt)]),
        );
        let acc = MaskedAccumulator {
            vector: lead_x.add(&s)?,
            hop_index: 0,
            round: self.round,
        };
        run.added = if contrib.contains_key(&leader) {
            BTreeSet::from([leader])
        } else {
            BTreeSet::new()
        };
        run.prefix = lead_x;
        if let Some(instr) = cx.instr.as_mut() {
            instr.masks.entry(run.id).or_default().push(s.clone());
        }
        run.mask = Some(s);
        if run.route.as_ref().expect("route").hops() == 0 {
            self.finish_group(cx, q, g, run, &acc, now)
        } else {
            self.send_hop(cx, q, g, run, 0, &acc, None, now)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_hop(
        &mut self,
        cx: &mut RoundCtx,
        q: &mut EventQueue<Ev>,
        g: usize,
        run: &mut GroupRun,
        contrib: &BTreeMap<ClientId, AccVector>,
        (attempt, pos, from, to): (u32, usize, ClientId, ClientId),
        env: &Envelope,
        now: u64,
    ) -> Result<(), SimError> {
        if run.status.is_some() || attempt != run.attempt {
            return Ok(());
        }
        let key = self
            .link_key(from, to)
            .ok_or(SimError::NotNeighbor { from, to: Endpoint::Client(to) })?;
        let window = self.config.timestamp_window_ms;
        match receive(env, &key, from, to, (self.round, pos as u32), now, window) {
            Err(AggregationError::AuthFailure { .. } | AggregationError::StaleTimestamp { .. }) => {
                cx.auth_failures.push((from, to));
                self.log_at(now, LogKind::AuthFailure { cluster: run.id, from, to });
                self.failed_edges.insert(ordered(from, to));
                self.observe(cx, now, to, from);
                if self.config.retry_on_failure && run.attempt < 2 {
                    q.push(now, Ev::Start { g });
                } else {
                    run.status = Some(ClusterStatus::Aborted);
                    self.log_at(now, LogKind::ClusterDone { cluster: run.id, status: ClusterStatus::Aborted });
                }
                Ok(())
            }
            Err(e) => Err(e.into()),
            Ok(acc) => {
                let last = pos + 1 == run.route.as_ref().expect("route").order.len();
                if let Some(instr) = cx.instr.as_mut() {
                    instr.observations.push(HopObservation {
                        cluster: run.id,
                        attempt: run.attempt,
                        hop: pos as u32,
                        holder: to,
                        is_leader: Some(to) == run.leader,
                        accumulator: acc.vector.clone(),
                        prefix: run.prefix.clone(),
                    });
                }
                if last {
                    return self.finish_group(cx, q, g, run, &acc, now);
                }
                let own = if run.contributors.contains(&to) && run.added.insert(to) {
                    let x = contrib[&to].clone();
                    run.prefix = run.prefix.add(&x)?;
                    Some(x)
                } else {
                    None
                };
                self.send_hop(cx, q, g, run, pos, &acc, own.as_ref(), now)
            }
        }
    }

    /// One round with locally trained updates.
    pub fn run_round(&mut self) -> Result<RoundReport, SimError> {
        self.run_round_inner(None)
    }

    /// One round with the given model updates `x_i` instead of training.
    pub fn run_round_with_updates(&mut self, updates: &BTreeMap<ClientId, ModelVector>) -> Result<RoundReport, SimError> {
        self.run_round_inner(Some(updates))
    }

    fn run_round_inner(&mut self, supplied: Option<&BTreeMap<ClientId, ModelVector>>) -> Result<RoundReport, SimError> {
        let round = self.round;
        let t0 = self.clock_ms;
        let mode = self.config.arithmetic;
        let d = self.global.dim();
        let mut cx = RoundCtx::new(self.config.instrument);
        self.log_at(t0, LogKind::RoundStart);

        let period = self.config.rekey_period;
        if self.config.protocol == Protocol::Cfl && period > 0 && round > 0 && round.is_multiple_of(period) {
            let everyone: BTreeSet<ClientId> = self
                .active_clients()
                .into_iter()
                .filter(|c| !self.is_revoked(*c))
                .collect();
            self.rekey_clients(&mut cx, t0, &everyone)?;
        }

        let eligible: Vec<ClientId> = self.plan.all_targets().filter(|t| !self.is_revoked(*t)).collect();
        let dropped = self.faults.draw_dropouts(round, &eligible);
        for &client in &dropped {
            self.log_at(t0, LogKind::Dropout { client });
        }

        let mut groups = self.build_groups(&dropped)?;
        let contributors: Vec<ClientId> = groups.iter().flat_map(|g| g.contributors.iter().copied()).collect();
        let updates = match supplied {
            Some(map) => contributors
                .iter()
                .map(|c| {
                    map.get(c)
                        .cloned()
                        .ok_or_else(|| SimError::Config(format!("no update supplied for {c}")))
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => self.train(&contributors)?,
        };
        if let Some(bad) = updates.iter().find(|u| u.dim() != d) {
            return Err(TrainerError::DimensionMismatch {
                expected: d,
                got: bad.dim(),
            }
            .into());
        }
        let update_of: BTreeMap<ClientId, ModelVector> = contributors.iter().copied().zip(updates).collect();
        let mut contrib = BTreeMap::new();
        for run in &groups {
            for c in &run.contributors {
                let size = self.workload.sizes[c];
                let p = size as f64 / run.data_size as f64;
                contrib.insert(*c, AccVector::contribution(mode, &update_of[c], size, p));
            }
        }
        if let Some(instr) = cx.instr.as_mut() {
            instr.contributions = contrib.clone();
            instr.updates = update_of.clone();
        }

        let mut q = EventQueue::new();
        for (i, run) in groups.iter().enumerate() {
            if run.status.is_none() {
                q.push(t0 + self.config.announce_timeout_ms, Ev::Start { g: i });
            }
        }
        let mut now = t0;
        while let Some((t, _, ev)) = q.pop() {
            now = t;
            match ev {
                Ev::Start { g } => {
                    let mut run = std::mem::replace(&mut groups[g], GroupRun::idle(ClusterId(0), ClusterStatus::NoTargets, 0, mode, 0));
                    let r = self.start_attempt(&mut cx, &mut q, g, &mut run, &contrib, now);
                    groups[g] = run;
                    r?;
                }
                Ev::Hop { g, attempt, pos, from, to, env } => {
                    let mut run = std::mem::replace(&mut groups[g], GroupRun::idle(ClusterId(0), ClusterStatus::NoTargets, 0, mode, 0));
                    let r = self.on_hop(&mut cx, &mut q, g, &mut run, &contrib, (attempt, pos, from, to), &env, now);
                    groups[g] = run;
                    r?;
                }
                Ev::Upload { g } => {
                    groups[g].status = Some(ClusterStatus::Completed);
                    let cluster = groups[g].id;
                    self.log_at(now, LogKind::ClusterDone { cluster, status: ClusterStatus::Completed });
                }
            }
        }

        let pending: Vec<ClientId> = cx.pending_revocations.iter().copied().collect();
        for suspect in pending {
            self.apply_revocation(&mut cx, now, suspect)?;
        }

        let completed: Vec<&GroupRun> = groups
            .iter()
            .filter(|g| g.status == Some(ClusterStatus::Completed))
            .collect();
        let total: u64 = completed.iter().map(|g| g.data_size).sum();
        let sums: Vec<ClusterSum> = completed
            .iter()
            .map(|g| ClusterSum {
                cluster: g.id,
                sum: g.sum.clone().expect("completed"),
                data_size: g.data_size,
                q: g.data_size as f64 / total as f64,
            })
            .collect();
        let sum = if sums.is_empty() {
            ModelVector::zeros(d)
        } else {
            aggregation::cross_cluster_aggregate(&sums)?
        };
        let w_norm = self.global.norm();
        let update_norm = if w_norm > 0.0 { sum.norm() / w_norm } else { sum.norm() };
        self.global = aggregation::global_update(&self.global, &sum)?;

        let clusters: Vec<ClusterReport> = groups
            .iter()
            .map(|g| {
                let done = g.status == Some(ClusterStatus::Completed);
                ClusterReport {
                    cluster: g.id,
                    status: g.status.unwrap_or(ClusterStatus::Aborted),
                    leader: g.leader,
                    acting_leader: g.acting,
                    live_targets: g.live_targets,
                    contributors: if done { g.contributors.iter().copied().collect() } else { Vec::new() },
                    data_size: g.data_size,
                    q: if done { g.data_size as f64 / total as f64 } else { 0.0 },
                    attempts: g.attempt,
                    hops: g.route.as_ref().map_or(0, AggregationRoute::hops),
                    revisits: g.route.as_ref().map_or(0, AggregationRoute::revisits),
                    route: g.route.as_ref().map(|r| r.order.clone()).unwrap_or_default(),
                    sum: g.sum.clone().filter(|_| done),
                }
            })
            .collect();
        let contributors: Vec<(ClientId, u64)> = completed
            .iter()
            .flat_map(|g| g.contributors.iter().map(|c| (*c, self.workload.sizes[c])))
            .collect();

        self.log_at(now, LogKind::RoundEnd);
        self.round += 1;
        self.clock_ms = now + self.config.latency_ms;

        let ledger = cx.ledger;
        Ok(RoundReport {
            round,
            protocol: self.config.protocol,
            arithmetic: mode,
            hash_fn: VOTE_HASH.to_string(),
            weight_policy: WEIGHT_POLICY.to_string(),
            hops: ledger.hops,
            uploads: ledger.uploads,
            aggregation_messages: ledger.hops + ledger.uploads,
            broadcast_messages: ledger.broadcasts,
            messages_sent: ledger.messages(),
            bytes_sent: ledger.bytes,
            dropouts: dropped.into_iter().collect(),
            auth_failures: cx.auth_failures,
            votes: cx.votes,
            revoked: cx.revoked,
            rekeyed: cx.rekeyed.into_iter().collect(),
            clusters,
            contributors,
            sum,
            global: self.global.clone(),
            update_norm,
            trace: ledger.trace,
            eavesdrop: cx.eavesdrop,
            instrumentation: cx.instr,
        })
    }
}
