//! Per-round reports, message traces and the structured event log.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::aggregation::{AccVector, Arithmetic};
use crate::crypto::TAG_BYTES;
use crate::topology::{ClientId, ClusterId};
use crate::trainer::ModelVector;

use super::faults::AttackScript;
use super::Protocol;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Client(ClientId),
    Server,
    /// Local broadcast to every single-hop neighbour.
    Neighbors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Accumulator relay between two clients.
    Hop,
    /// Leader to server.
    Upload,
    /// One transmission of a neighbourhood flood.
    Broadcast,
    /// One hop of a key-discovery reply.
    Reply,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time_ms: u64,
    pub kind: MessageKind,
    pub cluster: Option<ClusterId>,
    pub from: ClientId,
    pub to: Endpoint,
    pub bytes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStatus {
    Completed,
    /// Authentication failed on every attempt.
    Aborted,
    /// Every target dropped out or was revoked.
    NoTargets,
    /// No live server-adjacent member to start the cycle.
    NoLeader,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster: ClusterId,
    pub status: ClusterStatus,
    pub leader: Option<ClientId>,
    /// Leader for this round is a non-target relay contributing nothing.
    pub acting_leader: bool,
    pub live_targets: usize,
    pub contributors: Vec<ClientId>,
    pub data_size: u64,
    /// Cluster weight used at the server (0 unless completed).
    pub q: f64,
    pub attempts: u32,
    pub hops: usize,
    pub revisits: usize,
    /// Route of the last attempt.
    pub route: Vec<ClientId>,
    pub sum: Option<AccVector>,
}

/// What a relay holds after decrypting, next to the plaintext prefix sum of
/// contributions folded in before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopObservation {
    pub cluster: ClusterId,
    pub attempt: u32,
    pub hop: u32,
    pub holder: ClientId,
    pub is_leader: bool,
    pub accumulator: AccVector,
    pub prefix: AccVector,
}

/// Everything an eavesdropping hijacked relay saw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EavesdropRecord {
    pub observer: ClientId,
    pub cluster: ClusterId,
    pub hop: u32,
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_BYTES],
    pub accumulator: AccVector,
}

/// Test-harness view: masks, contributions and every relay observation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Instrumentation {
    /// One mask per attempt.
    pub masks: BTreeMap<ClusterId, Vec<AccVector>>,
    pub contributions: BTreeMap<ClientId, AccVector>,
    pub updates: BTreeMap<ClientId, ModelVector>,
    pub observations: Vec<HopObservation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub protocol: Protocol,
    pub arithmetic: Arithmetic,
    pub hash_fn: String,
    pub weight_policy: String,
    /// Relay hops between clients.
    pub hops: usize,
    /// Leader uploads to the server.
    pub uploads: usize,
    /// `hops + uploads`: the transmissions a round of aggregation costs.
    pub aggregation_messages: usize,
    /// Neighbourhood-broadcast transmissions plus key-discovery reply hops.
    pub broadcast_messages: usize,
    pub messages_sent: usize,
    pub bytes_sent: usize,
    pub dropouts: Vec<ClientId>,
    pub auth_failures: Vec<(ClientId, ClientId)>,
    /// `(voter, suspect)` for each vote cast.
    pub votes: Vec<(ClientId, ClientId)>,
    pub revoked: Vec<ClientId>,
    pub rekeyed: Vec<ClientId>,
    pub clusters: Vec<ClusterReport>,
    pub contributors: Vec<(ClientId, u64)>,
    pub sum: ModelVector,
    pub global: ModelVector,
    /// `‖SUM‖ / ‖W‖` (or `‖SUM‖` when `W = 0`).
    pub update_norm: f64,
    pub trace: Vec<TraceEntry>,
    pub eavesdrop: Vec<EavesdropRecord>,
    pub instrumentation: Option<Instrumentation>,
}

impl RoundReport {
    pub fn all_completed(&self) -> bool {
        self.clusters
            .iter()
            .all(|c| matches!(c.status, ClusterStatus::Completed | ClusterStatus::NoTargets))
    }

    pub const CSV_HEADER: [&'static str; 12] = [
        "round",
        "protocol",
        "messages_sent",
        "aggregation_messages",
        "hops",
        "uploads",
        "broadcast_messages",
        "bytes_sent",
        "dropouts",
        "contributors",
        "update_norm",
        "clusters",
    ];

    pub fn csv_row(&self) -> Vec<String> {
        let clusters = self
            .clusters
            .iter()
            .map(|c| format!("{}:{}", c.cluster.0, status_name(c.status)))
            .collect::<Vec<_>>()
            .join(";");
        vec![
            self.round.to_string(),
            protocol_name(self.protocol).to_string(),
            self.messages_sent.to_string(),
            self.aggregation_messages.to_string(),
            self.hops.to_string(),
            self.uploads.to_string(),
            self.broadcast_messages.to_string(),
            self.bytes_sent.to_string(),
            self.dropouts.len().to_string(),
            self.contributors.len().to_string(),
            format!("{:.9e}", self.update_norm),
            clusters,
        ]
    }
}

pub fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Cfl => "cfl",
        Protocol::Ppt => "ppt",
    }
}

fn status_name(s: ClusterStatus) -> &'static str {
    match s {
        ClusterStatus::Completed => "completed",
        ClusterStatus::Aborted => "aborted",
        ClusterStatus::NoTargets => "no_targets",
        ClusterStatus::NoLeader => "no_leader",
    }
}

pub fn write_reports_csv<W: Write>(reports: &[RoundReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RoundReport::CSV_HEADER)?;
    for r in reports {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogKind {
    RoundStart,
    Dropout { client: ClientId },
    Hijack { client: ClientId, script: AttackScript },
    LeaderChange { cluster: ClusterId, leader: ClientId, acting: bool },
    Timer { cluster: ClusterId, attempt: u32 },
    Deliver { cluster: ClusterId, from: ClientId, to: ClientId, bytes: usize },
    Upload { cluster: ClusterId, from: ClientId, bytes: usize },
    Broadcast { origin: ClientId, purpose: String, reached: usize },
    AuthFailure { cluster: ClusterId, from: ClientId, to: ClientId },
    Vote { voter: ClientId, suspect: ClientId, marked: usize, threshold: usize },
    IgnoredVote { voter: ClientId, suspect: ClientId },
    Revocation { suspect: ClientId, affected: Vec<ClientId> },
    Rekey { clients: Vec<ClientId> },
    ClusterDone { cluster: ClusterId, status: ClusterStatus },
    RoundEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub round: u64,
    pub time_ms: u64,
    pub seq: u64,
    #[serde(flatten)]
    pub event: LogKind,
}

/// One JSON object per line.
pub fn write_ndjson<W: Write, T: Serialize>(items: &[T], mut out: W) -> std::io::Result<()> {
    for e in items {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
