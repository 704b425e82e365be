//! Masked in-cluster aggregation along a depth-first route, envelope relay,
//! unmasking, cross-cluster weighting and the global update.
//!
//! Two arithmetic modes. In fixed-point mode each target contributes the
//! integer numerator `Q(|D_i| · x_i)` (scale 2^32, wrapping `i64`) and the
//! server divides the total by the summed data size, so the hierarchical
//! result is bit-identical to the flat one. Float mode carries `p · x` and
//! weights cluster sums by `q`.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, AeKey, CryptoError, Envelope, EnvelopeSealer, Nonce, StampedPayload, Timestamp};
use crate::graph::LinkGraph;
use crate::rng::{self, label};
use crate::topology::{ClientId, ClusterId};
use crate::trainer::ModelVector;

pub const FIXED_SCALE: f64 = 4_294_967_296.0;
pub const DEFAULT_MASK_BOUND: f64 = 1_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("no route covers every live target of cluster {0}")]
    RouteInfeasible(ClusterId),
    #[error("authentication failed on envelope from {from} to {to}")]
    AuthFailure { from: ClientId, to: ClientId },
    #[error("stale timestamp on envelope from {from} to {to}")]
    StaleTimestamp { from: ClientId, to: ClientId },
    #[error("malformed accumulator payload")]
    Malformed,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("cluster weights sum to {0}, expected 1")]
    WeightMismatch(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("mixed arithmetic modes")]
    ModeMismatch,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arithmetic {
    #[default]
    Fixed,
    Float,
}

pub fn quantize(v: f64) -> i64 {
    (v * FIXED_SCALE).round() as i64
}

pub fn dequantize(v: i64) -> f64 {
    v as f64 / FIXED_SCALE
}

/// Vector carried by the accumulator in either arithmetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccVector {
    Fixed(Vec<i64>),
    Float(Vec<f64>),
}

impl AccVector {
    pub fn zeros(mode: Arithmetic, d: usize) -> Self {
        match mode {
            Arithmetic::Fixed => AccVector::Fixed(vec![0; d]),
            Arithmetic::Float => AccVector::Float(vec![0.0; d]),
        }
    }

    pub fn mode(&self) -> Arithmetic {
        match self {
            AccVector::Fixed(_) => Arithmetic::Fixed,
            AccVector::Float(_) => Arithmetic::Float,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AccVector::Fixed(v) => v.len(),
            AccVector::Float(v) => v.len(),
        }
    }

    /// A target's contribution: `Q(size · x)` or `weight · x`.
    pub fn contribution(mode: Arithmetic, x: &ModelVector, size: u64, weight: f64) -> Self {
        match mode {
            Arithmetic::Fixed => AccVector::Fixed(x.values.iter().map(|v| quantize(size as f64 * v)).collect()),
            Arithmetic::Float => AccVector::Float(x.values.iter().map(|v| weight * v).collect()),
        }
    }

    fn zip_with(
        &self,
        other: &Self,
        fi: impl Fn(i64, i64) -> i64,
        ff: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, AggregationError> {
        if self.dim() != other.dim() {
            return Err(AggregationError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        match (self, other) {
            (AccVector::Fixed(a), AccVector::Fixed(b)) => {
                Ok(AccVector::Fixed(a.iter().zip(b).map(|(x, y)| fi(*x, *y)).collect()))
            }
            (AccVector::Float(a), AccVector::Float(b)) => {
                Ok(AccVector::Float(a.iter().zip(b).map(|(x, y)| ff(*x, *y)).collect()))
            }
            _ => Err(AggregationError::ModeMismatch),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, AggregationError> {
        self.zip_with(other, i64::wrapping_add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, AggregationError> {
        self.zip_with(other, i64::wrapping_sub, |a, b| a - b)
    }

    pub fn is_zero(&self) -> bool {
        match self {
            AccVector::Fixed(v) => v.iter().all(|x| *x == 0),
            AccVector::Float(v) => v.iter().all(|x| *x == 0.0),
        }
    }

    /// `mode (u8) ‖ d (u64 LE) ‖ 64-bit LE values`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 8 * self.dim());
        match self {
            AccVector::Fixed(v) => {
                out.push(0);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            AccVector::Float(v) => {
                out.push(1);
                out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AggregationError> {
        let (&tag, rest) = bytes.split_first().ok_or(AggregationError::Malformed)?;
        let (head, body) = rest.split_at_checked(8).ok_or(AggregationError::Malformed)?;
        let d = u64::from_le_bytes(head.try_into().expect("8 bytes")) as usize;
        if body.len() != d.checked_mul(8).ok_or(AggregationError::Malformed)? {
            return Err(AggregationError::Malformed);
        }
        let words = body.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8 bytes"));
        match tag {
            0 => Ok(AccVector::Fixed(words.map(i64::from_le_bytes).collect())),
            1 => Ok(AccVector::Float(words.map(f64::from_le_bytes).collect())),
            _ => Err(AggregationError::Malformed),
        }
    }
}

/// Running masked sum `X̂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedAccumulator {
    pub vector: AccVector,
    pub hop_index: u32,
    pub round: u64,
}

impl MaskedAccumulator {
    /// `round (u64 LE) ‖ hop (u32 LE) ‖ vector`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.hop_index.to_le_bytes());
        out.extend_from_slice(&self.vector.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AggregationError> {
        if bytes.len() < 12 {
            return Err(AggregationError::Malformed);
        }
        Ok(Self {
            round: u64::from_le_bytes(bytes[0..8].try_into().expect("8 bytes")),
            hop_index: u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")),
            vector: AccVector::from_bytes(&bytes[12..])?,
        })
    }
}

/// Uniform noise in `[−bound, bound]` per dimension (scaled in fixed mode).
pub fn draw_mask(mode: Arithmetic, d: usize, bound: f64, seed: u64) -> AccVector {
    let mut rng = rng::stream(seed, &[label::MASK]);
    match mode {
        Arithmetic::Fixed => {
            let b = quantize(bound).max(0);
            AccVector::Fixed((0..d).map(|_| rng.random_range(-b..=b)).collect())
        }
        Arithmetic::Float => {
            AccVector::Float((0..d).map(|_| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 }).collect())
        }
    }
}

/// `X̂ = X + s`; returns `(X̂, s)`.
pub fn mask(leader_x: &AccVector, bound: f64, seed: u64) -> (AccVector, AccVector) {
    let s = draw_mask(leader_x.mode(), leader_x.dim(), bound, seed);
    (leader_x.add(&s).expect("same shape"), s)
}

/// `sum_h = X̂ − s`.
pub fn unmask_and_sum(acc: &MaskedAccumulator, s: &AccVector) -> Result<AccVector, AggregationError> {
    acc.vector.sub(s)
}

/// Closed walk from the leader over the key graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationRoute {
    pub cluster: ClusterId,
    pub order: Vec<ClientId>,
}

impl AggregationRoute {
    pub fn hops(&self) -> usize {
        self.order.len().saturating_sub(1)
    }

    pub fn leader(&self) -> ClientId {
        self.order[0]
    }

    /// Positions at which each client appears for the first time.
    pub fn first_visits(&self) -> Vec<bool> {
        let mut seen = BTreeSet::new();
        self.order.iter().map(|c| seen.insert(*c)).collect()
    }

    /// Number of hops that return to an already visited client, excluding
    /// the final arrival at the leader.
    pub fn revisits(&self) -> usize {
        let first = self.first_visits();
        if first.len() < 3 {
            return 0;
        }
        first[1..first.len() - 1].iter().filter(|f| !**f).count()
    }
}

fn reaches_unvisited(
    graph: &LinkGraph,
    from: ClientId,
    blocked: &BTreeSet<ClientId>,
    pending: &BTreeSet<ClientId>,
) -> bool {
    if pending.contains(&from) {
        return true;
    }
    let mut seen = BTreeSet::from([from]);
    let mut stack = vec![from];
    while let Some(u) = stack.pop() {
        for v in graph.neighbors(u) {
            if blocked.contains(&v) || !seen.insert(v) {
                continue;
            }
            if pending.contains(&v) {
                return true;
            }
            stack.push(v);
        }
    }
    false
}

/// Depth-first walk from `leader` that visits every target, then returns to
/// the leader along a shortest path. Non-target nodes in `graph` may relay.
/// Unvisited targets are preferred, fewest onward options first, then the
/// smallest id.
pub fn plan_route(
    cluster: ClusterId,
    graph: &LinkGraph,
    targets: &BTreeSet<ClientId>,
    leader: ClientId,
) -> Result<AggregationRoute, AggregationError> {
    if !graph.contains(leader) || !targets.contains(&leader) {
        return Err(AggregationError::RouteInfeasible(cluster));
    }
    let reach = graph.reachable(leader);
    if !targets.iter().all(|t| reach.contains(t)) {
        return Err(AggregationError::RouteInfeasible(cluster));
    }
    let mut pending: BTreeSet<ClientId> = targets.clone();
    pending.remove(&leader);
    let mut visited = BTreeSet::from([leader]);
    let mut stack = vec![leader];
    let mut walk = vec![leader];
    while !pending.is_empty() {
        let cur = *stack.last().ok_or(AggregationError::RouteInfeasible(cluster))?;
        let next_target = graph
            .neighbors(cur)
            .filter(|n| pending.contains(n))
            .min_by_key(|n| {
                let onward = graph.neighbors(*n).filter(|m| !visited.contains(m)).count();
                (onward, *n)
            });
        let next = next_target.or_else(|| {
            graph
                .neighbors(cur)
                .find(|n| !visited.contains(n) && reaches_unvisited(graph, *n, &visited, &pending))
        });
        match next {
            Some(n) => {
                visited.insert(n);
                pending.remove(&n);
                stack.push(n);
                walk.push(n);
            }
            None => {
                stack.pop();
                let back = *stack.last().ok_or(AggregationError::RouteInfeasible(cluster))?;
                walk.push(back);
            }
        }
    }
    let end = *walk.last().expect("nonempty");
    if end != leader {
        let home = graph
            .shortest_path(end, leader)
            .ok_or(AggregationError::RouteInfeasible(cluster))?;
        walk.extend_from_slice(&home[1..]);
    }
    Ok(AggregationRoute { cluster, order: walk })
}

/// Adds `own` (first visit of a target) and seals the accumulator for the
/// next hop.
#[allow(clippy::too_many_arguments)]
pub fn relay_step(
    acc: &MaskedAccumulator,
    own: Option<&AccVector>,
    sealer: &mut EnvelopeSealer,
    key: &AeKey,
    pair: (ClientId, ClientId),
    sender_counter: u32,
    wall_ms: u64,
) -> Result<(MaskedAccumulator, Envelope), AggregationError> {
    let vector = match own {
        Some(x) => acc.vector.add(x)?,
        None => acc.vector.clone(),
    };
    let next = MaskedAccumulator {
        vector,
        hop_index: acc.hop_index + 1,
        round: acc.round,
    };
    let payload = StampedPayload {
        payload: next.to_bytes(),
        timestamp: Timestamp {
            round: next.round,
            step: next.hop_index,
            wall_ms,
        },
    };
    let env = sealer.encrypt(
        &payload,
        key,
        Nonce::from_parts(next.round, next.hop_index, sender_counter),
        pair,
    )?;
    Ok((next, env))
}

/// Opens an envelope and checks its timestamp against `(round, step)`.
pub fn receive(
    env: &Envelope,
    key: &AeKey,
    from: ClientId,
    to: ClientId,
    expected: (u64, u32),
    now_ms: u64,
    window_ms: u64,
) -> Result<MaskedAccumulator, AggregationError> {
    let p = crypto::ae_decrypt(env, key).map_err(|_| AggregationError::AuthFailure { from, to })?;
    if !crypto::validate_timestamp(&p, expected, now_ms, window_ms) {
        return Err(AggregationError::StaleTimestamp { from, to });
    }
    let acc = MaskedAccumulator::from_bytes(&p.payload)?;
    if (acc.round, acc.hop_index) != expected {
        return Err(AggregationError::StaleTimestamp { from, to });
    }
    Ok(acc)
}

/// A completed cluster's unmasked sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSum {
    pub cluster: ClusterId,
    pub sum: AccVector,
    /// Summed shard sizes of the contributors.
    pub data_size: u64,
    /// Cluster weight.
    pub q: f64,
}

/// `SUM`. Fixed mode divides the integer total by the summed data size;
/// float mode forms `Σ q_h · sum_h`. Both require `Σ q = 1`.
pub fn cross_cluster_aggregate(sums: &[ClusterSum]) -> Result<ModelVector, AggregationError> {
    let Some(first) = sums.first() else {
        return Err(AggregationError::WeightMismatch(0.0));
    };
    let total_q: f64 = sums.iter().map(|s| s.q).sum();
    if (total_q - 1.0).abs() > 1e-12 {
        return Err(AggregationError::WeightMismatch(total_q));
    }
    let d = first.sum.dim();
    match first.sum.mode() {
        Arithmetic::Fixed => {
            let mut acc = AccVector::zeros(Arithmetic::Fixed, d);
            for s in sums {
                acc = acc.add(&s.sum)?;
            }
            let total: u64 = sums.iter().map(|s| s.data_size).sum();
            Ok(finish_fixed(&acc, total))
        }
        Arithmetic::Float => {
            let mut out = vec![0.0; d];
            for s in sums {
                let AccVector::Float(v) = &s.sum else {
                    return Err(AggregationError::ModeMismatch);
                };
                if v.len() != d {
                    return Err(AggregationError::DimensionMismatch { expected: d, got: v.len() });
                }
                for (o, x) in out.iter_mut().zip(v) {
                    *o += s.q * x;
                }
            }
            Ok(ModelVector::from_vec(out))
        }
    }
}

fn finish_fixed(acc: &AccVector, total: u64) -> ModelVector {
    let AccVector::Fixed(v) = acc else {
        unreachable!("fixed accumulator")
    };
    let denom = total.max(1) as f64;
    ModelVector::from_vec(v.iter().map(|x| dequantize(*x) / denom).collect())
}

/// `W' = W + SUM`.
pub fn global_update(w: &ModelVector, sum: &ModelVector) -> Result<ModelVector, AggregationError> {
    w.add(sum).map_err(|_| AggregationError::DimensionMismatch {
        expected: w.dim(),
        got: sum.dim(),
    })
}

/// Reference: weighted mean of all updates by data size, with no clusters.
pub fn flat_aggregate(mode: Arithmetic, updates: &[(ModelVector, u64)]) -> ModelVector {
    let d = updates.first().map_or(0, |(x, _)| x.dim());
    let total: u64 = updates.iter().map(|(_, s)| s).sum();
    match mode {
        Arithmetic::Fixed => {
            let mut acc = vec![0i64; d];
            for (x, size) in updates {
                for (a, v) in acc.iter_mut().zip(&x.values) {
                    *a = a.wrapping_add(quantize(*size as f64 * v));
                }
            }
            finish_fixed(&AccVector::Fixed(acc), total)
        }
        Arithmetic::Float => {
            let mut out = vec![0.0; d];
            for (x, size) in updates {
                let p = *size as f64 / total as f64;
                for (o, v) in out.iter_mut().zip(&x.values) {
                    *o += p * v;
                }
            }
            ModelVector::from_vec(out)
        }
    }
}
