//! Dropout and hijack scripts.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{self, label};
use crate::topology::ClientId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackScript {
    /// Flips one bit of every outgoing envelope.
    Tamper,
    /// Relays honestly but logs every envelope and accumulator it handles.
    EavesdropLog,
    /// Seals outgoing envelopes under a key it made up.
    Impersonate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    /// Share of targets dropped each round, drawn fresh per round.
    pub dropout_fraction: f64,
    pub dropout_seed: u64,
    /// Extra dropouts for specific rounds.
    pub scripted_dropouts: BTreeMap<u64, BTreeSet<ClientId>>,
    /// Hijacked clients stay hijacked until revoked.
    pub hijacked: BTreeMap<ClientId, AttackScript>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_dropout(fraction: f64, seed: u64) -> Self {
        Self {
            dropout_fraction: fraction,
            dropout_seed: seed,
            ..Self::default()
        }
    }

    /// `round(fraction · |targets|)` targets chosen uniformly, plus any
    /// scripted dropouts among `targets`.
    pub fn draw_dropouts(&self, round: u64, targets: &[ClientId]) -> BTreeSet<ClientId> {
        let k = ((self.dropout_fraction.clamp(0.0, 1.0) * targets.len() as f64).round() as usize).min(targets.len());
        let mut pool = targets.to_vec();
        pool.sort_unstable();
        let mut rng = rng::stream(self.dropout_seed, &[label::DROPOUT, round]);
        pool.shuffle(&mut rng);
        let mut out: BTreeSet<ClientId> = pool.into_iter().take(k).collect();
        if let Some(extra) = self.scripted_dropouts.get(&round) {
            out.extend(extra.iter().filter(|c| targets.contains(c)));
        }
        out
    }
}
