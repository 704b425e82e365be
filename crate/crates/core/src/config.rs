//! Declarative experiment configuration (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simnet::{FaultPlan, SimConfig};
use crate::topology::{NetworkTopology, ClusterOptions, ClusterPlan, ServerLinks, TopologyError};
use crate::topology::{divide_clusters, mark_targets, range_for_mean_degree};
use crate::rng::{self, label};
use crate::trainer::{ShardParams, TrainParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Potential clients.
    pub clients: usize,
    pub area_side: f64,
    /// Radio range; when absent it is solved from `mean_degree`.
    pub range: Option<f64>,
    pub mean_degree: f64,
    pub clusters: usize,
    /// Share of each cluster's active members marked as targets.
    pub target_fraction: f64,
    pub server_links: ServerLinks,
    pub seed: u64,
    /// Redraw positions until the radio graph is connected.
    pub require_connected: bool,
    pub max_attempts: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            clients: 200,
            area_side: 100.0,
            range: None,
            mean_degree: 10.0,
            clusters: 5,
            target_fraction: 0.5,
            server_links: ServerLinks::default(),
            seed: 1,
            require_connected: false,
            max_attempts: 100,
        }
    }
}

impl ScenarioConfig {
    pub fn radio_range(&self) -> f64 {
        self.range
            .unwrap_or_else(|| range_for_mean_degree(self.clients, self.area_side, self.mean_degree))
    }

    /// Places clients, clusters them and marks targets.
    pub fn build(&self) -> Result<(NetworkTopology, ClusterPlan), TopologyError> {
        let range = self.radio_range();
        let attempts = if self.require_connected { self.max_attempts.max(1) } else { 1 };
        let mut topology = NetworkTopology::generate(self.clients, self.area_side, range, self.seed);
        for attempt in 1..attempts {
            let all = topology.clients().collect();
            if topology.components_within(&all).len() <= 1 {
                break;
            }
            let seed = rng::derive_seed(self.seed, &[label::SCENARIO, u64::from(attempt)]);
            topology = NetworkTopology::generate(self.clients, self.area_side, range, seed);
        }
        let options = ClusterOptions {
            server_links: self.server_links.clone(),
            seed: self.seed,
        };
        let plan = divide_clusters(&topology, self.clusters, &options)?;
        let plan = mark_targets(&plan, self.target_fraction, self.seed)?;
        Ok((topology, plan))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Model dimension including the bias term.
    pub dim: usize,
    /// Distance between the two synthetic class means.
    pub separation: f64,
    pub shards: ShardParams,
    pub params: TrainParams,
    pub test_samples: usize,
    pub data_seed: u64,
    /// Shard manifest pointing at a CSV dataset; replaces the synthetic task.
    pub manifest: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            separation: 1.5,
            shards: ShardParams::default(),
            params: TrainParams::default(),
            test_samples: 2000,
            data_seed: 7,
            manifest: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write the full event trace as NDJSON.
    pub event_log: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            event_log: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    /// Protocol, arithmetic, key rings, masking and timing.
    pub sim: SimConfig,
    pub rounds: u64,
    /// Stop once `‖SUM‖ / ‖W‖` falls below this.
    pub epsilon: Option<f64>,
    pub faults: FaultPlan,
    pub training: TrainingConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub const DEFAULT_EPSILON: f64 = 1e-4;

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(Self::DEFAULT_EPSILON)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let s = &self.scenario;
        if s.clients == 0 {
            return bad("scenario.clients must be positive".into());
        }
        if s.clusters == 0 || s.clusters > s.clients {
            return bad(format!("scenario.clusters must be in 1..={}", s.clients));
        }
        if !(s.area_side.is_finite() && s.area_side > 0.0) {
            return bad("scenario.area_side must be positive".into());
        }
        if let Some(r) = s.range {
            if !(r.is_finite() && r >= 0.0) {
                return bad("scenario.range must be finite and ≥ 0".into());
            }
        } else if !(s.mean_degree.is_finite() && s.mean_degree >= 0.0) {
            return bad("scenario.mean_degree must be finite and ≥ 0".into());
        }
        if !(s.target_fraction > 0.0 && s.target_fraction <= 1.0) {
            return bad("scenario.target_fraction must be in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.faults.dropout_fraction) {
            return bad("faults.dropout_fraction must be in [0, 1]".into());
        }
        if let Some(e) = self.epsilon {
            if !(e.is_finite() && e >= 0.0) {
                return bad("epsilon must be finite and ≥ 0".into());
            }
        }
        if self.training.dim < 2 {
            return bad("training.dim must be at least 2".into());
        }
        if !(self.sim.mask_bound.is_finite() && self.sim.mask_bound >= 0.0) {
            return bad("sim.mask_bound must be finite and ≥ 0".into());
        }
        Ok(())
    }
}
