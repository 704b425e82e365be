//! Experiment drivers behind the command line: training runs, protocol
//! comparisons, seed sweeps, connectivity sweeps and micro-benchmarks.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{draw_mask, mask, unmask_and_sum, AccVector, Arithmetic, MaskedAccumulator};
use crate::config::{ConfigError, ExperimentConfig};
use crate::crypto::{ae_decrypt, ae_gen, EnvelopeSealer, Nonce, StampedPayload, Timestamp};
use crate::keying::KeyingError;
use crate::simnet::{
    write_reports_csv, LogEvent, Protocol, RoundReport, SetupReport, SimError, Simulation, Workload,
};
use crate::topology::{ClientId, ClusterPlan, NetworkTopology, TopologyError};
use crate::trainer::{
    accuracy, centralized_baseline, shard_dataset, shard_sizes, DatasetShard, LogisticTrainer, ModelVector, Sample,
    ShardManifest, SyntheticTask, TrainerError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

impl ExperimentError {
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            ExperimentError::Topology(TopologyError::ClusterInfeasible(_))
                | ExperimentError::Sim(
                    SimError::RouteInfeasible(_)
                        | SimError::Topology(TopologyError::ClusterInfeasible(_))
                        | SimError::Keying(KeyingError::ClusterInfeasible { .. } | KeyingError::RingInfeasible { .. })
                )
        )
    }

    /// 3 for protocol infeasibility, 2 for bad configuration, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_infeasible() {
            return 3;
        }
        match self {
            ExperimentError::Config(_)
            | ExperimentError::Topology(_)
            | ExperimentError::Trainer(TrainerError::Dataset(_) | TrainerError::Csv(_) | TrainerError::Json(_))
            | ExperimentError::Sim(SimError::Config(_)) => 2,
            _ => 1,
        }
    }
}

/// Scenario, data and held-out evaluation set for one run.
pub struct Prepared {
    pub topology: NetworkTopology,
    pub plan: ClusterPlan,
    pub shards: Vec<DatasetShard>,
    pub test_set: Vec<Sample>,
    pub dim: usize,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let (topology, plan) = cfg.scenario.build()?;
    let targets: Vec<ClientId> = plan.all_targets().collect();
    let t = &cfg.training;
    let (shards, test_set, dim) = match &t.manifest {
        Some(path) => {
            let shards = ShardManifest::load(path)?;
            let dim = shards
                .iter()
                .find_map(|s| s.samples.first().map(|x| x.features.len()))
                .ok_or_else(|| TrainerError::Dataset("manifest has no samples".into()))?;
            // No held-out split is shipped with a manifest; evaluate on the pool.
            let pooled = shards.iter().flat_map(|s| s.samples.iter().cloned()).collect();
            (shards, pooled, dim)
        }
        None => {
            let task = SyntheticTask::new(t.dim, t.separation, t.data_seed);
            let shards = shard_dataset(&targets, &t.shards, &task, t.data_seed)?;
            (shards, task.test_set(t.test_samples, t.data_seed), t.dim)
        }
    };
    if let Some(missing) = targets.iter().find(|c| !shards.iter().any(|s| s.owner == **c)) {
        return Err(TrainerError::Dataset(format!("target {missing} has no shard")).into());
    }
    Ok(Prepared {
        topology,
        plan,
        shards,
        test_set,
        dim,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: Protocol,
    pub arithmetic: Arithmetic,
    pub rounds_run: u64,
    pub converged: bool,
    pub epsilon: f64,
    pub messages_sent: usize,
    pub aggregation_messages: usize,
    pub broadcast_messages: usize,
    pub bytes_sent: usize,
    pub setup: SetupReport,
    pub final_accuracy: Option<f64>,
    pub centralized_accuracy: Option<f64>,
    pub weight_policy: String,
}

pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub final_model: ModelVector,
    pub summary: Summary,
    pub events: Vec<LogEvent>,
}

/// A training simulation over the prepared scenario, starting from `W = 0`.
pub fn build_simulation(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Simulation, ExperimentError> {
    let trainer = Arc::new(LogisticTrainer {
        params: cfg.training.params,
    });
    let workload = Workload::new(ModelVector::zeros(prep.dim), prep.shards.clone(), trainer);
    Ok(Simulation::new(
        prep.topology.clone(),
        prep.plan.clone(),
        cfg.sim.clone(),
        cfg.faults.clone(),
        workload,
    )?)
}

/// Runs `rounds` rounds, stopping early once the relative update norm drops
/// below epsilon.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    let mut sim = build_simulation(cfg, &prep)?;
    let eps = cfg.epsilon();
    let mut reports = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.rounds {
        let r = sim.run_round()?;
        converged = !r.contributors.is_empty() && r.update_norm < eps;
        reports.push(r);
        if converged {
            break;
        }
    }
    let final_model = sim.global().clone();
    let (final_accuracy, centralized_accuracy) = if prep.test_set.is_empty() {
        (None, None)
    } else {
        let central = centralized_baseline(&prep.shards, prep.dim, &cfg.training.params, cfg.training.data_seed)?;
        (
            Some(accuracy(&final_model, &prep.test_set)?),
            Some(accuracy(&central, &prep.test_set)?),
        )
    };
    let summary = Summary {
        protocol: cfg.sim.protocol,
        arithmetic: cfg.sim.arithmetic,
        rounds_run: reports.len() as u64,
        converged,
        epsilon: eps,
        messages_sent: reports.iter().map(|r| r.messages_sent).sum(),
        aggregation_messages: reports.iter().map(|r| r.aggregation_messages).sum(),
        broadcast_messages: reports.iter().map(|r| r.broadcast_messages).sum(),
        bytes_sent: reports.iter().map(|r| r.bytes_sent).sum(),
        setup: sim.setup_report().clone(),
        final_accuracy,
        centralized_accuracy,
        weight_policy: crate::simnet::WEIGHT_POLICY.to_string(),
    };
    Ok(RunOutcome {
        reports,
        final_model,
        summary,
        events: sim.event_log().to_vec(),
    })
}

/// `rounds.csv`, `model.json`, `summary.json`, `config.json` and optionally
/// `events.ndjson` under `dir`.
pub fn write_artifacts(outcome: &RunOutcome, cfg: &ExperimentConfig, dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir)?;
    write_reports_csv(&outcome.reports, File::create(dir.join("rounds.csv"))?)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("model.json"))?), &outcome.final_model)
        .map_err(std::io::Error::from)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("summary.json"))?), &outcome.summary)
        .map_err(std::io::Error::from)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;
    if cfg.output.event_log {
        crate::simnet::write_ndjson(&outcome.events, BufWriter::new(File::create(dir.join("events.ndjson"))?))?;
    }
    Ok(())
}

/// Small deterministic updates, one per target; message counts do not
/// depend on their values.
fn probe_updates(plan: &ClusterPlan, dim: usize) -> BTreeMap<ClientId, ModelVector> {
    plan.all_targets()
        .map(|c| {
            let v = (0..dim).map(|j| ((c.0 as f64 + 1.0) * (j as f64 + 1.0)).sin() * 1e-2).collect();
            (c, ModelVector::from_vec(v))
        })
        .collect()
}

/// One round of `protocol` on the configured scenario with probe updates.
pub fn single_round(cfg: &ExperimentConfig, protocol: Protocol) -> Result<RoundReport, ExperimentError> {
    let (topology, plan) = cfg.scenario.build()?;
    let targets: Vec<ClientId> = plan.all_targets().collect();
    let sizes = shard_sizes(targets.len(), &cfg.training.shards, cfg.training.data_seed)?;
    let sizes = targets.iter().copied().zip(sizes.into_iter().map(|s| s as u64)).collect();
    let updates = probe_updates(&plan, cfg.training.dim);
    let workload = Workload::sizes_only(ModelVector::zeros(cfg.training.dim), sizes);
    let sim_cfg = crate::simnet::SimConfig {
        protocol,
        ..cfg.sim.clone()
    };
    let mut sim = Simulation::new(topology, plan, sim_cfg, cfg.faults.clone(), workload)?;
    Ok(sim.run_round_with_updates(&updates)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub dropout_pct: f64,
    pub cfl_messages: usize,
    pub ppt_messages: usize,
    /// `100 · (1 − cfl / ppt)`.
    pub improvement_pct: f64,
}

pub const TABLE_DROPOUTS: [f64; 6] = [0.0, 1.0, 2.0, 5.0, 10.0, 15.0];

/// Aggregation messages of one round for both protocols at each dropout
/// percentage.
pub fn compare(cfg: &ExperimentConfig, dropout_pcts: &[f64]) -> Result<Vec<CompareRow>, ExperimentError> {
    dropout_pcts
        .iter()
        .map(|&pct| {
            let mut c = cfg.clone();
            c.faults.dropout_fraction = pct / 100.0;
            let cfl = single_round(&c, Protocol::Cfl)?.aggregation_messages;
            let ppt = single_round(&c, Protocol::Ppt)?.aggregation_messages;
            Ok(CompareRow {
                dropout_pct: pct,
                cfl_messages: cfl,
                ppt_messages: ppt,
                improvement_pct: 100.0 * (1.0 - cfl as f64 / ppt as f64),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub seed: u64,
    pub cfl_messages: usize,
    pub ppt_messages: usize,
    pub ratio: f64,
}

/// One-round CFL and PPT counts over scenario seeds, in parallel.
pub fn efficiency_sweep(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<EfficiencyRow>, ExperimentError> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.scenario.seed = seed;
            c.sim.seed = seed;
            let cfl = single_round(&c, Protocol::Cfl)?.aggregation_messages;
            let ppt = single_round(&c, Protocol::Ppt)?.aggregation_messages;
            Ok(EfficiencyRow {
                seed,
                cfl_messages: cfl,
                ppt_messages: ppt,
                ratio: cfl as f64 / ppt as f64,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn write_csv<W: std::io::Write, T: Serialize>(rows: &[T], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    Encrypt,
    Decrypt,
    NoiseGeneration,
    NoiseAddition,
    NoiseSubtraction,
}

impl BenchOp {
    pub const ALL: [BenchOp; 5] = [
        BenchOp::Encrypt,
        BenchOp::Decrypt,
        BenchOp::NoiseGeneration,
        BenchOp::NoiseAddition,
        BenchOp::NoiseSubtraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Encrypt => "Encrypt",
            BenchOp::Decrypt => "Decrypt",
            BenchOp::NoiseGeneration => "Noise generation",
            BenchOp::NoiseAddition => "Noise addition",
            BenchOp::NoiseSubtraction => "Noise subtraction",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub operation: String,
    pub dim: usize,
    pub payload_bytes: usize,
    pub iterations: usize,
    pub mean_ns: f64,
}

/// Mean wall time per call of each operation on a `dim`-sized accumulator.
pub fn bench(ops: &[BenchOp], dim: usize, iterations: usize, mode: Arithmetic) -> Vec<BenchRow> {
    let iterations = iterations.max(1);
    let x = ModelVector::from_vec((0..dim).map(|j| (j as f64 * 0.37).sin()).collect());
    let contribution = AccVector::contribution(mode, &x, 500, 0.5);
    let key = ae_gen(128, 1).expect("128-bit key");
    let (masked, s) = mask(&contribution, 1000.0, 3);
    let acc = MaskedAccumulator {
        vector: masked.clone(),
        hop_index: 1,
        round: 0,
    };
    let payload = StampedPayload {
        payload: acc.to_bytes(),
        timestamp: Timestamp {
            round: 0,
            step: 1,
            wall_ms: 0,
        },
    };
    let payload_bytes = payload.to_bytes().len();
    let pair = (ClientId(0), ClientId(1));
    let mut sealer = EnvelopeSealer::new();
    let env = sealer.encrypt(&payload, &key, Nonce::from_parts(0, 0, u32::MAX), pair).expect("fresh nonce");

    ops.iter()
        .map(|&op| {
            let start = Instant::now();
            for i in 0..iterations {
                match op {
                    BenchOp::Encrypt => {
                        let n = Nonce::from_parts(1, i as u32, 0);
                        std::hint::black_box(sealer.encrypt(&payload, &key, n, pair).expect("fresh nonce"));
                    }
                    BenchOp::Decrypt => {
                        std::hint::black_box(ae_decrypt(&env, &key).expect("authentic"));
                    }
                    BenchOp::NoiseGeneration => {
                        std::hint::black_box(draw_mask(mode, dim, 1000.0, i as u64));
                    }
                    BenchOp::NoiseAddition => {
                        std::hint::black_box(contribution.add(&s).expect("same shape"));
                    }
                    BenchOp::NoiseSubtraction => {
                        std::hint::black_box(unmask_and_sum(&acc, &s).expect("same shape"));
                    }
                }
            }
            let elapsed = start.elapsed().as_nanos() as f64;
            BenchRow {
                operation: op.name().to_string(),
                dim,
                payload_bytes,
                iterations,
                mean_ns: elapsed / iterations as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.clients = 60;
        cfg.scenario.clusters = 3;
        cfg.scenario.require_connected = true;
        cfg.training.shards.mean = 40.0;
        cfg.training.shards.spread = 5.0;
        cfg.training.test_samples = 200;
        cfg.rounds = 3;
        cfg
    }

    #[test]
    fn zero_rounds_is_initial_state() {
        let mut cfg = small();
        cfg.rounds = 0;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.reports.is_empty());
        assert_eq!(out.final_model, ModelVector::zeros(cfg.training.dim));
        assert_eq!(out.summary.messages_sent, 0);
    }

    #[test]
    fn loose_epsilon_stops_after_first_round() {
        let mut cfg = small();
        cfg.epsilon = Some(1e9);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.reports.len(), 1);
        assert!(out.summary.converged);
    }

    #[test]
    fn artifacts_are_reproducible() {
        let cfg = small();
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            write_artifacts(&run_experiment(&cfg).unwrap(), &cfg, d.path()).unwrap();
        }
        for f in ["rounds.csv", "model.json", "summary.json", "events.ndjson"] {
            let a = fs::read(dirs[0].path().join(f)).unwrap();
            let b = fs::read(dirs[1].path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }

    #[test]
    fn compare_has_a_row_per_dropout() {
        let rows = compare(&small(), &TABLE_DROPOUTS).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.cfl_messages > 0 && r.ppt_messages > 0));
    }

    #[test]
    fn bench_rows_and_linear_noise_addition() {
        let rows = bench(&BenchOp::ALL, 64, 100, Arithmetic::Fixed);
        let names: Vec<&str> = rows.iter().map(|r| r.operation.as_str()).collect();
        assert_eq!(
            names,
            ["Encrypt", "Decrypt", "Noise generation", "Noise addition", "Noise subtraction"]
        );
        assert!(rows.iter().all(|r| r.payload_bytes > 64 * 8 && r.iterations == 100));
        let small = bench(&[BenchOp::NoiseAddition], 1_000, 300, Arithmetic::Fixed)[0].mean_ns;
        let large = bench(&[BenchOp::NoiseAddition], 100_000, 300, Arithmetic::Fixed)[0].mean_ns;
        assert!(large > 10.0 * small, "{small} vs {large}");
    }

    #[test]
    fn infeasibility_maps_to_exit_three() {
        let e = ExperimentError::Sim(SimError::RouteInfeasible(crate::topology::ClusterId(0)));
        assert_eq!(e.exit_code(), 3);
        let e = ExperimentError::Config(ConfigError::Invalid("x".into()));
        assert_eq!(e.exit_code(), 2);
    }
}
