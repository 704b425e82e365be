//! Local training: model vectors, dataset shards, aggregation weights and a
//! reference logistic-regression trainer on synthetic two-class data.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, label};
use crate::topology::{ClientId, ClusterId};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("malformed model bytes")]
    MalformedBytes,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn check_dim(expected: usize, got: usize) -> Result<(), TrainerError> {
    if expected == got {
        Ok(())
    } else {
        Err(TrainerError::DimensionMismatch { expected, got })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVector {
    pub values: Vec<f64>,
}

impl ModelVector {
    pub fn zeros(d: usize) -> Self {
        Self { values: vec![0.0; d] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Self) -> Result<Self, TrainerError> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self::from_vec(
            self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, TrainerError> {
        check_dim(self.dim(), other.dim())?;
        Ok(Self::from_vec(
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::from_vec(self.values.iter().map(|v| v * k).collect())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.values.iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// `d (u64 LE) ‖ values (f64 LE)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.dim());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainerError> {
        let (head, rest) = bytes.split_at_checked(8).ok_or(TrainerError::MalformedBytes)?;
        let d = u64::from_le_bytes(head.try_into().expect("8 bytes")) as usize;
        if rest.len() != d.checked_mul(8).ok_or(TrainerError::MalformedBytes)? {
            return Err(TrainerError::MalformedBytes);
        }
        Ok(Self::from_vec(
            rest.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    /// 0 or 1.
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetShard {
    pub owner: ClientId,
    pub samples: Vec<Sample>,
}

impl DatasetShard {
    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean cross-entropy of the logistic model.
pub fn logistic_loss(w: &ModelVector, samples: &[Sample]) -> Result<f64, TrainerError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        check_dim(w.dim(), s.features.len())?;
        let z = w.dot(&s.features);
        // log(1 + e^z) − y·z, stable for large |z|.
        let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        total += softplus - s.label * z;
    }
    Ok(total / samples.len() as f64)
}

/// Gradient of [`logistic_loss`].
pub fn logistic_gradient(w: &ModelVector, samples: &[Sample]) -> Result<ModelVector, TrainerError> {
    let mut g = vec![0.0; w.dim()];
    if samples.is_empty() {
        return Ok(ModelVector::from_vec(g));
    }
    for s in samples {
        check_dim(w.dim(), s.features.len())?;
        let err = sigmoid(w.dot(&s.features)) - s.label;
        for (gi, xi) in g.iter_mut().zip(&s.features) {
            *gi += err * xi;
        }
    }
    let n = samples.len() as f64;
    Ok(ModelVector::from_vec(g.into_iter().map(|v| v / n).collect()))
}

pub fn accuracy(w: &ModelVector, samples: &[Sample]) -> Result<f64, TrainerError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        check_dim(w.dim(), s.features.len())?;
        let pred = if w.dot(&s.features) >= 0.0 { 1.0 } else { 0.0 };
        hits += usize::from(pred == s.label);
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

/// Minibatch SGD from `global`; batches reshuffled each epoch from `seed`.
pub fn local_train(
    global: &ModelVector,
    shard: &DatasetShard,
    params: &TrainParams,
    seed: u64,
) -> Result<ModelVector, TrainerError> {
    sgd(global, &shard.samples, params, seed)
}

fn sgd(start: &ModelVector, samples: &[Sample], params: &TrainParams, seed: u64) -> Result<ModelVector, TrainerError> {
    if let Some(s) = samples.first() {
        check_dim(start.dim(), s.features.len())?;
    }
    let mut w = start.clone();
    if params.lr == 0.0 || samples.is_empty() {
        return Ok(w);
    }
    let batch = params.batch_size.max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = rng::stream(seed, &[label::TRAIN]);
    let mut buf = Vec::with_capacity(batch);
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            buf.clear();
            buf.extend(chunk.iter().map(|&i| samples[i].clone()));
            let g = logistic_gradient(&w, &buf)?;
            for (wi, gi) in w.values.iter_mut().zip(&g.values) {
                *wi -= params.lr * gi;
            }
        }
    }
    Ok(w)
}

/// `x = w − W`.
pub fn compute_update(w: &ModelVector, global: &ModelVector) -> Result<ModelVector, TrainerError> {
    w.sub(global)
}

/// `X = p · x`.
pub fn weigh_update(x: &ModelVector, p: f64) -> Result<ModelVector, TrainerError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TrainerError::InvalidWeight(p));
    }
    Ok(x.scale(p))
}

/// Anything that can turn a global model and a shard into a local model.
pub trait LocalTrainer: Send + Sync {
    fn train(&self, global: &ModelVector, shard: &DatasetShard, seed: u64) -> Result<ModelVector, TrainerError>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogisticTrainer {
    pub params: TrainParams,
}

impl LocalTrainer for LogisticTrainer {
    fn train(&self, global: &ModelVector, shard: &DatasetShard, seed: u64) -> Result<ModelVector, TrainerError> {
        local_train(global, shard, &self.params, seed)
    }
}

/// In-cluster weights `p` and cluster weights `q`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub p: BTreeMap<ClientId, f64>,
    pub q: BTreeMap<ClusterId, f64>,
}

impl AggregationWeights {
    /// Weights from shard sizes grouped by cluster. Empty clusters get no
    /// weight.
    pub fn from_sizes(groups: &BTreeMap<ClusterId, Vec<(ClientId, usize)>>) -> Self {
        let total: usize = groups.values().flatten().map(|(_, s)| s).sum();
        let mut w = Self::default();
        if total == 0 {
            return w;
        }
        for (cid, members) in groups {
            let cluster_total: usize = members.iter().map(|(_, s)| s).sum();
            if cluster_total == 0 {
                continue;
            }
            w.q.insert(*cid, cluster_total as f64 / total as f64);
            for (id, s) in members {
                w.p.insert(*id, *s as f64 / cluster_total as f64);
            }
        }
        w
    }
}

/// How the spread parameter of the shard-size normal is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadKind {
    #[default]
    StdDev,
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShardParams {
    pub mean: f64,
    pub spread: f64,
    pub spread_kind: SpreadKind,
}

impl Default for ShardParams {
    fn default() -> Self {
        Self {
            mean: 600.0,
            spread: 100.0,
            spread_kind: SpreadKind::StdDev,
        }
    }
}

/// Normal sizes, rounded and truncated at 1.
pub fn shard_sizes(n: usize, params: &ShardParams, seed: u64) -> Result<Vec<usize>, TrainerError> {
    if !(params.mean.is_finite() && params.mean > 0.0 && params.spread.is_finite() && params.spread >= 0.0) {
        return Err(TrainerError::Dataset(format!(
            "shard size mean {} / spread {} out of range",
            params.mean, params.spread
        )));
    }
    let sd = match params.spread_kind {
        SpreadKind::StdDev => params.spread,
        SpreadKind::Variance => params.spread.sqrt(),
    };
    let normal = Normal::new(params.mean, sd).expect("finite parameters");
    let mut rng = rng::stream(seed, &[label::SHARDS]);
    Ok((0..n)
        .map(|_| normal.sample(&mut rng).round().max(1.0) as usize)
        .collect())
}

/// Two Gaussian classes at `±separation/2` along a random unit direction,
/// unit noise. The last feature is a constant 1 (bias).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub dim: usize,
    pub separation: f64,
    direction: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(dim: usize, separation: f64, seed: u64) -> Self {
        assert!(dim >= 2, "need at least one feature besides the bias");
        let mut rng = rng::stream(seed, &[label::DATA, 0]);
        let mut dir: Vec<f64> = (0..dim - 1).map(|_| rng.sample(StandardNormal)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= n);
        Self {
            dim,
            separation,
            direction: dir,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Sample> {
        (0..count)
            .map(|_| {
                let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                let sign = if y == 1.0 { 0.5 } else { -0.5 };
                let mut features: Vec<f64> = self
                    .direction
                    .iter()
                    .map(|d| sign * self.separation * d + rng.sample::<f64, _>(StandardNormal))
                    .collect();
                features.push(1.0);
                Sample { features, label: y }
            })
            .collect()
    }

    /// Held-out evaluation set.
    pub fn test_set(&self, count: usize, seed: u64) -> Vec<Sample> {
        self.sample(count, &mut rng::stream(seed, &[label::DATA, 2]))
    }
}

/// One shard per owner with normally distributed sizes.
pub fn shard_dataset(
    owners: &[ClientId],
    params: &ShardParams,
    task: &SyntheticTask,
    seed: u64,
) -> Result<Vec<DatasetShard>, TrainerError> {
    let sizes = shard_sizes(owners.len(), params, seed)?;
    Ok(owners
        .iter()
        .zip(sizes)
        .map(|(&owner, size)| {
            let mut rng = rng::stream(seed, &[label::DATA, 1, u64::from(owner.0)]);
            DatasetShard {
                owner,
                samples: task.sample(size, &mut rng),
            }
        })
        .collect())
}

/// SGD over the pooled data of all shards.
pub fn centralized_baseline(
    shards: &[DatasetShard],
    dim: usize,
    params: &TrainParams,
    seed: u64,
) -> Result<ModelVector, TrainerError> {
    let pooled: Vec<Sample> = shards.iter().flat_map(|s| s.samples.iter().cloned()).collect();
    sgd(&ModelVector::zeros(dim), &pooled, params, seed)
}

/// Feature rows with the label in the last column, no header.
pub fn load_csv<R: Read>(reader: R) -> Result<Vec<Sample>, TrainerError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
    let mut out = Vec::new();
    let mut width = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrainerError::Dataset(format!("row {}: {e}", i + 1)))?;
        if vals.len() < 2 {
            return Err(TrainerError::Dataset(format!("row {}: need features and a label", i + 1)));
        }
        if *width.get_or_insert(vals.len()) != vals.len() {
            return Err(TrainerError::Dataset(format!("row {}: ragged row", i + 1)));
        }
        let (features, label) = vals.split_at(vals.len() - 1);
        if label[0] != 0.0 && label[0] != 1.0 {
            return Err(TrainerError::Dataset(format!("row {}: label must be 0 or 1", i + 1)));
        }
        out.push(Sample {
            features: features.to_vec(),
            label: label[0],
        });
    }
    Ok(out)
}

/// Which rows of a loaded dataset belong to whom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub dataset: String,
    pub shards: Vec<ManifestShard>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestShard {
    pub owner: ClientId,
    pub rows: Vec<usize>,
}

impl ShardManifest {
    pub fn read(path: &Path) -> Result<Self, TrainerError> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    /// Loads the dataset (relative to the manifest's directory) and splits it.
    pub fn load(path: &Path) -> Result<Vec<DatasetShard>, TrainerError> {
        let m = Self::read(path)?;
        let data_path = path.parent().unwrap_or(Path::new(".")).join(&m.dataset);
        let samples = load_csv(std::fs::File::open(data_path)?)?;
        m.apply(&samples)
    }

    pub fn apply(&self, samples: &[Sample]) -> Result<Vec<DatasetShard>, TrainerError> {
        self.shards
            .iter()
            .map(|s| {
                let rows = s
                    .rows
                    .iter()
                    .map(|&r| {
                        samples
                            .get(r)
                            .cloned()
                            .ok_or_else(|| TrainerError::Dataset(format!("row {r} out of range")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(DatasetShard {
                    owner: s.owner,
                    samples: rows,
                })
            })
            .collect()
    }
}
