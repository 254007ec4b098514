//! CSV schemas. Every file has a header row and is read back by
//! [`read_rows`].

use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ComparisonEntry, PolicyEval, ScalingRow};

/// One policy at one configuration: mean drops per queue over the episode,
/// its 95% half-width, and the discounted return.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub system: String,
    pub delta_t: f64,
    pub num_queues: Option<usize>,
    pub num_clients: Option<usize>,
    pub horizon: usize,
    pub replications: usize,
    pub mean_drops_per_queue: f64,
    pub drops_half_width: f64,
    pub min_drops_per_queue: f64,
    pub max_drops_per_queue: f64,
    pub mean_total_drops: Option<f64>,
    pub total_drops_half_width: Option<f64>,
    pub mean_return: f64,
    pub return_half_width: f64,
}

impl SummaryRow {
    pub fn new(policy: &str, delta_t: f64, size: Option<(usize, usize)>, eval: &PolicyEval) -> Self {
        let d = &eval.drops_per_queue;
        Self {
            policy: policy.to_string(),
            system: eval.system.label().to_string(),
            delta_t,
            num_queues: size.map(|s| s.0),
            num_clients: size.map(|s| s.1),
            horizon: eval.horizon,
            replications: d.samples.len(),
            mean_drops_per_queue: d.mean,
            drops_half_width: d.half_width,
            min_drops_per_queue: d.min,
            max_drops_per_queue: d.max,
            mean_total_drops: eval.total_drops.as_ref().map(|t| t.mean),
            total_drops_half_width: eval.total_drops.as_ref().map(|t| t.half_width),
            mean_return: eval.discounted_return.mean,
            return_half_width: eval.discounted_return.half_width,
        }
    }

    pub fn from_entry(e: &ComparisonEntry) -> Self {
        let size = e.num_queues.zip(e.num_clients);
        Self::new(&e.policy, e.delta_t, size, &e.eval)
    }
}

/// Per-replication outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub policy: String,
    pub system: String,
    pub delta_t: f64,
    pub replication: usize,
    pub seed: u64,
    pub total_drops: Option<u64>,
    pub drops_per_queue: f64,
    pub discounted_return: f64,
}

impl ReplicationRow {
    pub fn all(policy: &str, delta_t: f64, eval: &PolicyEval) -> Vec<Self> {
        eval.replications
            .iter()
            .map(|r| Self {
                policy: policy.to_string(),
                system: eval.system.label().to_string(),
                delta_t,
                replication: r.index,
                seed: r.seed,
                total_drops: r.total_drops,
                drops_per_queue: r.drops_per_queue,
                discounted_return: r.discounted_return,
            })
            .collect()
    }
}

/// Per-epoch drops per queue and arrival level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub policy: String,
    pub system: String,
    pub replication: usize,
    pub epoch: usize,
    pub level: usize,
    pub drops_per_queue: f64,
}

impl EpochRow {
    pub fn all(policy: &str, eval: &PolicyEval) -> Vec<Self> {
        eval.replications
            .iter()
            .flat_map(|r| {
                r.epoch_drops.iter().zip(&r.levels).enumerate().map(move |(t, (&d, &l))| Self {
                    policy: policy.to_string(),
                    system: eval.system.label().to_string(),
                    replication: r.index,
                    epoch: t,
                    level: l,
                    drops_per_queue: d,
                })
            })
            .collect()
    }
}

/// System-size study row; `row` is `finite` or `MFC limit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub policy: String,
    pub delta_t: f64,
    pub row: String,
    pub num_queues: Option<usize>,
    pub num_clients: Option<usize>,
    pub horizon: usize,
    pub replications: usize,
    pub mean_drops_per_queue: f64,
    pub drops_half_width: f64,
    pub gap: f64,
}

pub const MFC_LIMIT_ROW: &str = "MFC limit";

impl ScalingRecord {
    pub fn new(policy: &str, delta_t: f64, r: &ScalingRow) -> Self {
        Self {
            policy: policy.to_string(),
            delta_t,
            row: if r.num_queues.is_some() { "finite".into() } else { MFC_LIMIT_ROW.into() },
            num_queues: r.num_queues,
            num_clients: r.num_clients,
            horizon: r.eval.horizon,
            replications: r.eval.drops_per_queue.samples.len(),
            mean_drops_per_queue: r.eval.drops_per_queue.mean,
            drops_half_width: r.eval.drops_per_queue.half_width,
            gap: r.gap,
        }
    }
}

/// Training curve; `best_return` is the best deterministic evaluation so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub iteration: usize,
    pub timesteps: usize,
    pub mean_return: f64,
    pub best_return: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

pub fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|source| Error::File { path: path.into(), source })?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::File { path: path.into(), source })
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
