//! Close-task selection and the inverse-distance weighted design prior.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{design_distribution, DesignDistribution, TaskModelBank};
use crate::embedding::{embed_distance, ProjectionNet, TaskEmbedding};
use crate::error::{Error, Result};
use crate::fim::{task_feature, FeatureConfig};
use crate::graph::GraphDataset;
use crate::nn::AnchorSpec;
use crate::rng::{derive_seed, hash_str};
use crate::space::DesignSpace;

/// A bank task reduced to its embedding and design distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedBankEntry {
    pub task_id: String,
    pub z_e: TaskEmbedding,
    pub dist: DesignDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub d_thres: f64,
    pub k_top: usize,
    pub dist_epsilon: f64,
    pub smoothing: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            d_thres: 0.5,
            k_top: 16,
            dist_epsilon: 1e-6,
            smoothing: 0.01,
        }
    }
}

impl TransferConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.d_thres > 0.0 && self.d_thres <= 2.0) {
            return Err(Error::InvalidArgument("d_thres must lie in (0, 2]".into()));
        }
        if !(self.dist_epsilon > 0.0) || self.k_top == 0 || !(self.smoothing >= 0.0) {
            return Err(Error::InvalidArgument(
                "dist_epsilon and k_top must be positive, smoothing non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Entries within `d_thres` of `z_n`, nearest first. Distances are clamped
/// below at `dist_epsilon`.
pub fn close_subset<'a>(
    bank: &'a [ProcessedBankEntry],
    z_n: &TaskEmbedding,
    d_thres: f64,
    dist_epsilon: f64,
) -> Vec<(&'a ProcessedBankEntry, f64)> {
    let mut out: Vec<(&ProcessedBankEntry, f64)> = bank
        .iter()
        .filter_map(|e| {
            let d = embed_distance(&e.z_e, z_n);
            (d <= d_thres).then_some((e, d.max(dist_epsilon)))
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out
}

/// Normalised inverse distances.
pub fn aggregation_weights(distances: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = distances.iter().map(|d| 1.0 / d).collect();
    let total: f64 = inv.iter().sum();
    inv.into_iter().map(|w| w / total).collect()
}

/// Inverse-distance mixture of the subset's design distributions, or
/// `fallback` when the subset is empty.
pub fn aggregate_prior(
    subset: &[(&ProcessedBankEntry, f64)],
    space: &DesignSpace,
    fallback: &DesignDistribution,
) -> Result<DesignDistribution> {
    if subset.is_empty() {
        return Ok(fallback.clone());
    }
    if subset.iter().any(|(_, d)| !(*d > 0.0)) {
        return Err(Error::InvalidArgument("distances must be positive".into()));
    }
    let weights = aggregation_weights(&subset.iter().map(|s| s.1).collect::<Vec<_>>());
    let mut rows: Vec<Vec<f64>> = space
        .dimensions()
        .iter()
        .map(|d| vec![0.0; d.choices.len()])
        .collect();
    for ((entry, _), w) in subset.iter().zip(&weights) {
        entry.dist.validate(space)?;
        for (acc, row) in rows.iter_mut().zip(entry.dist.rows()) {
            for (a, p) in acc.iter_mut().zip(row) {
                *a += w * p;
            }
        }
    }
    let k_used = subset.iter().map(|(e, _)| e.dist.k_used).sum();
    Ok(DesignDistribution::from_rows(space, rows, k_used))
}

/// Feature extraction seed for a task, shared by bank preprocessing and
/// novel-task search so a task probed twice gets the same feature.
pub fn feature_seed(seed: u64, task_id: &str) -> u64 {
    derive_seed(seed, &[hash_str(task_id)])
}

/// Everything needed to turn a dataset into a transfer prior.
#[derive(Clone, Debug)]
pub struct TransferSetup {
    pub space: DesignSpace,
    pub anchors: Vec<AnchorSpec>,
    pub feature_cfg: FeatureConfig,
    pub net: ProjectionNet,
    pub transfer: TransferConfig,
    /// Master seed for task features.
    pub seed: u64,
}

impl TransferSetup {
    /// Embedding of `dataset`, probed with the seed keyed on `task_id`.
    pub fn embed(&self, task_id: &str, dataset: &GraphDataset) -> Result<TaskEmbedding> {
        let report = task_feature(
            dataset,
            &self.anchors,
            &self.feature_cfg,
            feature_seed(self.seed, task_id),
        )?;
        self.net.project(&report.feature)
    }

    /// Prior for a task with embedding `z_n`, plus the close subset behind it
    /// as `(task_id, distance)`.
    pub fn prior_for(
        &self,
        bank: &[ProcessedBankEntry],
        z_n: &TaskEmbedding,
    ) -> Result<(DesignDistribution, Vec<(String, f64)>)> {
        self.transfer.check()?;
        let subset = close_subset(bank, z_n, self.transfer.d_thres, self.transfer.dist_epsilon);
        let prior = aggregate_prior(&subset, &self.space, &DesignDistribution::uniform(&self.space))?;
        let used = subset.iter().map(|(e, d)| (e.task_id.clone(), *d)).collect();
        Ok((prior, used))
    }
}

/// Computes the embedding and design distribution of every bank task.
/// `datasets` yields the dataset for a task id.
pub fn preprocess_bank<F>(
    bank: &TaskModelBank,
    datasets: F,
    setup: &TransferSetup,
) -> Result<Vec<ProcessedBankEntry>>
where
    F: Fn(&str) -> Result<GraphDataset> + Sync,
{
    setup.transfer.check()?;
    let cfg = &setup.transfer;
    bank.tasks()
        .par_iter()
        .map(|task| {
            let dataset = datasets(&task.task_id)?;
            Ok(ProcessedBankEntry {
                task_id: task.task_id.clone(),
                z_e: setup.embed(&task.task_id, &dataset)?,
                dist: design_distribution(task, &setup.space, cfg.k_top, cfg.smoothing)?,
            })
        })
        .collect()
}

pub fn save_processed(entries: &[ProcessedBankEntry], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for e in entries {
        let line = serde_json::to_string(e).expect("serialisable");
        writeln!(out, "{line}").map_err(|err| Error::io(path, err))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_processed(path: &Path) -> Result<Vec<ProcessedBankEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
