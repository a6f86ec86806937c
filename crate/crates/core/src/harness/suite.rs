//! A generated task suite with its bank, oracle, and task features.

use std::collections::HashMap;
use std::sync::Mutex;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::synthetic::{generate_task, SyntheticTaskSpec};
use crate::bank::{sample_config, DesignDistribution, TaskModelBank, TrialRecord};
use crate::error::{Error, Result};
use crate::fim::{task_feature, FeatureConfig, TaskFeature};
use crate::graph::GraphDataset;
use crate::nn::{evaluate_config, loss_trajectory, AnchorSpec, TrainSettings};
use crate::oracle::{anchor_profile, similarity_matrix, AnchorPerformanceProfile, OracleBudget, OracleDistances};
use crate::rng::{derive_seed, hash_str};
use crate::space::{DesignConfig, DesignSpace};
use crate::transfer::feature_seed;

/// Memoised trial evaluation. Each (task, config) pair is trained once with a
/// seed derived from both, so a configuration has a single outcome per task
/// no matter which search proposes it.
#[derive(Debug, Default)]
pub struct EvalCache {
    seed: u64,
    entries: Mutex<HashMap<(String, String), TrialRecord>>,
}

impl EvalCache {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Mutex::new(HashMap::new()),
        }
    }

    pub fn trial_seed(&self, task_id: &str, config: &DesignConfig) -> u64 {
        derive_seed(self.seed, &[hash_str(task_id), hash_str(&config.to_string())])
    }

    pub fn evaluate(
        &self,
        task_id: &str,
        dataset: &GraphDataset,
        config: &DesignConfig,
    ) -> Result<TrialRecord> {
        let key = (task_id.to_string(), config.to_string());
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let (_, record) = evaluate_config(config, dataset, self.trial_seed(task_id, config))?;
        self.entries
            .lock()
            .expect("cache lock")
            .insert(key, record.clone());
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Evaluates `trials_per_task` uniformly sampled configurations on every task.
pub fn build_bank(
    tasks: &IndexMap<String, (crate::bank::TaskRecord, GraphDataset)>,
    space: &DesignSpace,
    trials_per_task: usize,
    cache: &EvalCache,
    seed: u64,
) -> Result<TaskModelBank> {
    let uniform = DesignDistribution::uniform(space);
    let mut bank = TaskModelBank::new();
    for (t, (shell, dataset)) in tasks.values().enumerate() {
        let configs: Vec<DesignConfig> = (0..trials_per_task)
            .map(|i| sample_config(&uniform, space, derive_seed(seed, &[t as u64, i as u64])))
            .collect::<Result<_>>()?;
        let trials: Vec<TrialRecord> = configs
            .par_iter()
            .map(|c| cache.evaluate(&shell.task_id, dataset, c))
            .collect::<Result<_>>()?;
        let mut task = shell.clone();
        task.trials = trials;
        bank.add_task(task)?;
    }
    Ok(bank)
}

/// Per-anchor training losses over the first `steps` optimizer steps, each
/// divided by its initial loss, concatenated and L2-normalised.
pub fn normalized_loss_feature(
    dataset: &GraphDataset,
    anchors: &[AnchorSpec],
    budget: &OracleBudget,
    steps: usize,
    seed: u64,
) -> Result<TaskFeature> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let parts: Vec<Vec<f64>> = anchors
        .par_iter()
        .enumerate()
        .map(|(u, a)| {
            let settings = TrainSettings::anchor(a, budget.lr, budget.epochs);
            let losses = loss_trajectory(&settings, dataset, derive_seed(seed, &[u as u64]), steps)?;
            Ok(normalize_by_initial(&losses))
        })
        .collect::<Result<_>>()?;
    TaskFeature::from_raw(parts.concat())
}

/// `losses / losses[0]`.
pub fn normalize_by_initial(losses: &[f64]) -> Vec<f64> {
    let first = losses.first().copied().unwrap_or(1.0);
    losses.iter().map(|l| l / first).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub trials_per_task: usize,
    pub anchor_hidden: usize,
    pub oracle: OracleBudget,
    pub feature: FeatureConfig,
    pub normloss_steps: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials_per_task: 64,
            anchor_hidden: 16,
            oracle: OracleBudget::default(),
            feature: FeatureConfig::default(),
            normloss_steps: 10,
        }
    }
}

/// Everything derived from a list of task specs.
#[derive(Debug)]
pub struct Suite {
    pub specs: Vec<SyntheticTaskSpec>,
    pub space: DesignSpace,
    pub anchors: Vec<AnchorSpec>,
    pub tasks: IndexMap<String, (crate::bank::TaskRecord, GraphDataset)>,
    pub bank: TaskModelBank,
    pub profiles: Vec<AnchorPerformanceProfile>,
    pub oracle: OracleDistances,
    pub features: IndexMap<String, TaskFeature>,
    pub normloss: IndexMap<String, TaskFeature>,
    pub cache: EvalCache,
    pub config: SuiteConfig,
}

impl Suite {
    pub fn build(specs: Vec<SyntheticTaskSpec>, space: DesignSpace, config: SuiteConfig) -> Result<Self> {
        let anchors = AnchorSpec::default_set(config.anchor_hidden);
        let tasks: IndexMap<String, _> = specs
            .iter()
            .map(|s| Ok((s.task_id.clone(), generate_task(s)?)))
            .collect::<Result<_>>()?;
        let cache = EvalCache::new(derive_seed(config.seed, &[1]));
        let bank = build_bank(&tasks, &space, config.trials_per_task, &cache, derive_seed(config.seed, &[2]))?;
        let oracle_seed = derive_seed(config.seed, &[3]);
        let profiles: Vec<AnchorPerformanceProfile> = tasks
            .iter()
            .map(|(id, (_, ds))| anchor_profile(id, ds, &anchors, &config.oracle, oracle_seed))
            .collect();
        let oracle = similarity_matrix(&profiles)?;
        let feature_master = derive_seed(config.seed, &[4]);
        let mut features = IndexMap::new();
        let mut normloss = IndexMap::new();
        for (id, (_, ds)) in &tasks {
            let f = task_feature(ds, &anchors, &config.feature, feature_seed(feature_master, id))?;
            features.insert(id.clone(), f.feature);
            let n = normalized_loss_feature(ds, &anchors, &config.oracle, config.normloss_steps, oracle_seed)?;
            normloss.insert(id.clone(), n);
        }
        Ok(Self {
            specs,
            space,
            anchors,
            tasks,
            bank,
            profiles,
            oracle,
            features,
            normloss,
            cache,
            config,
        })
    }

    /// Master seed that [`crate::transfer::TransferSetup`] needs to reproduce
    /// the features computed here.
    pub fn feature_master_seed(&self) -> u64 {
        derive_seed(self.config.seed, &[4])
    }

    pub fn dataset(&self, task_id: &str) -> Result<&GraphDataset> {
        self.tasks
            .get(task_id)
            .map(|t| &t.1)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{task_id}`")))
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.keys().cloned().collect()
    }

    pub fn family(&self, task_id: &str) -> Option<u32> {
        self.specs.iter().find(|s| s.task_id == task_id).map(|s| s.family_id)
    }
}
