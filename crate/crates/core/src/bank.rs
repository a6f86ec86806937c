//! The task-model bank: per-task trial histories and their design distributions.
//!
//! On disk a bank is JSON lines, one trial per line, each carrying its task
//! metadata so that new trials can be appended without rewriting the file.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TaskLevel;
use crate::rng::{rng_from_seed, Rng as ChaRng};
use crate::space::{DesignConfig, DesignSpace};

/// One training attempt on a task.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub config: DesignConfig,
    /// Validation metric, higher is better.
    pub val_metric: f64,
    pub test_metric: Option<f64>,
    pub train_curve: Option<Vec<(u32, f64)>>,
    pub seed: u64,
}

impl TrialRecord {
    pub fn new(
        config: DesignConfig,
        val_metric: f64,
        test_metric: Option<f64>,
        train_curve: Option<Vec<(u32, f64)>>,
        seed: u64,
    ) -> Result<Self> {
        let t = Self {
            config,
            val_metric,
            test_metric,
            train_curve,
            seed,
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        if !self.val_metric.is_finite() {
            return Err(Error::InvalidTrial("val_metric is not finite".into()));
        }
        if let Some(curve) = &self.train_curve {
            if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::InvalidTrial(
                    "curve epochs must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub task_id: String,
    pub level: TaskLevel,
    pub dataset_ref: PathBuf,
    pub metric_name: String,
    pub trials: Vec<TrialRecord>,
}

impl TaskRecord {
    pub fn new(task_id: &str, level: TaskLevel, dataset_ref: impl Into<PathBuf>) -> Self {
        Self {
            task_id: task_id.to_string(),
            level,
            dataset_ref: dataset_ref.into(),
            metric_name: "accuracy".to_string(),
            trials: Vec::new(),
        }
    }

    pub fn best_val(&self) -> Option<f64> {
        self.trials.iter().map(|t| t.val_metric).reduce(f64::max)
    }

    pub fn median_val(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.trials.iter().map(|t| t.val_metric).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        })
    }
}

/// A collection of tasks with unique ids, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskModelBank {
    tasks: Vec<TaskRecord>,
}

impl TaskModelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tasks(&self) -> &[TaskRecord] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.task_id == id)
    }

    pub fn add_task(&mut self, task: TaskRecord) -> Result<()> {
        if self.task(&task.task_id).is_some() {
            return Err(Error::DuplicateTask(task.task_id));
        }
        self.tasks.push(task);
        Ok(())
    }

    /// Appends a trial, creating the task when it is new.
    pub fn push_trial(&mut self, shell: &TaskRecord, trial: TrialRecord) {
        match self.tasks.iter_mut().find(|t| t.task_id == shell.task_id) {
            Some(t) => t.trials.push(trial),
            None => {
                let mut t = shell.clone();
                t.trials = vec![trial];
                self.tasks.push(t);
            }
        }
    }

    /// Bank without the given task, used for leave-one-out evaluation.
    pub fn without(&self, task_id: &str) -> Self {
        Self {
            tasks: self
                .tasks
                .iter()
                .filter(|t| t.task_id != task_id)
                .cloned()
                .collect(),
        }
    }

    /// Merges every task of `other` (trials of shared task ids are appended).
    pub fn merge(&mut self, other: TaskModelBank) {
        for task in other.tasks {
            let shell = TaskRecord {
                trials: Vec::new(),
                ..task.clone()
            };
            for trial in task.trials {
                self.push_trial(&shell, trial);
            }
        }
    }
}

/// The `k` best trials by validation metric. Ties go to the lower seed, then
/// to the earlier trial.
pub fn top_k_trials(task: &TaskRecord, k: usize) -> Result<Vec<TrialRecord>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if task.trials.is_empty() {
        return Err(Error::EmptyTask(task.task_id.clone()));
    }
    let mut order: Vec<usize> = (0..task.trials.len()).collect();
    order.sort_by(|&a, &b| {
        let (ta, tb) = (&task.trials[a], &task.trials[b]);
        tb.val_metric
            .total_cmp(&ta.val_metric)
            .then(ta.seed.cmp(&tb.seed))
            .then(a.cmp(&b))
    });
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| task.trials[i].clone())
        .collect())
}

/// Independent categorical distribution per dimension; their product is the
/// design distribution of a task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignDistribution {
    pub per_dimension: IndexMap<String, IndexMap<String, f64>>,
    pub k_used: usize,
}

const ROW_TOL: f64 = 1e-9;

impl DesignDistribution {
    pub fn uniform(space: &DesignSpace) -> Self {
        Self {
            per_dimension: space
                .dimensions()
                .iter()
                .map(|d| {
                    let p = 1.0 / d.choices.len() as f64;
                    (d.name.clone(), d.choices.iter().map(|c| (c.clone(), p)).collect())
                })
                .collect(),
            k_used: 0,
        }
    }

    /// Point mass on `config`.
    pub fn one_hot(space: &DesignSpace, config: &DesignConfig) -> Result<Self> {
        let idx = space.indices_of(config)?;
        Ok(Self::from_rows(
            space,
            space
                .dimensions()
                .iter()
                .zip(idx)
                .map(|(d, i)| (0..d.choices.len()).map(|c| if c == i { 1.0 } else { 0.0 }).collect())
                .collect(),
            1,
        ))
    }

    /// Builds from probability rows aligned with the space.
    pub fn from_rows(space: &DesignSpace, rows: Vec<Vec<f64>>, k_used: usize) -> Self {
        Self {
            per_dimension: space
                .dimensions()
                .iter()
                .zip(rows)
                .map(|(d, row)| (d.name.clone(), d.choices.iter().cloned().zip(row).collect()))
                .collect(),
            k_used,
        }
    }

    /// Probability rows aligned with the dimension order of the distribution.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.per_dimension
            .values()
            .map(|m| m.values().copied().collect())
            .collect()
    }

    pub fn probability(&self, dimension: &str, choice: &str) -> Option<f64> {
        self.per_dimension.get(dimension)?.get(choice).copied()
    }

    /// Checks that the distribution lines up with `space` and every row is a
    /// probability vector.
    pub fn validate(&self, space: &DesignSpace) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDistribution(m));
        if self.per_dimension.len() != space.len() {
            return bad("dimension count differs from the space".into());
        }
        for (dim, (name, row)) in space.dimensions().iter().zip(&self.per_dimension) {
            if &dim.name != name {
                return bad(format!("expected dimension `{}`, found `{name}`", dim.name));
            }
            if !row.keys().eq(dim.choices.iter()) {
                return bad(format!("choices of `{name}` differ from the space"));
            }
            if row.values().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return bad(format!("row `{name}` has a negative or non-finite entry"));
            }
            let s: f64 = row.values().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return bad(format!("row `{name}` sums to {s}"));
            }
        }
        Ok(())
    }

    /// Choice index with the highest probability per dimension (first on ties).
    pub fn argmax_indices(&self) -> Vec<usize> {
        self.rows()
            .iter()
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Smoothed frequency of each choice among the top-`k` trials:
/// `(count + smoothing) / (k_used + smoothing * |choices|)`.
pub fn design_distribution(
    task: &TaskRecord,
    space: &DesignSpace,
    k: usize,
    smoothing: f64,
) -> Result<DesignDistribution> {
    if !(smoothing >= 0.0) {
        return Err(Error::InvalidArgument("smoothing must be non-negative".into()));
    }
    let top = top_k_trials(task, k)?;
    let mut counts: Vec<Vec<f64>> = space
        .dimensions()
        .iter()
        .map(|d| vec![0.0; d.choices.len()])
        .collect();
    for trial in &top {
        for (w, i) in space.indices_of(&trial.config)?.into_iter().enumerate() {
            counts[w][i] += 1.0;
        }
    }
    let k_used = top.len();
    let rows = counts
        .into_iter()
        .map(|row| {
            let denom = k_used as f64 + smoothing * row.len() as f64;
            row.into_iter().map(|c| (c + smoothing) / denom).collect()
        })
        .collect();
    Ok(DesignDistribution::from_rows(space, rows, k_used))
}

/// Draws a choice index from a probability row with one uniform variate.
pub(crate) fn sample_row(row: &[f64], rng: &mut ChaRng) -> usize {
    let total: f64 = row.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Draws choice indices for every dimension, in dimension order.
pub(crate) fn sample_indices(rows: &[Vec<f64>], rng: &mut ChaRng) -> Vec<usize> {
    rows.iter().map(|row| sample_row(row, rng)).collect()
}

/// Samples each dimension independently from its probability row.
pub fn sample_config(
    dist: &DesignDistribution,
    space: &DesignSpace,
    rng_seed: u64,
) -> Result<DesignConfig> {
    dist.validate(space)?;
    let mut rng = rng_from_seed(rng_seed);
    Ok(space.config_from_indices(&sample_indices(&dist.rows(), &mut rng)))
}

#[derive(Serialize, Deserialize)]
struct BankLine {
    task_id: String,
    level: TaskLevel,
    metric_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset_ref: Option<PathBuf>,
    config: DesignConfig,
    val_metric: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_metric: Option<f64>,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    curve: Option<Vec<(u32, f64)>>,
}

/// Writes one line per trial. Tasks without trials have no line and are not
/// persisted.
pub fn save_bank(bank: &TaskModelBank, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_bank(bank, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Appends the trials of `bank` to an existing bank file.
pub fn append_bank(bank: &TaskModelBank, path: &Path) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_bank(bank, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

fn write_bank(bank: &TaskModelBank, out: &mut impl Write) -> std::io::Result<()> {
    for task in &bank.tasks {
        for trial in &task.trials {
            let line = BankLine {
                task_id: task.task_id.clone(),
                level: task.level,
                metric_name: task.metric_name.clone(),
                dataset_ref: Some(task.dataset_ref.clone()),
                config: trial.config.clone(),
                val_metric: trial.val_metric,
                test_metric: trial.test_metric,
                seed: trial.seed,
                curve: trial.train_curve.clone(),
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn load_bank(path: &Path) -> Result<TaskModelBank> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bank = TaskModelBank::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let raw: BankLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let trial = TrialRecord::new(raw.config, raw.val_metric, raw.test_metric, raw.curve, raw.seed)
            .map_err(|e| parse_err(e.to_string()))?;
        let shell = TaskRecord {
            task_id: raw.task_id,
            level: raw.level,
            dataset_ref: raw.dataset_ref.unwrap_or_default(),
            metric_name: raw.metric_name,
            trials: Vec::new(),
        };
        if let Some(existing) = bank.task(&shell.task_id) {
            if existing.level != shell.level || existing.metric_name != shell.metric_name {
                return Err(parse_err(format!(
                    "task `{}` metadata disagrees with earlier lines",
                    shell.task_id
                )));
            }
        }
        bank.push_trial(&shell, trial);
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{CONVOLUTION, DesignSpace};

    fn conv_task(values: &[(&str, f64, u64)]) -> (DesignSpace, TaskRecord) {
        let space = DesignSpace::gnn_default();
        let base = space.config_from_indices(&vec![0; space.len()]);
        let mut task = TaskRecord::new("t", TaskLevel::Node, "d.jsonl");
        for &(conv, val, seed) in values {
            let config = base.clone().with(CONVOLUTION, conv);
            task.trials
                .push(TrialRecord::new(config, val, None, None, seed).unwrap());
        }
        (space, task)
    }

    #[test]
    fn top_k_takes_best_and_breaks_ties_by_seed() {
        let (_, task) = conv_task(&[
            ("GCNConv", 0.5, 3),
            ("GATConv", 0.9, 9),
            ("SAGEConv", 0.9, 2),
            ("GINConv", 0.1, 1),
        ]);
        let top = top_k_trials(&task, 2).unwrap();
        assert_eq!(top[0].seed, 2);
        assert_eq!(top[1].seed, 9);
        assert_eq!(top_k_trials(&task, 16).unwrap().len(), 4);
    }

    #[test]
    fn top_k_of_twenty() {
        let vals: Vec<(&str, f64, u64)> = (0..20).map(|i| ("GCNConv", i as f64 / 20.0, i)).collect();
        let (_, task) = conv_task(&vals);
        let top = top_k_trials(&task, 16).unwrap();
        assert_eq!(top.len(), 16);
        assert!(top.iter().all(|t| t.val_metric >= 4.0 / 20.0));
    }

    #[test]
    fn empty_task_is_an_error() {
        let task = TaskRecord::new("e", TaskLevel::Graph, "x");
        assert!(matches!(top_k_trials(&task, 3), Err(Error::EmptyTask(_))));
        let space = DesignSpace::gnn_default();
        assert!(matches!(
            design_distribution(&task, &space, 3, 0.0),
            Err(Error::EmptyTask(_))
        ));
    }

    #[test]
    fn frequency_distribution() {
        let (space, task) = conv_task(&[
            ("GCNConv", 0.9, 0),
            ("GCNConv", 0.8, 1),
            ("GATConv", 0.7, 2),
            ("SAGEConv", 0.6, 3),
            ("GINConv", 0.1, 4),
        ]);
        let d = design_distribution(&task, &space, 4, 0.0).unwrap();
        assert_eq!(d.probability(CONVOLUTION, "GCNConv"), Some(0.5));
        assert_eq!(d.probability(CONVOLUTION, "GATConv"), Some(0.25));
        assert_eq!(d.probability(CONVOLUTION, "SAGEConv"), Some(0.25));
        assert_eq!(d.probability(CONVOLUTION, "GINConv"), Some(0.0));
        assert_eq!(d.probability(CONVOLUTION, "GeneralConv"), Some(0.0));
        assert_eq!(d.k_used, 4);

        let s = design_distribution(&task, &space, 4, 0.01).unwrap();
        let p = s.probability(CONVOLUTION, "GCNConv").unwrap();
        assert!((p - 2.01 / 4.05).abs() < 1e-15);
        s.validate(&space).unwrap();
    }

    #[test]
    fn identical_top_trials_give_one_hot() {
        let (space, task) = conv_task(&[("GATConv", 0.9, 0), ("GATConv", 0.8, 1)]);
        let d = design_distribution(&task, &space, 2, 0.0).unwrap();
        assert_eq!(d.probability(CONVOLUTION, "GATConv"), Some(1.0));
        let config = sample_config(&d, &space, 1234).unwrap();
        assert_eq!(config, task.trials[0].config);
    }

    #[test]
    fn sampling_is_deterministic() {
        let space = DesignSpace::gnn_default();
        let d = DesignDistribution::uniform(&space);
        assert_eq!(
            sample_config(&d, &space, 5).unwrap(),
            sample_config(&d, &space, 5).unwrap()
        );
    }

    #[test]
    fn uniform_sampling_frequencies() {
        // Oracle: empirical frequency of each choice over 10k draws.
        let space = DesignSpace::gnn_default();
        let d = DesignDistribution::uniform(&space);
        let rows = d.rows();
        let mut rng = rng_from_seed(42);
        let mut counts: Vec<Vec<usize>> = rows.iter().map(|r| vec![0; r.len()]).collect();
        let n = 10_000;
        for _ in 0..n {
            for (w, i) in sample_indices(&rows, &mut rng).into_iter().enumerate() {
                counts[w][i] += 1;
            }
        }
        for (row, c) in rows.iter().zip(&counts) {
            for (p, &k) in row.iter().zip(c) {
                assert!((k as f64 / n as f64 - p).abs() < 0.02);
            }
        }
    }

    #[test]
    fn bank_round_trip_and_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.jsonl");

        save_bank(&TaskModelBank::new(), &path).unwrap();
        assert!(load_bank(&path).unwrap().is_empty());

        let (_, mut a) = conv_task(&[("GCNConv", 0.123456789012345, 0), ("GATConv", 0.1 + 0.2, 7)]);
        a.trials[0].test_metric = Some(1.0 / 3.0);
        a.trials[0].train_curve = Some(vec![(0, 2.5), (20, 0.1 + 0.7)]);
        let (_, mut b) = conv_task(&[("SAGEConv", 0.5, 1)]);
        b.task_id = "u".into();
        b.level = TaskLevel::Graph;
        let mut bank = TaskModelBank::new();
        bank.add_task(a).unwrap();
        bank.add_task(b).unwrap();
        save_bank(&bank, &path).unwrap();
        assert_eq!(load_bank(&path).unwrap(), bank);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 20]).unwrap();
        match load_bank(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_trials() {
        let c = DesignConfig::new();
        assert!(TrialRecord::new(c.clone(), f64::NAN, None, None, 0).is_err());
        assert!(TrialRecord::new(c, 0.5, None, Some(vec![(3, 1.0), (3, 0.5)]), 0).is_err());
    }
}
