//! Prior-seeded random search, TPE, and regularised evolution, plus the
//! end-to-end transfer search.
//!
//! All three algorithms draw their warm-up trials from the same RNG stream in
//! the same order, so with `warmup_trials == max_trials` they produce the same
//! trace. Suggestions are made sequentially; the trials of a batch of size
//! `parallelism` are evaluated concurrently and ingested in trial order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{sample_indices, sample_row, DesignDistribution};
use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::rng::{rng_from_seed, Rng as ChaRng};
use crate::space::{DesignConfig, DesignSpace};
use crate::transfer::{ProcessedBankEntry, TransferSetup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Random,
    Tpe,
    Evolution,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "tpe" => Ok(Self::Tpe),
            "evolution" => Ok(Self::Evolution),
            other => Err(Error::InvalidArgument(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Random => "random",
            Self::Tpe => "tpe",
            Self::Evolution => "evolution",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub max_trials: usize,
    pub warmup_trials: usize,
    pub parallelism: usize,
}

impl SearchBudget {
    pub fn new(max_trials: usize, warmup_trials: usize, parallelism: usize) -> Result<Self> {
        let b = Self {
            max_trials,
            warmup_trials,
            parallelism,
        };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        if self.max_trials == 0 {
            return Err(Error::InvalidBudget("max_trials must be at least 1".into()));
        }
        if self.warmup_trials == 0 || self.warmup_trials > self.max_trials {
            return Err(Error::InvalidBudget(format!(
                "warmup_trials must lie in 1..={}",
                self.max_trials
            )));
        }
        if self.parallelism == 0 {
            return Err(Error::InvalidBudget("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpeConfig {
    /// Fraction of trials in the good set.
    pub gamma: f64,
    pub n_candidates: usize,
    /// Weight of the prior pseudo-counts.
    pub prior_weight: f64,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_candidates: 24,
            prior_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub population: usize,
    pub tournament: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population: 20,
            tournament: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub tpe: TpeConfig,
    pub evolution: EvolutionConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchTrial {
    pub config: DesignConfig,
    pub val_metric: f64,
    pub test_metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub trials: Vec<SearchTrial>,
    /// Running maximum of the validation metric.
    pub best_by_trial: Vec<f64>,
    /// Test metric of the best-validation trial so far (earliest on ties).
    pub test_at_best: Vec<Option<f64>>,
}

impl SearchResult {
    fn push(&mut self, trial: SearchTrial) {
        let (best, test) = match (self.best_by_trial.last(), self.test_at_best.last()) {
            (Some(&b), Some(&t)) if trial.val_metric <= b => (b, t),
            _ => (trial.val_metric, trial.test_metric),
        };
        self.best_by_trial.push(best);
        self.test_at_best.push(test);
        self.trials.push(trial);
    }

    pub fn best_val(&self) -> Option<f64> {
        self.best_by_trial.last().copied()
    }
}

/// Observed trials as `(choice indices, validation metric)` in trial order.
pub type History = [(Vec<usize>, f64)];

/// Good/bad categorical densities per dimension. The top `ceil(gamma n)`
/// trials (at least one) form the good set; each density adds
/// `prior_weight * |choices| * prior(c)` pseudo-counts to the observed counts.
pub fn tpe_densities(
    prior: &[Vec<f64>],
    history: &History,
    cfg: &TpeConfig,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = history.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| history[b].1.total_cmp(&history[a].1).then(a.cmp(&b)));
    let n_good = ((cfg.gamma * n as f64).ceil() as usize).clamp(1.min(n), n);
    let (good, bad) = order.split_at(n_good);
    let density = |members: &[usize], w: usize| -> Vec<f64> {
        let k = prior[w].len() as f64;
        let mut counts = vec![0.0; prior[w].len()];
        for &m in members {
            counts[history[m].0[w]] += 1.0;
        }
        let denom = members.len() as f64 + cfg.prior_weight * k;
        counts
            .iter()
            .zip(&prior[w])
            .map(|(c, p)| (c + cfg.prior_weight * k * p) / denom)
            .collect()
    };
    (0..prior.len())
        .map(|w| (density(good, w), density(bad, w)))
        .unzip()
}

/// `sum_w ln l_w(c_w) - ln g_w(c_w)`.
pub fn tpe_score(l: &[Vec<f64>], g: &[Vec<f64>], candidate: &[usize]) -> f64 {
    candidate
        .iter()
        .enumerate()
        .map(|(w, &c)| l[w][c].ln() - g[w][c].ln())
        .sum()
}

trait Suggest {
    fn suggest(&mut self, prior: &[Vec<f64>], history: &History, rng: &mut ChaRng) -> Vec<usize>;

    fn observe(&mut self, _indices: &[usize], _val: f64, _trial: usize) {}
}

struct RandomSuggest;

impl Suggest for RandomSuggest {
    fn suggest(&mut self, prior: &[Vec<f64>], _: &History, rng: &mut ChaRng) -> Vec<usize> {
        sample_indices(prior, rng)
    }
}

struct TpeSuggest(TpeConfig);

impl Suggest for TpeSuggest {
    fn suggest(&mut self, prior: &[Vec<f64>], history: &History, rng: &mut ChaRng) -> Vec<usize> {
        let (l, g) = tpe_densities(prior, history, &self.0);
        let mut best: Option<(f64, Vec<usize>)> = None;
        for _ in 0..self.0.n_candidates.max(1) {
            let cand = sample_indices(&l, rng);
            let score = tpe_score(&l, &g, &cand);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, cand));
            }
        }
        best.expect("at least one candidate").1
    }
}

struct EvolutionSuggest {
    cfg: EvolutionConfig,
    /// `(indices, val, trial index)`.
    population: Vec<(Vec<usize>, f64, usize)>,
}

impl Suggest for EvolutionSuggest {
    fn suggest(&mut self, prior: &[Vec<f64>], _: &History, rng: &mut ChaRng) -> Vec<usize> {
        let pop = &self.population;
        let mut parent = rng.random_range(0..pop.len());
        for _ in 1..self.cfg.tournament.max(1) {
            let c = rng.random_range(0..pop.len());
            let (pc, pp) = (&pop[c], &pop[parent]);
            if pc.1 > pp.1 || (pc.1 == pp.1 && pc.2 < pp.2) {
                parent = c;
            }
        }
        let mut child = pop[parent].0.clone();
        let w = rng.random_range(0..child.len());
        child[w] = sample_row(&prior[w], rng);
        child
    }

    fn observe(&mut self, indices: &[usize], val: f64, trial: usize) {
        self.population.push((indices.to_vec(), val, trial));
        if self.population.len() > self.cfg.population.max(1) {
            let worst = (0..self.population.len())
                .min_by(|&a, &b| {
                    let (pa, pb) = (&self.population[a], &self.population[b]);
                    pa.1.total_cmp(&pb.1).then(pa.2.cmp(&pb.2))
                })
                .expect("non-empty");
            self.population.remove(worst);
        }
    }
}

fn run<S, F>(
    space: &DesignSpace,
    prior: &DesignDistribution,
    budget: &SearchBudget,
    eval_fn: F,
    seed: u64,
    mut strategy: S,
) -> Result<SearchResult>
where
    S: Suggest,
    F: Fn(&DesignConfig, usize) -> Result<(f64, Option<f64>)> + Sync,
{
    budget.check()?;
    prior.validate(space)?;
    let rows = prior.rows();
    let mut rng = rng_from_seed(seed);
    let mut history: Vec<(Vec<usize>, f64)> = Vec::with_capacity(budget.max_trials);
    let mut result = SearchResult::default();
    while history.len() < budget.max_trials {
        let start = history.len();
        let n = budget.parallelism.min(budget.max_trials - start);
        let batch: Vec<Vec<usize>> = (start..start + n)
            .map(|t| {
                if t < budget.warmup_trials {
                    sample_indices(&rows, &mut rng)
                } else {
                    strategy.suggest(&rows, &history, &mut rng)
                }
            })
            .collect();
        let evaluated: Vec<SearchTrial> = batch
            .par_iter()
            .enumerate()
            .map(|(b, idx)| {
                let config = space.config_from_indices(idx);
                let (val_metric, test_metric) = match eval_fn(&config, start + b) {
                    Ok((v, t)) if v.is_finite() => (v, t),
                    _ => (0.0, None),
                };
                SearchTrial {
                    config,
                    val_metric,
                    test_metric,
                }
            })
            .collect();
        for (idx, trial) in batch.into_iter().zip(evaluated) {
            strategy.observe(&idx, trial.val_metric, history.len());
            history.push((idx, trial.val_metric));
            result.push(trial);
        }
    }
    Ok(result)
}

/// Independent draws from `prior`. A uniform prior is plain random search.
pub fn random_search<F>(
    space: &DesignSpace,
    prior: &DesignDistribution,
    budget: &SearchBudget,
    eval_fn: F,
    seed: u64,
) -> Result<SearchResult>
where
    F: Fn(&DesignConfig, usize) -> Result<(f64, Option<f64>)> + Sync,
{
    run(space, prior, budget, eval_fn, seed, RandomSuggest)
}

/// TPE over categorical dimensions with prior pseudo-counts.
pub fn tpe_search<F>(
    space: &DesignSpace,
    prior: &DesignDistribution,
    budget: &SearchBudget,
    cfg: &TpeConfig,
    eval_fn: F,
    seed: u64,
) -> Result<SearchResult>
where
    F: Fn(&DesignConfig, usize) -> Result<(f64, Option<f64>)> + Sync,
{
    run(space, prior, budget, eval_fn, seed, TpeSuggest(cfg.clone()))
}

/// Tournament selection and single-dimension mutation from the prior
/// marginal. The warm-up trials seed the population, which is capped at
/// `cfg.population` by evicting the worst (oldest on ties).
pub fn evolution_search<F>(
    space: &DesignSpace,
    prior: &DesignDistribution,
    budget: &SearchBudget,
    cfg: &EvolutionConfig,
    eval_fn: F,
    seed: u64,
) -> Result<SearchResult>
where
    F: Fn(&DesignConfig, usize) -> Result<(f64, Option<f64>)> + Sync,
{
    let strategy = EvolutionSuggest {
        cfg: cfg.clone(),
        population: Vec::new(),
    };
    run(space, prior, budget, eval_fn, seed, strategy)
}

/// Dispatches to the chosen algorithm.
pub fn search<F>(
    algo: Algorithm,
    space: &DesignSpace,
    prior: &DesignDistribution,
    budget: &SearchBudget,
    cfg: &SearchConfig,
    eval_fn: F,
    seed: u64,
) -> Result<SearchResult>
where
    F: Fn(&DesignConfig, usize) -> Result<(f64, Option<f64>)> + Sync,
{
    match algo {
        Algorithm::Random => random_search(space, prior, budget, eval_fn, seed),
        Algorithm::Tpe => tpe_search(space, prior, budget, &cfg.tpe, eval_fn, seed),
        Algorithm::Evolution => evolution_search(space, prior, budget, &cfg.evolution, eval_fn, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoTransferOutcome {
    pub result: SearchResult,
    pub prior: DesignDistribution,
    /// Close tasks and their clamped distances, nearest first.
    pub subset: Vec<(String, f64)>,
}

/// Embeds the novel task, builds its prior from the close subset of the
/// processed bank, and runs `algo` from that prior.
#[allow(clippy::too_many_arguments)]
pub fn autotransfer_search<F>(
    bank: &[ProcessedBankEntry],
    task_id: &str,
    dataset: &GraphDataset,
    setup: &TransferSetup,
    algo: Algorithm,
    budget: &SearchBudget,
    cfg: &SearchConfig,
    eval_fn: F,
    seed: u64,
) -> Result<AutoTransferOutcome>
where
    F: Fn(&DesignConfig, usize) -> Result<(f64, Option<f64>)> + Sync,
{
    budget.check()?;
    if bank.is_empty() {
        return Err(Error::InsufficientTasks { needed: 1, got: 0 });
    }
    let z_n = setup.embed(task_id, dataset)?;
    let (prior, subset) = setup.prior_for(bank, &z_n)?;
    let result = search(algo, &setup.space, &prior, budget, cfg, eval_fn, seed)?;
    Ok(AutoTransferOutcome {
        result,
        prior,
        subset,
    })
}
