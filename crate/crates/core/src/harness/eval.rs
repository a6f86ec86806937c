//! Leave-one-out similarity evaluation and few-trial efficiency curves.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::suite::Suite;
use crate::bank::{design_distribution, DesignDistribution};
use crate::embedding::{train_projection, ProjectionNet, ProjectionTrainConfig};
use crate::error::{Error, Result};
use crate::fim::TaskFeature;
use crate::oracle::{kendall_tau, OracleDistances};
use crate::rng::{derive_seed, hash_str};
use crate::search::{search, Algorithm, SearchBudget, SearchConfig, SearchResult};
use crate::transfer::{aggregate_prior, close_subset, ProcessedBankEntry, TransferConfig};

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Kendall correlation, with an undefined correlation counted as zero.
fn tau_or_zero(a: &[f64], b: &[f64]) -> Result<f64> {
    match kendall_tau(a, b) {
        Err(Error::AllTied) => Ok(0.0),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub task_id: String,
    pub embedding: f64,
    pub feature: f64,
    pub normalized_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub rows: Vec<LooRow>,
    /// `(mean, std)` for embedding, feature, and normalised-loss columns.
    pub embedding: (f64, f64),
    pub feature: (f64, f64),
    pub normalized_loss: (f64, f64),
}

impl LooReport {
    fn from_rows(rows: Vec<LooRow>) -> Self {
        let col = |f: fn(&LooRow) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
        Self {
            embedding: col(|r| r.embedding),
            feature: col(|r| r.feature),
            normalized_loss: col(|r| r.normalized_loss),
            rows,
        }
    }
}

/// Projection trained on every task except `held_out`.
pub fn loo_projection(
    features: &IndexMap<String, TaskFeature>,
    oracle: &OracleDistances,
    held_out: &str,
    cfg: &ProjectionTrainConfig,
    seed: u64,
) -> Result<ProjectionNet> {
    let mut rest = features.clone();
    rest.shift_remove(held_out);
    train_projection(&rest, oracle, cfg, derive_seed(seed, &[hash_str(held_out)]))
}

/// For each held-out task, trains the projection on the others and measures
/// how well each similarity (embedding, raw feature, normalised loss) ranks
/// the remaining tasks against the oracle ranking.
pub fn evaluate_loo(
    features: &IndexMap<String, TaskFeature>,
    normloss: &IndexMap<String, TaskFeature>,
    oracle: &OracleDistances,
    cfg: &ProjectionTrainConfig,
    seed: u64,
) -> Result<LooReport> {
    if features.len() < 4 {
        return Err(Error::InsufficientTasks {
            needed: 4,
            got: features.len(),
        });
    }
    let ids: Vec<&String> = features.keys().collect();
    let rows = ids
        .par_iter()
        .map(|&held| {
            let net = loo_projection(features, oracle, held, cfg, seed)?;
            let z_held = net.project(&features[held])?;
            let nl_held = normloss
                .get(held)
                .ok_or_else(|| Error::InvalidArgument(format!("no loss feature for `{held}`")))?;
            let (mut truth, mut emb, mut feat, mut nl) = (vec![], vec![], vec![], vec![]);
            for &other in ids.iter().filter(|&&o| o != held) {
                let d = oracle
                    .get(held, other)
                    .ok_or_else(|| Error::InvalidArgument(format!("oracle lacks `{other}`")))?;
                truth.push(1.0 - d);
                emb.push(z_held.dot(&net.project(&features[other])?));
                feat.push(features[held].dot(&features[other]));
                nl.push(nl_held.dot(&normloss[other.as_str()]));
            }
            Ok(LooRow {
                task_id: held.clone(),
                embedding: tau_or_zero(&emb, &truth)?,
                feature: tau_or_zero(&feat, &truth)?,
                normalized_loss: tau_or_zero(&nl, &truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LooReport::from_rows(rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Transfer,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub label: String,
    pub algo: Algorithm,
    pub prior: PriorKind,
    pub budget: SearchBudget,
}

impl Method {
    pub fn new(algo: Algorithm, prior: PriorKind, max_trials: usize, warmup: usize) -> Result<Self> {
        let prior_label = match prior {
            PriorKind::Transfer => "transfer",
            PriorKind::Uniform => "uniform",
        };
        Ok(Self {
            label: format!("{prior_label}-{algo}"),
            algo,
            prior,
            budget: SearchBudget::new(max_trials, warmup, 1)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task_id: String,
    pub method: String,
    pub seed: u64,
    pub result: SearchResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCurve {
    pub method: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialsToTarget {
    pub method: String,
    /// Mean 1-based trial index at which the target was first met, over runs
    /// that met it.
    pub mean_trials: Option<f64>,
    pub reached_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub runs: Vec<RunRecord>,
    pub curves: Vec<MethodCurve>,
    pub trials_to_target: Vec<TrialsToTarget>,
    /// Per-task transfer prior used by the transfer methods.
    pub priors: IndexMap<String, DesignDistribution>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyConfig {
    pub methods: Vec<Method>,
    pub n_seeds: usize,
    /// Index into `methods` whose mean final best per task is the target.
    pub target_method: usize,
    pub projection: ProjectionTrainConfig,
    pub transfer: TransferConfig,
    pub search: SearchConfig,
    pub seed: u64,
}

/// Transfer prior for `held_out` built only from the other bank tasks.
pub fn loo_prior(
    suite: &Suite,
    held_out: &str,
    projection: &ProjectionTrainConfig,
    transfer: &TransferConfig,
    seed: u64,
) -> Result<(DesignDistribution, Vec<(String, f64)>)> {
    transfer.check()?;
    let net = loo_projection(&suite.features, &suite.oracle, held_out, projection, seed)?;
    let bank = suite.bank.without(held_out);
    let entries: Vec<ProcessedBankEntry> = bank
        .tasks()
        .iter()
        .map(|t| {
            let feature = suite
                .features
                .get(&t.task_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no feature for `{}`", t.task_id)))?;
            Ok(ProcessedBankEntry {
                task_id: t.task_id.clone(),
                z_e: net.project(feature)?,
                dist: design_distribution(t, &suite.space, transfer.k_top, transfer.smoothing)?,
            })
        })
        .collect::<Result<_>>()?;
    let z_n = net.project(&suite.features[held_out])?;
    let subset = close_subset(&entries, &z_n, transfer.d_thres, transfer.dist_epsilon);
    let prior = aggregate_prior(&subset, &suite.space, &DesignDistribution::uniform(&suite.space))?;
    Ok((prior, subset.iter().map(|(e, d)| (e.task_id.clone(), *d)).collect()))
}

/// Runs every method `n_seeds` times on every novel task, each with a
/// leave-one-out transfer prior, and aggregates running-best curves.
/// Methods share the search seed for a given (task, seed) pair.
pub fn efficiency_curves(suite: &Suite, novel: &[String], cfg: &EfficiencyConfig) -> Result<EfficiencyReport> {
    if cfg.n_seeds < 2 {
        return Err(Error::InvalidArgument("need at least two seeds".into()));
    }
    let uniform = DesignDistribution::uniform(&suite.space);
    let mut priors = IndexMap::new();
    for task in novel {
        let (prior, _) = loo_prior(suite, task, &cfg.projection, &cfg.transfer, cfg.seed)?;
        priors.insert(task.clone(), prior);
    }
    let jobs: Vec<(&String, usize, &Method)> = novel
        .iter()
        .flat_map(|t| (0..cfg.n_seeds).flat_map(move |s| cfg.methods.iter().map(move |m| (t, s, m))))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(task, s, method)| {
            let dataset = suite.dataset(task)?;
            let prior = match method.prior {
                PriorKind::Transfer => &priors[task.as_str()],
                PriorKind::Uniform => &uniform,
            };
            let seed = derive_seed(cfg.seed, &[hash_str(task), s as u64]);
            let eval = |c: &crate::space::DesignConfig, _: usize| {
                let r = suite.cache.evaluate(task, dataset, c)?;
                Ok((r.val_metric, r.test_metric))
            };
            let result = search(method.algo, &suite.space, prior, &method.budget, &cfg.search, eval, seed)?;
            Ok(RunRecord {
                task_id: task.clone(),
                method: method.label.clone(),
                seed,
                result,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let curves = cfg.methods.iter().map(|m| method_curve(&runs, &m.label)).collect();
    let trials_to_target = trials_to_target(&runs, cfg)?;
    Ok(EfficiencyReport {
        runs,
        curves,
        trials_to_target,
        priors,
    })
}

fn method_curve(runs: &[RunRecord], method: &str) -> MethodCurve {
    let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.method == method).collect();
    let len = mine.iter().map(|r| r.result.best_by_trial.len()).min().unwrap_or(0);
    let (mean, std) = (0..len)
        .map(|t| mean_std(&mine.iter().map(|r| r.result.best_by_trial[t]).collect::<Vec<_>>()))
        .unzip();
    MethodCurve {
        method: method.to_string(),
        mean,
        std,
    }
}

fn trials_to_target(runs: &[RunRecord], cfg: &EfficiencyConfig) -> Result<Vec<TrialsToTarget>> {
    let reference = &cfg
        .methods
        .get(cfg.target_method)
        .ok_or_else(|| Error::InvalidArgument("target_method out of range".into()))?
        .label;
    let mut targets: IndexMap<&str, Vec<f64>> = IndexMap::new();
    for r in runs.iter().filter(|r| &r.method == reference) {
        targets
            .entry(r.task_id.as_str())
            .or_default()
            .push(r.result.best_val().unwrap_or(0.0));
    }
    let targets: IndexMap<&str, f64> = targets.into_iter().map(|(k, v)| (k, mean_std(&v).0)).collect();
    Ok(cfg
        .methods
        .iter()
        .map(|m| {
            let hits: Vec<Option<usize>> = runs
                .iter()
                .filter(|r| r.method == m.label)
                .map(|r| {
                    let target = targets[r.task_id.as_str()];
                    r.result.best_by_trial.iter().position(|&b| b >= target).map(|i| i + 1)
                })
                .collect();
            let reached: Vec<f64> = hits.iter().flatten().map(|&i| i as f64).collect();
            TrialsToTarget {
                method: m.label.clone(),
                mean_trials: (!reached.is_empty()).then(|| mean_std(&reached).0),
                reached_fraction: reached.len() as f64 / hits.len().max(1) as f64,
            }
        })
        .collect())
}

/// `method,trial,mean,std` with 1-based trial numbers.
pub fn write_curves_csv(curves: &[MethodCurve], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["method", "trial", "mean", "std"]).map_err(csv_err)?;
    for c in curves {
        for (t, (m, s)) in c.mean.iter().zip(&c.std).enumerate() {
            w.write_record([c.method.clone(), (t + 1).to_string(), m.to_string(), s.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<MethodCurve>> {
    #[derive(Deserialize)]
    struct Row {
        method: String,
        trial: usize,
        mean: f64,
        std: f64,
    }
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    let mut out: Vec<MethodCurve> = Vec::new();
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        if out.last().is_none_or(|c| c.method != row.method) {
            out.push(MethodCurve {
                method: row.method.clone(),
                mean: Vec::new(),
                std: Vec::new(),
            });
        }
        let c = out.last_mut().expect("pushed above");
        if row.trial != c.mean.len() + 1 {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("trial {} out of order", row.trial),
            });
        }
        c.mean.push(row.mean);
        c.std.push(row.std);
    }
    Ok(out)
}

/// Static line chart of the mean curves.
pub fn curves_svg(curves: &[MethodCurve]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let n = curves.iter().map(|c| c.mean.len()).max().unwrap_or(1).max(2);
    let values = curves.iter().flat_map(|c| c.mean.iter().copied());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let x = |t: usize| PAD + (W - 2.0 * PAD) * t as f64 / (n - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12">trial</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(svg, r#"<text x="5" y="{}" font-size="12">{hi:.3}</text>"#, PAD);
    let _ = writeln!(svg, r#"<text x="5" y="{}" font-size="12">{lo:.3}</text>"#, H - PAD);
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = c
            .mean
            .iter()
            .enumerate()
            .map(|(t, &v)| format!("{:.1},{:.1}", x(t), y(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            W - PAD - 150.0,
            PAD + 15.0 * (i as f64 + 1.0),
            c.method
        );
    }
    svg.push_str("</svg>\n");
    svg
}
