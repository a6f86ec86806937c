//! Diagonal Fisher information over message-passing parameters and the
//! task feature built from its scale-invariant moment ratio.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{GraphBatch, GraphDataset, TaskLevel};
use crate::nn::{mp_score, train_last_layer, AnchorSpec, GradScope, ModelParams, PreparedBatch};
use crate::rng::derive_seed;

/// `m1` at or below this is treated as a dead network.
pub const ZERO_TOL: f64 = 1e-12;

/// Extra seeds tried per (anchor, repeat) when the FIM is degenerate.
pub const MAX_RETRIES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FimDiagonal {
    pub entries: Vec<f64>,
}

impl FimDiagonal {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|e| e * c).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleInvariantRep {
    pub m1: f64,
    pub m2: f64,
    pub alpha: f64,
}

impl ScaleInvariantRep {
    /// Moments and alpha of `diag`. Alpha is evaluated on the diagonal
    /// rescaled by its largest entry, which leaves the ratio unchanged and
    /// makes a constant diagonal give exactly one.
    pub fn from_diag(diag: &FimDiagonal) -> Result<Self> {
        let (m1, m2) = fim_moments(diag);
        alpha(m1, m2)?;
        let max = diag.entries.iter().cloned().fold(0.0, f64::max);
        let rescaled = FimDiagonal {
            entries: diag.entries.iter().map(|e| e / max).collect(),
        };
        let (r1, r2) = fim_moments(&rescaled);
        Ok(Self {
            m1,
            m2,
            alpha: r2 / (r1 * r1),
        })
    }
}

/// Expected Fisher diagonal over the training units:
/// `F_ii = mean_x sum_y P(y|x) (d log P(y|x) / d theta_i)^2`, with the
/// expectation over classes taken exactly.
pub fn estimate_fim_diag(params: &ModelParams, dataset: &GraphDataset) -> FimDiagonal {
    let n = params.mp_param_count();
    let mut acc = vec![0.0; n];
    let units = &dataset.splits.train;
    if units.is_empty() {
        return FimDiagonal { entries: acc };
    }
    // Group units by graph so each graph is recorded once.
    let mut by_graph: Vec<(usize, Vec<usize>)> = Vec::new();
    for &u in units {
        let r = dataset.unit(u);
        match by_graph.last_mut() {
            Some((g, rows)) if *g == r.graph => rows.push(r.node),
            _ => by_graph.push((r.graph, vec![r.node])),
        }
    }
    for (graph, rows) in by_graph {
        let prepared = PreparedBatch::new(GraphBatch::new(dataset, &[graph]));
        let mut tape = Tape::new();
        let rec = params.record(&mut tape, &prepared, GradScope::MessagePassing);
        let log_probs = tape.value(rec.log_probs).clone();
        for node in rows {
            let row = match dataset.level {
                TaskLevel::Node => node,
                TaskLevel::Graph => 0,
            };
            for class in 0..params.num_classes {
                let p = log_probs[[row, class]].exp();
                if p == 0.0 {
                    continue;
                }
                let score = mp_score(&tape, &rec, row, class);
                for (a, s) in acc.iter_mut().zip(&score) {
                    *a += p * s * s;
                }
            }
        }
    }
    let m = units.len() as f64;
    FimDiagonal {
        entries: acc.into_iter().map(|a| a / m).collect(),
    }
}

/// First two spectral moments of a diagonal FIM: `(mean(F_ii), mean(F_ii^2))`.
pub fn fim_moments(diag: &FimDiagonal) -> (f64, f64) {
    let n = diag.entries.len() as f64;
    assert!(n >= 1.0, "empty FIM diagonal");
    let m1 = diag.entries.iter().sum::<f64>() / n;
    let m2 = diag.entries.iter().map(|e| e * e).sum::<f64>() / n;
    (m1, m2)
}

/// Scale-invariant ratio `m2 / m1^2`, at least one by Jensen's inequality.
pub fn alpha(m1: f64, m2: f64) -> Result<f64> {
    if !(m1 > ZERO_TOL) {
        return Err(Error::DegenerateFim { m1 });
    }
    Ok(m2 / (m1 * m1))
}

/// Unit-L2-norm vector of per-anchor mean alphas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFeature {
    pub values: Vec<f64>,
}

impl TaskFeature {
    /// Normalises `raw` to unit L2 norm.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > ZERO_TOL) || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        Ok(Self {
            values: raw.into_iter().map(|v| v / norm).collect(),
        })
    }

    pub fn dot(&self, other: &TaskFeature) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub num_anchors: usize,
    pub repeats: usize,
    pub last_layer_steps: usize,
    pub last_layer_lr: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            num_anchors: 12,
            repeats: 5,
            last_layer_steps: 50,
            last_layer_lr: 0.1,
        }
    }
}

/// Task feature plus the raw per-(anchor, repeat) alphas behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub feature: TaskFeature,
    pub per_anchor_alpha: Vec<Vec<f64>>,
}

/// Alpha of one (anchor, repeat) probe, retrying with fresh seeds when the
/// network is dead.
pub fn probe_alpha(
    dataset: &GraphDataset,
    anchor: &AnchorSpec,
    cfg: &FeatureConfig,
    seed: u64,
    anchor_index: usize,
    repeat: usize,
) -> Result<f64> {
    let mut last = Error::DegenerateFim { m1: 0.0 };
    for attempt in 0..=MAX_RETRIES {
        let s = derive_seed(seed, &[anchor_index as u64, repeat as u64, attempt as u64]);
        let params =
            ModelParams::init_anchor(anchor, dataset.input_dim(), dataset.num_classes, s);
        let params = train_last_layer(&params, dataset, cfg.last_layer_steps, cfg.last_layer_lr);
        let diag = estimate_fim_diag(&params, dataset);
        match ScaleInvariantRep::from_diag(&diag) {
            Ok(rep) => return Ok(rep.alpha),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Probes every anchor `cfg.repeats` times and concatenates the mean alphas.
/// The probes run in parallel and are reduced in (anchor, repeat) order.
pub fn task_feature(
    dataset: &GraphDataset,
    anchors: &[AnchorSpec],
    cfg: &FeatureConfig,
    seed: u64,
) -> Result<FeatureReport> {
    if anchors.len() != cfg.num_anchors || cfg.repeats == 0 || anchors.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "expected {} anchors and at least one repeat, got {} anchors",
            cfg.num_anchors,
            anchors.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..anchors.len())
        .flat_map(|u| (0..cfg.repeats).map(move |r| (u, r)))
        .collect();
    let alphas: Vec<f64> = jobs
        .par_iter()
        .map(|&(u, r)| probe_alpha(dataset, &anchors[u], cfg, seed, u, r))
        .collect::<Result<_>>()?;
    let per_anchor_alpha: Vec<Vec<f64>> = alphas
        .chunks(cfg.repeats)
        .map(<[f64]>::to_vec)
        .collect();
    let means = per_anchor_alpha
        .iter()
        .map(|a| a.iter().sum::<f64>() / a.len() as f64)
        .collect();
    Ok(FeatureReport {
        feature: TaskFeature::from_raw(means)?,
        per_anchor_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Splits};
    use crate::nn::{AnchorConv, Connectivity};
    use crate::rng::rng_from_seed;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy(level: TaskLevel, seed: u64) -> GraphDataset {
        let mut rng = rng_from_seed(seed);
        let graphs: Vec<Graph> = (0..if level == TaskLevel::Node { 1 } else { 6 })
            .map(|_| {
                let n = 7;
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in 0..i {
                        if rng.random_bool(0.4) {
                            edges.push((i, j));
                            edges.push((j, i));
                        }
                    }
                }
                Graph {
                    features: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
                    edges,
                    labels: match level {
                        TaskLevel::Node => (0..n).map(|i| i % 2).collect(),
                        TaskLevel::Graph => vec![rng.random_range(0..2)],
                    },
                }
            })
            .collect();
        let mut ds = GraphDataset::new(graphs, level, 2, Splits::default()).unwrap();
        ds.split_by_seed(0.6, 0.2, seed);
        ds
    }

    fn anchor() -> AnchorSpec {
        AnchorSpec {
            conv_type: AnchorConv::MeanConv,
            num_mp_layers: 2,
            connectivity: Connectivity::SkipSum,
            hidden_dim: 4,
        }
    }

    #[test]
    fn moments_and_alpha_examples() {
        let d = FimDiagonal {
            entries: vec![1.0, 3.0],
        };
        assert_eq!(fim_moments(&d), (2.0, 5.0));
        assert_eq!(alpha(2.0, 5.0).unwrap(), 1.25);
        let c = FimDiagonal {
            entries: vec![0.3; 7],
        };
        let (m1, m2) = fim_moments(&c);
        assert!((m1 - 0.3).abs() < 1e-15 && (m2 - 0.09).abs() < 1e-15);
        let z = FimDiagonal {
            entries: vec![0.0; 4],
        };
        assert_eq!(fim_moments(&z), (0.0, 0.0));
        assert!(matches!(alpha(0.0, 0.0), Err(Error::DegenerateFim { .. })));
    }

    #[test]
    fn constant_diagonal_alpha_is_one() {
        for c in [1e-5, 1e-3, 0.3, 0.5, 2.0, 1e6] {
            let d = FimDiagonal {
                entries: vec![c; 13],
            };
            let r = ScaleInvariantRep::from_diag(&d).unwrap();
            assert_eq!(r.alpha, 1.0);
        }
    }

    proptest! {
        #[test]
        fn alpha_at_least_one_and_scale_free(
            entries in prop::collection::vec(0.0f64..10.0, 1..50),
            c in 0.01f64..100.0,
        ) {
            let d = FimDiagonal { entries };
            let (m1, _) = fim_moments(&d);
            prop_assume!(m1 > ZERO_TOL);
            let a = ScaleInvariantRep::from_diag(&d).unwrap().alpha;
            prop_assert!(a >= 1.0 - 1e-9);
            let b = ScaleInvariantRep::from_diag(&d.scaled(c * c)).unwrap().alpha;
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }

    #[test]
    fn duplicating_examples_leaves_fim_unchanged() {
        let ds = toy(TaskLevel::Graph, 3);
        let mut doubled = ds.clone();
        doubled.graphs.extend(ds.graphs.clone());
        let offset = ds.graphs.len();
        let extra: Vec<usize> = ds.splits.train.iter().map(|u| u + offset).collect();
        doubled.splits.train.extend(extra);
        doubled.splits.val.clear();
        doubled.splits.test.clear();
        let p = ModelParams::init_anchor(&anchor(), 3, 2, 8);
        let a = estimate_fim_diag(&p, &ds);
        let b = estimate_fim_diag(&p, &doubled);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn entries_are_non_negative() {
        let ds = toy(TaskLevel::Node, 4);
        for s in 0..100 {
            let p = ModelParams::init_anchor(&anchor(), 3, 2, s);
            let d = estimate_fim_diag(&p, &ds);
            assert_eq!(d.len(), p.mp_param_count());
            assert!(d.entries.iter().all(|&e| e >= 0.0));
        }
    }

    fn features_for(ds: &GraphDataset, cfg: &FeatureConfig) -> FeatureReport {
        let anchors: Vec<AnchorSpec> = AnchorSpec::default_set(4)[..cfg.num_anchors].to_vec();
        task_feature(ds, &anchors, cfg, 77).unwrap()
    }

    #[test]
    fn task_feature_is_unit_and_deterministic() {
        let ds = toy(TaskLevel::Node, 5);
        let cfg = FeatureConfig {
            num_anchors: 3,
            repeats: 2,
            last_layer_steps: 10,
            last_layer_lr: 0.1,
        };
        let a = features_for(&ds, &cfg);
        let b = features_for(&ds.clone(), &cfg);
        assert_eq!(a, b);
        assert_eq!(a.feature.values.len(), 3);
        assert_eq!(a.per_anchor_alpha.len(), 3);
        assert!(a.per_anchor_alpha.iter().flatten().all(|&x| x >= 1.0 - 1e-9));
        let norm: f64 = a.feature.values.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn equal_alphas_normalise_to_uniform_direction() {
        let f = TaskFeature::from_raw(vec![2.5; 12]).unwrap();
        for v in &f.values {
            assert!((v - 1.0 / 12f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_count_must_match() {
        let ds = toy(TaskLevel::Node, 6);
        let anchors = AnchorSpec::default_set(4);
        let cfg = FeatureConfig::default();
        assert!(task_feature(&ds, &anchors[..5], &cfg, 0).is_err());
    }
}
