//! Synthetic task families: a two-block SBM node task and a motif-count graph
//! task.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bank::TaskRecord;
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphDataset, Splits, TaskLevel};
use crate::rng::{derive_seed, rng_from_seed, Rng as ChaRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Generator {
    /// One graph, two equal blocks; the label is the block. Feature 0 carries
    /// `feature_signal` times the block sign, every feature has unit noise.
    Sbm {
        p_in: f64,
        p_out: f64,
        feature_signal: f64,
    },
    /// Many small Erdos-Renyi graphs with two node colours. The label is
    /// whether the number of edges joining two coloured nodes reaches the
    /// dataset median.
    MotifCount { edge_prob: f64, color_prob: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task_id: String,
    pub family_id: u32,
    pub generator: Generator,
    pub n_graphs: usize,
    pub n_nodes: usize,
    pub feature_dim: usize,
    /// Probability of flipping each label.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    pub fn level(&self) -> TaskLevel {
        match self.generator {
            Generator::Sbm { .. } => TaskLevel::Node,
            Generator::MotifCount { .. } => TaskLevel::Graph,
        }
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("task `{}`: {m}", self.task_id)));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.noise) {
            return bad("noise must be a probability");
        }
        match self.generator {
            Generator::Sbm { p_in, p_out, .. } => {
                if !prob(p_in) || !prob(p_out) {
                    return bad("edge probabilities out of range");
                }
                if self.n_graphs != 1 || self.n_nodes < 8 || self.feature_dim < 1 {
                    return bad("SBM needs one graph, at least 8 nodes, and a feature");
                }
            }
            Generator::MotifCount {
                edge_prob,
                color_prob,
            } => {
                if !prob(edge_prob) || !prob(color_prob) {
                    return bad("edge or colour probability out of range");
                }
                if self.n_graphs < 10 || self.n_nodes < 4 || self.feature_dim < 2 {
                    return bad("motif task needs 10 graphs, 4 nodes, and 2 features");
                }
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut ChaRng) -> f64 {
    StandardNormal.sample(rng)
}

fn undirected(edges: &mut Vec<(usize, usize)>, a: usize, b: usize) {
    edges.push((a, b));
    edges.push((b, a));
}

fn sbm(spec: &SyntheticTaskSpec, p_in: f64, p_out: f64, signal: f64, rng: &mut ChaRng) -> Graph {
    let n = spec.n_nodes;
    let block: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if block[a] == block[b] { p_in } else { p_out };
            if rng.random_bool(p) {
                undirected(&mut edges, a, b);
            }
        }
    }
    let features = Array2::from_shape_fn((n, spec.feature_dim), |(i, j)| {
        let sign = if block[i] == 1 { 1.0 } else { -1.0 };
        let base = if j == 0 { signal * sign } else { 0.0 };
        base + normal(rng)
    });
    let labels = block
        .into_iter()
        .map(|b| if rng.random_bool(spec.noise) { 1 - b } else { b })
        .collect();
    Graph {
        features,
        edges,
        labels,
    }
}

fn motif_graphs(spec: &SyntheticTaskSpec, edge_prob: f64, color_prob: f64, rng: &mut ChaRng) -> Vec<Graph> {
    let mut graphs = Vec::with_capacity(spec.n_graphs);
    let mut counts = Vec::with_capacity(spec.n_graphs);
    for _ in 0..spec.n_graphs {
        let n = spec.n_nodes + rng.random_range(0..=spec.n_nodes / 2);
        let colored: Vec<bool> = (0..n).map(|_| rng.random_bool(color_prob)).collect();
        let mut edges = Vec::new();
        let mut count = 0usize;
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(edge_prob) {
                    undirected(&mut edges, a, b);
                    count += (colored[a] && colored[b]) as usize;
                }
            }
        }
        let features = Array2::from_shape_fn((n, spec.feature_dim), |(i, j)| match j {
            0 => colored[i] as u8 as f64,
            1 => 1.0 - colored[i] as u8 as f64,
            _ => 0.1 * normal(rng),
        });
        counts.push(count);
        graphs.push(Graph {
            features,
            edges,
            labels: vec![0],
        });
    }
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let threshold = sorted[sorted.len() / 2];
    for (g, c) in graphs.iter_mut().zip(counts) {
        let label = (c >= threshold) as usize;
        g.labels[0] = if rng.random_bool(spec.noise) { 1 - label } else { label };
    }
    graphs
}

/// Builds the dataset of `spec` with a seeded 50/25/25 split, and an empty
/// task record for it.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<(TaskRecord, GraphDataset)> {
    spec.check()?;
    let mut rng = rng_from_seed(derive_seed(spec.seed, &[1]));
    let graphs = match spec.generator {
        Generator::Sbm {
            p_in,
            p_out,
            feature_signal,
        } => vec![sbm(spec, p_in, p_out, feature_signal, &mut rng)],
        Generator::MotifCount {
            edge_prob,
            color_prob,
        } => motif_graphs(spec, edge_prob, color_prob, &mut rng),
    };
    let mut dataset = GraphDataset::new(graphs, spec.level(), 2, Splits::default())?;
    dataset.split_by_seed(0.5, 0.25, derive_seed(spec.seed, &[2]));
    let shell = TaskRecord::new(&spec.task_id, spec.level(), format!("{}.jsonl", spec.task_id));
    Ok((shell, dataset))
}

/// The default twelve-task suite: six SBM node tasks and six motif-count
/// graph tasks with varied sizes, densities, and noise.
pub fn default_suite(seed: u64) -> Vec<SyntheticTaskSpec> {
    let mut out = Vec::new();
    let sbm = [
        (0.018, 0.0024, 0.15),
        (0.015, 0.003, 0.1),
        (0.021, 0.0018, 0.2),
        (0.0165, 0.0027, 0.125),
        (0.0195, 0.0021, 0.175),
        (0.017, 0.0029, 0.11),
    ];
    for (i, &(p_in, p_out, feature_signal)) in sbm.iter().enumerate() {
        out.push(SyntheticTaskSpec {
            task_id: format!("sbm-{i}"),
            family_id: 0,
            generator: Generator::Sbm {
                p_in,
                p_out,
                feature_signal,
            },
            n_graphs: 1,
            n_nodes: 360 + 10 * i,
            feature_dim: 4,
            noise: 0.05,
            seed: derive_seed(seed, &[0, i as u64]),
        });
    }
    let motif = [
        (0.5, 0.5),
        (0.4, 0.6),
        (0.6, 0.45),
        (0.44, 0.55),
        (0.55, 0.5),
        (0.46, 0.58),
    ];
    for (i, &(edge_prob, color_prob)) in motif.iter().enumerate() {
        out.push(SyntheticTaskSpec {
            task_id: format!("motif-{i}"),
            family_id: 1,
            generator: Generator::MotifCount {
                edge_prob,
                color_prob,
            },
            n_graphs: 160 + 8 * i,
            n_nodes: 6,
            feature_dim: 4,
            noise: 0.05,
            seed: derive_seed(seed, &[1, i as u64]),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{evaluate_config, train_full, AnchorConv, AnchorSpec, Connectivity, TrainSettings};
    use crate::space::DesignConfig;

    fn sbm_spec(noise: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_id: "sbm".into(),
            family_id: 0,
            generator: Generator::Sbm {
                p_in: 0.1,
                p_out: 0.01,
                feature_signal: 0.5,
            },
            n_graphs: 1,
            n_nodes: 200,
            feature_dim: 3,
            noise,
            seed: 9,
        }
    }

    #[test]
    fn same_spec_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        for spec in [sbm_spec(0.1), default_suite(3).pop().unwrap()] {
            let (a_shell, a) = generate_task(&spec).unwrap();
            let (b_shell, b) = generate_task(&spec).unwrap();
            assert_eq!(a_shell, b_shell);
            assert_eq!(a, b);
            let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
            a.save(&pa).unwrap();
            b.save(&pb).unwrap();
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut other = sbm_spec(0.0);
        other.seed += 1;
        assert_ne!(generate_task(&sbm_spec(0.0)).unwrap().1, generate_task(&other).unwrap().1);
    }

    #[test]
    fn noiseless_sbm_is_learnable_by_a_shallow_mean_anchor() {
        let (_, ds) = generate_task(&sbm_spec(0.0)).unwrap();
        let anchor = AnchorSpec {
            conv_type: AnchorConv::MeanConv,
            num_mp_layers: 2,
            connectivity: Connectivity::Stack,
            hidden_dim: 16,
        };
        let out = train_full(&TrainSettings::anchor(&anchor, 0.01, 100), &ds, 1);
        assert!(out.val_metric >= 0.95, "val {}", out.val_metric);
    }

    #[test]
    fn motif_labels_are_balanced_and_split_covers_all_graphs() {
        let spec = default_suite(0).into_iter().find(|s| s.task_id == "motif-0").unwrap();
        let (shell, ds) = generate_task(&spec).unwrap();
        assert_eq!(shell.level, TaskLevel::Graph);
        assert_eq!(ds.graphs.len(), spec.n_graphs);
        let positives = ds.graphs.iter().filter(|g| g.labels[0] == 1).count();
        let frac = positives as f64 / ds.graphs.len() as f64;
        assert!((0.3..=0.8).contains(&frac), "positive fraction {frac}");
        let mut all: Vec<usize> = [&ds.splits.train, &ds.splits.val, &ds.splits.test]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.graphs.len()).collect::<Vec<_>>());
    }

    #[test]
    fn default_suite_has_two_families_of_six() {
        let suite = default_suite(0);
        assert_eq!(suite.len(), 12);
        for family in [0, 1] {
            assert_eq!(suite.iter().filter(|s| s.family_id == family).count(), 6);
        }
        for s in &suite {
            s.check().unwrap();
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = sbm_spec(1.5);
        assert!(generate_task(&s).is_err());
        s.noise = 0.0;
        s.n_graphs = 2;
        assert!(generate_task(&s).is_err());
        let mut m = default_suite(0).pop().unwrap();
        m.generator = Generator::MotifCount {
            edge_prob: 0.5,
            color_prob: -0.1,
        };
        assert!(generate_task(&m).is_err());
    }

    /// Exhaustive sweep over Aggregation x MP-layers on a motif-count task:
    /// counting rewards sum aggregation.
    #[test]
    fn motif_family_rewards_sum_aggregation() {
        let spec = default_suite(0).into_iter().find(|s| s.task_id == "motif-0").unwrap();
        let (_, ds) = generate_task(&spec).unwrap();
        let mut best = (f64::NEG_INFINITY, String::new());
        for agg in ["Sum", "Mean", "Max"] {
            for mp in ["2", "4", "6", "8"] {
                let config = DesignConfig::new()
                    .with("Convolution", "GeneralConv")
                    .with("Heads", "1")
                    .with("Aggregation", agg)
                    .with("Activation", "ReLU")
                    .with("Hidden", "16")
                    .with("Connectivity", "Skip-Sum")
                    .with("Pre-layers", "1")
                    .with("MP-layers", mp)
                    .with("Post-layers", "2")
                    .with("LR", "0.1")
                    .with("Epochs", "100");
                let val: f64 = (0..3)
                    .map(|seed| evaluate_config(&config, &ds, seed).unwrap().1.val_metric)
                    .sum::<f64>()
                    / 3.0;
                if val > best.0 {
                    best = (val, agg.to_string());
                }
            }
        }
        assert_eq!(best.1, "Sum", "best cell {best:?}");
    }
}
