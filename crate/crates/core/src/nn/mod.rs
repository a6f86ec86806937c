//! Message-passing networks built on the autodiff tape.
//!
//! A network is a stack of pre-process linear layers (input width to hidden),
//! message-passing layers (hidden to hidden), and post-process linear layers
//! (hidden to classes). Graph-level tasks mean-pool node states between the
//! message-passing and post-process stages.

mod train;

pub use train::{
    accuracy, evaluate_config, loss_trajectory, train_full, train_last_layer, TrainOutcome, TrainSettings,
    WEIGHT_DECAY,
};

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionGraph, RowMix, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphBatch, GraphDataset, TaskLevel};
use crate::rng::rng_from_seed;
use crate::space::{self, DesignConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    General,
    Gcn,
    Sage,
    Gin,
    Gat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Prelu,
    LeakyRelu,
    Elu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Stack,
    SkipSum,
    SkipConcat,
}

/// Full structural description of a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub conv: ConvKind,
    pub heads: usize,
    pub aggregation: Aggregation,
    pub activation: Activation,
    pub hidden: usize,
    pub connectivity: Connectivity,
    pub pre_layers: usize,
    pub mp_layers: usize,
    /// Post-process layer count, including the final classifier.
    pub post_layers: usize,
}

fn parse_num<T: std::str::FromStr>(config: &DesignConfig, dim: &str) -> Result<T> {
    let raw = config
        .get(dim)
        .ok_or_else(|| Error::MissingDimension(dim.to_string()))?;
    raw.parse().map_err(|_| Error::UnknownChoice {
        dimension: dim.to_string(),
        choice: raw.to_string(),
    })
}

fn lookup<T: Copy>(config: &DesignConfig, dim: &str, table: &[(&str, T)]) -> Result<T> {
    let raw = config
        .get(dim)
        .ok_or_else(|| Error::MissingDimension(dim.to_string()))?;
    table
        .iter()
        .find(|(name, _)| *name == raw)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::UnknownChoice {
            dimension: dim.to_string(),
            choice: raw.to_string(),
        })
}

impl Architecture {
    pub fn from_config(config: &DesignConfig) -> Result<Self> {
        let arch = Self {
            conv: lookup(
                config,
                space::CONVOLUTION,
                &[
                    ("GeneralConv", ConvKind::General),
                    ("GCNConv", ConvKind::Gcn),
                    ("SAGEConv", ConvKind::Sage),
                    ("GINConv", ConvKind::Gin),
                    ("GATConv", ConvKind::Gat),
                ],
            )?,
            heads: parse_num(config, space::HEADS)?,
            aggregation: lookup(
                config,
                space::AGGREGATION,
                &[
                    ("Sum", Aggregation::Sum),
                    ("Mean", Aggregation::Mean),
                    ("Max", Aggregation::Max),
                ],
            )?,
            activation: lookup(
                config,
                space::ACTIVATION,
                &[
                    ("ReLU", Activation::Relu),
                    ("pReLU", Activation::Prelu),
                    ("leaky_ReLU", Activation::LeakyRelu),
                    ("ELU", Activation::Elu),
                ],
            )?,
            hidden: parse_num(config, space::HIDDEN)?,
            connectivity: lookup(
                config,
                space::CONNECTIVITY,
                &[
                    ("Stack", Connectivity::Stack),
                    ("Skip-Sum", Connectivity::SkipSum),
                    ("Skip-Concat", Connectivity::SkipConcat),
                ],
            )?,
            pre_layers: parse_num(config, space::PRE_LAYERS)?,
            mp_layers: parse_num(config, space::MP_LAYERS)?,
            post_layers: parse_num(config, space::POST_LAYERS)?,
        };
        arch.check()?;
        Ok(arch)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.hidden == 0 || self.pre_layers == 0 || self.mp_layers == 0 || self.post_layers == 0
        {
            return bad("hidden width and layer counts must be positive");
        }
        if self.heads == 0 {
            return bad("heads must be positive");
        }
        if self.conv == ConvKind::Gat && self.hidden % self.heads != 0 {
            return bad("attention heads must divide the hidden width");
        }
        Ok(())
    }

    fn mp_input_dim(&self, layer: usize) -> usize {
        match self.connectivity {
            Connectivity::SkipConcat => self.hidden * (layer + 1),
            _ => self.hidden,
        }
    }

    fn post_input_dim(&self) -> usize {
        self.mp_input_dim(self.mp_layers)
    }

    fn has_slope(&self) -> bool {
        self.activation == Activation::Prelu
    }
}

/// Convolution used by an anchor model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorConv {
    /// Mean over the neighbourhood including the node itself.
    MeanConv,
    /// Elementwise max over the neighbourhood including the node itself.
    MaxConv,
    /// GIN-style sum over the neighbourhood including the node itself.
    SumConv,
}

/// A fixed probe design used to characterise tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub conv_type: AnchorConv,
    pub num_mp_layers: usize,
    pub connectivity: Connectivity,
    pub hidden_dim: usize,
}

impl AnchorSpec {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            conv: ConvKind::General,
            heads: 1,
            aggregation: match self.conv_type {
                AnchorConv::MeanConv => Aggregation::Mean,
                AnchorConv::MaxConv => Aggregation::Max,
                AnchorConv::SumConv => Aggregation::Sum,
            },
            activation: Activation::Relu,
            hidden: self.hidden_dim,
            connectivity: self.connectivity,
            pre_layers: 1,
            mp_layers: self.num_mp_layers,
            post_layers: 1,
        }
    }

    /// The twelve default anchors: {mean, max, sum} x {2, 4 layers} x {stack, skip-sum}.
    pub fn default_set(hidden_dim: usize) -> Vec<AnchorSpec> {
        let mut out = Vec::with_capacity(12);
        for conv_type in [AnchorConv::MeanConv, AnchorConv::MaxConv, AnchorConv::SumConv] {
            for num_mp_layers in [2, 4] {
                for connectivity in [Connectivity::Stack, Connectivity::SkipSum] {
                    out.push(AnchorSpec {
                        conv_type,
                        num_mp_layers,
                        connectivity,
                        hidden_dim,
                    });
                }
            }
        }
        out
    }
}

/// Tensors of one layer. Linear layers hold `[W, b]`; message-passing layers
/// hold a convolution-specific list (see [`ModelParams`]). A trailing `1 x 1`
/// tensor is the PReLU slope when the activation is parametric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub tensors: Vec<Array2<f64>>,
}

/// Weights of a network.
///
/// Message-passing tensors per convolution:
/// `General`/`Gcn`: `[W, b]`; `Sage`: `[W_self, W_neigh, b]`;
/// `Gin`: `[W1, b1, W2, b2]`; `Gat`: `[W, a_src, a_dst, b]`.
/// The flat message-passing vector ([`Self::mp_flat`]) concatenates these
/// tensors row-major, layer by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub pre: Vec<LayerParams>,
    pub mp: Vec<LayerParams>,
    pub post: Vec<LayerParams>,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

const PRELU_INIT: f64 = 0.25;

impl ModelParams {
    /// Random weights: uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(arch: &Architecture, input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let h = arch.hidden;
        let slope = |t: &mut Vec<Array2<f64>>| {
            if arch.has_slope() {
                t.push(Array2::from_elem((1, 1), PRELU_INIT));
            }
        };
        let linear = |rng: &mut crate::rng::Rng, i: usize, o: usize| {
            vec![uniform(rng, i, o, i), Array2::zeros((1, o))]
        };

        let mut pre = Vec::with_capacity(arch.pre_layers);
        for l in 0..arch.pre_layers {
            let mut t = linear(&mut rng, if l == 0 { input_dim } else { h }, h);
            slope(&mut t);
            pre.push(LayerParams { tensors: t });
        }

        let mut mp = Vec::with_capacity(arch.mp_layers);
        for l in 0..arch.mp_layers {
            let d = arch.mp_input_dim(l);
            let mut t = match arch.conv {
                ConvKind::General | ConvKind::Gcn => linear(&mut rng, d, h),
                ConvKind::Sage => vec![
                    uniform(&mut rng, d, h, d),
                    uniform(&mut rng, d, h, d),
                    Array2::zeros((1, h)),
                ],
                ConvKind::Gin => {
                    let mut t = linear(&mut rng, d, h);
                    t.extend(linear(&mut rng, h, h));
                    t
                }
                ConvKind::Gat => {
                    let dh = h / arch.heads;
                    vec![
                        uniform(&mut rng, d, h, d),
                        uniform(&mut rng, arch.heads, dh, dh),
                        uniform(&mut rng, arch.heads, dh, dh),
                        Array2::zeros((1, h)),
                    ]
                }
            };
            slope(&mut t);
            mp.push(LayerParams { tensors: t });
        }

        let mut post = Vec::with_capacity(arch.post_layers);
        for l in 0..arch.post_layers {
            let i = if l == 0 { arch.post_input_dim() } else { h };
            let last = l + 1 == arch.post_layers;
            let mut t = linear(&mut rng, i, if last { num_classes } else { h });
            if !last {
                slope(&mut t);
            }
            post.push(LayerParams { tensors: t });
        }

        Self {
            arch: arch.clone(),
            input_dim,
            num_classes,
            pre,
            mp,
            post,
        }
    }

    pub fn init_anchor(spec: &AnchorSpec, input_dim: usize, num_classes: usize, seed: u64) -> Self {
        Self::init(&spec.architecture(), input_dim, num_classes, seed)
    }

    /// Number of message-passing parameters.
    pub fn mp_param_count(&self) -> usize {
        self.mp
            .iter()
            .flat_map(|l| &l.tensors)
            .map(|t| t.len())
            .sum()
    }

    pub fn mp_flat(&self) -> Vec<f64> {
        self.mp
            .iter()
            .flat_map(|l| &l.tensors)
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn set_mp_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.mp_param_count(), "flat length");
        let mut it = flat.iter();
        for t in self.mp.iter_mut().flat_map(|l| &mut l.tensors) {
            for v in t.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.pre
            .iter()
            .chain(&self.mp)
            .chain(&self.post)
            .flat_map(|l| &l.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.pre
            .iter_mut()
            .chain(self.mp.iter_mut())
            .chain(self.post.iter_mut())
            .flat_map(|l| l.tensors.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Which parameter groups receive gradients when recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    None,
    MessagePassing,
    All,
}

/// Neighbourhood operators of a batch, built once and reused across epochs.
pub struct PreparedBatch {
    pub batch: GraphBatch,
    sum_self: Arc<RowMix>,
    mean_self: Arc<RowMix>,
    sum_nbr: Arc<RowMix>,
    mean_nbr: Arc<RowMix>,
    gcn: Arc<RowMix>,
    with_self: Vec<Vec<usize>>,
    segment: Arc<Vec<usize>>,
}

impl PreparedBatch {
    pub fn new(batch: GraphBatch) -> Self {
        let with_self: Vec<Vec<usize>> = batch
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut v = l.clone();
                v.push(i);
                v.sort_unstable();
                v
            })
            .collect();
        let mix = |lists: &[Vec<usize>], mean: bool| {
            Arc::new(RowMix {
                rows: lists
                    .iter()
                    .map(|l| {
                        let w = if mean && !l.is_empty() {
                            1.0 / l.len() as f64
                        } else {
                            1.0
                        };
                        l.iter().map(|&j| (j, w)).collect()
                    })
                    .collect(),
            })
        };
        let deg: Vec<f64> = with_self.iter().map(|l| l.len() as f64).collect();
        let gcn = Arc::new(RowMix {
            rows: with_self
                .iter()
                .enumerate()
                .map(|(i, l)| l.iter().map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt())).collect())
                .collect(),
        });
        Self {
            sum_self: mix(&with_self, false),
            mean_self: mix(&with_self, true),
            sum_nbr: mix(&batch.neighbors, false),
            mean_nbr: mix(&batch.neighbors, true),
            gcn,
            segment: Arc::new(batch.segment.clone()),
            with_self,
            batch,
        }
    }

    fn aggregate(&self, tape: &mut Tape, x: Var, agg: Aggregation, include_self: bool) -> Var {
        match (agg, include_self) {
            (Aggregation::Sum, true) => tape.mix(x, self.sum_self.clone()),
            (Aggregation::Sum, false) => tape.mix(x, self.sum_nbr.clone()),
            (Aggregation::Mean, true) => tape.mix(x, self.mean_self.clone()),
            (Aggregation::Mean, false) => tape.mix(x, self.mean_nbr.clone()),
            (Aggregation::Max, true) => tape.max_agg(x, &self.with_self),
            (Aggregation::Max, false) => tape.max_agg(x, &self.batch.neighbors),
        }
    }
}

/// Parameters recorded on a tape, mirroring [`ModelParams`] layout.
pub struct TapeParams {
    pub pre: Vec<Vec<Var>>,
    pub mp: Vec<Vec<Var>>,
    pub post: Vec<Vec<Var>>,
}

impl TapeParams {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.pre
            .iter()
            .chain(&self.mp)
            .chain(&self.post)
            .flat_map(|l| l.iter().copied())
    }

    pub fn mp_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.mp.iter().flat_map(|l| l.iter().copied())
    }
}

/// Output of a recorded forward pass.
pub struct Recorded {
    pub params: TapeParams,
    /// Input to the final classifier layer.
    pub penultimate: Var,
    pub logits: Var,
    pub log_probs: Var,
}

fn activate(tape: &mut Tape, x: Var, act: Activation, slope: Option<Var>) -> Var {
    match act {
        Activation::Relu => tape.unary(x, Unary::Relu),
        Activation::LeakyRelu => tape.unary(x, Unary::LeakyRelu(0.01)),
        Activation::Elu => tape.unary(x, Unary::Elu(1.0)),
        Activation::Prelu => tape.prelu(x, slope.expect("prelu slope present")),
    }
}

const GAT_NEGATIVE_SLOPE: f64 = 0.2;

impl ModelParams {
    /// Records the forward pass of `self` on `prepared` into `tape`.
    pub fn record(&self, tape: &mut Tape, prepared: &PreparedBatch, scope: GradScope) -> Recorded {
        let arch = &self.arch;
        let put = |layers: &[LayerParams], grad: bool, tape: &mut Tape| -> Vec<Vec<Var>> {
            layers
                .iter()
                .map(|l| l.tensors.iter().map(|t| tape.leaf(t.clone(), grad)).collect())
                .collect()
        };
        let all = scope == GradScope::All;
        let params = TapeParams {
            pre: put(&self.pre, all, tape),
            mp: put(&self.mp, scope != GradScope::None, tape),
            post: put(&self.post, all, tape),
        };
        let slope_of = |l: &[Var], base: usize| l.get(base).copied();

        let mut h = tape.constant(prepared.batch.features.clone());
        for l in &params.pre {
            let z = tape.matmul(h, l[0]);
            let z = tape.add_row(z, l[1]);
            h = activate(tape, z, arch.activation, slope_of(l, 2));
        }

        for l in &params.mp {
            let (m, slope_at) = match arch.conv {
                ConvKind::General => {
                    let z = tape.matmul(h, l[0]);
                    let z = prepared.aggregate(tape, z, arch.aggregation, true);
                    (tape.add_row(z, l[1]), 2)
                }
                ConvKind::Gcn => {
                    let z = tape.matmul(h, l[0]);
                    let z = tape.mix(z, prepared.gcn.clone());
                    (tape.add_row(z, l[1]), 2)
                }
                ConvKind::Sage => {
                    let own = tape.matmul(h, l[0]);
                    let nbr = prepared.aggregate(tape, h, arch.aggregation, false);
                    let nbr = tape.matmul(nbr, l[1]);
                    let z = tape.add(own, nbr);
                    (tape.add_row(z, l[2]), 3)
                }
                ConvKind::Gin => {
                    let nbr = prepared.aggregate(tape, h, arch.aggregation, false);
                    let z = tape.add(h, nbr);
                    let z = tape.matmul(z, l[0]);
                    let z = tape.add_row(z, l[1]);
                    let z = tape.unary(z, Unary::Relu);
                    let z = tape.matmul(z, l[2]);
                    (tape.add_row(z, l[3]), 4)
                }
                ConvKind::Gat => {
                    let z = tape.matmul(h, l[0]);
                    let graph = Arc::new(AttentionGraph {
                        neighbors: prepared.with_self.clone(),
                        heads: arch.heads,
                        negative_slope: GAT_NEGATIVE_SLOPE,
                    });
                    let z = tape.attention(z, l[1], l[2], graph);
                    (tape.add_row(z, l[3]), 4)
                }
            };
            let m = activate(tape, m, arch.activation, slope_of(l, slope_at));
            h = match arch.connectivity {
                Connectivity::Stack => m,
                Connectivity::SkipSum => tape.add(h, m),
                Connectivity::SkipConcat => tape.concat_cols(h, m),
            };
        }

        if prepared.batch.level == TaskLevel::Graph {
            h = tape.segment_mean(h, prepared.segment.clone(), prepared.batch.num_graphs);
        }

        let last = params.post.len() - 1;
        for l in &params.post[..last] {
            let z = tape.matmul(h, l[0]);
            let z = tape.add_row(z, l[1]);
            h = activate(tape, z, arch.activation, slope_of(l, 2));
        }
        let penultimate = h;
        let z = tape.matmul(h, params.post[last][0]);
        let logits = tape.add_row(z, params.post[last][1]);
        let log_probs = tape.log_softmax(logits);
        Recorded {
            params,
            penultimate,
            logits,
            log_probs,
        }
    }

    /// Posterior class probabilities for every prediction unit of `prepared`.
    pub fn posterior_batch(&self, prepared: &PreparedBatch) -> Array2<f64> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, prepared, GradScope::None);
        tape.value(rec.log_probs).mapv(f64::exp)
    }
}

/// Posterior of one graph: one row per node (node level) or a single row.
pub fn forward(params: &ModelParams, dataset: &GraphDataset, graph_index: usize) -> Array2<f64> {
    let prepared = PreparedBatch::new(GraphBatch::new(dataset, &[graph_index]));
    params.posterior_batch(&prepared)
}

/// Reverse-mode gradient of `log P(class | unit)` with respect to the flat
/// message-passing parameters. `unit_index` is the node index inside the
/// graph for node-level tasks and is ignored for graph-level tasks.
pub fn loglik_grad_mp(
    params: &ModelParams,
    dataset: &GraphDataset,
    graph_index: usize,
    unit_index: usize,
    class_index: usize,
) -> Vec<f64> {
    assert!(class_index < params.num_classes, "class index out of range");
    let prepared = PreparedBatch::new(GraphBatch::new(dataset, &[graph_index]));
    let mut tape = Tape::new();
    let rec = params.record(&mut tape, &prepared, GradScope::MessagePassing);
    let row = match dataset.level {
        TaskLevel::Node => unit_index,
        TaskLevel::Graph => 0,
    };
    mp_score(&tape, &rec, row, class_index)
}

/// Flat message-passing gradient of one log-probability entry of a recording.
pub(crate) fn mp_score(tape: &Tape, rec: &Recorded, row: usize, class: usize) -> Vec<f64> {
    let mut seed = Array2::zeros(tape.value(rec.log_probs).raw_dim());
    seed[[row, class]] = 1.0;
    let grads = tape.backward_with(rec.log_probs, seed);
    let mut out = Vec::new();
    for v in rec.params.mp_vars() {
        out.extend(grads.get_or_zeros(tape, v).iter().copied());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Splits};
    use ndarray::array;

    fn random_dataset(level: TaskLevel, d_in: usize, seed: u64) -> GraphDataset {
        let mut rng = rng_from_seed(seed);
        let graphs = (0..3)
            .map(|_| {
                let n = 6;
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in 0..n {
                        if i != j && rng.random_bool(0.35) {
                            edges.push((i, j));
                        }
                    }
                }
                Graph {
                    features: Array2::from_shape_fn((n, d_in), |_| rng.random_range(-1.0..1.0)),
                    edges,
                    labels: match level {
                        TaskLevel::Node => (0..n).map(|i| i % 3).collect(),
                        TaskLevel::Graph => vec![rng.random_range(0..3)],
                    },
                }
            })
            .collect();
        let mut ds = GraphDataset::new(graphs, level, 3, Splits::default()).unwrap();
        ds.default_split(seed);
        ds
    }

    fn all_architectures(hidden: usize) -> Vec<Architecture> {
        let mut out = Vec::new();
        for conv in [ConvKind::General, ConvKind::Gcn, ConvKind::Sage, ConvKind::Gin, ConvKind::Gat] {
            for (aggregation, activation, connectivity) in [
                (Aggregation::Sum, Activation::Prelu, Connectivity::SkipConcat),
                (Aggregation::Mean, Activation::Elu, Connectivity::Stack),
                (Aggregation::Max, Activation::LeakyRelu, Connectivity::SkipSum),
            ] {
                out.push(Architecture {
                    conv,
                    heads: if conv == ConvKind::Gat { 2 } else { 1 },
                    aggregation,
                    activation,
                    hidden,
                    connectivity,
                    pre_layers: 2,
                    mp_layers: 2,
                    post_layers: 2,
                });
            }
        }
        out
    }

    #[test]
    fn init_is_deterministic() {
        let arch = AnchorSpec::default_set(8)[0].architecture();
        let a = ModelParams::init(&arch, 5, 3, 11);
        let b = ModelParams::init(&arch, 5, 3, 11);
        let c = ModelParams::init(&arch, 5, 3, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mp_count_ignores_dataset_shape() {
        let spec = AnchorSpec {
            conv_type: AnchorConv::MeanConv,
            num_mp_layers: 2,
            connectivity: Connectivity::Stack,
            hidden_dim: 8,
        };
        for (d_in, classes) in [(1, 2), (7, 5), (100, 3)] {
            let p = ModelParams::init_anchor(&spec, d_in, classes, 0);
            assert_eq!(p.mp_param_count(), 2 * (8 * 8 + 8));
        }
        for spec in AnchorSpec::default_set(16) {
            let a = ModelParams::init_anchor(&spec, 3, 2, 1).mp_param_count();
            let b = ModelParams::init_anchor(&spec, 30, 7, 1).mp_param_count();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn posterior_rows_are_normalised() {
        for level in [TaskLevel::Node, TaskLevel::Graph] {
            let ds = random_dataset(level, 4, 3);
            for (i, arch) in all_architectures(8).iter().enumerate() {
                let p = ModelParams::init(arch, 4, 3, i as u64);
                for g in 0..ds.graphs.len() {
                    let post = forward(&p, &ds, g);
                    let rows = if level == TaskLevel::Node { 6 } else { 1 };
                    assert_eq!(post.nrows(), rows);
                    for r in post.rows() {
                        assert!((r.sum() - 1.0).abs() < 1e-9);
                        assert!(r.iter().all(|v| v.is_finite() && *v >= 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn node_permutation_equivariance() {
        let ds = random_dataset(TaskLevel::Node, 4, 5);
        let g = &ds.graphs[0];
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut features = Array2::zeros(g.features.raw_dim());
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).assign(&g.features.row(old));
        }
        let permuted = Graph {
            features,
            edges: g.edges.iter().map(|&(s, t)| (perm[s], perm[t])).collect(),
            labels: vec![0; 6],
        };
        let ds2 = GraphDataset::new(vec![permuted], TaskLevel::Node, 3, Splits::default()).unwrap();
        for (i, arch) in all_architectures(8).iter().enumerate() {
            let p = ModelParams::init(arch, 4, 3, 40 + i as u64);
            let a = forward(&p, &ds, 0);
            let b = forward(&p, &ds2, 0);
            for (old, &new) in perm.iter().enumerate() {
                for c in 0..3 {
                    assert!((a[[old, c]] - b[[new, c]]).abs() < 1e-12, "{arch:?}");
                }
            }
        }
    }

    #[test]
    fn mean_conv_matches_hand_computation() {
        // Path 0-1-2, scalar features, one mean-conv layer with identity weights.
        let ds = GraphDataset::new(
            vec![Graph {
                features: array![[1.0], [2.0], [4.0]],
                edges: vec![(0, 1), (1, 0), (1, 2), (2, 1)],
                labels: vec![0, 1, 0],
            }],
            TaskLevel::Node,
            2,
            Splits::default(),
        )
        .unwrap();
        let arch = Architecture {
            conv: ConvKind::General,
            heads: 1,
            aggregation: Aggregation::Mean,
            activation: Activation::Relu,
            hidden: 1,
            connectivity: Connectivity::Stack,
            pre_layers: 1,
            mp_layers: 1,
            post_layers: 1,
        };
        let mut p = ModelParams::init(&arch, 1, 2, 0);
        p.pre[0].tensors = vec![array![[1.0]], array![[0.0]]];
        p.mp[0].tensors = vec![array![[2.0]], array![[0.5]]];
        p.post[0].tensors = vec![array![[1.0, -1.0]], array![[0.0, 0.0]]];
        let prepared = PreparedBatch::new(ds.full_batch());
        let mut tape = Tape::new();
        let rec = p.record(&mut tape, &prepared, GradScope::None);
        // node 0: mean(1,2)*2+0.5 = 3.5; node 1: mean(1,2,4)*2+0.5 = 5.1667; node 2: mean(2,4)*2+0.5 = 6.5
        let hidden = tape.value(rec.penultimate);
        let expected = [3.5, 7.0 / 3.0 * 2.0 + 0.5, 6.5];
        for (i, e) in expected.iter().enumerate() {
            assert!((hidden[[i, 0]] - e).abs() < 1e-12);
        }
        let post = forward(&p, &ds, 0);
        let p0 = 1.0 / (1.0 + (-7.0f64).exp());
        assert!((post[[0, 0]] - p0).abs() < 1e-12);
    }

    #[test]
    fn zero_input_gives_zero_first_layer_weight_gradient() {
        let mut ds = random_dataset(TaskLevel::Node, 3, 8);
        for g in &mut ds.graphs {
            g.features.fill(0.0);
        }
        let spec = AnchorSpec::default_set(8)[0];
        let p = ModelParams::init_anchor(&spec, 3, 3, 2);
        let grad = loglik_grad_mp(&p, &ds, 0, 1, 2);
        assert_eq!(grad.len(), p.mp_param_count());
        assert!(grad[..64].iter().all(|&v| v == 0.0));
    }

    fn fd_check(p: &ModelParams, ds: &GraphDataset, graph: usize, unit: usize, class: usize) {
        let grad = loglik_grad_mp(p, ds, graph, unit, class);
        let flat = p.mp_flat();
        let h = 1e-5;
        let row = if ds.level == TaskLevel::Node { unit } else { 0 };
        let logp = |flat: &[f64]| {
            let mut q = p.clone();
            q.set_mp_flat(flat);
            forward(&q, ds, graph)[[row, class]].ln()
        };
        let mut rng = rng_from_seed(77);
        for _ in 0..20 {
            let i = rng.random_range(0..flat.len());
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fd = (logp(&plus) - logp(&minus)) / (2.0 * h);
            let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(err <= 1e-4, "{:?} coord {i}: {} vs {}", p.arch, grad[i], fd);
        }
    }

    #[test]
    fn mp_gradient_matches_finite_differences() {
        for level in [TaskLevel::Node, TaskLevel::Graph] {
            let ds = random_dataset(level, 4, 21);
            for (i, arch) in all_architectures(4).iter().enumerate() {
                let p = ModelParams::init(arch, 4, 3, 100 + i as u64);
                fd_check(&p, &ds, 1, 2, 1);
            }
            for (i, spec) in AnchorSpec::default_set(8).iter().enumerate() {
                let p = ModelParams::init_anchor(spec, 4, 3, 200 + i as u64);
                fd_check(&p, &ds, 0, 3, 2);
            }
        }
    }
}
