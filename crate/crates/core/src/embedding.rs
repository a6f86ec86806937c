//! Projection of task features to unit-norm task embeddings, trained with a
//! margin ranking loss on triplets labelled by oracle distances.

use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{RowMix, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::fim::{TaskFeature, ZERO_TOL};
use crate::optim::Adam;
use crate::oracle::OracleDistances;
use crate::rng::rng_from_seed;

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: usize = 16;

/// Two affine layers with a ReLU in between, followed by L2 normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionNet {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEmbedding {
    pub values: Vec<f64>,
}

impl TaskEmbedding {
    pub fn dot(&self, other: &TaskEmbedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// Cosine distance `1 - a.b` between unit embeddings.
pub fn embed_distance(a: &TaskEmbedding, b: &TaskEmbedding) -> f64 {
    1.0 - a.dot(b)
}

/// `max(0, -y (s_ij - s_ik) + margin)`.
pub fn margin_ranking_loss(s_ij: f64, s_ik: f64, y: f64, margin: f64) -> f64 {
    (-y * (s_ij - s_ik) + margin).max(0.0)
}

impl ProjectionNet {
    /// Uniform `+-1/sqrt(fan_in)` weights and zero biases.
    pub fn init(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..=bound))
        };
        let w1 = layer(input_dim, hidden);
        let w2 = layer(hidden, output_dim);
        Self {
            w1,
            b1: Array2::zeros((1, hidden)),
            w2,
            b2: Array2::zeros((1, output_dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.ncols()
    }

    fn tensors(&self) -> [&Array2<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Records `normalize(relu(x w1 + b1) w2 + b2)` for every row of `x`.
    fn record(&self, tape: &mut Tape, x: Array2<f64>) -> ([Var; 4], Var, Var) {
        let p = self.tensors().map(|t| tape.leaf(t.clone(), true));
        let x = tape.constant(x);
        let h = tape.matmul(x, p[0]);
        let h = tape.add_row(h, p[1]);
        let h = tape.unary(h, Unary::Relu);
        let o = tape.matmul(h, p[2]);
        let raw = tape.add_row(o, p[3]);
        let z = tape.normalize_rows(raw);
        (p, raw, z)
    }

    /// Embeds every row of `x`; rows of the raw output with norm at or below
    /// the zero tolerance are rejected.
    fn embed_rows(&self, x: Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let (_, raw, z) = self.record(&mut tape, x);
        for row in tape.value(raw).rows() {
            if !(row.dot(&row).sqrt() > ZERO_TOL) {
                return Err(Error::ZeroVector);
            }
        }
        Ok(tape.value(z).clone())
    }

    pub fn project(&self, feature: &TaskFeature) -> Result<TaskEmbedding> {
        if feature.values.len() != self.input_dim() {
            return Err(Error::LengthMismatch(feature.values.len(), self.input_dim()));
        }
        let x = Array2::from_shape_vec((1, feature.values.len()), feature.values.clone())
            .expect("row vector");
        let z = self.embed_rows(x)?;
        Ok(TaskEmbedding {
            values: z.row(0).to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&NetFile::from(self)).expect("serialisable");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: NetFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        file.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    shape: [usize; 2],
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct NetFile {
    layers: Vec<LayerFile>,
}

impl From<&ProjectionNet> for NetFile {
    fn from(net: &ProjectionNet) -> Self {
        let layer = |w: &Array2<f64>, b: &Array2<f64>| LayerFile {
            shape: [w.nrows(), w.ncols()],
            weight: w.iter().copied().collect(),
            bias: b.iter().copied().collect(),
        };
        Self {
            layers: vec![layer(&net.w1, &net.b1), layer(&net.w2, &net.b2)],
        }
    }
}

impl TryFrom<NetFile> for ProjectionNet {
    type Error = Error;

    fn try_from(file: NetFile) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("projection file: {m}"));
        let [l1, l2]: [LayerFile; 2] = file
            .layers
            .try_into()
            .map_err(|_| bad("expected two layers"))?;
        if l1.shape[1] != l2.shape[0] {
            return Err(bad("layer shapes do not chain"));
        }
        let unpack = |l: LayerFile| -> Result<(Array2<f64>, Array2<f64>)> {
            let [r, c] = l.shape;
            let w = Array2::from_shape_vec((r, c), l.weight).map_err(|_| bad("weight size"))?;
            let b = Array2::from_shape_vec((1, c), l.bias).map_err(|_| bad("bias size"))?;
            Ok((w, b))
        };
        let (w1, b1) = unpack(l1)?;
        let (w2, b2) = unpack(l2)?;
        Ok(Self { w1, b1, w2, b2 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// `+1` when `j` is closer to `i` than `k` under the oracle.
    pub y: i8,
}

/// Every ordered triple of distinct tasks whose two oracle distances differ.
pub fn labelled_triplets(oracle: &OracleDistances) -> Vec<Triplet> {
    let n = oracle.tasks.len();
    let d = &oracle.matrix;
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i == j || i == k || j == k || d[i][j] == d[i][k] {
                    continue;
                }
                let y = if d[i][j] < d[i][k] { 1 } else { -1 };
                out.push(Triplet { i, j, k, y });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionTrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl Default for ProjectionTrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            lr: 5e-3,
            iterations: 1000,
            batch_size: 128,
            hidden: DEFAULT_HIDDEN,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

fn feature_matrix(features: &[&TaskFeature]) -> Result<Array2<f64>> {
    let u = features.first().map_or(0, |f| f.values.len());
    let mut flat = Vec::with_capacity(features.len() * u);
    for f in features {
        if f.values.len() != u {
            return Err(Error::LengthMismatch(f.values.len(), u));
        }
        flat.extend_from_slice(&f.values);
    }
    Ok(Array2::from_shape_vec((features.len(), u), flat).expect("sized above"))
}

/// Mean margin ranking loss over `triplets` (indices into the rows of
/// `features`) and its gradient with respect to `[w1, b1, w2, b2]`.
pub fn triplet_objective(
    net: &ProjectionNet,
    features: &Array2<f64>,
    triplets: &[Triplet],
    margin: f64,
) -> (f64, [Array2<f64>; 4]) {
    let mut tape = Tape::new();
    let (params, _, z) = net.record(&mut tape, features.clone());
    let gather = |pick: fn(&Triplet) -> usize| {
        Arc::new(RowMix {
            rows: triplets.iter().map(|t| vec![(pick(t), 1.0)]).collect(),
        })
    };
    let zi = tape.mix(z, gather(|t| t.i));
    let zj = tape.mix(z, gather(|t| t.j));
    let zk = tape.mix(z, gather(|t| t.k));
    let s_ij = tape.row_dot(zi, zj);
    let s_ik = tape.row_dot(zi, zk);
    let diff = tape.sub(s_ij, s_ik);
    let neg_y = Array2::from_shape_fn((triplets.len(), 1), |(r, _)| -f64::from(triplets[r].y));
    let hinge = tape.mul_const(diff, neg_y);
    let hinge = tape.add_scalar(hinge, margin);
    let hinge = tape.unary(hinge, Unary::Relu);
    let loss = tape.mean(hinge);
    let grads = tape.backward(loss);
    (
        tape.scalar(loss),
        params.map(|p| grads.get_or_zeros(&tape, p)),
    )
}

/// Mean triplet loss of `net` on a fixed triplet set.
pub fn mean_triplet_loss(
    net: &ProjectionNet,
    features: &Array2<f64>,
    triplets: &[Triplet],
    margin: f64,
) -> f64 {
    triplet_objective(net, features, triplets, margin).0
}

/// Trains the projection with Adam on uniformly sampled labelled triplets.
/// Triplets with tied oracle distances are never sampled.
pub fn train_projection(
    features: &IndexMap<String, TaskFeature>,
    oracle: &OracleDistances,
    cfg: &ProjectionTrainConfig,
    seed: u64,
) -> Result<ProjectionNet> {
    if features.len() < 3 {
        return Err(Error::InsufficientTasks {
            needed: 3,
            got: features.len(),
        });
    }
    if !(cfg.margin > 0.0) || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "margin and batch size must be positive".into(),
        ));
    }
    let ids: Vec<String> = features.keys().cloned().collect();
    let oracle = oracle.subset(&ids)?;
    let x = feature_matrix(&features.values().collect::<Vec<_>>())?;
    let pool = labelled_triplets(&oracle);
    if pool.is_empty() {
        return Err(Error::AllTied);
    }
    let mut rng = rng_from_seed(seed);
    let mut net = ProjectionNet::init(x.ncols(), cfg.hidden, cfg.embed_dim, rng.random());
    let mut adam = Adam::new(net.tensors().into_iter(), 0.0);
    for _ in 0..cfg.iterations {
        let batch: Vec<Triplet> = (0..cfg.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect();
        let (_, grads) = triplet_objective(&net, &x, &batch, cfg.margin);
        adam.step(net.tensors_mut().into_iter(), &grads, cfg.lr);
    }
    Ok(net)
}

/// Features and embeddings keyed by task id.
pub fn embed_all(
    net: &ProjectionNet,
    features: &IndexMap<String, TaskFeature>,
) -> Result<IndexMap<String, TaskEmbedding>> {
    features
        .iter()
        .map(|(id, f)| Ok((id.clone(), net.project(f)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn feature(v: &[f64]) -> TaskFeature {
        TaskFeature::from_raw(v.to_vec()).unwrap()
    }

    #[test]
    fn loss_cases() {
        assert_eq!(margin_ranking_loss(0.9, 0.5, 1.0, 0.1), 0.0);
        assert!((margin_ranking_loss(0.9, 0.5, -1.0, 0.1) - 0.5).abs() < 1e-15);
        assert!((margin_ranking_loss(0.55, 0.5, 1.0, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn distance_cases() {
        let e = |v: &[f64]| TaskEmbedding { values: v.to_vec() };
        assert_eq!(embed_distance(&e(&[1., 0.]), &e(&[1., 0.])), 0.0);
        assert_eq!(embed_distance(&e(&[1., 0.]), &e(&[0., 1.])), 1.0);
        assert_eq!(embed_distance(&e(&[1., 0.]), &e(&[-1., 0.])), 2.0);
    }

    #[test]
    fn hand_set_forward() {
        // h = relu(x W1 + b1) = (1, 0); o = h W2 + b2 = (3, 4) -> (0.6, 0.8).
        let net = ProjectionNet {
            w1: ndarray::array![[1.0, -1.0], [0.0, 0.0], [0.0, 0.0]],
            b1: ndarray::array![[0.0, 0.0]],
            w2: ndarray::array![[2.0, 4.0], [7.0, 7.0]],
            b2: ndarray::array![[1.0, 0.0]],
        };
        let z = net.project(&feature(&[1.0, 0.0, 0.0])).unwrap();
        assert!((z.values[0] - 0.6).abs() < 1e-15);
        assert!((z.values[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_output_is_rejected() {
        let mut net = ProjectionNet::init(3, 4, 2, 0);
        net.w2.fill(0.0);
        assert!(matches!(
            net.project(&feature(&[1.0, 2.0, 3.0])),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let net = ProjectionNet::init(5, 6, 4, 3);
        let mut rng = rng_from_seed(9);
        let x = Array2::from_shape_simple_fn((6, 5), || rng.random_range(0.0..1.0));
        let triplets: Vec<Triplet> = (0..40)
            .map(|_| {
                let mut idx = rand::seq::index::sample(&mut rng, 6, 3).into_vec();
                idx.rotate_left(rng.random_range(0..3));
                Triplet {
                    i: idx[0],
                    j: idx[1],
                    k: idx[2],
                    y: if rng.random_bool(0.5) { 1 } else { -1 },
                }
            })
            .collect();
        // A large margin keeps every hinge active, away from the kink.
        let margin = 3.0;
        let (_, grads) = triplet_objective(&net, &x, &triplets, margin);
        let h = 1e-6;
        for t in 0..4 {
            let shape = net.tensors()[t].dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let bump = |delta: f64| {
                        let mut n = net.clone();
                        n.tensors_mut()[t][[r, c]] += delta;
                        mean_triplet_loss(&n, &x, &triplets, margin)
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = grads[t][[r, c]];
                    let scale = fd.abs().max(an.abs()).max(1e-6);
                    assert!((fd - an).abs() / scale <= 1e-4, "{t} {r} {c}: {an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn needs_three_tasks() {
        let mut f = IndexMap::new();
        f.insert("a".to_string(), feature(&[1.0, 0.0]));
        f.insert("b".to_string(), feature(&[0.0, 1.0]));
        let oracle = OracleDistances {
            tasks: vec!["a".into(), "b".into()],
            matrix: vec![vec![0.0, 0.5], vec![0.5, 0.0]],
        };
        assert!(matches!(
            train_projection(&f, &oracle, &ProjectionTrainConfig::default(), 0),
            Err(Error::InsufficientTasks { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn save_load_round_trip() {
        let net = ProjectionNet::init(12, 16, 16, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        net.save(&path).unwrap();
        assert_eq!(ProjectionNet::load(&path).unwrap(), net);
    }

    #[test]
    fn triplet_labels_follow_oracle() {
        let oracle = OracleDistances {
            tasks: vec!["a".into(), "b".into(), "c".into()],
            matrix: vec![
                vec![0.0, 0.1, 0.9],
                vec![0.1, 0.0, 0.9],
                vec![0.9, 0.9, 0.0],
            ],
        };
        let t = labelled_triplets(&oracle);
        // (c, a, b) and (c, b, a) are tied.
        assert_eq!(t.len(), 4);
        for tr in t {
            let d = &oracle.matrix;
            assert_eq!(tr.y == 1, d[tr.i][tr.j] < d[tr.i][tr.k]);
        }
    }

    proptest! {
        #[test]
        fn output_is_unit_norm(seed in any::<u64>(), v in prop::collection::vec(0.01f64..10.0, 6)) {
            let net = ProjectionNet::init(6, 16, 16, seed);
            let f = feature(&v);
            if let Ok(z) = net.project(&f) {
                let n: f64 = z.values.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-9);
                prop_assert_eq!(net.project(&f).unwrap(), z);
            }
        }

        #[test]
        fn zero_loss_implies_margin(s_ij in -1.0f64..1.0, s_ik in -1.0f64..1.0) {
            if margin_ranking_loss(s_ij, s_ik, 1.0, 0.1) == 0.0 {
                prop_assert!(s_ij >= s_ik + 0.1 - 1e-15);
            }
        }
    }
}
