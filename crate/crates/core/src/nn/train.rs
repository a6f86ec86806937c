use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{AnchorSpec, Architecture, GradScope, ModelParams, PreparedBatch};
use crate::autodiff::Tape;
use crate::bank::TrialRecord;
use crate::error::{Error, Result};
use crate::graph::{GraphDataset, TaskLevel};
use crate::optim::{cosine_lr, Adam};
use crate::rng::derive_seed;
use crate::space::{self, DesignConfig};

pub const WEIGHT_DECAY: f64 = 5e-4;

/// Record the training loss every this many epochs.
const CURVE_EVERY: usize = 20;

/// Everything needed to train one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub arch: Architecture,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl TrainSettings {
    pub fn from_config(config: &DesignConfig) -> Result<Self> {
        let arch = Architecture::from_config(config)?;
        let lr: f64 = super::parse_num(config, space::LR)?;
        let epochs: usize = super::parse_num(config, space::EPOCHS)?;
        if epochs == 0 || !(lr > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate and epochs must be positive".into(),
            ));
        }
        Ok(Self {
            arch,
            lr,
            epochs,
            weight_decay: WEIGHT_DECAY,
        })
    }

    pub fn anchor(spec: &AnchorSpec, lr: f64, epochs: usize) -> Self {
        Self {
            arch: spec.architecture(),
            lr,
            epochs,
            weight_decay: WEIGHT_DECAY,
        }
    }
}

/// Result of [`train_full`]. Metrics are taken at the best-validation epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub val_metric: f64,
    pub test_metric: f64,
    pub best_epoch: usize,
    pub curve: Vec<(u32, f64)>,
    pub diverged: bool,
}

/// Fraction of `(row, label)` targets whose argmax prediction is correct.
pub fn accuracy(log_probs: &Array2<f64>, targets: &[(usize, usize)]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let correct = targets
        .iter()
        .filter(|&&(r, label)| {
            let row = log_probs.row(r);
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count();
    correct as f64 / targets.len() as f64
}

/// Full-batch gradient descent on the final classifier only; every other
/// tensor is returned unchanged.
pub fn train_last_layer(
    params: &ModelParams,
    dataset: &GraphDataset,
    steps: usize,
    lr: f64,
) -> ModelParams {
    let mut out = params.clone();
    if steps == 0 || dataset.splits.train.is_empty() {
        return out;
    }
    let (batch, targets) = dataset.split_batch(&dataset.splits.train);
    let prepared = PreparedBatch::new(batch);
    let mut tape = Tape::new();
    let rec = params.record(&mut tape, &prepared, GradScope::None);
    let all = tape.value(rec.penultimate);
    let rows: Vec<usize> = targets.iter().map(|&(r, _)| r).collect();
    let features = all.select(Axis(0), &rows);
    let m = rows.len() as f64;
    let classes = params.num_classes;
    let mut onehot = Array2::zeros((rows.len(), classes));
    for (i, &(_, label)) in targets.iter().enumerate() {
        onehot[[i, label]] = 1.0;
    }
    let last = out.post.len() - 1;
    for _ in 0..steps {
        let (w, b) = (&out.post[last].tensors[0], &out.post[last].tensors[1]);
        let mut probs = features.dot(w) + b;
        for mut row in probs.rows_mut() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let delta = (probs - &onehot) / m;
        let gw = features.t().dot(&delta);
        let gb = delta.sum_axis(Axis(0)).insert_axis(Axis(0));
        out.post[last].tensors[0].scaled_add(-lr, &gw);
        out.post[last].tensors[1].scaled_add(-lr, &gb);
    }
    out
}

struct EvalBatches {
    train: (PreparedBatch, Vec<(usize, usize)>),
    /// `None` for node-level tasks, where the training batch already covers
    /// every node and validation/test are read from the same forward pass.
    val: Option<(PreparedBatch, Vec<(usize, usize)>)>,
    test: Option<(PreparedBatch, Vec<(usize, usize)>)>,
    node_val: Vec<(usize, usize)>,
    node_test: Vec<(usize, usize)>,
}

impl EvalBatches {
    fn new(dataset: &GraphDataset) -> Self {
        let prep = |units: &[usize]| {
            let (b, t) = dataset.split_batch(units);
            (PreparedBatch::new(b), t)
        };
        match dataset.level {
            TaskLevel::Node => {
                let (_, node_val) = dataset.split_batch(&dataset.splits.val);
                let (_, node_test) = dataset.split_batch(&dataset.splits.test);
                Self {
                    train: prep(&dataset.splits.train),
                    val: None,
                    test: None,
                    node_val,
                    node_test,
                }
            }
            TaskLevel::Graph => Self {
                train: prep(&dataset.splits.train),
                val: Some(prep(&dataset.splits.val)),
                test: Some(prep(&dataset.splits.test)),
                node_val: Vec::new(),
                node_test: Vec::new(),
            },
        }
    }

    fn metric(params: &ModelParams, batch: &Option<(PreparedBatch, Vec<(usize, usize)>)>) -> f64 {
        match batch {
            Some((b, t)) if !t.is_empty() => {
                let mut tape = Tape::new();
                let rec = params.record(&mut tape, b, GradScope::None);
                accuracy(tape.value(rec.log_probs), t)
            }
            _ => 0.0,
        }
    }
}

/// Trains every parameter with Adam, cosine-annealed learning rate, and L2
/// weight decay. Validation accuracy is measured after every epoch and the
/// parameters and metrics of the best-validation epoch are returned.
/// A non-finite loss stops training and reports zero metrics.
pub fn train_full(settings: &TrainSettings, dataset: &GraphDataset, seed: u64) -> TrainOutcome {
    let init_seed = derive_seed(seed, &[0]);
    let mut params = ModelParams::init(
        &settings.arch,
        dataset.input_dim(),
        dataset.num_classes,
        init_seed,
    );
    let batches = EvalBatches::new(dataset);
    let mut adam = Adam::new(params.tensors(), settings.weight_decay);
    let mut best: Option<(f64, f64, usize, ModelParams)> = None;
    let mut curve = Vec::new();

    for epoch in 0..=settings.epochs {
        let mut tape = Tape::new();
        let (prep, targets) = &batches.train;
        let rec = params.record(&mut tape, prep, GradScope::All);
        let loss_var = tape.nll(rec.log_probs, targets.clone());
        let loss = tape.scalar(loss_var);
        if !loss.is_finite() || !params.is_finite() {
            return TrainOutcome {
                params,
                val_metric: 0.0,
                test_metric: 0.0,
                best_epoch: epoch,
                curve,
                diverged: true,
            };
        }
        if epoch % CURVE_EVERY == 0 || epoch == settings.epochs {
            curve.push((epoch as u32, loss));
        }

        let (val, test) = match dataset.level {
            TaskLevel::Node => {
                let lp = tape.value(rec.log_probs);
                (accuracy(lp, &batches.node_val), accuracy(lp, &batches.node_test))
            }
            TaskLevel::Graph => (
                EvalBatches::metric(&params, &batches.val),
                EvalBatches::metric(&params, &batches.test),
            ),
        };
        if best.as_ref().is_none_or(|(bv, ..)| val > *bv) {
            best = Some((val, test, epoch, params.clone()));
        }
        if epoch == settings.epochs {
            break;
        }

        let grads = tape.backward(loss_var);
        let grad_list: Vec<Array2<f64>> = rec
            .params
            .all()
            .map(|v| grads.get_or_zeros(&tape, v))
            .collect();
        let lr = cosine_lr(settings.lr, epoch, settings.epochs);
        adam.step(params.tensors_mut(), &grad_list, lr);
    }

    let (val_metric, test_metric, best_epoch, best_params) = best.expect("at least one epoch");
    TrainOutcome {
        params: best_params,
        val_metric,
        test_metric,
        best_epoch,
        curve,
        diverged: false,
    }
}

/// Training losses before each of the first `steps` optimizer updates of
/// [`train_full`] with the same seed.
pub fn loss_trajectory(
    settings: &TrainSettings,
    dataset: &GraphDataset,
    seed: u64,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut params = ModelParams::init(
        &settings.arch,
        dataset.input_dim(),
        dataset.num_classes,
        derive_seed(seed, &[0]),
    );
    let (batch, targets) = dataset.split_batch(&dataset.splits.train);
    let prep = PreparedBatch::new(batch);
    let mut adam = Adam::new(params.tensors(), settings.weight_decay);
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut tape = Tape::new();
        let rec = params.record(&mut tape, &prep, GradScope::All);
        let loss_var = tape.nll(rec.log_probs, targets.clone());
        let loss = tape.scalar(loss_var);
        if !loss.is_finite() {
            return Err(Error::DivergedLoss);
        }
        out.push(loss);
        let grads = tape.backward(loss_var);
        let grad_list: Vec<Array2<f64>> = rec
            .params
            .all()
            .map(|v| grads.get_or_zeros(&tape, v))
            .collect();
        adam.step(params.tensors_mut(), &grad_list, cosine_lr(settings.lr, step, settings.epochs));
    }
    Ok(out)
}

/// Trains the network described by `config` and packages the outcome as a
/// trial record.
pub fn evaluate_config(
    config: &DesignConfig,
    dataset: &GraphDataset,
    seed: u64,
) -> Result<(ModelParams, TrialRecord)> {
    let settings = TrainSettings::from_config(config)?;
    let outcome = train_full(&settings, dataset, seed);
    let record = TrialRecord::new(
        config.clone(),
        outcome.val_metric,
        Some(outcome.test_metric),
        Some(outcome.curve),
        seed,
    )?;
    Ok((outcome.params, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, Splits};
    use crate::nn::{AnchorConv, Connectivity};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    /// Two clusters of nodes; the class is given by the sign of feature 0.
    fn separable(seed: u64) -> GraphDataset {
        let mut rng = rng_from_seed(seed);
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let features = Array2::from_shape_fn((n, 3), |(i, j)| {
            let sign = if labels[i] == 1 { 1.0 } else { -1.0 };
            if j == 0 {
                sign * (1.0 + rng.random::<f64>())
            } else {
                rng.random_range(-0.5..0.5)
            }
        });
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && labels[i] == labels[j] && rng.random_bool(0.1) {
                    edges.push((i, j));
                }
            }
        }
        let mut ds = GraphDataset::new(
            vec![Graph {
                features,
                edges,
                labels,
            }],
            TaskLevel::Node,
            2,
            Splits::default(),
        )
        .unwrap();
        ds.default_split(seed);
        ds
    }

    fn anchor() -> AnchorSpec {
        AnchorSpec {
            conv_type: AnchorConv::MeanConv,
            num_mp_layers: 2,
            connectivity: Connectivity::Stack,
            hidden_dim: 8,
        }
    }

    fn train_loss(p: &ModelParams, ds: &GraphDataset) -> f64 {
        let (b, t) = ds.split_batch(&ds.splits.train);
        let prep = PreparedBatch::new(b);
        let mut tape = Tape::new();
        let rec = p.record(&mut tape, &prep, GradScope::None);
        let l = tape.nll(rec.log_probs, t);
        tape.scalar(l)
    }

    #[test]
    fn last_layer_zero_steps_is_identity() {
        let ds = separable(1);
        let p = ModelParams::init_anchor(&anchor(), 3, 2, 4);
        assert_eq!(train_last_layer(&p, &ds, 0, 0.1), p);
    }

    #[test]
    fn last_layer_training_freezes_body_and_lowers_loss() {
        let ds = separable(2);
        let p = ModelParams::init_anchor(&anchor(), 3, 2, 5);
        let mut prev = train_loss(&p, &ds);
        let mut cur = p.clone();
        for _ in 0..20 {
            cur = train_last_layer(&cur, &ds, 5, 0.05);
            let l = train_loss(&cur, &ds);
            assert!(l <= prev + 1e-12, "{l} > {prev}");
            prev = l;
        }
        assert_eq!(cur.pre, p.pre);
        assert_eq!(cur.mp, p.mp);
        assert_ne!(cur.post, p.post);
    }

    #[test]
    fn full_training_fits_separable_data() {
        let ds = separable(3);
        let settings = TrainSettings::anchor(&anchor(), 0.05, 60);
        let out = train_full(&settings, &ds, 9);
        assert!(!out.diverged);
        assert!(out.val_metric >= 0.9, "val {}", out.val_metric);
    }

    #[test]
    fn full_training_is_deterministic() {
        let ds = separable(4);
        let config = crate::space::DesignSpace::desk_scale().config_from_indices(&[
            4, 1, 0, 1, 0, 2, 1, 0, 0, 0, 0,
        ]);
        let (pa, a) = evaluate_config(&config, &ds, 17).unwrap();
        let (pb, b) = evaluate_config(&config, &ds, 17).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn longer_budget_does_not_hurt() {
        let ds = separable(5);
        let short = train_full(&TrainSettings::anchor(&anchor(), 0.05, 1), &ds, 3);
        let long = train_full(&TrainSettings::anchor(&anchor(), 0.05, 100), &ds, 3);
        assert!(long.val_metric >= short.val_metric - 0.05);
    }

    #[test]
    fn diverging_run_reports_zero() {
        let ds = separable(6);
        let out = train_full(&TrainSettings::anchor(&anchor(), 1e306, 5), &ds, 1);
        assert!(out.diverged);
        assert_eq!(out.val_metric, 0.0);
    }

    #[test]
    fn curve_epochs_increase() {
        let ds = separable(7);
        let out = train_full(&TrainSettings::anchor(&anchor(), 0.05, 45), &ds, 1);
        let epochs: Vec<u32> = out.curve.iter().map(|c| c.0).collect();
        assert_eq!(epochs, vec![0, 20, 40, 45]);
    }
}
