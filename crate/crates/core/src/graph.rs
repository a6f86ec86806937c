//! Graph datasets, splits, and the batched layout consumed by the network.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskLevel {
    Node,
    Graph,
}

impl std::fmt::Display for TaskLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskLevel::Node => write!(f, "node"),
            TaskLevel::Graph => write!(f, "graph"),
        }
    }
}

/// A single graph. Edges are directed `(src, dst)` message routes.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub features: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
    /// One label per node for node-level tasks, exactly one for graph-level tasks.
    pub labels: Vec<usize>,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }
}

/// Indices of prediction units. Node-level units enumerate nodes across all
/// graphs in order; graph-level units are graph indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub graphs: Vec<Graph>,
    pub level: TaskLevel,
    pub num_classes: usize,
    pub splits: Splits,
}

/// Location of a prediction unit inside the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitRef {
    pub graph: usize,
    /// Node index inside the graph; zero for graph-level units.
    pub node: usize,
}

impl GraphDataset {
    pub fn new(
        graphs: Vec<Graph>,
        level: TaskLevel,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let ds = Self {
            graphs,
            level,
            num_classes,
            splits,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDataset(m));
        if self.graphs.is_empty() {
            return bad("no graphs".into());
        }
        if self.num_classes < 1 {
            return bad("num_classes must be at least 1".into());
        }
        let d_in = self.graphs[0].features.ncols();
        if d_in == 0 {
            return bad("node features are empty".into());
        }
        for (gi, g) in self.graphs.iter().enumerate() {
            if g.features.ncols() != d_in {
                return bad(format!("graph {gi} has feature width {}", g.features.ncols()));
            }
            if g.num_nodes() == 0 {
                return bad(format!("graph {gi} has no nodes"));
            }
            if g.features.iter().any(|v| !v.is_finite()) {
                return bad(format!("graph {gi} has non-finite features"));
            }
            let n = g.num_nodes();
            if let Some(&(s, t)) = g.edges.iter().find(|&&(s, t)| s >= n || t >= n) {
                return bad(format!("graph {gi} edge ({s},{t}) out of range"));
            }
            let expected = match self.level {
                TaskLevel::Node => n,
                TaskLevel::Graph => 1,
            };
            if g.labels.len() != expected {
                return bad(format!(
                    "graph {gi} has {} labels, expected {expected}",
                    g.labels.len()
                ));
            }
            if let Some(l) = g.labels.iter().find(|&&l| l >= self.num_classes) {
                return bad(format!("graph {gi} label {l} out of range"));
            }
        }
        let units = self.num_units();
        let mut seen = vec![false; units];
        for idx in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if *idx >= units {
                return bad(format!("split index {idx} out of range"));
            }
            if std::mem::replace(&mut seen[*idx], true) {
                return bad(format!("split index {idx} appears twice"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.graphs[0].features.ncols()
    }

    pub fn num_units(&self) -> usize {
        match self.level {
            TaskLevel::Node => self.graphs.iter().map(Graph::num_nodes).sum(),
            TaskLevel::Graph => self.graphs.len(),
        }
    }

    pub fn unit(&self, index: usize) -> UnitRef {
        match self.level {
            TaskLevel::Graph => UnitRef {
                graph: index,
                node: 0,
            },
            TaskLevel::Node => {
                let mut rest = index;
                for (gi, g) in self.graphs.iter().enumerate() {
                    if rest < g.num_nodes() {
                        return UnitRef {
                            graph: gi,
                            node: rest,
                        };
                    }
                    rest -= g.num_nodes();
                }
                panic!("unit index {index} out of range")
            }
        }
    }

    pub fn label(&self, unit: UnitRef) -> usize {
        self.graphs[unit.graph].labels[unit.node]
    }

    /// Random split with the given fractions for train and validation; the
    /// remainder becomes the test split.
    pub fn split_by_seed(&mut self, train_frac: f64, val_frac: f64, seed: u64) {
        let n = self.num_units();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_from_seed(seed));
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = ((n as f64) * val_frac).round() as usize;
        let n_val = n_val.min(n - n_train.min(n));
        let mut train = idx[..n_train.min(n)].to_vec();
        let mut val = idx[n_train.min(n)..n_train.min(n) + n_val].to_vec();
        let mut test = idx[n_train.min(n) + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        self.splits = Splits { train, val, test };
    }

    /// Default fractions: 50/25/25 for node tasks, 80/10/10 for graph tasks.
    pub fn default_split(&mut self, seed: u64) {
        match self.level {
            TaskLevel::Node => self.split_by_seed(0.5, 0.25, seed),
            TaskLevel::Graph => self.split_by_seed(0.8, 0.1, seed),
        }
    }

    /// Writes one graph per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for g in &self.graphs {
            let line = GraphLine {
                nodes: g.features.rows().into_iter().map(|r| r.to_vec()).collect(),
                edges: g.edges.iter().map(|&(s, t)| [s, t]).collect(),
                labels: g.labels.clone(),
                level: self.level,
            };
            serde_json::to_writer(&mut out, &line).expect("graph serializes");
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a dataset file. Splits are left empty; call [`Self::default_split`]
    /// or [`Self::load_splits`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut graphs = Vec::new();
        let mut level = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: GraphLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            if *level.get_or_insert(parsed.level) != parsed.level {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "mixed task levels".into(),
                });
            }
            let rows = parsed.nodes.len();
            let cols = parsed.nodes.first().map_or(0, Vec::len);
            if parsed.nodes.iter().any(|r| r.len() != cols) {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "ragged node feature rows".into(),
                });
            }
            let features =
                Array2::from_shape_vec((rows, cols), parsed.nodes.into_iter().flatten().collect())
                    .expect("shape checked");
            graphs.push(Graph {
                features,
                edges: parsed.edges.iter().map(|e| (e[0], e[1])).collect(),
                labels: parsed.labels,
            });
        }
        let level = level.ok_or_else(|| Error::InvalidDataset("empty dataset file".into()))?;
        let num_classes = graphs
            .iter()
            .flat_map(|g| g.labels.iter())
            .max()
            .map_or(1, |m| m + 1);
        Self::new(graphs, level, num_classes, Splits::default())
    }

    pub fn load_splits(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.splits = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        self.check()
    }

    /// Batch over every graph in the dataset.
    pub fn full_batch(&self) -> GraphBatch {
        GraphBatch::new(self, &(0..self.graphs.len()).collect::<Vec<_>>())
    }

    /// Batch plus `(row, label)` targets for the given split.
    ///
    /// Node-level tasks always batch every graph so that message passing sees
    /// the full neighbourhood (transductive); graph-level tasks batch only the
    /// graphs of the split.
    pub fn split_batch(&self, units: &[usize]) -> (GraphBatch, Vec<(usize, usize)>) {
        match self.level {
            TaskLevel::Node => {
                let batch = self.full_batch();
                let targets = units
                    .iter()
                    .map(|&u| (u, self.label(self.unit(u))))
                    .collect();
                (batch, targets)
            }
            TaskLevel::Graph => {
                let batch = GraphBatch::new(self, units);
                let targets = units
                    .iter()
                    .enumerate()
                    .map(|(row, &g)| (row, self.graphs[g].labels[0]))
                    .collect();
                (batch, targets)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GraphLine {
    nodes: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    labels: Vec<usize>,
    level: TaskLevel,
}

/// Disjoint union of graphs with precomputed neighbourhoods.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub features: Array2<f64>,
    /// In-neighbours of every node (sources of incoming edges), no self loops.
    pub neighbors: Vec<Vec<usize>>,
    /// Graph slot of every node, in `0..num_graphs`.
    pub segment: Vec<usize>,
    pub num_graphs: usize,
    pub level: TaskLevel,
}

impl GraphBatch {
    pub fn new(dataset: &GraphDataset, graph_indices: &[usize]) -> Self {
        let d_in = dataset.input_dim();
        let total: usize = graph_indices
            .iter()
            .map(|&g| dataset.graphs[g].num_nodes())
            .sum();
        let mut features = Array2::zeros((total, d_in));
        let mut neighbors = vec![Vec::new(); total];
        let mut segment = Vec::with_capacity(total);
        let mut offset = 0;
        for (slot, &gi) in graph_indices.iter().enumerate() {
            let g = &dataset.graphs[gi];
            let n = g.num_nodes();
            features
                .slice_mut(ndarray::s![offset..offset + n, ..])
                .assign(&g.features);
            for &(s, t) in &g.edges {
                if s != t {
                    neighbors[offset + t].push(offset + s);
                }
            }
            segment.extend(std::iter::repeat_n(slot, n));
            offset += n;
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Self {
            features,
            neighbors,
            segment,
            num_graphs: graph_indices.len(),
            level: dataset.level,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.nrows()
    }

    /// Number of rows in the network output: nodes or graphs.
    pub fn num_outputs(&self) -> usize {
        match self.level {
            TaskLevel::Node => self.num_nodes(),
            TaskLevel::Graph => self.num_graphs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn path_graph() -> GraphDataset {
        GraphDataset::new(
            vec![Graph {
                features: array![[1.0], [2.0], [3.0]],
                edges: vec![(0, 1), (1, 0), (1, 2), (2, 1)],
                labels: vec![0, 1, 0],
            }],
            TaskLevel::Node,
            2,
            Splits {
                train: vec![0],
                val: vec![1],
                test: vec![2],
            },
        )
        .unwrap()
    }

    #[test]
    fn rejects_invalid_datasets() {
        let mut ds = path_graph();
        ds.graphs[0].edges.push((0, 3));
        assert!(ds.check().is_err());

        let mut ds = path_graph();
        ds.graphs[0].labels[0] = 2;
        assert!(ds.check().is_err());

        let mut ds = path_graph();
        ds.splits.val = vec![0];
        assert!(ds.check().is_err());
    }

    #[test]
    fn split_by_seed_partitions_units() {
        let mut ds = path_graph();
        ds.split_by_seed(0.34, 0.33, 3);
        let mut all: Vec<_> = ds
            .splits
            .train
            .iter()
            .chain(&ds.splits.val)
            .chain(&ds.splits.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        ds.check().unwrap();
    }

    #[test]
    fn batch_builds_in_neighbors() {
        let ds = path_graph();
        let b = ds.full_batch();
        assert_eq!(b.neighbors, vec![vec![1], vec![0, 2], vec![1]]);
        assert_eq!(b.num_outputs(), 3);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        let ds = path_graph();
        ds.save(&path).unwrap();
        let mut back = GraphDataset::load(&path).unwrap();
        back.splits = ds.splits.clone();
        assert_eq!(back, ds);
    }
}
