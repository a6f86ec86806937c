//! Ground-truth task distances from anchor performance rankings.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphDataset;
use crate::nn::{train_full, AnchorSpec, TrainSettings};
use crate::rng::derive_seed;

/// Kendall tau-b between `a` and `b`, computed with Knight's
/// `O(n log n)` algorithm.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(
            "rank correlation needs at least two entries".into(),
        ));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("rank correlation input is NaN".into()));
    }
    let n = a.len();
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let n0 = (n * (n - 1) / 2) as i64;
    let (mut n1, mut n3) = (0i64, 0i64);
    let (mut run_a, mut run_ab) = (1i64, 1i64);
    for i in 1..n {
        if pairs[i].0 == pairs[i - 1].0 {
            run_a += 1;
            if pairs[i].1 == pairs[i - 1].1 {
                run_ab += 1;
            } else {
                n3 += run_ab * (run_ab - 1) / 2;
                run_ab = 1;
            }
        } else {
            n1 += run_a * (run_a - 1) / 2;
            n3 += run_ab * (run_ab - 1) / 2;
            run_a = 1;
            run_ab = 1;
        }
    }
    n1 += run_a * (run_a - 1) / 2;
    n3 += run_ab * (run_ab - 1) / 2;

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count(&mut ys);

    let mut n2 = 0i64;
    let mut run_b = 1i64;
    for i in 1..n {
        if ys[i] == ys[i - 1] {
            run_b += 1;
        } else {
            n2 += run_b * (run_b - 1) / 2;
            run_b = 1;
        }
    }
    n2 += run_b * (run_b - 1) / 2;

    tau_b(n0 - n1 - n2 + n3 - 2 * swaps, n0, n1, n2)
}

/// `(C - D) / sqrt((n0 - n1) (n0 - n2))`, shared with the brute-force check.
pub(crate) fn tau_b(c_minus_d: i64, n0: i64, n1: i64, n2: i64) -> Result<f64> {
    if n1 == n0 || n2 == n0 {
        return Err(Error::AllTied);
    }
    let denom = (((n0 - n1) as f64) * ((n0 - n2) as f64)).sqrt();
    Ok(c_minus_d as f64 / denom)
}

/// Sorts `v` ascending and returns the number of strictly inverted pairs.
fn merge_count(v: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as i64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Best validation metric of every anchor trained on one task, averaged over
/// the budget's repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorPerformanceProfile {
    pub task_id: String,
    pub perf: Vec<f64>,
}

/// Training budget for anchor runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleBudget {
    pub lr: f64,
    pub epochs: usize,
    /// Independently seeded runs per anchor.
    pub repeats: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            lr: 0.01,
            epochs: 100,
            repeats: 3,
        }
    }
}

/// Trains every anchor `budget.repeats` times on `dataset`. Diverged runs
/// score zero.
pub fn anchor_profile(
    task_id: &str,
    dataset: &GraphDataset,
    anchors: &[AnchorSpec],
    budget: &OracleBudget,
    seed: u64,
) -> AnchorPerformanceProfile {
    let repeats = budget.repeats.max(1);
    let runs: Vec<f64> = (0..anchors.len() * repeats)
        .into_par_iter()
        .map(|i| {
            let (u, r) = (i / repeats, i % repeats);
            let settings = TrainSettings::anchor(&anchors[u], budget.lr, budget.epochs);
            train_full(&settings, dataset, derive_seed(seed, &[u as u64, r as u64])).val_metric
        })
        .collect();
    let perf = runs
        .chunks(repeats)
        .map(|c| c.iter().sum::<f64>() / repeats as f64)
        .collect();
    AnchorPerformanceProfile {
        task_id: task_id.to_string(),
        perf,
    }
}

/// `(1 - tau) / 2`, in `[0, 1]`.
pub fn oracle_distance(
    p: &AnchorPerformanceProfile,
    q: &AnchorPerformanceProfile,
) -> Result<f64> {
    Ok((1.0 - kendall_tau(&p.perf, &q.perf)?) / 2.0)
}

/// Symmetric pairwise distance matrix with task ids in row order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDistances {
    pub tasks: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

/// Distance used when a profile is constant and its correlation undefined.
pub const TIED_DISTANCE: f64 = 0.5;

impl OracleDistances {
    pub fn index_of(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.matrix[self.index_of(a)?][self.index_of(b)?])
    }

    /// Kendall correlation view `1 - 2 d`.
    pub fn similarity(&self) -> Vec<Vec<f64>> {
        self.matrix
            .iter()
            .map(|row| row.iter().map(|d| 1.0 - 2.0 * d).collect())
            .collect()
    }

    /// Restriction to `keep`, in the given order.
    pub fn subset(&self, keep: &[String]) -> Result<Self> {
        let idx: Vec<usize> = keep
            .iter()
            .map(|t| {
                self.index_of(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("task `{t}` not in matrix")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tasks: keep.to_vec(),
            matrix: idx
                .iter()
                .map(|&i| idx.iter().map(|&j| self.matrix[i][j]).collect())
                .collect(),
        })
    }

    pub fn check(&self) -> Result<()> {
        let n = self.tasks.len();
        let bad = |m: &str| Err(Error::InvalidArgument(format!("distance matrix: {m}")));
        if self.matrix.len() != n || self.matrix.iter().any(|r| r.len() != n) {
            return bad("shape does not match task list");
        }
        for i in 0..n {
            if self.matrix[i][i] != 0.0 {
                return bad("non-zero diagonal");
            }
            for j in 0..n {
                let d = self.matrix[i][j];
                if !(0.0..=1.0).contains(&d) || (d - self.matrix[j][i]).abs() > 1e-12 {
                    return bad("entries must be symmetric and in [0, 1]");
                }
            }
        }
        Ok(())
    }

    /// CSV with a header row and a leading column of task ids.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let mut header = vec!["task".to_string()];
        header.extend(self.tasks.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (task, row) in self.tasks.iter().zip(&self.matrix) {
            let mut rec = vec![task.clone()];
            rec.extend(row.iter().map(|d| d.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let header = r.headers().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        let tasks: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut matrix = Vec::with_capacity(tasks.len());
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.get(0) != tasks.get(i).map(String::as_str) {
                return Err(Error::Parse {
                    line,
                    message: "row label does not match header order".into(),
                });
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Parse {
                        line,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            matrix.push(row);
        }
        let out = Self { tasks, matrix };
        out.check()?;
        Ok(out)
    }
}

/// Pairwise oracle distances. Pairs whose correlation is undefined get
/// [`TIED_DISTANCE`].
pub fn similarity_matrix(profiles: &[AnchorPerformanceProfile]) -> Result<OracleDistances> {
    if profiles.len() < 2 {
        return Err(Error::InsufficientTasks {
            needed: 2,
            got: profiles.len(),
        });
    }
    let n = profiles.len();
    let mut matrix = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = match oracle_distance(&profiles[i], &profiles[j]) {
                Ok(d) => d,
                Err(Error::AllTied) => TIED_DISTANCE,
                Err(e) => return Err(e),
            };
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(OracleDistances {
        tasks: profiles.iter().map(|p| p.task_id.clone()).collect(),
        matrix,
    })
}
