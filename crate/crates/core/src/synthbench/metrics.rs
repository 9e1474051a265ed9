use serde::{Deserialize, Serialize};

use super::family::{predict, Family, SyntheticTask};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Cutoffs reported for every method.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub loss: f64,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Fraction of queries whose own gallery row ranks within the top `k` by
/// cosine similarity. Rows are samples. Ties rank the lower index first;
/// zero-norm rows score 0 against everything.
///
/// `k` larger than the gallery is clamped; the clamp is returned.
pub fn recall_at_k(queries: &Matrix<f64>, gallery: &Matrix<f64>, k: usize) -> Result<(f64, bool)> {
    if queries.shape() != gallery.shape() || queries.rows() == 0 {
        return Err(Error::shape(format!(
            "recall needs equal nonempty query {:?} and gallery {:?}",
            queries.shape(),
            gallery.shape()
        )));
    }
    if k == 0 {
        return Err(Error::Parameter("recall cutoff must be at least 1".into()));
    }
    let n = gallery.rows();
    let clamped = k > n;
    let k = k.min(n);
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let g_norms: Vec<f64> = (0..n).map(|j| norm(gallery.row(j))).collect();
    let mut hits = 0usize;
    for i in 0..n {
        let q = queries.row(i);
        let qn = norm(q);
        let score = |j: usize| {
            let d = qn * g_norms[j];
            if d == 0.0 {
                0.0
            } else {
                q.iter().zip(gallery.row(j)).map(|(a, b)| a * b).sum::<f64>() / d
            }
        };
        let own = score(i);
        let rank = (0..n).filter(|&j| j != i).filter(|&j| {
            let s = score(j);
            s > own || (s == own && j < i)
        });
        if rank.count() < k {
            hits += 1;
        }
    }
    Ok((hits as f64 / n as f64, clamped))
}

/// Stacks per-placement `m × N` blocks into an `N × Σm` sample matrix.
fn samples_by_row(blocks: &[Matrix<f64>]) -> Matrix<f64> {
    let n = blocks[0].cols();
    let width: usize = blocks.iter().map(Matrix::rows).sum();
    let mut out = Matrix::zeros(n, width);
    let mut col = 0;
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..n {
                out.set(j, col + i, b.get(i, j));
            }
        }
        col += b.rows();
    }
    out
}

/// Loss and retrieval scores of the flat adapter `v` on `task`.
pub fn eval_task(v: &[f64], task: &SyntheticTask, family: &Family) -> Result<TaskScore> {
    let outputs = predict(v, task, family)?;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (o, y) in outputs.iter().zip(&task.y) {
        sq += o
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += o.len();
    }
    let q = samples_by_row(&outputs);
    let g = samples_by_row(&task.y);
    let mut r = [0.0; 3];
    for (slot, &k) in r.iter_mut().zip(&RECALL_KS) {
        let (value, clamped) = recall_at_k(&q, &g, k)?;
        if clamped {
            log::warn!(
                "recall@{k} clamped to the gallery size {} on {}",
                g.rows(),
                task.task_id
            );
        }
        *slot = value;
    }
    Ok(TaskScore {
        loss: sq / count as f64,
        r1: r[0],
        r5: r[1],
        r10: r[2],
    })
}
