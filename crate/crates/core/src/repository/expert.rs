use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Scalar;

/// One task of the parameter dataset: its description, embedding and the
/// flattened adapter checkpoints collected while fitting it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub description: String,
    /// Unit L2 norm.
    pub embedding: Vec<f32>,
    pub checkpoints: Vec<Vec<f32>>,
}

impl TaskRecord {
    /// Flattened parameter length, taken from the first checkpoint.
    pub fn param_len(&self) -> Option<usize> {
        self.checkpoints.first().map(Vec::len)
    }
}

/// Per-coordinate moments of an expert's checkpoints, plus its embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertEntry<T> {
    pub task_id: String,
    pub embedding: Vec<f32>,
    pub mean: Vec<T>,
    /// Population variance (divides by the checkpoint count).
    pub var: Vec<T>,
}

impl<T: Scalar> ExpertEntry<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Scalar>(&self) -> ExpertEntry<U> {
        ExpertEntry {
            task_id: self.task_id.clone(),
            embedding: self.embedding.clone(),
            mean: self.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Mean and population variance of the checkpoints, accumulated in f64 with
/// Welford's update.
pub fn build_expert<T: Scalar>(record: &TaskRecord) -> Result<ExpertEntry<T>> {
    let d = record
        .param_len()
        .ok_or_else(|| Error::Empty(format!("{} has no checkpoints", record.task_id)))?;
    let mut mean = vec![0.0f64; d];
    let mut m2 = vec![0.0f64; d];
    for (j, ckpt) in record.checkpoints.iter().enumerate() {
        if ckpt.len() != d {
            return Err(Error::Layout(format!(
                "{}: checkpoint {j} has length {}, expected {d}",
                record.task_id,
                ckpt.len()
            )));
        }
        let count = (j + 1) as f64;
        for ((mu, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(ckpt) {
            let x = x as f64;
            let delta = x - *mu;
            *mu += delta / count;
            *s += delta * (x - *mu);
        }
    }
    let count = record.checkpoints.len() as f64;
    Ok(ExpertEntry {
        task_id: record.task_id.clone(),
        embedding: record.embedding.clone(),
        mean: mean.into_iter().map(T::lit).collect(),
        var: m2.into_iter().map(|s| T::lit((s / count).max(0.0))).collect(),
    })
}
