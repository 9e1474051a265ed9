//! Synthetic benchmark: a family of linear alignment tasks on a circle,
//! with known ground-truth adapters, used to compare generation against
//! merging baselines end to end.

mod bench;
mod family;
mod metrics;
mod oracle;

use serde::{Deserialize, Serialize};

pub use bench::{
    evaluate, k_sweep, prepare, run_benchmark, run_seeds, smoothed_nonincreasing_fraction, BenchReport, KSweepEntry,
    MethodAggregate, MethodRow, MultiSeedReport, OrderingCheck, PairCheck, Prepared, METHODS,
};
pub use family::{dense_updates, make_family, make_family_with, predict, substream, task_loss, Family, SyntheticTask};
pub use metrics::{eval_task, recall_at_k, TaskScore, RECALL_KS};
pub use oracle::{train_oracle, truth_vector, OracleFit, OracleOptions, DIVERGENCE_LOSS};

use crate::adapters::Layout;
use crate::cvae::CvaeConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_tasks: usize,
    /// Experts are spread evenly around the circle.
    pub n_experts: usize,
    /// Training tasks drawn from the non-experts; the rest are evaluated.
    pub n_train: usize,
    pub blocks: usize,
    pub dim: usize,
    pub rank: usize,
    pub alpha: f64,
    pub embedding_dim: usize,
    /// Samples per task.
    pub samples: usize,
    /// Relative scale of the angle-dependent factor components.
    pub harmonic: f64,
    /// Std of Gaussian noise added to targets; 0 for noise-free tasks.
    pub label_noise: f64,
    pub oracle_epochs: usize,
    pub oracle_lr: f64,
    pub checkpoints: usize,
    pub jitter: f64,
    pub k: usize,
    pub tau: f64,
    /// Stochastic draws for the best-of-n variant.
    pub best_of: usize,
    /// Build a second, tilted family and route against the union.
    pub mixed_family: bool,
    /// Out-of-plane angle (radians) of the second family's embeddings.
    pub mixed_tilt: f64,
    /// Generator settings. Routing fields are replaced by `k` and `tau`;
    /// the seed is offset by the run seed. Missing fields take the bench
    /// defaults, not the standalone generator defaults.
    #[serde(deserialize_with = "bench_cvae")]
    pub cvae: CvaeConfig,
}

fn default_bench_cvae() -> CvaeConfig {
    CvaeConfig {
        latent_dim: 8,
        cond_dim: 32,
        hidden: 128,
        epochs: 300,
        batch_size: 20,
        ..CvaeConfig::default()
    }
}

fn bench_cvae<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<CvaeConfig, D::Error> {
    use serde::de::Error as _;
    let given = serde_json::Value::deserialize(d)?;
    let serde_json::Value::Object(given) = given else {
        return Err(D::Error::custom("cvae must be an object"));
    };
    let mut merged = serde_json::to_value(default_bench_cvae()).map_err(D::Error::custom)?;
    let target = merged.as_object_mut().expect("struct serializes to an object");
    for (k, v) in given {
        target.insert(k, v);
    }
    serde_json::from_value(merged).map_err(D::Error::custom)
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_tasks: 16,
            n_experts: 8,
            n_train: 5,
            blocks: 2,
            dim: 16,
            rank: 2,
            alpha: 1.0,
            embedding_dim: 16,
            samples: 64,
            harmonic: 0.6,
            label_noise: 0.0,
            oracle_epochs: 400,
            oracle_lr: 0.5,
            checkpoints: 20,
            jitter: 0.01,
            k: crate::router::DEFAULT_K,
            tau: crate::router::DEFAULT_TAU,
            best_of: 10,
            mixed_family: true,
            mixed_tilt: 0.5,
            cvae: default_bench_cvae(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks < 3 {
            return Err(Error::Parameter(format!("need at least 3 tasks, got {}", self.n_tasks)));
        }
        if self.n_experts == 0 || self.n_experts >= self.n_tasks {
            return Err(Error::Parameter(format!(
                "n_experts must be in 1..{}, got {}",
                self.n_tasks, self.n_experts
            )));
        }
        let rest = self.n_tasks - self.n_experts;
        if self.n_train == 0 || self.n_train >= rest {
            return Err(Error::Parameter(format!(
                "n_train must leave at least one eval task: 1 <= n_train < {rest}, got {}",
                self.n_train
            )));
        }
        if self.embedding_dim < 3 {
            return Err(Error::Parameter("embedding_dim must be at least 3".into()));
        }
        if self.samples == 0 || self.best_of == 0 || self.k == 0 {
            return Err(Error::Parameter("samples, best_of and k must be at least 1".into()));
        }
        if !(self.harmonic >= 0.0) || !(self.label_noise >= 0.0) || !(self.tau > 0.0) {
            return Err(Error::Parameter(
                "harmonic and label_noise must be >= 0, tau > 0".into(),
            ));
        }
        self.layout()?;
        self.cvae.validate()
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::attention_qkv(self.blocks, self.dim, self.rank, self.alpha)
    }

    pub fn oracle_options(&self) -> OracleOptions {
        OracleOptions {
            epochs: self.oracle_epochs,
            lr: self.oracle_lr,
            checkpoints: self.checkpoints,
            jitter: self.jitter,
        }
    }

    /// Indices of expert tasks, evenly spaced from 0.
    pub fn expert_indices(&self) -> Vec<usize> {
        (0..self.n_experts).map(|i| i * self.n_tasks / self.n_experts).collect()
    }
}
