use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CvaeConfig, CvaeModel, ElboParts, NormStats};
use crate::adapters::{unflatten, AdapterSet, Layout};
use crate::error::{Error, Result};
use crate::numkit::{AdamState, Matrix, Scalar};
use crate::repository::Repository;
use crate::router::{build_prior, SemanticPrior};

/// One checkpoint with the prior its task routes to.
#[derive(Clone, Debug)]
pub struct TrainingSample<T> {
    pub task_id: String,
    pub x: Vec<T>,
    pub prior_mean: Vec<T>,
    /// Raw condition `[μ*, log(σ*² + ε)]`.
    pub condition: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerateMode {
    /// Latent fixed at the prior-mapper mean; one deterministic output.
    Mean,
    /// Latent drawn from the prior mapper's Gaussian.
    Stochastic,
}

impl std::str::FromStr for GenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(GenerateMode::Mean),
            "stochastic" => Ok(GenerateMode::Stochastic),
            other => Err(Error::Parameter(format!("unknown mode {other:?} (mean, stochastic)"))),
        }
    }
}

/// Trains on the checkpoints of `task_ids`, each conditioned on its
/// leave-self-out prior against the repository's experts.
pub fn train<T: Scalar>(
    repo: &Repository,
    task_ids: &[String],
    config: &CvaeConfig,
) -> Result<(CvaeModel<T>, Vec<EpochLoss>)> {
    let samples = training_samples(repo, task_ids, config.k, config.tau)?;
    fit(&samples, repo.layout(), &repo.hash(), config)
}

/// One sample per checkpoint of each task, with the task's leave-self-out
/// prior.
pub fn training_samples<T: Scalar>(
    repo: &Repository,
    task_ids: &[String],
    k: usize,
    tau: f64,
) -> Result<Vec<TrainingSample<T>>> {
    let experts = repo.experts_as::<T>();
    let mut samples = Vec::new();
    for id in task_ids {
        let record = repo
            .task(id)
            .ok_or_else(|| Error::Validation(format!("training task {id} is not in the repository")))?;
        if record.checkpoints.is_empty() {
            return Err(Error::Validation(format!("training task {id} has no checkpoints")));
        }
        let prior = build_prior(&record.embedding, &experts, k, tau, Some(id))
            .map_err(|e| Error::Validation(format!("cannot route training task {id}: {e}")))?;
        let condition = prior.condition();
        for ckpt in &record.checkpoints {
            samples.push(TrainingSample {
                task_id: id.clone(),
                x: ckpt.iter().map(|&v| T::lit(v as f64)).collect(),
                prior_mean: prior.mean.clone(),
                condition: condition.clone(),
            });
        }
    }
    Ok(samples)
}

fn check_samples<T: Scalar>(samples: &[TrainingSample<T>], d: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    for s in samples {
        if s.x.len() != d || s.prior_mean.len() != d || s.condition.len() != 2 * d {
            return Err(Error::Layout(format!(
                "sample for {} does not match D = {d}",
                s.task_id
            )));
        }
    }
    Ok(())
}

/// Fits a fresh model to prepared samples. Deterministic given the seed.
pub fn fit<T: Scalar>(
    samples: &[TrainingSample<T>],
    layout: &Layout,
    repository_hash: &str,
    config: &CvaeConfig,
) -> Result<(CvaeModel<T>, Vec<EpochLoss>)> {
    let mut model = CvaeModel::<T>::init(config, layout, repository_hash)?;
    check_samples(samples, model.param_len())?;
    let xs: Vec<Vec<T>> = samples.iter().map(|s| s.x.clone()).collect();
    let resid: Vec<Vec<T>> = samples
        .iter()
        .map(|s| s.x.iter().zip(&s.prior_mean).map(|(&x, &m)| x - m).collect())
        .collect();
    let (cond_mean, cond_std) = NormStats::moments(&xs)?;
    let (resid_mean, resid_std) = NormStats::moments(&resid)?;
    model.stats = NormStats {
        cond_mean,
        cond_std,
        resid_mean,
        resid_std,
    };
    let trace = run_epochs(&mut model, samples, config)?;
    Ok((model, trace))
}

/// Continues training `model` on `samples` with the schedule in `config`.
/// Weights and normalization statistics carry over; optimizer moments
/// restart. Network widths in `config` must match the model's.
pub fn resume<T: Scalar>(
    mut model: CvaeModel<T>,
    samples: &[TrainingSample<T>],
    config: &CvaeConfig,
) -> Result<(CvaeModel<T>, Vec<EpochLoss>)> {
    config.validate()?;
    let m = &model.config;
    if (m.latent_dim, m.cond_dim, m.hidden) != (config.latent_dim, config.cond_dim, config.hidden) {
        return Err(Error::Parameter(format!(
            "cannot resume a model with widths (L={}, C={}, H={}) under (L={}, C={}, H={})",
            m.latent_dim, m.cond_dim, m.hidden, config.latent_dim, config.cond_dim, config.hidden
        )));
    }
    check_samples(samples, model.param_len())?;
    model.config = config.clone();
    let trace = run_epochs(&mut model, samples, config)?;
    Ok((model, trace))
}

fn run_epochs<T: Scalar>(
    model: &mut CvaeModel<T>,
    samples: &[TrainingSample<T>],
    config: &CvaeConfig,
) -> Result<Vec<EpochLoss>> {
    let d = model.param_len();
    let mut targets = Vec::with_capacity(samples.len() * d);
    let mut conds = Vec::with_capacity(samples.len() * 2 * d);
    for s in samples {
        targets.extend(model.normalize_target(&s.x, &s.prior_mean)?);
        conds.extend(model.normalize_condition(&s.condition)?);
    }
    let targets = Matrix::new(samples.len(), d, targets)?;
    let conds = Matrix::new(samples.len(), 2 * d, conds)?;

    let l = config.latent_dim;
    // Stream 0 of this seed initialized the weights; training draws from stream 1.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(model.num_params(), config.adam);
    let mut params = model.params();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let x = gather(&targets, batch);
            let c = gather(&conds, batch);
            let noise = standard_normal(batch.len(), l, &mut rng);
            let (parts, grads) = model.elbo_gradient(&x, &c, &noise)?;
            let w = batch.len() as f64;
            total += parts.total.as_f64() * w;
            recon += parts.recon.as_f64() * w;
            kl += parts.kl.as_f64() * w;
            adam.step(&mut params, &grads)?;
            model.set_params(&params)?;
        }
        let n = samples.len() as f64;
        let row = EpochLoss {
            epoch,
            total: total / n,
            recon: recon / n,
            kl: kl / n,
        };
        if !row.total.is_finite() {
            return Err(Error::Divergence {
                task_id: "generator".into(),
                epoch,
                loss: row.total,
            });
        }
        log::debug!(
            "epoch {epoch}: total {:.6} recon {:.6} kl {:.6}",
            row.total,
            row.recon,
            row.kl
        );
        trace.push(row);
    }
    Ok(trace)
}

fn gather<T: Scalar>(m: &Matrix<T>, rows: &[usize]) -> Matrix<T> {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix::new(rows.len(), m.cols(), data).expect("gathered rows are consistent")
}

fn standard_normal<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        T::lit(v)
    })
}

impl<T: Scalar> CvaeModel<T> {
    /// Flattened adapter vectors for a prior. `Mean` ignores `n` and `seed`
    /// and returns one vector.
    pub fn generate_vectors(
        &self,
        prior: &SemanticPrior<T>,
        n: usize,
        mode: GenerateMode,
        seed: u64,
    ) -> Result<Vec<Vec<T>>> {
        let d = self.param_len();
        if prior.mean.len() != d || prior.var.len() != d {
            return Err(Error::Layout(format!(
                "prior over {} parameters for a model over D = {d}",
                prior.mean.len()
            )));
        }
        let rows = match mode {
            GenerateMode::Mean => 1,
            GenerateMode::Stochastic if n == 0 => return Err(Error::Parameter("n must be at least 1".into())),
            GenerateMode::Stochastic => n,
        };
        let c = self.normalize_condition(&prior.condition())?;
        let c = Matrix::from_fn(rows, 2 * d, |_, j| c[j]);
        let cp = self.project_condition(&c)?;
        let p = self.prior_map(&cp)?;
        let z = match mode {
            GenerateMode::Mean => p.mean.clone(),
            GenerateMode::Stochastic => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = standard_normal(rows, self.latent_dim(), &mut rng);
                super::reparameterize(&p, &noise)?
            }
        };
        let out = self.decode(&z, &cp)?;
        (0..rows).map(|r| self.denormalize(out.row(r), &prior.mean)).collect()
    }

    /// [`generate_vectors`](Self::generate_vectors), unflattened through the
    /// model's layout.
    pub fn generate(
        &self,
        prior: &SemanticPrior<T>,
        n: usize,
        mode: GenerateMode,
        seed: u64,
    ) -> Result<Vec<AdapterSet<T>>> {
        self.generate_vectors(prior, n, mode, seed)?
            .iter()
            .map(|v| unflatten(v, &self.layout))
            .collect()
    }

    /// ELBO of prepared samples under a fixed noise seed, for reporting.
    pub fn evaluate(&self, samples: &[TrainingSample<T>], seed: u64) -> Result<ElboParts<T>> {
        let d = self.param_len();
        let mut x = Vec::new();
        let mut c = Vec::new();
        for s in samples {
            x.extend(self.normalize_target(&s.x, &s.prior_mean)?);
            c.extend(self.normalize_condition(&s.condition)?);
        }
        let x = Matrix::new(samples.len(), d, x)?;
        let c = Matrix::new(samples.len(), 2 * d, c)?;
        let noise = standard_normal(samples.len(), self.latent_dim(), &mut ChaCha8Rng::seed_from_u64(seed));
        self.elbo_value(&x, &c, &noise)
    }
}
