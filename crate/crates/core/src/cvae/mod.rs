//! Conditional VAE over flattened adapter vectors, conditioned on the
//! router's semantic prior.
//!
//! Targets are modelled relative to the prior: the network sees
//! `(X − μ* − m_r) / s_r`, where `m_r`, `s_r` are per-coordinate statistics
//! of the training residuals `X − μ*`. The mean half of the condition is
//! z-scored with training-X statistics, the log-variance half is fed as is.

mod store;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use store::{load_model, save_model, MODEL_FORMAT};
pub use train::{fit, resume, train, training_samples, EpochLoss, GenerateMode, TrainingSample};

use crate::adapters::Layout;
use crate::error::{Error, Result};
use crate::numkit::{Activation, AdamConfig, Dense, Matrix, Mlp, NodeId, Scalar, Tape};
use crate::router::{DEFAULT_K, DEFAULT_TAU, VAR_FLOOR};

pub const LOGVAR_MIN: f64 = -12.0;
pub const LOGVAR_MAX: f64 = 12.0;
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub latent_dim: usize,
    pub cond_dim: usize,
    /// Width of every hidden layer (encoder and prior mapper have two,
    /// the decoder three).
    pub hidden: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Routing used to build training and inference conditions.
    pub k: usize,
    pub tau: f64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            cond_dim: 128,
            hidden: 256,
            lambda: 1e-3,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("latent_dim", self.latent_dim),
            ("cond_dim", self.cond_dim),
            ("hidden", self.hidden),
            ("batch_size", self.batch_size),
            ("k", self.k),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be at least 1")));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Parameter(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag<T> {
    pub mean: Matrix<T>,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Matrix<T>,
}

impl<T: Scalar> GaussianDiag<T> {
    fn from_head(out: &Matrix<T>, latent: usize) -> Result<Self> {
        let (lo, hi) = (T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
        Ok(Self {
            mean: out.slice_cols(0, latent)?,
            logvar: out.slice_cols(latent, latent)?.map(|v| v.max(lo).min(hi)),
        })
    }
}

/// Per-coordinate statistics used to normalize conditions and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    /// Mean of training X (applied to the μ* half of the condition).
    pub cond_mean: Vec<T>,
    pub cond_std: Vec<T>,
    /// Mean of training residuals `X − μ*`.
    pub resid_mean: Vec<T>,
    pub resid_std: Vec<T>,
}

impl<T: Scalar> NormStats<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            cond_mean: vec![T::zero(); d],
            cond_std: vec![T::one(); d],
            resid_mean: vec![T::zero(); d],
            resid_std: vec![T::one(); d],
        }
    }

    /// Mean and population std per coordinate (f64 accumulation). A
    /// coordinate whose std is below [`STD_FLOOR`] gets scale 1, so constant
    /// coordinates are centred but not blown up.
    pub fn moments(rows: &[Vec<T>]) -> Result<(Vec<T>, Vec<T>)> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Empty("no rows for statistics".into()))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("ragged rows in statistics"));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                T::lit(if sd < STD_FLOOR { 1.0 } else { sd })
            })
            .collect();
        Ok((mean.into_iter().map(T::lit).collect(), std))
    }

    pub fn dim(&self) -> usize {
        self.cond_mean.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboParts<T> {
    pub total: T,
    pub recon: T,
    pub kl: T,
}

/// The generator: condition projector, encoder `q(z|X,c)`, prior mapper
/// `p(z|c)` and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel<T> {
    pub config: CvaeConfig,
    pub layout: Layout,
    /// Hash of the repository whose experts build the conditions.
    pub repository_hash: String,
    pub stats: NormStats<T>,
    pub projector: Dense<T>,
    pub encoder: Mlp<T>,
    pub prior: Mlp<T>,
    pub decoder: Mlp<T>,
}

impl<T: Scalar> CvaeModel<T> {
    /// Fresh model with seeded uniform initialization and identity stats.
    pub fn init(config: &CvaeConfig, layout: &Layout, repository_hash: impl Into<String>) -> Result<Self> {
        config.validate()?;
        let d = layout.total_len();
        let (l, c, h) = (config.latent_dim, config.cond_dim, config.hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config: config.clone(),
            layout: layout.clone(),
            repository_hash: repository_hash.into(),
            stats: NormStats::identity(d),
            projector: Dense::init(2 * d, c, Activation::Relu, &mut rng),
            encoder: Mlp::init(d + c, &[h, h], 2 * l, &mut rng),
            prior: Mlp::init(c, &[h, h], 2 * l, &mut rng),
            decoder: Mlp::init(l + c, &[h, h, h], d, &mut rng),
        })
    }

    /// Flattened parameter length `D`.
    pub fn param_len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Every weight tensor, in a fixed order.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.projector.weights, &self.projector.bias];
        out.extend(self.encoder.tensors());
        out.extend(self.prior.tensors());
        out.extend(self.decoder.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.projector.weights, &mut self.projector.bias];
        out.extend(self.encoder.tensors_mut());
        out.extend(self.prior.tensors_mut());
        out.extend(self.decoder.tensors_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn params(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    pub fn set_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} parameters given, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Raw condition `[μ*, log(σ*² + ε)]` to network input: the mean half is
    /// z-scored with the training-X statistics.
    pub fn normalize_condition(&self, c: &[T]) -> Result<Vec<T>> {
        let d = self.param_len();
        if c.len() != 2 * d {
            return Err(Error::shape(format!(
                "condition of length {}, expected {}",
                c.len(),
                2 * d
            )));
        }
        let s = &self.stats;
        Ok(c[..d]
            .iter()
            .zip(&s.cond_mean)
            .zip(&s.cond_std)
            .map(|((&v, &m), &sd)| (v - m) / sd)
            .chain(c[d..].iter().copied())
            .collect())
    }

    /// `(x − μ* − m_r) / s_r`.
    pub fn normalize_target(&self, x: &[T], prior_mean: &[T]) -> Result<Vec<T>> {
        self.check_len(x.len())?;
        self.check_len(prior_mean.len())?;
        let s = &self.stats;
        Ok((0..x.len())
            .map(|i| (x[i] - prior_mean[i] - s.resid_mean[i]) / s.resid_std[i])
            .collect())
    }

    /// `μ* + m_r + s_r ⊙ out`.
    pub fn denormalize(&self, out: &[T], prior_mean: &[T]) -> Result<Vec<T>> {
        self.check_len(out.len())?;
        self.check_len(prior_mean.len())?;
        let s = &self.stats;
        Ok((0..out.len())
            .map(|i| prior_mean[i] + s.resid_mean[i] + s.resid_std[i] * out[i])
            .collect())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.param_len() {
            return Err(Error::Layout(format!(
                "vector of length {n} for a model over D = {}",
                self.param_len()
            )));
        }
        Ok(())
    }

    /// Linear + ReLU over network-input conditions (one per row).
    pub fn project_condition(&self, c: &Matrix<T>) -> Result<Matrix<T>> {
        self.projector.forward(c)
    }

    pub fn encode(&self, x_norm: &Matrix<T>, c_proj: &Matrix<T>) -> Result<GaussianDiag<T>> {
        let out = self.encoder.forward(&x_norm.concat_cols(c_proj)?)?;
        GaussianDiag::from_head(&out, self.config.latent_dim)
    }

    pub fn prior_map(&self, c_proj: &Matrix<T>) -> Result<GaussianDiag<T>> {
        let out = self.prior.forward(c_proj)?;
        GaussianDiag::from_head(&out, self.config.latent_dim)
    }

    pub fn decode(&self, z: &Matrix<T>, c_proj: &Matrix<T>) -> Result<Matrix<T>> {
        self.decoder.forward(&z.concat_cols(c_proj)?)
    }

    /// ELBO pieces for one batch, using the given standard-normal `noise`
    /// for the posterior sample.
    pub fn elbo_value(&self, x_norm: &Matrix<T>, c: &Matrix<T>, noise: &Matrix<T>) -> Result<ElboParts<T>> {
        let cp = self.project_condition(c)?;
        let q = self.encode(x_norm, &cp)?;
        let p = self.prior_map(&cp)?;
        let z = reparameterize(&q, noise)?;
        let xhat = self.decode(&z, &cp)?;
        elbo_loss(x_norm, &xhat, &q, &p, self.config.lambda)
    }

    /// ELBO pieces and the gradient of the total with respect to
    /// [`params`](Self::params).
    pub fn elbo_gradient(
        &self,
        x_norm: &Matrix<T>,
        c: &Matrix<T>,
        noise: &Matrix<T>,
    ) -> Result<(ElboParts<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let (parts, total, leaves) = self.record_elbo(&mut tape, x_norm, c, noise)?;
        let grads = tape.backward(total)?;
        let mut flat = Vec::with_capacity(self.num_params());
        for id in leaves {
            flat.extend_from_slice(grads.get(id).data());
        }
        Ok((parts, flat))
    }

    fn record_elbo(
        &self,
        tape: &mut Tape<T>,
        x_norm: &Matrix<T>,
        c: &Matrix<T>,
        noise: &Matrix<T>,
    ) -> Result<(ElboParts<T>, NodeId, Vec<NodeId>)> {
        let l = self.config.latent_dim;
        if noise.shape() != (x_norm.rows(), l) {
            return Err(Error::shape(format!(
                "noise {:?}, expected ({}, {l})",
                noise.shape(),
                x_norm.rows()
            )));
        }
        let (lo, hi) = (T::lit(LOGVAR_MIN), T::lit(LOGVAR_MAX));
        let c_in = tape.leaf(c.clone());
        let (cp, mut leaves) = {
            let (out, ids) = self.projector.record(tape, c_in)?;
            (out, ids.to_vec())
        };
        let x = tape.leaf(x_norm.clone());
        let xc = tape.concat_cols(x, cp)?;
        let (enc, ids) = self.encoder.record(tape, xc)?;
        leaves.extend(ids);
        let qm = tape.slice_cols(enc, 0, l)?;
        let ql = tape.slice_cols(enc, l, l)?;
        let ql = tape.clamp(ql, lo, hi);
        let (pri, ids) = self.prior.record(tape, cp)?;
        leaves.extend(ids);
        let pm = tape.slice_cols(pri, 0, l)?;
        let pl = tape.slice_cols(pri, l, l)?;
        let pl = tape.clamp(pl, lo, hi);
        let half = tape.scale(ql, T::lit(0.5));
        let sd = tape.exp(half);
        let eps = tape.leaf(noise.clone());
        let jitter = tape.mul(sd, eps)?;
        let z = tape.add(qm, jitter)?;
        let zc = tape.concat_cols(z, cp)?;
        let (out, ids) = self.decoder.record(tape, zc)?;
        leaves.extend(ids);
        let recon = tape.mse(out, x)?;
        let kl = tape.gaussian_kl(qm, ql, pm, pl)?;
        let weighted = tape.scale(kl, T::lit(self.config.lambda));
        let total = tape.add(recon, weighted)?;
        let parts = ElboParts {
            total: tape.value(total).get(0, 0),
            recon: tape.value(recon).get(0, 0),
            kl: tape.value(kl).get(0, 0),
        };
        Ok((parts, total, leaves))
    }
}

/// `z = mean + exp(logvar / 2) ⊙ noise`.
pub fn reparameterize<T: Scalar>(g: &GaussianDiag<T>, noise: &Matrix<T>) -> Result<Matrix<T>> {
    if noise.shape() != g.mean.shape() {
        return Err(Error::shape(format!(
            "noise {:?} for a Gaussian of shape {:?}",
            noise.shape(),
            g.mean.shape()
        )));
    }
    let half = T::lit(0.5);
    let sd = g.logvar.map(|v| (v * half).exp());
    Ok(g.mean.zip_map(&sd.zip_map(noise, |s, n| s * n), |m, j| m + j))
}

/// Coordinate-mean squared error plus `λ` times the batch-mean KL(q ‖ p).
pub fn elbo_loss<T: Scalar>(
    x: &Matrix<T>,
    xhat: &Matrix<T>,
    q: &GaussianDiag<T>,
    p: &GaussianDiag<T>,
    lambda: f64,
) -> Result<ElboParts<T>> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lambda must be non-negative, got {lambda}")));
    }
    if x.shape() != xhat.shape() || x.rows() != q.mean.rows() {
        return Err(Error::shape(format!(
            "elbo: X {:?}, X̂ {:?}, q {:?}",
            x.shape(),
            xhat.shape(),
            q.mean.shape()
        )));
    }
    for m in [&q.logvar, &p.mean, &p.logvar] {
        if m.shape() != q.mean.shape() {
            return Err(Error::shape("elbo: posterior and prior shapes differ"));
        }
    }
    let n = T::lit(x.len().max(1) as f64);
    let recon = x
        .data()
        .iter()
        .zip(xhat.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
        / n;
    let kl = crate::numkit::gaussian_kl(q.mean.data(), q.logvar.data(), p.mean.data(), p.logvar.data())?
        / T::lit(x.rows().max(1) as f64);
    Ok(ElboParts {
        total: recon + T::lit(lambda) * kl,
        recon,
        kl,
    })
}

/// The raw condition vector for a prior mean and variance.
pub fn condition_vector<T: Scalar>(mean: &[T], var: &[T]) -> Vec<T> {
    let eps = T::lit(VAR_FLOOR);
    mean.iter()
        .copied()
        .chain(var.iter().map(|&v| (v + eps).ln()))
        .collect()
}

#[cfg(test)]
mod tests;
