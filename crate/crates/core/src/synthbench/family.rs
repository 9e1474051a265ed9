use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use super::BenchConfig;
use crate::adapters::{flatten, AdapterSet, Layout, LoraModule};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Independent generator for a named purpose under a master seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Fourier coefficients of one placement's factors:
/// `A(θ) = A₀ + A₁ cos θ + A₂ sin θ`, likewise for `B`.
#[derive(Clone, Debug)]
struct Harmonics {
    a: [Matrix<f64>; 3],
    b: [Matrix<f64>; 3],
}

impl Harmonics {
    fn at(&self, theta: f64) -> (Matrix<f64>, Matrix<f64>) {
        let (c, s) = (theta.cos(), theta.sin());
        let mix = |m: &[Matrix<f64>; 3]| m[0].zip_map(&m[1], |x, y| x + c * y).zip_map(&m[2], |x, y| x + s * y);
        (mix(&self.a), mix(&self.b))
    }
}

/// One synthetic task: a point on the circle, its embedding, data and
/// ground-truth low-rank update.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub task_id: String,
    pub theta: f64,
    pub embedding: Vec<f32>,
    /// `n × N` inputs shared by every placement.
    pub x: Matrix<f64>,
    /// Targets per placement, `m × N`.
    pub y: Vec<Matrix<f64>>,
    pub truth: AdapterSet<f64>,
}

impl SyntheticTask {
    pub fn samples(&self) -> usize {
        self.x.cols()
    }
}

/// A family of tasks on a circle sharing frozen weights and a smooth map
/// from angle to adapter.
#[derive(Clone, Debug)]
pub struct Family {
    pub name: String,
    pub layout: Layout,
    /// Frozen weight per placement.
    pub w0: Vec<Matrix<f64>>,
    harmonics: Vec<Harmonics>,
    /// Orthonormal directions spanning the embedding circle and its tilt.
    basis: [Vec<f64>; 3],
    /// Angle of the embedding plane out of the base circle.
    pub tilt: f64,
    /// Phase added to every task angle.
    pub phase: f64,
    pub tasks: Vec<SyntheticTask>,
}

impl Family {
    pub fn task(&self, task_id: &str) -> Option<&SyntheticTask> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    /// Ground-truth factors at an arbitrary angle.
    pub fn truth_at(&self, theta: f64) -> AdapterSet<f64> {
        let modules = self
            .layout
            .modules
            .iter()
            .zip(&self.harmonics)
            .map(|(spec, h)| {
                let (a, b) = h.at(theta);
                LoraModule::new(spec.placement.clone(), a, b, spec.alpha).expect("harmonic shapes follow the layout")
            })
            .collect();
        AdapterSet::new(modules).expect("layout is valid")
    }

    /// The shared base factors `(A₀, B₀)`, used to warm-start oracles.
    pub fn base(&self) -> AdapterSet<f64> {
        let modules = self
            .layout
            .modules
            .iter()
            .zip(&self.harmonics)
            .map(|(spec, h)| {
                LoraModule::new(spec.placement.clone(), h.a[0].clone(), h.b[0].clone(), spec.alpha)
                    .expect("harmonic shapes follow the layout")
            })
            .collect();
        AdapterSet::new(modules).expect("layout is valid")
    }

    pub fn embedding_at(&self, theta: f64) -> Vec<f32> {
        let coeff = [
            theta.cos() * self.tilt.cos(),
            theta.sin() * self.tilt.cos(),
            self.tilt.sin(),
        ];
        let e = self.basis[0].len();
        (0..e)
            .map(|i| (0..3).map(|j| coeff[j] * self.basis[j][i]).sum::<f64>() as f32)
            .collect()
    }

    /// Upper bound on `‖ΔW(θ₁) − ΔW(θ₂)‖_F / |θ₁ − θ₂|` from the factor
    /// norms, with `ΔW = α·B·A`.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layout
            .modules
            .iter()
            .zip(&self.harmonics)
            .map(|(spec, h)| {
                let f = |m: &Matrix<f64>| m.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let a = f(&h.a[0]) + f(&h.a[1]) + f(&h.a[2]);
                let b = f(&h.b[0]) + f(&h.b[1]) + f(&h.b[2]);
                let da = f(&h.a[1]) + f(&h.a[2]);
                let db = f(&h.b[1]) + f(&h.b[2]);
                (spec.alpha.abs() * (db * a + b * da)).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Dense `α·B·A` per placement for a flat adapter vector.
pub fn dense_updates(v: &[f64], layout: &Layout) -> Result<Vec<Matrix<f64>>> {
    let set = crate::adapters::unflatten(v, layout)?;
    Ok(set.modules().iter().map(LoraModule::delta).collect())
}

fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for q in &out {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// Builds a family of `n_tasks` equally spaced tasks.
///
/// `name` selects independent factor draws; `phase` and `tilt` place the
/// family's embedding circle. Every family from the same `seed` shares the
/// frozen weights and the embedding basis.
pub fn make_family_with(config: &BenchConfig, seed: u64, name: &str, phase: f64, tilt: f64) -> Result<Family> {
    config.validate()?;
    let layout = config.layout()?;
    let n_tasks = config.n_tasks;
    let mut shared = substream(seed, "shared");
    let w0: Vec<Matrix<f64>> = layout
        .modules
        .iter()
        .map(|s| gaussian(s.m, s.n, 1.0 / (s.n as f64).sqrt(), &mut shared))
        .collect();
    let basis_vecs = orthonormal(3, config.embedding_dim, &mut shared);
    let basis = [basis_vecs[0].clone(), basis_vecs[1].clone(), basis_vecs[2].clone()];

    let mut rng = substream(seed, &format!("{name}/factors"));
    let harm = config.harmonic;
    let harmonics = layout
        .modules
        .iter()
        .map(|s| {
            let sa = 1.0 / (s.n as f64).sqrt();
            Harmonics {
                a: [
                    gaussian(s.r, s.n, sa, &mut rng),
                    gaussian(s.r, s.n, harm * sa, &mut rng),
                    gaussian(s.r, s.n, harm * sa, &mut rng),
                ],
                b: [
                    gaussian(s.m, s.r, 0.5, &mut rng),
                    gaussian(s.m, s.r, harm * 0.5, &mut rng),
                    gaussian(s.m, s.r, harm * 0.5, &mut rng),
                ],
            }
        })
        .collect();
    let mut family = Family {
        name: name.to_string(),
        layout: layout.clone(),
        w0,
        harmonics,
        basis,
        tilt,
        phase,
        tasks: Vec::with_capacity(n_tasks),
    };
    for i in 0..n_tasks {
        let task_id = format!("{name}-{i:02}");
        let theta = phase + 2.0 * std::f64::consts::PI * i as f64 / n_tasks as f64;
        let mut data = substream(seed, &format!("{task_id}/data"));
        let n = layout.modules[0].n;
        let x = gaussian(n, config.samples, 1.0, &mut data);
        let truth = family.truth_at(theta);
        let (truth_vec, _) = flatten(&truth);
        let updates = dense_updates(&truth_vec, &layout)?;
        let mut y = Vec::with_capacity(layout.modules.len());
        for (w, du) in family.w0.iter().zip(&updates) {
            let mut yp = w.add(du)?.matmul(&x)?;
            if config.label_noise > 0.0 {
                let noise = gaussian(yp.rows(), yp.cols(), config.label_noise, &mut data);
                yp = yp.add(&noise)?;
            }
            y.push(yp);
        }
        family.tasks.push(SyntheticTask {
            embedding: family.embedding_at(theta),
            task_id,
            theta,
            x,
            y,
            truth,
        });
    }
    Ok(family)
}

/// The primary benchmark family: untilted, zero phase.
pub fn make_family(config: &BenchConfig, seed: u64) -> Result<Family> {
    make_family_with(config, seed, "task", 0.0, 0.0)
}

/// Mean squared alignment error of `v` on a task, averaged over placements.
pub fn task_loss(v: &[f64], task: &SyntheticTask, family: &Family) -> Result<f64> {
    let outputs = predict(v, task, family)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (o, y) in outputs.iter().zip(&task.y) {
        total += o
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += o.len();
    }
    Ok(total / count as f64)
}

/// `(W₀ + α·B·A)·X` per placement, via the factored form.
pub fn predict(v: &[f64], task: &SyntheticTask, family: &Family) -> Result<Vec<Matrix<f64>>> {
    if v.len() != family.layout.total_len() {
        return Err(Error::Layout(format!(
            "adapter of length {} for a family with D = {}",
            v.len(),
            family.layout.total_len()
        )));
    }
    let set = crate::adapters::unflatten(v, &family.layout)?;
    set.modules()
        .iter()
        .zip(&family.w0)
        .map(|(m, w)| crate::adapters::apply_lora(w, m, &task.x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            n_tasks: 8,
            n_experts: 4,
            n_train: 2,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn deterministic_and_periodic() {
        let a = make_family(&small(), 3).unwrap();
        let b = make_family(&small(), 3).unwrap();
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.embedding, y.embedding);
            assert_eq!(x.x, y.x);
            assert_eq!(x.y, y.y);
        }
        let t = 0.7;
        let (p, _) = flatten(&a.truth_at(t));
        let (q, _) = flatten(&a.truth_at(t + 2.0 * std::f64::consts::PI));
        assert!(p.iter().zip(&q).all(|(u, v)| (u - v).abs() < 1e-12));
        let c = make_family(&small(), 4).unwrap();
        assert_ne!(a.tasks[0].embedding, c.tasks[0].embedding);
    }

    #[test]
    fn embeddings_follow_the_circle() {
        let f = make_family(&small(), 1).unwrap();
        let cos = |i: usize, j: usize| crate::semantics::dot(&f.tasks[i].embedding, &f.tasks[j].embedding);
        for t in &f.tasks {
            let norm: f32 = t.embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        assert!(cos(0, 1) > cos(0, 4));
        assert!((cos(0, 1) as f64 - (2.0 * std::f64::consts::PI / 8.0).cos()).abs() < 1e-5);
        assert!((cos(0, 4) + 1.0).abs() < 1e-5);
        let tilted = make_family_with(&small(), 1, "alt", 0.1, 0.5).unwrap();
        let c = crate::semantics::dot(&f.tasks[0].embedding, &tilted.tasks[0].embedding) as f64;
        assert!((c - 0.1f64.cos() * 0.5f64.cos()).abs() < 1e-5);
    }

    #[test]
    fn truths_are_low_rank_and_lipschitz() {
        let f = make_family(&small(), 2).unwrap();
        let r = f.layout.modules[0].r;
        for t in &f.tasks {
            for m in t.truth.modules() {
                assert_eq!(m.rank(), r);
            }
        }
        let bound = f.lipschitz_bound();
        let mut rng = substream(0, "pairs");
        for _ in 0..50 {
            let t1: f64 = rand::Rng::random_range(&mut rng, 0.0..6.3);
            let t2: f64 = t1 + rand::Rng::random_range(&mut rng, -0.5..0.5);
            let (p, _) = flatten(&f.truth_at(t1));
            let (q, _) = flatten(&f.truth_at(t2));
            let dp = dense_updates(&p, &f.layout).unwrap();
            let dq = dense_updates(&q, &f.layout).unwrap();
            let gap: f64 = dp
                .iter()
                .zip(&dq)
                .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            assert!(gap <= bound * (t1 - t2).abs() + 1e-12);
        }
    }

    #[test]
    fn truth_reproduces_targets() {
        let f = make_family(&small(), 5).unwrap();
        let t = &f.tasks[2];
        let (v, _) = flatten(&t.truth);
        assert!(task_loss(&v, t, &f).unwrap() < 1e-20);
        let zero = vec![0.0; v.len()];
        assert!(task_loss(&zero, t, &f).unwrap() > 1e-3);
        assert!(task_loss(&zero[1..], t, &f).is_err());
    }
}
