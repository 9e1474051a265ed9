use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::adapters::ModuleSpec;
use crate::router::SemanticPrior;

fn toy_layout() -> Layout {
    // D = 1·(2 + 2) + 1·(2 + 2) = 8
    Layout::new(vec![
        ModuleSpec {
            placement: "a".into(),
            m: 2,
            n: 2,
            r: 1,
            alpha: 1.0,
        },
        ModuleSpec {
            placement: "b".into(),
            m: 2,
            n: 2,
            r: 1,
            alpha: 1.0,
        },
    ])
    .unwrap()
}

fn toy_config() -> CvaeConfig {
    CvaeConfig {
        latent_dim: 2,
        cond_dim: 4,
        hidden: 5,
        lambda: 0.5,
        epochs: 5,
        batch_size: 3,
        seed: 3,
        ..CvaeConfig::default()
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn zero_mlp(model: &mut CvaeModel<f64>) {
    for m in model.tensors_mut() {
        m.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn toy_prior(d: usize, rng: &mut ChaCha8Rng) -> SemanticPrior<f64> {
    SemanticPrior {
        query: vec![1.0, 0.0],
        indices: vec![0],
        task_ids: vec!["e".into()],
        similarities: vec![1.0],
        weights: vec![1.0],
        tau: 0.05,
        k: 1,
        clamped: false,
        mean: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        var: (0..d).map(|_| rng.random_range(0.01..0.2)).collect(),
    }
}

fn samples(n_tasks: usize, per_task: usize, seed: u64) -> Vec<TrainingSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in 0..n_tasks {
        let p = toy_prior(8, &mut rng);
        let cond = p.condition();
        for _ in 0..per_task {
            out.push(TrainingSample {
                task_id: format!("t{t}"),
                x: p.mean.iter().map(|m| m + 0.3 * rng.random_range(-1.0..1.0)).collect(),
                prior_mean: p.mean.clone(),
                condition: cond.clone(),
            });
        }
    }
    out
}

#[test]
fn projector_zero_weights_and_oracle() {
    let mut model = CvaeModel::<f64>::init(&toy_config(), &toy_layout(), "h").unwrap();
    let c = Matrix::from_fn(1, 16, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let out = model.project_condition(&c).unwrap();
    for j in 0..4 {
        let mut acc = model.projector.bias.get(0, j);
        for i in 0..16 {
            acc += c.get(0, i) * model.projector.weights.get(i, j);
        }
        assert!((out.get(0, j) - acc.max(0.0)).abs() < 1e-12);
    }
    assert_eq!(out, model.project_condition(&c).unwrap());
    model.projector.weights = Matrix::zeros(16, 4);
    model.projector.bias = Matrix::row_vector(vec![0.5, -1.0, 0.0, 2.0]);
    let out = model.project_condition(&c).unwrap();
    assert_eq!(out.data(), &[0.5, 0.0, 0.0, 2.0]);
    assert!(model.project_condition(&Matrix::zeros(1, 15)).is_err());
}

#[test]
fn zero_weight_heads() {
    let mut model = CvaeModel::<f64>::init(&toy_config(), &toy_layout(), "h").unwrap();
    zero_mlp(&mut model);
    let last = model.encoder.layers.len() - 1;
    model.encoder.layers[last].bias = Matrix::row_vector(vec![0.0, 0.0, 20.0, -3.0]);
    let x = Matrix::filled(1, 8, 0.7);
    let cp = Matrix::filled(1, 4, 0.2);
    let q = model.encode(&x, &cp).unwrap();
    assert_eq!(q.mean.data(), &[0.0, 0.0]);
    assert_eq!(q.logvar.data(), &[12.0, -3.0]);
    let p = model.prior_map(&cp).unwrap();
    assert_eq!(p.mean.data(), &[0.0, 0.0]);
    let dlast = model.decoder.layers.len() - 1;
    model.decoder.layers[dlast].bias = Matrix::filled(1, 8, 1.5);
    assert_eq!(
        model.decode(&Matrix::filled(1, 2, 3.0), &cp).unwrap(),
        Matrix::filled(1, 8, 1.5)
    );
    assert!(model.encode(&Matrix::zeros(1, 7), &cp).is_err());
    assert!(model.decode(&Matrix::zeros(1, 3), &cp).is_err());
}

#[test]
fn reparameterize_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = GaussianDiag {
        mean: random_matrix(2, 3, &mut rng),
        logvar: random_matrix(2, 3, &mut rng),
    };
    assert_eq!(reparameterize(&g, &Matrix::zeros(2, 3)).unwrap(), g.mean);
    let unit = GaussianDiag {
        mean: g.mean.clone(),
        logvar: Matrix::zeros(2, 3),
    };
    let n = random_matrix(2, 3, &mut rng);
    assert_eq!(reparameterize(&unit, &n).unwrap(), g.mean.add(&n).unwrap());
    let z = reparameterize(&g, &n).unwrap();
    for i in 0..2 {
        for j in 0..3 {
            let want = g.mean.get(i, j) + (g.logvar.get(i, j) / 2.0).exp() * n.get(i, j);
            assert!((z.get(i, j) - want).abs() < 1e-12);
        }
    }
    assert!(reparameterize(&g, &Matrix::zeros(2, 2)).is_err());
}

#[test]
fn elbo_loss_cases() {
    let x = Matrix::row_vector(vec![0.3, -0.2]);
    let g = GaussianDiag {
        mean: Matrix::row_vector(vec![0.1]),
        logvar: Matrix::row_vector(vec![-0.4]),
    };
    let parts = elbo_loss(&x, &x, &g, &g, 1.0).unwrap();
    assert_eq!(parts.total, 0.0);
    let xhat = Matrix::row_vector(vec![0.0, 0.0]);
    let other = GaussianDiag {
        mean: Matrix::row_vector(vec![0.5]),
        logvar: Matrix::row_vector(vec![0.0]),
    };
    let parts = elbo_loss(&x, &xhat, &g, &other, 0.0).unwrap();
    assert_eq!(parts.total, parts.recon);
    // X = 0, X̂ = 1, q = N(1, 1), p = N(0, 1), λ = 2: 1 + 2 · 0.5.
    let q = GaussianDiag {
        mean: Matrix::row_vector(vec![1.0]),
        logvar: Matrix::row_vector(vec![0.0]),
    };
    let p = GaussianDiag {
        mean: Matrix::row_vector(vec![0.0]),
        logvar: Matrix::row_vector(vec![0.0]),
    };
    let parts = elbo_loss(
        &Matrix::row_vector(vec![0.0f64]),
        &Matrix::row_vector(vec![1.0]),
        &q,
        &p,
        2.0,
    )
    .unwrap();
    assert!((parts.total - 2.0).abs() < 1e-12);
    assert!(matches!(elbo_loss(&x, &x, &g, &g, -1.0), Err(Error::Parameter(_))));
}

#[test]
fn tape_elbo_matches_plain_forward() {
    let model = CvaeModel::<f64>::init(&toy_config(), &toy_layout(), "h").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_matrix(3, 8, &mut rng);
    let c = random_matrix(3, 16, &mut rng);
    let noise = random_matrix(3, 2, &mut rng);
    let plain = model.elbo_value(&x, &c, &noise).unwrap();
    let (taped, grad) = model.elbo_gradient(&x, &c, &noise).unwrap();
    assert!((plain.total - taped.total).abs() < 1e-12);
    assert!((plain.kl - taped.kl).abs() < 1e-12);
    assert_eq!(grad.len(), model.num_params());
}

#[test]
fn full_elbo_gradient_matches_central_differences() {
    let mut model = CvaeModel::<f64>::init(&toy_config(), &toy_layout(), "h").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_matrix(3, 8, &mut rng);
    let c = random_matrix(3, 16, &mut rng);
    let noise = random_matrix(3, 2, &mut rng);
    let (_, grad) = model.elbo_gradient(&x, &c, &noise).unwrap();
    let base = model.params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        model.set_params(&p).unwrap();
        let up = model.elbo_value(&x, &c, &noise).unwrap().total;
        p[i] = base[i] - h;
        model.set_params(&p).unwrap();
        let down = model.elbo_value(&x, &c, &noise).unwrap().total;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn normalization_round_trip() {
    let s = samples(3, 4, 2);
    let (model, _) = fit(
        &s,
        &toy_layout(),
        "h",
        &CvaeConfig {
            epochs: 1,
            ..toy_config()
        },
    )
    .unwrap();
    for smp in &s {
        let n = model.normalize_target(&smp.x, &smp.prior_mean).unwrap();
        let back = model.denormalize(&n, &smp.prior_mean).unwrap();
        for (a, b) in back.iter().zip(&smp.x) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    assert!(model.stats.resid_std.iter().all(|&v| v >= STD_FLOOR));
}

#[test]
fn memorizes_single_sample() {
    let s = samples(1, 1, 4);
    let config = CvaeConfig {
        lambda: 0.0,
        epochs: 300,
        batch_size: 1,
        ..toy_config()
    };
    let (_, trace) = fit(&s, &toy_layout(), "h", &config).unwrap();
    let last = trace.last().unwrap().recon;
    assert!(last < 1e-3, "final recon {last:e}, first {:e}", trace[0].recon);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let s = samples(4, 6, 6);
    let config = CvaeConfig {
        epochs: 150,
        lambda: 1e-3,
        hidden: 16,
        cond_dim: 8,
        ..toy_config()
    };
    let (m1, t1) = fit(&s, &toy_layout(), "h", &config).unwrap();
    let (m2, t2) = fit(&s, &toy_layout(), "h", &config).unwrap();
    assert_eq!(t1, t2);
    assert_eq!(m1, m2);
    assert!(t1.last().unwrap().recon < t1[0].recon);
    assert!(t1.iter().all(|e| e.kl >= -1e-9));
}

#[test]
fn resume_continues_from_weights() {
    let s = samples(4, 6, 6);
    let config = CvaeConfig {
        epochs: 60,
        hidden: 16,
        cond_dim: 8,
        ..toy_config()
    };
    let (m, t) = fit(&s, &toy_layout(), "h", &config).unwrap();
    let stats = m.stats.clone();
    let (r, rt) = super::resume(
        m.clone(),
        &s,
        &CvaeConfig {
            epochs: 60,
            seed: 3,
            ..config.clone()
        },
    )
    .unwrap();
    assert_eq!(r.stats, stats);
    assert_eq!(r.config.seed, 3);
    assert!(rt[0].total < t[0].total);
    assert!(rt.last().unwrap().recon < t.last().unwrap().recon);
    let wide = CvaeConfig { hidden: 17, ..config };
    assert!(matches!(super::resume(m, &s, &wide), Err(Error::Parameter(_))));
}

#[test]
fn generation_modes() {
    let s = samples(3, 5, 9);
    let (model, _) = fit(
        &s,
        &toy_layout(),
        "h",
        &CvaeConfig {
            epochs: 20,
            ..toy_config()
        },
    )
    .unwrap();
    let prior = toy_prior(8, &mut ChaCha8Rng::seed_from_u64(1));
    let a = model.generate(&prior, 5, GenerateMode::Mean, 0).unwrap();
    let b = model.generate(&prior, 1, GenerateMode::Mean, 99).unwrap();
    assert_eq!(a.len(), 1);
    assert_eq!(a, b);
    let s1 = model.generate_vectors(&prior, 2, GenerateMode::Stochastic, 1).unwrap();
    let s2 = model.generate_vectors(&prior, 2, GenerateMode::Stochastic, 2).unwrap();
    let gap = s1[0]
        .iter()
        .zip(&s2[0])
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(gap > 0.0);
    assert_ne!(s1[0], s1[1]);
    assert_eq!(s1[0].len(), 8);
    let mut short = prior.clone();
    short.mean.pop();
    short.var.pop();
    assert!(matches!(
        model.generate(&short, 1, GenerateMode::Mean, 0),
        Err(Error::Layout(_))
    ));
}

#[test]
fn fit_rejects_empty_and_mismatched() {
    assert!(matches!(
        fit::<f64>(&[], &toy_layout(), "h", &toy_config()),
        Err(Error::Empty(_))
    ));
    let mut s = samples(1, 1, 1);
    s[0].x.pop();
    assert!(fit(&s, &toy_layout(), "h", &toy_config()).is_err());
    let bad = CvaeConfig {
        lambda: -1.0,
        ..toy_config()
    };
    assert!(fit(&samples(1, 1, 1), &toy_layout(), "h", &bad).is_err());
}

#[test]
fn config_json_defaults() {
    let c: CvaeConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(c.epochs, 3);
    assert_eq!(c.latent_dim, 64);
    assert_eq!(c.cond_dim, 128);
    assert_eq!(c.hidden, 256);
    assert_eq!(c.lambda, 1e-3);
    assert!(serde_json::from_str::<CvaeConfig>(r#"{"epoch": 3}"#).is_err());
}
