use rand_distr::{Distribution, Normal};

use super::family::{substream, Family, SyntheticTask};
use crate::adapters::flatten;
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::repository::TaskRecord;

/// Losses above this abort oracle training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleOptions {
    pub epochs: usize,
    pub lr: f64,
    /// Late-epoch checkpoints kept.
    pub checkpoints: usize,
    /// Std of the Gaussian jitter added to each kept checkpoint.
    pub jitter: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            epochs: 400,
            lr: 0.5,
            checkpoints: 20,
            jitter: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleFit {
    pub record: TaskRecord,
    /// Unjittered parameters after the last epoch.
    pub final_params: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Full-batch gradient descent on the factors of every placement, starting
/// from the family's base factors. Each placement descends its own mean
/// squared error.
pub fn train_oracle(task: &SyntheticTask, family: &Family, options: &OracleOptions, seed: u64) -> Result<OracleFit> {
    if options.checkpoints == 0 || options.checkpoints > options.epochs {
        return Err(Error::Parameter(format!(
            "need 1 <= checkpoints ({}) <= epochs ({})",
            options.checkpoints, options.epochs
        )));
    }
    if !(options.lr > 0.0) || !(options.jitter >= 0.0) {
        return Err(Error::Parameter(
            "learning rate must be positive and jitter nonnegative".into(),
        ));
    }
    let base = family.base();
    let mut a: Vec<Matrix<f64>> = base.modules().iter().map(|m| m.a.clone()).collect();
    let mut b: Vec<Matrix<f64>> = base.modules().iter().map(|m| m.b.clone()).collect();
    let x = &task.x;
    let xt = x.transpose();
    let w0x: Vec<Matrix<f64>> = family.w0.iter().map(|w| w.matmul_unchecked(x)).collect();
    let alphas: Vec<f64> = family.layout.modules.iter().map(|s| s.alpha).collect();

    let residuals = |a: &[Matrix<f64>], b: &[Matrix<f64>]| -> Vec<Matrix<f64>> {
        (0..a.len())
            .map(|p| {
                let bax = b[p].matmul_unchecked(&a[p].matmul_unchecked(x)).scale(alphas[p]);
                let mut r = w0x[p].add(&bax).expect("same shape");
                r.data_mut().iter_mut().zip(task.y[p].data()).for_each(|(v, y)| *v -= y);
                r
            })
            .collect()
    };
    let loss_of = |rs: &[Matrix<f64>]| -> f64 {
        let n: usize = rs.iter().map(Matrix::len).sum();
        rs.iter().flat_map(|r| r.data()).map(|v| v * v).sum::<f64>() / n as f64
    };

    let initial_loss = loss_of(&residuals(&a, &b));
    let mut rng = substream(seed, &format!("{}/oracle", task.task_id));
    let jitter = Normal::new(0.0, options.jitter.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut checkpoints = Vec::with_capacity(options.checkpoints);
    for epoch in 0..options.epochs {
        let rs = residuals(&a, &b);
        let loss = loss_of(&rs);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence {
                task_id: task.task_id.clone(),
                epoch,
                loss,
            });
        }
        for p in 0..a.len() {
            let scale = 2.0 / rs[p].len() as f64;
            let g = rs[p].matmul_unchecked(&xt).scale(scale);
            let ga = b[p].t_matmul(&g).scale(alphas[p]);
            let gb = g.matmul_t(&a[p]).scale(alphas[p]);
            a[p].add_assign(&ga.scale(-options.lr));
            b[p].add_assign(&gb.scale(-options.lr));
        }
        if epoch + options.checkpoints >= options.epochs {
            let mut v = flat(&a, &b);
            if options.jitter > 0.0 {
                v.iter_mut().for_each(|x| *x += jitter.sample(&mut rng));
            }
            checkpoints.push(v.into_iter().map(|x| x as f32).collect());
        }
    }
    let final_loss = loss_of(&residuals(&a, &b));
    if !final_loss.is_finite() || final_loss > DIVERGENCE_LOSS {
        return Err(Error::Divergence {
            task_id: task.task_id.clone(),
            epoch: options.epochs,
            loss: final_loss,
        });
    }
    Ok(OracleFit {
        record: TaskRecord {
            task_id: task.task_id.clone(),
            description: format!("{} at angle {:.4}", family.name, task.theta),
            embedding: task.embedding.clone(),
            checkpoints,
        },
        final_params: flat(&a, &b),
        initial_loss,
        final_loss,
    })
}

fn flat(a: &[Matrix<f64>], b: &[Matrix<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for (a, b) in a.iter().zip(b) {
        out.extend_from_slice(a.data());
        out.extend_from_slice(b.data());
    }
    out
}

/// Flat vector of the task's ground-truth factors.
pub fn truth_vector(task: &SyntheticTask) -> Vec<f64> {
    flatten(&task.truth).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::family::{make_family, task_loss};
    use crate::synthbench::BenchConfig;

    fn family() -> Family {
        let cfg = BenchConfig {
            n_tasks: 4,
            n_experts: 2,
            n_train: 1,
            ..BenchConfig::default()
        };
        make_family(&cfg, 7).unwrap()
    }

    #[test]
    fn converges_far_below_start() {
        let f = family();
        let t = &f.tasks[1];
        let fit = train_oracle(t, &f, &OracleOptions::default(), 0).unwrap();
        assert!(
            fit.final_loss < 1e-4 * fit.initial_loss,
            "{} vs {}",
            fit.final_loss,
            fit.initial_loss
        );
        assert!((task_loss(&fit.final_params, t, &f).unwrap() - fit.final_loss).abs() < 1e-15);
        assert_eq!(fit.record.checkpoints.len(), 20);
        assert_eq!(fit.record.param_len(), Some(f.layout.total_len()));
    }

    #[test]
    fn single_checkpoint_is_final() {
        let f = family();
        let opts = OracleOptions {
            epochs: 50,
            checkpoints: 1,
            jitter: 0.0,
            ..OracleOptions::default()
        };
        let fit = train_oracle(&f.tasks[0], &f, &opts, 0).unwrap();
        let expect: Vec<f32> = fit.final_params.iter().map(|&v| v as f32).collect();
        assert_eq!(fit.record.checkpoints, vec![expect]);
    }

    #[test]
    fn jitter_is_seeded() {
        let f = family();
        let opts = OracleOptions {
            epochs: 30,
            checkpoints: 5,
            ..OracleOptions::default()
        };
        let a = train_oracle(&f.tasks[0], &f, &opts, 1).unwrap();
        let b = train_oracle(&f.tasks[0], &f, &opts, 1).unwrap();
        let c = train_oracle(&f.tasks[0], &f, &opts, 2).unwrap();
        assert_eq!(a.record.checkpoints, b.record.checkpoints);
        assert_ne!(a.record.checkpoints, c.record.checkpoints);
        assert_eq!(a.final_params, c.final_params);
    }

    #[test]
    fn divergence_reported() {
        let f = family();
        let opts = OracleOptions {
            lr: 50.0,
            ..OracleOptions::default()
        };
        match train_oracle(&f.tasks[0], &f, &opts, 0) {
            Err(Error::Divergence { task_id, epoch, loss }) => {
                assert_eq!(task_id, f.tasks[0].task_id);
                assert!(epoch > 0);
                assert!(!(loss <= DIVERGENCE_LOSS));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_options() {
        let f = family();
        for opts in [
            OracleOptions {
                checkpoints: 0,
                ..OracleOptions::default()
            },
            OracleOptions {
                checkpoints: 500,
                ..OracleOptions::default()
            },
            OracleOptions {
                lr: 0.0,
                ..OracleOptions::default()
            },
        ] {
            assert!(matches!(
                train_oracle(&f.tasks[0], &f, &opts, 0),
                Err(Error::Parameter(_))
            ));
        }
    }
}
