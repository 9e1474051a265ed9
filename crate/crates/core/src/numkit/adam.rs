use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Scalar;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter for one flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let one = T::one();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook scalar Adam, kept independent of the vectorized code.
    fn scalar_adam(theta: f64, grads: &[f64], c: AdamConfig) -> Vec<f64> {
        let (mut m, mut v, mut th) = (0.0, 0.0, theta);
        let mut out = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            th -= c.lr * mh / (vh.sqrt() + c.eps);
            out.push(th);
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0_f32, -2.0, 3.5];
        let mut s = AdamState::new(3, AdamConfig::default());
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let c = AdamConfig::default();
        let g = 0.37;
        let mut p = vec![0.0_f64];
        let mut s = AdamState::new(1, c);
        s.step(&mut p, &[g]).unwrap();
        let expected = -c.lr * g / (g.abs() + c.eps);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - scalar_adam(0.0, &[g], c)[0]).abs() < 1e-15);
    }

    #[test]
    fn repeated_equal_gradients_do_not_grow_step() {
        let c = AdamConfig::default();
        let mut p = vec![0.5_f64];
        let mut s = AdamState::new(1, c);
        s.step(&mut p, &[1.3]).unwrap();
        let d1 = p[0] - 0.5;
        let before = p[0];
        s.step(&mut p, &[1.3]).unwrap();
        let d2 = p[0] - before;
        assert!(d2.abs() <= d1.abs() * (1.0 + 1e-6));
        let oracle = scalar_adam(0.5, &[1.3, 1.3], c);
        assert!((p[0] - oracle[1]).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let mut s = AdamState::<f32>::new(2, AdamConfig::default());
        assert!(s.step(&mut [0.0; 3], &[0.0; 3]).is_err());
        assert_eq!(s.steps(), 0);
    }
}
