use crate::error::{Error, Result};

use super::Scalar;

/// KL(q ‖ p) for diagonal Gaussians given as (mean, log-variance) slices,
/// summed over coordinates.
pub fn gaussian_kl<T: Scalar>(q_mean: &[T], q_logvar: &[T], p_mean: &[T], p_logvar: &[T]) -> Result<T> {
    let n = q_mean.len();
    if q_logvar.len() != n || p_mean.len() != n || p_logvar.len() != n {
        return Err(Error::shape(format!(
            "gaussian_kl: lengths {}, {}, {}, {}",
            n,
            q_logvar.len(),
            p_mean.len(),
            p_logvar.len()
        )));
    }
    let half = T::lit(0.5);
    let mut total = T::zero();
    for i in 0..n {
        let d = q_mean[i] - p_mean[i];
        let term = (q_logvar[i] - p_logvar[i]).exp() + d * d / p_logvar[i].exp() - T::one() + p_logvar[i] - q_logvar[i];
        total += half * term;
    }
    Ok(total)
}
