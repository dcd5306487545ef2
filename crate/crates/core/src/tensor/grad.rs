use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Central-difference gradient of a scalar function of a tensor.
///
/// Each element is perturbed by `+eps` and `-eps` in turn and the partial
/// derivative is estimated as `(f(x+) - f(x-)) / (2 eps)`; the error is
/// `O(eps^2)` for smooth `f`. `eps` must lie in `[1e-7, 1e-3]`.
pub fn finite_difference_grad<T, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(eps >= T::of(1e-7) && eps <= T::of(1e-3)) {
        return Err(Error::Parameter(format!(
            "finite-difference step must be in [1e-7, 1e-3], got {eps}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_grad",
            });
        }
        grad.push((plus - minus) / (eps + eps));
    }
    Ok(Tensor::new_unchecked(x.shape().to_vec(), grad))
}
