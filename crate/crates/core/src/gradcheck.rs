//! Finite-difference oracle used to audit tape gradients.
//!
//! Nothing here touches a tape: `f` is evaluated on plain perturbed copies
//! of its input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference estimate `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for
/// every coordinate `i`.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        *slot = (plus - minus) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both are
/// zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let diff = a.zip_map(b, |x, y| x - y)?.norm();
    let scale = a.norm().max(b.norm());
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}
