//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{GradTape, ValId};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative error between a finite-difference and an analytic gradient
/// entry: |fd - an| / max(1, |fd| + |an|).
pub fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / 1f64.max(fd.abs() + an.abs())
}

/// Check the tape gradient of a scalar function against central finite
/// differences over every entry of `theta`. Returns the max relative
/// error.
///
/// `f` builds the loss on a fresh tape from the given leaf; it runs
/// once for the analytic gradient and twice per parameter for the
/// differences.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut GradTape, ValId) -> Result<ValId>,
{
    let mut tape = GradTape::new();
    let id = tape.leaf(theta.clone().with_grad());
    let loss = f(&mut tape, id)?;
    if !tape.value(loss).data[0].is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    tape.backward(loss)?;
    let analytic = tape.grad(id).expect("leaf was tracked").to_vec();

    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = GradTape::new();
        let leaf = t.leaf(Tensor::new(theta.shape.clone(), data.to_vec()));
        let l = f(&mut t, leaf)?;
        let v = t.value(l).data[0];
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe = theta.data.clone();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval(&probe)?;
        probe[i] = orig - h;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(fd, analytic[i]));
    }
    Ok(worst)
}
