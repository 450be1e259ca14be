//! Central finite-difference check of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Maximum over coordinates of `|autodiff - central| / max(1, |central|)`.
///
/// `f` builds a scalar from the tracked input on a fresh tape; it is called
/// once for the analytic gradient and twice per coordinate for the
/// numerical one. Meant to run in `f64`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad(true));
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = tape.grad(x).map(<[T]>::to_vec).unwrap_or_default();

    let eval = |p: Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let x = tape.leaf(p);
        let y = f(&mut tape, x)?;
        tape.value(y).item()
    };

    let two = T::lit(2.0);
    let mut worst = T::zero();
    for i in 0..point.numel() {
        let mut plus = point.clone().with_grad(false);
        plus.data_mut()[i] += step;
        let mut minus = point.clone().with_grad(false);
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(T::one());
        worst = worst.max(err);
    }
    Ok(worst)
}
