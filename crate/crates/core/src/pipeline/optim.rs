//! Adadelta.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running averages of squared gradients and squared updates, one buffer per
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState<T> {
    pub rho: T,
    pub eps: T,
    pub sq_grad: Vec<Vec<T>>,
    pub sq_delta: Vec<Vec<T>>,
}

impl<T: Scalar> AdadeltaState<T> {
    pub fn new(sizes: &[usize], rho: f64, eps: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) || !(eps > 0.0) {
            return Err(Error::Validation(format!(
                "adadelta needs 0 < rho < 1 and eps > 0, got rho {rho}, eps {eps}"
            )));
        }
        Ok(AdadeltaState {
            rho: T::lit(rho),
            eps: T::lit(eps),
            sq_grad: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            sq_delta: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        })
    }

    pub fn for_params(params: &[Tensor<T>], rho: f64, eps: f64) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(Tensor::numel).collect();
        Self::new(&sizes, rho, eps)
    }

    /// [`adadelta_step`] against optimizer buffer `index`.
    pub fn step_slice(&mut self, index: usize, param: &mut [T], grad: &[T]) -> Result<()> {
        let (Some(g2), Some(d2)) = (self.sq_grad.get_mut(index), self.sq_delta.get_mut(index)) else {
            return Err(Error::Dimension(format!("no optimizer buffer {index}")));
        };
        adadelta_step(param, grad, g2, d2, self.rho, self.eps)
    }

    /// One update of every parameter from its accumulated gradient.
    /// Parameters without a gradient are left alone. Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.sq_grad.len() {
            return Err(Error::Dimension(format!(
                "{} parameters for {} optimizer buffers",
                params.len(),
                self.sq_grad.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if let Some(g) = p.grad() {
                check_finite(i, g)?;
            }
        }
        for (i, p) in params.iter_mut().enumerate() {
            if let Some(g) = p.grad().map(<[T]>::to_vec) {
                self.step_slice(i, p.data_mut(), &g)?;
            }
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(index: usize, g: &[T]) -> Result<()> {
    if let Some(j) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient {} at element {j} of parameter {index}",
            g[j]
        )));
    }
    Ok(())
}

/// ```text
/// E[g²]  <- rho E[g²] + (1 - rho) g²
/// dx     <- -sqrt(E[dx²] + eps) / sqrt(E[g²] + eps) * g
/// E[dx²] <- rho E[dx²] + (1 - rho) dx²
/// x      <- x + dx
/// ```
pub fn adadelta_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    sq_grad: &mut [T],
    sq_delta: &mut [T],
    rho: T,
    eps: T,
) -> Result<()> {
    let n = param.len();
    if grad.len() != n || sq_grad.len() != n || sq_delta.len() != n {
        return Err(Error::Dimension(format!(
            "adadelta buffers {}/{}/{}/{}",
            n,
            grad.len(),
            sq_grad.len(),
            sq_delta.len()
        )));
    }
    check_finite(0, grad)?;
    let one = T::one();
    for i in 0..n {
        let g = grad[i];
        sq_grad[i] = rho * sq_grad[i] + (one - rho) * g * g;
        let dx = -((sq_delta[i] + eps).sqrt() / (sq_grad[i] + eps).sqrt()) * g;
        sq_delta[i] = rho * sq_delta[i] + (one - rho) * dx * dx;
        param[i] += dx;
    }
    Ok(())
}
