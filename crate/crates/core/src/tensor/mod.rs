//! Dense tensors with a reverse-mode tape.
//!
//! 5-D activations use the `[N, C, D, H, W]` layout, row-major with the width
//! axis fastest. Every differentiable kernel lives in [`kernels`] as a pair of
//! forward/backward functions over flat slices; [`Tape`] records which kernel
//! ran and replays the backward halves in reverse order.

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{BatchNormMode, RunningStats, Tape, Var};

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// N-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(dim_err!(
                "buffer of {} values does not fit shape {:?} ({} values)",
                data.len(),
                shape,
                numel
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(f).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(dim_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Converts the element type; gradient state is dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Copies channels `start..start + len` of a 5-D tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, d, h, w] = dims5(self)?;
        if len == 0 || start + len > c {
            return Err(dim_err!("channel slice {start}..{} out of {c}", start + len));
        }
        let spatial = d * h * w;
        let mut out = Vec::with_capacity(n * len * spatial);
        for b in 0..n {
            let base = (b * c + start) * spatial;
            out.extend_from_slice(&self.data[base..base + len * spatial]);
        }
        Self::new(&[n, len, d, h, w], out)
    }

    /// Stacks `[C, D, H, W]` (or any equal-shaped) samples along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| dim_err!("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(dim_err!("stack shape {:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(&shape, data)
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(dim_err!("shape extents must be positive, got {shape:?}"));
    }
    Ok(())
}

pub(crate) fn dims5<T>(t: &Tensor<T>) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(t.shape.as_slice())
        .map_err(|_| dim_err!("expected a 5-D [N,C,D,H,W] tensor, got {:?}", t.shape))
}
