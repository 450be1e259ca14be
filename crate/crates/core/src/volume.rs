//! Dense 3-D scalar grids and trilinear resampling.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scalar field with extents `[nx, ny, nz]` (width, height, depth), stored
/// x-fastest: index = `x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Grid3<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(dim_err!("grid extents must be positive, got {dims:?}"));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(dim_err!(
                "grid {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            ));
        }
        Ok(Grid3 { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()])
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let [nx, ny, nz] = dims;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Inverse of [`Grid3::index`].
    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    /// Flat index of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Grid3<U> {
        self.map(|v| U::lit(v.as_f64()))
    }

    /// Trilinear sample at fractional voxel coordinates, clamped to the grid.
    pub fn sample(&self, fx: f64, fy: f64, fz: f64) -> T {
        let axis = |f: f64, n: usize| -> (usize, usize, f64) {
            let f = f.clamp(0.0, (n - 1) as f64);
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, f - i0 as f64)
        };
        let (x0, x1, tx) = axis(fx, self.dims[0]);
        let (y0, y1, ty) = axis(fy, self.dims[1]);
        let (z0, z1, tz) = axis(fz, self.dims[2]);
        let v = |x, y, z| self.get(x, y, z).as_f64();
        let c00 = v(x0, y0, z0) * (1.0 - tx) + v(x1, y0, z0) * tx;
        let c10 = v(x0, y1, z0) * (1.0 - tx) + v(x1, y1, z0) * tx;
        let c01 = v(x0, y0, z1) * (1.0 - tx) + v(x1, y0, z1) * tx;
        let c11 = v(x0, y1, z1) * (1.0 - tx) + v(x1, y1, z1) * tx;
        let c0 = c00 * (1.0 - ty) + c10 * ty;
        let c1 = c01 * (1.0 - ty) + c11 * ty;
        T::lit(c0 * (1.0 - tz) + c1 * tz)
    }

    /// Trilinear resize with corner alignment: the first and last samples of
    /// each axis map onto the first and last source samples.
    pub fn resize_trilinear(&self, dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(dim_err!("resize target must be positive, got {dims:?}"));
        }
        if dims == self.dims {
            return Ok(self.clone());
        }
        let scale = |a: usize| -> f64 {
            if dims[a] > 1 {
                (self.dims[a] - 1) as f64 / (dims[a] - 1) as f64
            } else {
                0.0
            }
        };
        let offset = |a: usize| -> f64 {
            if dims[a] > 1 {
                0.0
            } else {
                (self.dims[a] - 1) as f64 / 2.0
            }
        };
        let (sx, sy, sz) = (scale(0), scale(1), scale(2));
        let (ox, oy, oz) = (offset(0), offset(1), offset(2));
        Grid3::from_fn(dims, |x, y, z| {
            self.sample(ox + x as f64 * sx, oy + y as f64 * sy, oz + z as f64 * sz)
        })
    }

    /// Copies the box starting at `origin` with the given extent.
    pub fn crop(&self, origin: [usize; 3], extent: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if origin[a] + extent[a] > self.dims[a] {
                return Err(dim_err!(
                    "crop {origin:?}+{extent:?} exceeds grid {:?}",
                    self.dims
                ));
            }
        }
        Grid3::from_fn(extent, |x, y, z| {
            self.get(origin[0] + x, origin[1] + y, origin[2] + z)
        })
    }

    /// Keeps slices `z0..z1` (exclusive end).
    pub fn slab(&self, z0: usize, z1: usize) -> Result<Self> {
        if z0 >= z1 || z1 > self.dims[2] {
            return Err(dim_err!("slab {z0}..{z1} invalid for depth {}", self.dims[2]));
        }
        let plane = self.dims[0] * self.dims[1];
        Grid3::new(
            [self.dims[0], self.dims[1], z1 - z0],
            self.data[z0 * plane..z1 * plane].to_vec(),
        )
    }

    /// Single-channel `[1, D, H, W]` tensor with the same voxel order.
    pub fn to_tensor<U: Scalar>(&self) -> Tensor<U> {
        let [nx, ny, nz] = self.dims;
        Tensor::new(
            &[1, nz, ny, nx],
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
        .expect("grid extents are positive")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let g = Grid3::<f32>::from_fn([4, 3, 5], |x, y, z| (x * 7 + y * 3 + z) as f32).unwrap();
        assert_eq!(g.resize_trilinear([4, 3, 5]).unwrap(), g);
        let c = Grid3::<f32>::filled([3, 4, 5], 0.25).unwrap();
        let r = c.resize_trilinear([7, 2, 9]).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn midpoints_of_a_ramp_are_neighbor_means() {
        let g = Grid3::<f64>::from_fn([4, 1, 1], |x, _, _| (x * x) as f64).unwrap();
        let r = g.resize_trilinear([7, 1, 1]).unwrap();
        for x in 0..4 {
            assert_eq!(r.get(2 * x, 0, 0), g.get(x, 0, 0));
        }
        for x in 0..3 {
            let mid = (g.get(x, 0, 0) + g.get(x + 1, 0, 0)) / 2.0;
            assert!((r.get(2 * x + 1, 0, 0) - mid).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_and_slab_bounds() {
        let g = Grid3::<f32>::from_fn([4, 4, 4], |x, y, z| (x + 4 * y + 16 * z) as f32).unwrap();
        let c = g.crop([1, 2, 3], [2, 2, 1]).unwrap();
        assert_eq!(c.data(), &[57.0, 58.0, 61.0, 62.0]);
        assert!(g.crop([3, 0, 0], [2, 1, 1]).is_err());
        assert_eq!(g.slab(1, 3).unwrap().dims(), [4, 4, 2]);
        assert!(g.slab(2, 2).is_err());
    }
}
