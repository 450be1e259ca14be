//! Floating point abstraction shared by the tensor engine and the models.
//!
//! Training runs in `f32`; gradient checks run the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type usable throughout the crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Type code written into binary containers (0 = f32, 1 = f64).
    const DTYPE_CODE: u16;
    /// Width in bytes of the little-endian encoding.
    const BYTES: usize;

    /// Converts a literal; panics only if `v` is unrepresentable, which cannot
    /// happen for the finite literals used in this crate.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = a * b + beta * c` on row-major buffers, where `c` is `m x n`, `a`
    /// is `m x k` (stored `k x m` when `ta`) and `b` is `k x n` (stored
    /// `n x k` when `tb`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(ta: bool, tb: bool, m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]);
}

fn gemm_strides(ta: bool, tb: bool, m: usize, k: usize, n: usize) -> [isize; 4] {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

macro_rules! impl_gemm {
    ($f:path) => {
        fn gemm(ta: bool, tb: bool, m: usize, k: usize, n: usize, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
            assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm buffer too small");
            let [rsa, csa, rsb, csb] = gemm_strides(ta, tb, m, k, n);
            // SAFETY: the asserted lengths cover every index reachable with
            // these dimensions and strides, and `c` does not alias `a` or `b`.
            unsafe {
                $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
            }
        }
    };
}

impl Scalar for f32 {
    const DTYPE_CODE: u16 = 0;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    impl_gemm!(matrixmultiply::sgemm);
}

impl Scalar for f64 {
    const DTYPE_CODE: u16 = 1;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    impl_gemm!(matrixmultiply::dgemm);
}
