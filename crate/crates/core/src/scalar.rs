//! Scalar abstraction: all tensor math is generic over `f32`/`f64`.
//!
//! Training runs in `f32`; the finite-difference gradient checks run the
//! identical code paths in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable by the tensor and autodiff machinery.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Tag stored in checkpoints so a file written as one precision cannot
    /// silently load as another.
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).unwrap()
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }

    fn from_usize(v: usize) -> Self {
        <Self as num_traits::FromPrimitive>::from_usize(v).unwrap()
    }

    /// `c = alpha * a(m×k) · b(k×n) + beta * c` with explicit row/column
    /// strides for `a` and `b`; `c` is row-major contiguous.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize, k: usize, n: usize, alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self, c: &mut [Self],
    );

    /// Raw little-endian encoding for checkpoints.
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    const BYTE_WIDTH: usize;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTE_WIDTH: usize = 4;

    fn gemm(
        m: usize, k: usize, n: usize, alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self, c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTE_WIDTH: usize = 8;

    fn gemm(
        m: usize, k: usize, n: usize, alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self, c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        if m == 0 || k == 0 || n == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
