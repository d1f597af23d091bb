use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type every model in this crate is generic over.
///
/// Implemented for `f32` and `f64`. Gradient checks run at `f64`; inference
/// may use either.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless for both implementors.
    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("float widens to f64")
    }

    /// Rounds to nearest for `f32`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts")
    }

    /// `c = a · b` for strided `m × k` and `k × n` operands; `c` is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_strides: (isize, isize), b: &[Self], b_strides: (isize, isize), c: &mut [Self], c_row_stride: isize);
}

fn check_gemm(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize, ldc: isize) {
    // bounds the raw-pointer kernels below rely on
    assert!(a >= m * k && b >= k * n, "gemm operands too short");
    assert!(m == 0 || n == 0 || c >= (m - 1) * ldc as usize + n, "gemm output too short");
}

impl Scalar for f32 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], (rsa, csa): (isize, isize), b: &[f32], (rsb, csb): (isize, isize), c: &mut [f32], ldc: isize) {
        check_gemm(m, k, n, a.len(), b.len(), c.len(), ldc);
        // SAFETY: strides describe dense views inside the checked slices.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), ldc, 1);
        }
    }
}

impl Scalar for f64 {
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), c: &mut [f64], ldc: isize) {
        check_gemm(m, k, n, a.len(), b.len(), c.len(), ldc);
        // SAFETY: as above.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), ldc, 1);
        }
    }
}
