//! The numeric element type shared by every math module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Strided read-only view of a row-major matrix, used to express transposes
/// to [`Scalar::gemm`] without copying.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows: cols, cols: rows, row_stride: 1, col_stride: cols }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.row_stride + c * self.col_stride]
    }

    fn check_bounds(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c`, with `c` a contiguous row-major
    /// `a.rows x b.cols` buffer.
    fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]) {
        naive_gemm(alpha, a, b, beta, c)
    }

    /// Converts an `f64` literal. Panics only for types that cannot represent
    /// ordinary finite constants.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("count fits scalar")
    }
}

fn check_gemm<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c: &[T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output buffer");
    a.check_bounds();
    b.check_bounds();
}

/// Reference triple loop; also the fallback for scalar types without a
/// tuned kernel.
pub fn naive_gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    check_gemm(&a, &b, c);
    let n = b.cols;
    for i in 0..a.rows {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..a.cols {
                acc += *a.at(i, p) * *b.at(p, j);
            }
            let out = &mut c[i * n + j];
            *out = if beta == T::zero() { alpha * acc } else { alpha * acc + beta * *out };
        }
    }
}

macro_rules! tuned_gemm {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]) {
                check_gemm(&a, &b, c);
                let (m, k, n) = (a.rows, a.cols, b.cols);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.iter_mut().for_each(|v| *v = if beta == 0.0 { 0.0 } else { *v * beta });
                    return;
                }
                // SAFETY: bounds of both views and of `c` were checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr(),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr(),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

tuned_gemm!(f64, matrixmultiply::dgemm);
tuned_gemm!(f32, matrixmultiply::sgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_view_reads_columns() {
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = MatRef::transposed(&data, 2, 3);
        assert_eq!((t.rows, t.cols), (3, 2));
        assert_eq!(*t.at(2, 1), 6.0);
        assert_eq!(*t.at(0, 1), 4.0);
    }

    #[test]
    fn tuned_and_naive_agree_with_transposes() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut fast = vec![1.0; 9];
        let mut slow = vec![1.0; 9];
        let av = MatRef::row_major(&a, 3, 4);
        let bv = MatRef::transposed(&b, 3, 4);
        f64::gemm(2.0, av, bv, 0.5, &mut fast);
        naive_gemm(2.0, av, bv, 0.5, &mut slow);
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_inner_dimension_scales_output() {
        let mut c = vec![2.0f32; 4];
        f32::gemm(1.0, MatRef::row_major(&[], 2, 0), MatRef::row_major(&[], 0, 2), 0.5, &mut c);
        assert_eq!(c, vec![1.0; 4]);
    }
}
