//! Dense row-major matrices and the GEMM entry points the models use.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of model parameters and activations.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a · b + beta * c` over strided views.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie
    /// inside the corresponding slice; callers go through [`gemm`], which
    /// checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> View<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Columns `[start, start + width)`.
    pub fn cols(self, start: usize, width: usize) -> Self {
        Self {
            data: &self.data[start * self.cs..],
            cols: width,
            ..self
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

pub struct ViewMut<'a, F> {
    pub data: &'a mut [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> ViewMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn cols(self, start: usize, width: usize) -> Self {
        let cs = self.cs;
        Self {
            data: &mut self.data[start * cs..],
            cols: width,
            rows: self.rows,
            rs: self.rs,
            cs,
        }
    }
}

/// `c = alpha * a · b + beta * c`.
pub fn gemm<F: Scalar>(alpha: F, a: View<F>, b: View<F>, beta: F, c: ViewMut<F>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    assert!(a.span() <= a.data.len() && b.span() <= b.data.len());
    let c_span = if c.rows == 0 || c.cols == 0 {
        0
    } else {
        (c.rows - 1) * c.rs + (c.cols - 1) * c.cs + 1
    };
    assert!(c_span <= c.data.len());
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // matrixmultiply handles k = 0, but beta scaling must still apply
        for r in 0..c.rows {
            for col in 0..c.cols {
                let x = &mut c.data[r * c.rs + col * c.cs];
                *x = if beta == F::zero() { F::zero() } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: spans checked above.
    unsafe {
        F::raw_gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Default)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Debug> Debug for Mat<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat[{}x{}]", self.rows, self.cols)
    }
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec size");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> View<'_, F> {
        View::new(&self.data, self.rows, self.cols)
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, F> {
        ViewMut::new(&mut self.data, self.rows, self.cols)
    }

    /// Rows selected by index, in order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Appends the rows of `other`.
    pub fn push_rows(&mut self, other: &Self) {
        assert!(self.rows == 0 || self.cols == other.cols);
        self.cols = other.cols;
        self.rows += other.rows;
        self.data.extend_from_slice(&other.data);
    }
}

/// `a · b`.
pub fn matmul<F: Scalar>(a: View<F>, b: View<F>) -> Mat<F> {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(F::one(), a, b, F::zero(), out.view_mut());
    out
}

/// `out += a · b`.
pub fn matmul_acc<F: Scalar>(a: View<F>, b: View<F>, out: &mut [F]) {
    let rows = a.rows;
    let cols = b.cols;
    gemm(F::one(), a, b, F::one(), ViewMut::new(out, rows, cols));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_transposes() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let c = matmul(View::new(&a, 3, 4), View::new(&b, 4, 5));
        let expect = naive(&a, &b, 3, 4, 5);
        for (x, y) in c.data.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ·a via strides
        let ata = matmul(View::new(&a, 3, 4).t(), View::new(&a, 3, 4));
        for i in 0..4 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|r| a[r * 4 + i] * a[r * 4 + j]).sum();
                assert!((ata.data[i * 4 + j] - e).abs() < 1e-12);
            }
        }
        // column sub-view
        let sub = matmul(View::new(&a, 3, 4).cols(1, 2), View::new(&b, 4, 5).t().cols(0, 2).t());
        assert_eq!((sub.rows, sub.cols), (3, 5));
    }

    #[test]
    fn empty_inner_dimension_zeroes_output() {
        let a: Vec<f32> = vec![];
        let mut out = vec![5.0f32; 4];
        gemm(1.0, View::new(&a, 2, 0), View::new(&a, 0, 2), 0.0, ViewMut::new(&mut out, 2, 2));
        assert_eq!(out, vec![0.0; 4]);
    }
}
