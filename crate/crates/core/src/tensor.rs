//! Dense row-major matrices and the scalar abstraction used by the models.
//!
//! Model math runs in `f32` for training and `f64` for gradient checks, so
//! every hot kernel is generic over [`Scalar`]. Matrix products dispatch to
//! the packed gemm kernels; transposition is handled through strides.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand_chacha::ChaCha8Rng;

/// Floating-point scalar for model parameters and activations.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + rustfft::FftNum
    + Default
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    /// `c = alpha * a(m,k) * b(k,n) + beta * c`, arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided extents implied by `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    unsafe fn gemm(
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
        unsafe {
            matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
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
        unsafe {
            matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
        }
    }
}

/// Borrowed named view of one parameter tensor.
pub struct TensorEntry<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

/// Mutable twin of [`TensorEntry`].
pub struct TensorEntryMut<'a, F> {
    pub name: String,
    pub data: &'a mut [F],
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
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
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn cast<T: Scalar>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Side of an operand in [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `c = alpha * op(a) * op(b) + beta * c` on full matrices.
pub fn gemm<F: Scalar>(
    c: &mut Mat<F>,
    a: &Mat<F>,
    ta: Trans,
    b: &Mat<F>,
    tb: Trans,
    alpha: F,
    beta: F,
) {
    let (m, k_a) = match ta {
        Trans::No => (a.rows, a.cols),
        Trans::Yes => (a.cols, a.rows),
    };
    let (k_b, n) = match tb {
        Trans::No => (b.rows, b.cols),
        Trans::Yes => (b.cols, b.rows),
    };
    assert_eq!(k_a, k_b, "inner dims disagree");
    assert_eq!((c.rows, c.cols), (m, n), "output shape disagrees");
    let (rsa, csa) = match ta {
        Trans::No => (a.cols as isize, 1),
        Trans::Yes => (1, a.cols as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (b.cols as isize, 1),
        Trans::Yes => (1, b.cols as isize),
    };
    unsafe {
        F::gemm(
            m,
            k_a,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Column-block view descriptor: a contiguous span of columns in a wider
/// row-major matrix, as produced by stacking attention heads.
#[derive(Debug, Clone, Copy)]
pub struct ColBlock {
    pub col0: usize,
    pub cols: usize,
}

/// `c_block = alpha * op(a_block) * op(b_block) + beta * c_block` where each
/// operand is a column block of its backing matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm_blocks<F: Scalar>(
    c: &mut Mat<F>,
    cb: ColBlock,
    a: &Mat<F>,
    ab: ColBlock,
    ta: Trans,
    b: &Mat<F>,
    bb: ColBlock,
    tb: Trans,
    alpha: F,
    beta: F,
) {
    let dims = |m: &Mat<F>, blk: ColBlock, t: Trans| match t {
        Trans::No => (m.rows, blk.cols),
        Trans::Yes => (blk.cols, m.rows),
    };
    let (m, k_a) = dims(a, ab, ta);
    let (k_b, n) = dims(b, bb, tb);
    assert_eq!(k_a, k_b);
    assert_eq!((c.rows, cb.cols), (m, n));
    let strides = |mat: &Mat<F>, t: Trans| match t {
        Trans::No => (mat.cols as isize, 1),
        Trans::Yes => (1, mat.cols as isize),
    };
    let (rsa, csa) = strides(a, ta);
    let (rsb, csb) = strides(b, tb);
    unsafe {
        F::gemm(
            m,
            k_a,
            n,
            alpha,
            a.data.as_ptr().add(ab.col0),
            rsa,
            csa,
            b.data.as_ptr().add(bb.col0),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr().add(cb.col0),
            c.cols as isize,
            1,
        );
    }
}

/// Standard normal draw via Box-Muller; deterministic per rng state.
pub fn randn<F: Scalar>(rng: &mut ChaCha8Rng) -> F {
    use rand::Rng;
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    F::from_f64_lossy((-2.0 * u1.ln()).sqrt() * u2.cos())
}

/// Matrix with fan-in scaled normal entries: std `1/sqrt(fan_in)`.
pub fn randn_mat<F: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
) -> Mat<F> {
    let std = F::from_f64_lossy(1.0 / (fan_in as f64).sqrt());
    let data = (0..rows * cols).map(|_| randn::<F>(rng) * std).collect();
    Mat { rows, cols, data }
}

/// Vector with entries scaled by `std`.
pub fn randn_vec<F: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<F> {
    let s = F::from_f64_lossy(std);
    (0..n).map(|_| randn::<F>(rng) * s).collect()
}

/// Row-wise softmax in place.
pub fn softmax_rows<F: Scalar>(m: &mut Mat<F>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Backward of row-wise softmax: given outputs `y` and upstream `dy`,
/// produces `dx = y .* (dy - rowsum(dy .* y))` in place of `dy`.
pub fn softmax_rows_backward<F: Scalar>(y: &Mat<F>, dy: &mut Mat<F>) {
    assert_eq!((y.rows, y.cols), (dy.rows, dy.cols));
    for r in 0..y.rows {
        let yr = y.row(r);
        let dr = dy.row_mut(r);
        let dot: F = yr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &a) in dr.iter_mut().zip(yr) {
            *d = a * (*d - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive_matmul(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for k in 0..a.cols {
                for j in 0..b.cols {
                    c.data[i * b.cols + j] += a.at(i, k) * b.at(k, j);
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn_mat::<f64>(&mut rng, 5, 7, 7);
        let b = randn_mat::<f64>(&mut rng, 7, 4, 4);
        let want = naive_matmul(&a, &b);
        let mut got = Mat::zeros(5, 4);
        gemm(&mut got, &a, Trans::No, &b, Trans::No, 1.0, 0.0);
        for (x, y) in got.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn_mat::<f64>(&mut rng, 7, 5, 5); // use a^T: 5x7
        let b = randn_mat::<f64>(&mut rng, 4, 7, 7); // use b^T: 7x4
        let at = {
            let mut t = Mat::zeros(5, 7);
            for i in 0..7 {
                for j in 0..5 {
                    t.data[j * 7 + i] = a.at(i, j);
                }
            }
            t
        };
        let bt = {
            let mut t = Mat::zeros(7, 4);
            for i in 0..4 {
                for j in 0..7 {
                    t.data[j * 4 + i] = b.at(i, j);
                }
            }
            t
        };
        let want = naive_matmul(&at, &bt);
        let mut got = Mat::zeros(5, 4);
        gemm(&mut got, &a, Trans::Yes, &b, Trans::Yes, 1.0, 0.0);
        for (x, y) in got.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gemm_addresses_column_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn_mat::<f64>(&mut rng, 3, 8, 8);
        let b = randn_mat::<f64>(&mut rng, 3, 8, 8);
        // Multiply columns 2..6 of `a` against columns 4..8 of `b` (as b^T).
        let mut got = Mat::zeros(4, 6);
        gemm_blocks(
            &mut got,
            ColBlock { col0: 1, cols: 4 },
            &a,
            ColBlock { col0: 2, cols: 4 },
            Trans::Yes,
            &b,
            ColBlock { col0: 4, cols: 4 },
            Trans::No,
            1.0,
            0.0,
        );
        for i in 0..4 {
            for j in 0..4 {
                let mut want = 0.0;
                for r in 0..3 {
                    want += a.at(r, 2 + i) * b.at(r, 4 + j);
                }
                assert!((got.at(i, 1 + j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = randn_mat::<f64>(&mut rng, 3, 6, 1);
        let mut y = logits.clone();
        softmax_rows(&mut y);
        for r in 0..y.rows {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // Finite-difference check of the softmax Jacobian-vector product.
        let up = randn_mat::<f64>(&mut rng, 3, 6, 1);
        let mut analytic = up.clone();
        softmax_rows_backward(&y, &mut analytic);
        let h = 1e-6;
        for idx in 0..logits.data.len() {
            let mut plus = logits.clone();
            plus.data[idx] += h;
            softmax_rows(&mut plus);
            let mut minus = logits.clone();
            minus.data[idx] -= h;
            softmax_rows(&mut minus);
            let fd: f64 = plus
                .data
                .iter()
                .zip(&minus.data)
                .zip(&up.data)
                .map(|((p, m), u)| (p - m) / (2.0 * h) * u)
                .sum();
            assert!((fd - analytic.data[idx]).abs() < 1e-6, "index {idx}");
        }
    }
}
