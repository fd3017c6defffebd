//! Column-major dense matrices and the local block kernels each worker runs.
//!
//! The kernels follow the LAPACK/BLAS conventions they stand in for
//! (`potrf`, `trsm`, `syrk`, `gemm`) but operate on contiguous column-major
//! slices with an explicit leading dimension. All heavy lifting goes through
//! `matrixmultiply::dgemm`, which is single-threaded and deterministic, so a
//! block computed twice from the same inputs is bit-identical.

use serde::{Deserialize, Serialize};

/// Panel width of the blocked kernels.
const NB: usize = 64;

/// Dense column-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds from a column-major buffer. Panics if the length is wrong.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match {rows}x{cols}");
        Matrix { rows, cols, data }
    }

    /// Builds from row slices, convenient in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        Self::from_fn(r, c, |i, j| rows[i][j])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Self::from_col_major(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            false,
            false,
            self.rows,
            other.cols,
            self.cols,
            1.0,
            &self.data,
            self.rows.max(1),
            &other.data,
            other.rows.max(1),
            0.0,
            &mut out.data,
            self.rows.max(1),
        );
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Copy of the lower triangle (diagonal included), zeros above.
    pub fn lower(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if i >= j { self[(i, j)] } else { 0.0 })
    }

    /// Symmetric matrix from the lower triangle.
    pub fn symmetrize_lower(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if i >= j { self[(i, j)] } else { self[(j, i)] })
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i + j * self.rows]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i + j * self.rows]
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on column-major storage, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (lda as isize, 1) } else { (1, lda as isize) };
    let (rsb, csb) = if trans_b { (ldb as isize, 1) } else { (1, ldb as isize) };
    if k > 0 {
        let a_need = if trans_a { (m - 1) * lda + k } else { (k - 1) * lda + m };
        let b_need = if trans_b { (k - 1) * ldb + n } else { (n - 1) * ldb + k };
        assert!(a.len() >= a_need && b.len() >= b_need, "gemm operand too short");
    }
    assert!(c.len() >= (n - 1) * ldc + m, "gemm output too short");
    // SAFETY: the assertions above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            1,
            ldc as isize,
        );
    }
}

/// In-place lower Cholesky of the leading `n x n` block of `a`. On failure
/// returns the 0-based column whose pivot was not positive. The strict upper
/// triangle is left untouched.
pub fn potrf_lower(a: &mut [f64], n: usize, lda: usize) -> Result<(), usize> {
    let mut k = 0;
    while k < n {
        let kb = NB.min(n - k);
        potf2_lower(&mut a[k + k * lda..], kb, lda).map_err(|j| j + k)?;
        let rest = n - k - kb;
        if rest > 0 {
            let (head, tail) = a.split_at_mut((k + kb) * lda);
            // A21 <- A21 * L11^{-T}
            let mut l11 = vec![0.0; kb * kb];
            for c in 0..kb {
                l11[c * kb..(c + 1) * kb].copy_from_slice(&head[k + (k + c) * lda..k + kb + (k + c) * lda]);
            }
            let a21 = &mut head[k + kb + k * lda..];
            trsm_rlt_unblocked(&l11, kb, kb, a21, rest, lda);
            // A22 <- A22 - A21 A21^T (lower part only)
            let a21 = &head[k + kb + k * lda..];
            syrk_lower_sub(a21, rest, kb, lda, &mut tail[k + kb..], lda);
        }
        k += kb;
    }
    Ok(())
}

fn potf2_lower(a: &mut [f64], n: usize, lda: usize) -> Result<(), usize> {
    for j in 0..n {
        let mut d = a[j + j * lda];
        for p in 0..j {
            let v = a[j + p * lda];
            d -= v * v;
        }
        if d.is_nan() || d <= 0.0 || d.is_infinite() {
            return Err(j);
        }
        let d = d.sqrt();
        a[j + j * lda] = d;
        for i in j + 1..n {
            let mut s = a[i + j * lda];
            for p in 0..j {
                s -= a[i + p * lda] * a[j + p * lda];
            }
            a[i + j * lda] = s / d;
        }
    }
    Ok(())
}

/// `B <- B * L^{-T}` for `B` of shape `m x n`, unblocked.
fn trsm_rlt_unblocked(l: &[f64], n: usize, ldl: usize, b: &mut [f64], m: usize, ldb: usize) {
    for j in 0..n {
        for k in 0..j {
            let ljk = l[j + k * ldl];
            if ljk != 0.0 {
                for i in 0..m {
                    b[i + j * ldb] -= b[i + k * ldb] * ljk;
                }
            }
        }
        let d = l[j + j * ldl];
        for i in 0..m {
            b[i + j * ldb] /= d;
        }
    }
}

/// Solves `X L^T = B` in place (`B` is `m x n`, `L` is `n x n` lower).
/// This is the panel update of the Cholesky: `L21 = A21 L11^{-T}`.
pub fn trsm_right_lower_trans(l: &[f64], n: usize, ldl: usize, b: &mut [f64], m: usize, ldb: usize) {
    let mut j0 = 0;
    while j0 < n {
        let jb = NB.min(n - j0);
        if j0 > 0 {
            let (solved, rest) = b.split_at_mut(j0 * ldb);
            // B[:, j0..j0+jb] -= X[:, 0..j0] * L[j0..j0+jb, 0..j0]^T
            gemm(false, true, m, jb, j0, -1.0, solved, ldb, &l[j0..], ldl, 1.0, rest, ldb);
        }
        trsm_rlt_unblocked(&l[j0 + j0 * ldl..], jb, ldl, &mut b[j0 * ldb..], m, ldb);
        j0 += jb;
    }
}

/// Solves `L X = B` in place (`B` is `n x m`).
pub fn trsm_left_lower(l: &[f64], n: usize, ldl: usize, b: &mut [f64], m: usize, ldb: usize) {
    let mut r0 = 0;
    while r0 < n {
        let rb = NB.min(n - r0);
        if r0 > 0 {
            // B[r0..r0+rb, :] -= L[r0..r0+rb, 0..r0] * X[0..r0, :]
            let x = copy_rows(b, ldb, r0, m);
            gemm(false, false, rb, m, r0, -1.0, &l[r0..], ldl, &x, r0, 1.0, &mut b[r0..], ldb);
        }
        for c in 0..m {
            let col = &mut b[c * ldb..];
            for i in r0..r0 + rb {
                let mut s = col[i];
                for p in r0..i {
                    s -= l[i + p * ldl] * col[p];
                }
                col[i] = s / l[i + i * ldl];
            }
        }
        r0 += rb;
    }
}

/// Solves `L^T X = B` in place (`B` is `n x m`).
pub fn trsm_left_lower_trans(l: &[f64], n: usize, ldl: usize, b: &mut [f64], m: usize, ldb: usize) {
    let mut r1 = n;
    while r1 > 0 {
        let rb = NB.min(r1);
        let r0 = r1 - rb;
        if r1 < n {
            // B[r0..r1, :] -= L[r1..n, r0..r1]^T * X[r1..n, :]
            let x = copy_rows(&b[r1..], ldb, n - r1, m);
            gemm(true, false, rb, m, n - r1, -1.0, &l[r1 + r0 * ldl..], ldl, &x, n - r1, 1.0, &mut b[r0..], ldb);
        }
        for c in 0..m {
            let col = &mut b[c * ldb..];
            for i in (r0..r1).rev() {
                let mut s = col[i];
                for p in i + 1..r1 {
                    s -= l[p + i * ldl] * col[p];
                }
                col[i] = s / l[i + i * ldl];
            }
        }
        r1 = r0;
    }
}

/// The first `len` rows of every column, compacted with leading dimension `len`.
fn copy_rows(b: &[f64], ldb: usize, len: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len * cols);
    for c in 0..cols {
        out.extend_from_slice(&b[c * ldb..c * ldb + len]);
    }
    out
}

/// `C <- C - A A^T` on the lower triangle of the `n x n` matrix `C`, where
/// `A` is `n x k`. Works column-panel by column-panel so only the lower part
/// is computed.
pub fn syrk_lower_sub(a: &[f64], n: usize, k: usize, lda: usize, c: &mut [f64], ldc: usize) {
    let mut j0 = 0;
    while j0 < n {
        let jb = NB.min(n - j0);
        for j in j0..j0 + jb {
            for i in j..j0 + jb {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i + p * lda] * a[j + p * lda];
                }
                c[i + j * ldc] -= s;
            }
        }
        // C[j0+jb.., j0..j0+jb] -= A[j0+jb.., :] * A[j0..j0+jb, :]^T
        if j0 + jb < n {
            gemm(false, true, n - j0 - jb, jb, k, -1.0, &a[j0 + jb..], lda, &a[j0..], lda, 1.0, &mut c[j0 + jb + j0 * ldc..], ldc);
        }
        j0 += jb;
    }
}

/// `C <- C - A B^T` with `A: m x k`, `B: n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_nt_sub(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, lda: usize, ldb: usize, c: &mut [f64], ldc: usize) {
    gemm(false, true, m, n, k, -1.0, a, lda, b, ldb, 1.0, c, ldc);
}

/// Zeros the strict upper triangle of an `n x n` block.
pub fn zero_upper(a: &mut [f64], n: usize, lda: usize) {
    for j in 1..n {
        for i in 0..j {
            a[i + j * lda] = 0.0;
        }
    }
}

/// Mirrors the lower triangle of an `n x n` block into its upper triangle.
pub fn mirror_lower(a: &mut [f64], n: usize, lda: usize) {
    for j in 1..n {
        for i in 0..j {
            a[i + j * lda] = a[j + i * lda];
        }
    }
}
