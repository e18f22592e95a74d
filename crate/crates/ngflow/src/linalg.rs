//! Minimal dense symmetric linear algebra: regularized SPD solves via
//! Cholesky, symmetric eigendecomposition via cyclic Jacobi rotations, and
//! minimum-norm least squares.
//!
//! Parameter counts in this crate are a few hundred at most, so dense
//! factorizations are the right tool; there is no sparse or blocked path.

use crate::scalar::{cast, Scalar};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix not positive definite after regularization: smallest pivot {pivot:e}")]
    NotPositiveDefinite { pivot: f64 },
    #[error("Jacobi eigendecomposition did not converge after {sweeps} sweeps: off-diagonal norm {off_norm:e}")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("matrix entries must be finite")]
    NonFinite,
}

/// Dense symmetric matrix, full row-major storage, kept exactly symmetric by
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix<T> {
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> SymMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            data: vec![T::zero(); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = T::one();
        }
        m
    }

    /// Builds the matrix from `f(i, j)` evaluated on the upper triangle and
    /// mirrored, so the result is symmetric regardless of `f`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        m
    }

    /// Validates symmetry and finiteness of explicit row data.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, LinalgError> {
        let dim = rows.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(LinalgError::DimensionMismatch(format!(
                "expected square {dim}x{dim} data"
            )));
        }
        for i in 0..dim {
            for j in 0..dim {
                if !rows[i][j].is_finite() {
                    return Err(LinalgError::NonFinite);
                }
                if rows[i][j] != rows[j][i] {
                    return Err(LinalgError::DimensionMismatch(format!(
                        "entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        Ok(Self {
            dim,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.dim + j]
    }

    /// Sets entry (i, j) and its mirror (j, i).
    pub fn set_sym(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn max_diag(&self) -> T {
        (0..self.dim)
            .map(|i| self.get(i, i))
            .fold(T::neg_infinity(), T::max)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// y = (A + lambda I) x
    fn mul_regularized(&self, lambda: T, x: &[T], y: &mut [T]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += row[j] * x[j];
            }
            y[i] = acc + lambda * x[i];
        }
    }
}

fn norm2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Dot product with four independent accumulators; the hot inner kernel of
/// the Cholesky factorization.
#[inline]
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Lower-triangular Cholesky factor of `G + lambda I`.
fn cholesky<T: Scalar>(g: &SymMatrix<T>, lambda: T) -> Result<Vec<T>, LinalgError> {
    let n = g.dim;
    let mut l = vec![T::zero(); n * n];
    let mut min_pivot = T::infinity();
    for j in 0..n {
        let row_j = l[j * n..j * n + j].to_vec();
        let d = g.get(j, j) + lambda - dot4(&row_j, &row_j);
        min_pivot = min_pivot.min(d);
        if d <= T::zero() {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: min_pivot.to_f64().unwrap_or(f64::NAN),
            });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let s = g.get(i, j) - dot4(&l[i * n..i * n + j], &row_j);
            l[i * n + j] = s / djj;
        }
    }
    Ok(l)
}

fn cholesky_solve<T: Scalar>(l: &[T], n: usize, rhs: &[T], x: &mut [T]) {
    // forward: L y = rhs
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s = s - l[i * n + k] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    // backward: L^T x = y
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s = s - l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
}

/// Weighted Gram matrix `M[i][j] = sum_r w_r rows[r][i] rows[r][j]` from
/// row-major data, processing rows in fused chunks of eight so each pass over
/// the output triangle amortizes.
pub fn weighted_gram<T: Scalar>(rows: &[T], n: usize, weights: Option<&[T]>) -> SymMatrix<T> {
    const CHUNK: usize = 8;
    let r_total = rows.len() / n;
    let mut g = SymMatrix::zeros(n);
    let buf = g.data_mut();
    let mut r0 = 0;
    while r0 < r_total {
        let chunk = CHUNK.min(r_total - r0);
        let row: Vec<&[T]> = (0..chunk)
            .map(|k| &rows[(r0 + k) * n..(r0 + k + 1) * n])
            .collect();
        let w = |k: usize| weights.map_or(T::one(), |w| w[r0 + k]);
        for i in 0..n {
            let dst = &mut buf[i * n + i..(i + 1) * n];
            if chunk == CHUNK {
                let c: Vec<T> = (0..CHUNK).map(|k| w(k) * row[k][i]).collect();
                let (r0s, r1, r2, r3) = (&row[0][i..], &row[1][i..], &row[2][i..], &row[3][i..]);
                let (r4, r5, r6, r7) = (&row[4][i..], &row[5][i..], &row[6][i..], &row[7][i..]);
                for (j, d) in dst.iter_mut().enumerate() {
                    let a = c[0] * r0s[j] + c[1] * r1[j] + c[2] * r2[j] + c[3] * r3[j];
                    let b = c[4] * r4[j] + c[5] * r5[j] + c[6] * r6[j] + c[7] * r7[j];
                    *d += a + b;
                }
            } else {
                for k in 0..chunk {
                    let c = w(k) * row[k][i];
                    for (d, &r) in dst.iter_mut().zip(&row[k][i..]) {
                        *d += c * r;
                    }
                }
            }
        }
        r0 += chunk;
    }
    for i in 0..n {
        for j in i + 1..n {
            buf[j * n + i] = buf[i * n + j];
        }
    }
    g
}

/// Solves `(lambda I + B^T B) x = rhs` through the dual system when `B` has
/// fewer rows than columns: `y = (lambda I + B B^T)^{-1} B rhs` and
/// `x = (rhs - B^T y) / lambda`. Algebraically exact; iterative refinement
/// against the primal operator recovers the accuracy lost to the `1/lambda`
/// amplification. `b_rows` is row-major `s x d`.
pub fn solve_spd_regularized_dual<T: Scalar>(
    b_rows: &[T],
    d: usize,
    lambda: T,
    rhs: &[T],
) -> Result<Vec<T>, LinalgError> {
    assert!(lambda > T::zero(), "dual solve needs positive regularization");
    let s = b_rows.len() / d;
    if rhs.len() != d {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs length {} vs {} columns",
            rhs.len(),
            d
        )));
    }
    // transpose so the Gram accumulation streams contiguously
    let mut bt = vec![T::zero(); d * s];
    for r in 0..s {
        for c in 0..d {
            bt[c * s + r] = b_rows[r * d + c];
        }
    }
    let m = weighted_gram(&bt, s, None); // B B^T
    let l = cholesky(&m, lambda)?;

    let mul_b = |x: &[T]| -> Vec<T> {
        (0..s)
            .map(|r| {
                let row = &b_rows[r * d..(r + 1) * d];
                row.iter().zip(x).map(|(&a, &b)| a * b).sum()
            })
            .collect()
    };
    let mul_bt = |y: &[T]| -> Vec<T> {
        let mut out = vec![T::zero(); d];
        for r in 0..s {
            let row = &b_rows[r * d..(r + 1) * d];
            let yr = y[r];
            for (o, &a) in out.iter_mut().zip(row) {
                *o += a * yr;
            }
        }
        out
    };
    let dual_apply = |b: &[T]| -> Vec<T> {
        let v = mul_b(b);
        let mut y = vec![T::zero(); s];
        cholesky_solve(&l, s, &v, &mut y);
        let bty = mul_bt(&y);
        b.iter()
            .zip(&bty)
            .map(|(&bi, &ci)| (bi - ci) / lambda)
            .collect()
    };

    let mut x = dual_apply(rhs);
    let rhs_norm = norm2(rhs);
    let target = cast::<T>(1e-13) * rhs_norm;
    for _ in 0..6 {
        // primal residual: rhs - (B^T B x + lambda x)
        let bx = mul_b(&x);
        let btbx = mul_bt(&bx);
        let resid: Vec<T> = (0..d)
            .map(|i| rhs[i] - btbx[i] - lambda * x[i])
            .collect();
        if norm2(&resid) <= target {
            break;
        }
        let corr = dual_apply(&resid);
        for i in 0..d {
            x[i] += corr[i];
        }
    }
    Ok(x)
}

/// Solves `(G + lambda I) x = rhs` for symmetric positive semidefinite `G`.
///
/// A few steps of iterative refinement follow the Cholesky solve so the
/// residual stays near machine precision even when `G + lambda I` is poorly
/// conditioned. Deterministic for identical inputs.
pub fn solve_spd_regularized<T: Scalar>(
    g: &SymMatrix<T>,
    lambda: T,
    rhs: &[T],
) -> Result<Vec<T>, LinalgError> {
    let n = g.dim;
    if rhs.len() != n {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs length {} vs matrix dimension {n}",
            rhs.len()
        )));
    }
    assert!(lambda >= T::zero(), "lambda must be nonnegative");
    let l = cholesky(g, lambda)?;
    let mut x = vec![T::zero(); n];
    cholesky_solve(&l, n, rhs, &mut x);

    // Iterative refinement.
    let rhs_norm = norm2(rhs);
    let target = cast::<T>(1e-13) * rhs_norm;
    let mut work = vec![T::zero(); n];
    let mut corr = vec![T::zero(); n];
    for _ in 0..4 {
        g.mul_regularized(lambda, &x, &mut work);
        for i in 0..n {
            work[i] = rhs[i] - work[i];
        }
        if norm2(&work) <= target {
            break;
        }
        cholesky_solve(&l, n, &work, &mut corr);
        for i in 0..n {
            x[i] += corr[i];
        }
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix: `G = V diag(eigenvalues) V^T`.
///
/// Eigenvalues are sorted in descending order; column `i` of `eigenvectors`
/// pairs with `eigenvalues[i]`. Negative eigenvalues are reported as-is.
#[derive(Clone, Debug)]
pub struct EigenDecomp<T> {
    pub eigenvalues: Vec<T>,
    /// Row-major `dim x dim`; column `i` is the eigenvector for eigenvalue `i`.
    pub eigenvectors: Vec<T>,
    pub dim: usize,
}

impl<T: Scalar> EigenDecomp<T> {
    pub fn eigenvector(&self, i: usize) -> Vec<T> {
        (0..self.dim)
            .map(|r| self.eigenvectors[r * self.dim + i])
            .collect()
    }
}

/// Cyclic Jacobi eigendecomposition. Robust and deterministic at the matrix
/// sizes used here (a few hundred at most).
pub fn sym_eig<T: Scalar>(g: &SymMatrix<T>) -> Result<EigenDecomp<T>, LinalgError> {
    const MAX_SWEEPS: usize = 100;
    let n = g.dim;
    if g.data.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let mut a = g.data.clone();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }

    let off_norm = |a: &[T]| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        (s + s).sqrt()
    };
    let scale = g.max_abs().max(T::min_positive_value());
    let tol = T::epsilon() * scale * cast::<T>(n as f64);

    let mut sweeps = 0;
    while off_norm(&a) > tol {
        if sweeps >= MAX_SWEEPS {
            return Err(LinalgError::NoConvergence {
                sweeps,
                off_norm: off_norm(&a).to_f64().unwrap_or(f64::NAN),
            });
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= T::epsilon() * scale {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (cast::<T>(2.0) * apq);
                let t = {
                    let s = if theta >= T::zero() {
                        T::one()
                    } else {
                        -T::one()
                    };
                    s / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;

                // rows/columns p and q of A
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                // accumulate rotations
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    // Sort descending, permuting eigenvector columns alike.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .expect("eigenvalues are finite")
    });
    let eigenvalues: Vec<T> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigenvectors = vec![T::zero(); n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors[r * n + new_col] = v[r * n + old_col];
        }
    }
    Ok(EigenDecomp {
        eigenvalues,
        eigenvectors,
        dim: n,
    })
}

/// Dense rectangular matrix, row-major. Only used by the least-squares solver
/// and alignment bookkeeping.
#[derive(Clone, Debug)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        if r == 0 || rows.iter().any(|row| row.len() != rows[0].len()) {
            return Err(LinalgError::DimensionMismatch(
                "ragged or empty row data".into(),
            ));
        }
        Ok(Self {
            rows: r,
            cols: rows[0].len(),
            data: rows.iter().flat_map(|row| row.iter().copied()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    fn mul_vec(&self, x: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| {
                let row = &self.data[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(x).map(|(&a, &b)| a * b).sum()
            })
            .collect()
    }

    fn t_mul_vec(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..self.cols {
                out[j] += row[j] * y[i];
            }
        }
        out
    }
}

/// Minimum-norm least-squares solution of `A x = b`.
///
/// Normal equations with an eigenvalue-based pseudo-inverse, plus one
/// refinement pass; rank-deficient columns are dropped at a relative
/// eigenvalue tolerance.
pub fn lstsq<T: Scalar>(a: &DenseMatrix<T>, b: &[T]) -> Result<Vec<T>, LinalgError> {
    if b.len() != a.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs length {} vs {} matrix rows",
            b.len(),
            a.rows
        )));
    }
    let n = a.cols;
    let ata = SymMatrix::from_fn(n, |i, j| {
        (0..a.rows).map(|r| a.get(r, i) * a.get(r, j)).sum::<T>()
    });
    let eig = sym_eig(&ata)?;
    let max_eig = eig.eigenvalues[0].max(T::zero());
    let tol = max_eig * cast::<T>(1e-12).max(T::epsilon() * cast::<T>(16.0 * n as f64));

    let pinv_apply = |rhs: &[T]| -> Vec<T> {
        let mut out = vec![T::zero(); n];
        for (idx, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev <= tol {
                continue;
            }
            let col = eig.eigenvector(idx);
            let proj: T = col.iter().zip(rhs).map(|(&c, &r)| c * r).sum();
            let coef = proj / ev;
            for j in 0..n {
                out[j] += coef * col[j];
            }
        }
        out
    };

    let atb = a.t_mul_vec(b);
    let mut x = pinv_apply(&atb);
    // one refinement pass keeps the residual orthogonal to the column space
    let ax = a.mul_vec(&x);
    let resid: Vec<T> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
    let at_res = a.t_mul_vec(&resid);
    let corr = pinv_apply(&at_res);
    for j in 0..n {
        x[j] += corr[j];
    }
    Ok(x)
}
