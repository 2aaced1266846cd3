//! Dense row-major matrices and the handful of decompositions the rest of
//! the crate needs: products, the spectral and `∞` operator norms, singular
//! values through a symmetric eigensolver, and orthonormal-row sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Seed of the start vector used by [`spectral_norm`].
pub const POWER_ITERATION_SEED: u64 = 0x005E_ED0F_5EC7;
/// Default iteration cap for [`spectral_norm`].
pub const POWER_ITERATION_MAX_ITER: usize = 1000;
/// Largest Gram matrix side accepted by [`singular_values`].
pub const MAX_GRAM_DIM: usize = 4096;

const ORTHO_INIT_RETRIES: usize = 8;

/// Row vectors are plain `Vec`s.
pub type Vector<T> = Vec<T>;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Convenience constructor from `f64` literals.
    pub fn from_f64_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let converted: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&x| T::of(x)).collect())
            .collect();
        Self::from_rows(&converted)
    }

    pub fn diag(values: &[T]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Matrix with i.i.d. standard normal entries.
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the listed rows into a new matrix, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (dst, &src) in idx.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "axpy",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-T::one(), other)?;
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        matmul(self, &other.transpose())
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        matmul(&self.transpose(), other)
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::Dimension {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.rows {
            return Err(Error::Dimension {
                op: "t_matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        let mut out = vec![T::zero(); self.cols];
        for (r, &s) in self.row_iter().zip(v) {
            for (o, &x) in out.iter_mut().zip(r) {
                *o += s * x;
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub fn norm_inf<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Matrix product. The `i-k-j` loop order keeps the inner loop a contiguous
/// `axpy` and fixes the floating-point summation order.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    if b.cols == 0 {
        return Ok(c);
    }
    for (a_row, c_row) in a.data.chunks_exact(a.cols.max(1)).zip(c.data.chunks_exact_mut(b.cols)) {
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aik * bkj;
            }
        }
    }
    Ok(c)
}

/// Largest singular value by power iteration on `WᵀW`.
///
/// Starts from a fixed seeded unit vector and stops once the relative change
/// of the estimate drops below `tol`.
pub fn spectral_norm<T: Real>(w: &Matrix<T>, tol: f64, max_iter: usize) -> Result<T> {
    if w.is_empty() {
        return Err(Error::Empty("spectral_norm"));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<T> = (0..w.cols)
        .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let n = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n);

    let tol = T::of(tol);
    let mut estimate = T::zero();
    for _ in 0..max_iter {
        let u = w.matvec(&v)?;
        let sigma = norm2(&u);
        if sigma == T::zero() {
            return Ok(T::zero());
        }
        let mut next = w.t_matvec(&u)?;
        let len = norm2(&next);
        next.iter_mut().for_each(|x| *x /= len);
        v = next;
        let converged = (sigma - estimate).abs() <= tol * sigma;
        estimate = sigma;
        if converged {
            return Ok(estimate);
        }
    }
    Err(Error::NonConvergence {
        estimate: estimate.as_f64(),
        iterations: max_iter,
    })
}

/// `∞`-induced operator norm: the largest row 1-norm.
pub fn inf_operator_norm<T: Real>(w: &Matrix<T>) -> T {
    w.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<T>())
        .fold(T::zero(), T::max)
}

/// Singular values in descending order, from the eigenvalues of the smaller
/// Gram matrix.
pub fn singular_values<T: Real>(w: &Matrix<T>) -> Result<Vec<T>> {
    if w.is_empty() {
        return Err(Error::Empty("singular_values"));
    }
    let gram = if w.rows <= w.cols {
        w.matmul_t(w)?
    } else {
        w.t_matmul(w)?
    };
    if gram.rows > MAX_GRAM_DIM {
        return Err(Error::InvalidArgument(format!(
            "Gram matrix of side {} exceeds the {MAX_GRAM_DIM} cap",
            gram.rows
        )));
    }
    let mut sv: Vec<T> = symmetric_eigenvalues(&gram)?
        .into_iter()
        .map(|l| l.max(T::zero()).sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sv)
}

/// Eigenvalues of a symmetric matrix, sorted descending.
///
/// Householder reduction to tridiagonal form followed by the implicit QL
/// iteration. Only the lower triangle is read.
pub fn symmetric_eigenvalues<T: Real>(a: &Matrix<T>) -> Result<Vec<T>> {
    let n = a.rows;
    if n != a.cols {
        return Err(Error::Dimension {
            op: "symmetric_eigenvalues",
            left: a.shape(),
            right: a.shape(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut m = a.clone();
    // Mirror the lower triangle so the reduction can read either half.
    for i in 0..n {
        for j in 0..i {
            m[(j, i)] = m[(i, j)];
        }
    }
    let (mut d, mut e) = tridiagonalize(&mut m);
    tridiagonal_ql(&mut d, &mut e)?;
    d.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(d)
}

/// Householder tridiagonalization; returns (diagonal, subdiagonal) with the
/// subdiagonal stored in `e[1..]`.
fn tridiagonalize<T: Real>(a: &mut Matrix<T>) -> (Vec<T>, Vec<T>) {
    let n = a.rows;
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = T::zero();
        if l > 0 {
            let scale: T = (0..=l).map(|k| a[(i, k)].abs()).sum();
            if scale == T::zero() {
                e[i] = a[(i, l)];
            } else {
                for k in 0..=l {
                    a[(i, k)] /= scale;
                    h += a[(i, k)] * a[(i, k)];
                }
                let f = a[(i, l)];
                let g = if f >= T::zero() { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[(i, l)] = f - g;
                let mut f = T::zero();
                for j in 0..=l {
                    let mut g = T::zero();
                    for k in 0..=j {
                        g += a[(j, k)] * a[(i, k)];
                    }
                    for k in j + 1..=l {
                        g += a[(k, j)] * a[(i, k)];
                    }
                    e[j] = g / h;
                    f += e[j] * a[(i, j)];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[(i, j)];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        let upd = f * e[k] + g * a[(i, k)];
                        a[(j, k)] -= upd;
                    }
                }
            }
        } else {
            e[i] = a[(i, l)];
        }
        d[i] = h;
    }
    for i in 0..n {
        d[i] = a[(i, i)];
    }
    (d, e)
}

/// Implicit QL with Wilkinson-style shifts on a symmetric tridiagonal matrix.
fn tridiagonal_ql<T: Real>(d: &mut [T], e: &mut [T]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    let eps = T::epsilon();
    let two = T::of(2.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= eps * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::NonConvergence {
                    estimate: d[l].as_f64(),
                    iterations: iter,
                });
            }
            let mut g = (d[l + 1] - d[l]) / (two * e[l]);
            let mut r = g.hypot(T::one());
            let signed_r = if g >= T::zero() { r.abs() } else { -r.abs() };
            g = d[m] - d[l] + e[l] / (g + signed_r);
            let (mut s, mut c, mut p) = (T::one(), T::one(), T::zero());
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == T::zero() {
                    d[i + 1] -= p;
                    e[m] = T::zero();
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + two * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = T::zero();
        }
    }
    Ok(())
}

/// Random matrix with orthonormal rows (`WWᵀ = I`); when `rows > cols` the
/// columns are orthonormal instead (`WᵀW = I`).
///
/// Gaussian sample followed by two passes of modified Gram–Schmidt. Rows that
/// collapse numerically are resampled a bounded number of times.
pub fn orthonormal_rows_init<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<Matrix<T>> {
    if rows > cols {
        return Ok(orthonormal_rows_init::<T, R>(cols, rows, rng)?.transpose());
    }
    let mut w = Matrix::<T>::zeros(rows, cols);
    let floor = T::of(1e-6);
    for i in 0..rows {
        let mut attempt = 0;
        loop {
            let mut v: Vec<T> = (0..cols)
                .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let before = norm2(&v);
            for _pass in 0..2 {
                for j in 0..i {
                    let q = w.row(j);
                    let proj = dot(&v, q);
                    for (x, &qx) in v.iter_mut().zip(q) {
                        *x -= proj * qx;
                    }
                }
            }
            let after = norm2(&v);
            if after > floor * before {
                v.iter_mut().for_each(|x| *x /= after);
                w.row_mut(i).copy_from_slice(&v);
                break;
            }
            attempt += 1;
            if attempt >= ORTHO_INIT_RETRIES {
                return Err(Error::RankDeficient {
                    rows,
                    cols,
                    attempts: attempt,
                });
            }
        }
    }
    Ok(w)
}
