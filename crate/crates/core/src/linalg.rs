//! Dense row-major linear algebra in `f64`.
//!
//! Everything here is single-threaded and sequential, so a fixed input always
//! produces bit-identical output.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {got} does not match {rows}x{cols}")]
    InvalidData {
        rows: usize,
        cols: usize,
        got: usize,
    },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is empty")]
    Empty,
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("zero diagonal entry at {index} in triangular solve")]
    SingularTriangular { index: usize },
    #[error("normal equations are singular (ridge {ridge:e})")]
    SingularNormalEquations { ridge: f64 },
    #[error(
        "SVD did not converge after {iterations} iterations \
         (shape {rows}x{cols}, largest residual off-diagonal {residual:e}, spectral range {sigma_max:e}..{sigma_min:e})"
    )]
    ConvergenceFailure {
        iterations: usize,
        rows: usize,
        cols: usize,
        residual: f64,
        sigma_max: f64,
        sigma_min: f64,
    },
}

pub type Result<T, E = LinalgError> = std::result::Result<T, E>;

/// Dense matrix, `data[i * cols + j]` holds entry `(i, j)`.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>11.4e} ", self[(i, j)])?;
            }
            if self.cols > 8 {
                write!(f, "...")?;
            }
            writeln!(f)?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Mat {
    /// Builds a matrix from row-major data, rejecting NaN and infinities.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::InvalidData {
                rows,
                cols,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Panics on ragged rows; meant for literals and tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
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

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// `self * other`. Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols,
            other.rows,
            "matmul: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * otherᵀ` without forming the transpose.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(
            self.cols,
            other.cols,
            "matmul_t: {:?} x {:?}ᵀ",
            self.shape(),
            other.shape()
        );
        Mat::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// `self * x` for a vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(
            self.cols,
            x.len(),
            "matvec: {:?} x {}",
            self.shape(),
            x.len()
        );
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn checked_matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(self.matmul(other))
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Multiplies column `j` by `scales[j]`, i.e. `self * diag(scales)`.
    pub fn scale_cols(&self, scales: &[f64]) -> Mat {
        assert_eq!(self.cols, scales.len());
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, s) in out.row_mut(i).iter_mut().zip(scales) {
                *v *= s;
            }
        }
        out
    }

    /// `diag(scales) * self`.
    pub fn scale_rows(&self, scales: &[f64]) -> Mat {
        assert_eq!(self.rows, scales.len());
        let mut out = self.clone();
        for (i, s) in scales.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= s;
            }
        }
        out
    }

    /// Leading `n` columns.
    pub fn take_cols(&self, n: usize) -> Mat {
        assert!(n <= self.cols);
        Mat::from_fn(self.rows, n, |i, j| self[(i, j)])
    }

    /// Columns `from..self.cols()`.
    pub fn drop_cols(&self, from: usize) -> Mat {
        assert!(from <= self.cols);
        Mat::from_fn(self.rows, self.cols - from, |i, j| self[(i, from + j)])
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest `|a_ij - a_ji|`; `f64::INFINITY` for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Byte image of the entries, used for determinism checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frobenius norm `sqrt(Σ a_ij²)`.
pub fn frob_norm(a: &Mat) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Lower Cholesky factor `L` with `L·Lᵀ = c`.
pub fn cholesky_lower(c: &Mat) -> Result<Mat> {
    if !c.is_square() {
        return Err(LinalgError::NotSquare {
            rows: c.rows,
            cols: c.cols,
        });
    }
    if c.rows == 0 {
        return Err(LinalgError::Empty);
    }
    let asym = c.asymmetry();
    if asym > 1e-12 * c.max_abs().max(f64::MIN_POSITIVE) {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }

    let n = c.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut diag = c[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = c[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `l·Y = b` by forward substitution; only the lower triangle of `l`
/// is read.
pub fn solve_lower_triangular(l: &Mat, b: &Mat) -> Result<Mat> {
    if !l.is_square() {
        return Err(LinalgError::NotSquare {
            rows: l.rows,
            cols: l.cols,
        });
    }
    if b.rows != l.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_lower_triangular",
            lhs: l.shape(),
            rhs: b.shape(),
        });
    }
    let n = l.rows;
    if let Some(index) = (0..n).find(|&i| l[(i, i)] == 0.0) {
        return Err(LinalgError::SingularTriangular { index });
    }
    let mut y = b.clone();
    let m = b.cols;
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            if lik == 0.0 {
                continue;
            }
            for j in 0..m {
                let v = y.data[k * m + j];
                y.data[i * m + j] -= lik * v;
            }
        }
        let inv = 1.0 / l[(i, i)];
        for v in y.row_mut(i) {
            *v *= inv;
        }
    }
    Ok(y)
}

/// Solves `lᵀ·Y = b` (back substitution with the transpose of a lower factor).
pub fn solve_lower_transpose(l: &Mat, b: &Mat) -> Result<Mat> {
    if !l.is_square() {
        return Err(LinalgError::NotSquare {
            rows: l.rows,
            cols: l.cols,
        });
    }
    if b.rows != l.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "solve_lower_transpose",
            lhs: l.shape(),
            rhs: b.shape(),
        });
    }
    let n = l.rows;
    if let Some(index) = (0..n).find(|&i| l[(i, i)] == 0.0) {
        return Err(LinalgError::SingularTriangular { index });
    }
    let m = b.cols;
    let mut y = b.clone();
    for i in (0..n).rev() {
        for k in i + 1..n {
            let lki = l[(k, i)];
            if lki == 0.0 {
                continue;
            }
            for j in 0..m {
                let v = y.data[k * m + j];
                y.data[i * m + j] -= lki * v;
            }
        }
        let inv = 1.0 / l[(i, i)];
        for v in y.row_mut(i) {
            *v *= inv;
        }
    }
    Ok(y)
}

/// `argmin_U ‖t − U·d‖_F² + ridge·‖U‖_F²`, i.e. `t·dᵀ·(d·dᵀ + ridge·I)⁻¹`.
///
/// Solved through a Cholesky factorization of the Gram matrix followed by one
/// step of iterative refinement.
pub fn least_squares_left(t: &Mat, d: &Mat, ridge: f64) -> Result<Mat> {
    if t.cols != d.cols {
        return Err(LinalgError::DimensionMismatch {
            op: "least_squares_left",
            lhs: t.shape(),
            rhs: d.shape(),
        });
    }
    least_squares_left_gram(&t.matmul_t(d), &d.matmul_t(d), ridge)
}

/// [`least_squares_left`] from the normal-equation blocks `tdt = t·dᵀ` (M×r)
/// and `ddt = d·dᵀ` (r×r).
pub fn least_squares_left_gram(tdt: &Mat, ddt: &Mat, ridge: f64) -> Result<Mat> {
    if !ddt.is_square() || tdt.cols != ddt.rows {
        return Err(LinalgError::DimensionMismatch {
            op: "least_squares_left_gram",
            lhs: tdt.shape(),
            rhs: ddt.shape(),
        });
    }
    let mut gram = ddt.clone();
    for i in 0..gram.rows {
        gram[(i, i)] += ridge;
    }
    let chol = cholesky_lower(&gram).map_err(|_| LinalgError::SingularNormalEquations { ridge })?;
    // Uᵀ = G⁻¹ · (d · tᵀ)
    let rhs = tdt.transpose();
    let solve = |b: &Mat| -> Result<Mat> {
        let y = solve_lower_triangular(&chol, b)?;
        solve_lower_transpose(&chol, &y)
    };
    let mut ut = solve(&rhs)?;
    let resid = rhs.sub(&gram.matmul(&ut));
    let correction = solve(&resid)?;
    ut = ut.add(&correction);
    if ut.data.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::SingularNormalEquations { ridge });
    }
    Ok(ut.transpose())
}

/// Thin SVD: `a = u · diag(sigma) · vᵀ` with `r = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Mat {
        self.u.scale_cols(&self.sigma).matmul_t(&self.v)
    }
}

/// Full (thin) SVD by Householder bidiagonalization followed by implicit-shift
/// Golub–Kahan QR sweeps.
///
/// Singular values come back in non-increasing order (stable on ties) and
/// every left singular vector has its largest-magnitude entry nonnegative.
pub fn svd_full(a: &Mat) -> Result<SvdResult> {
    if a.rows == 0 || a.cols == 0 {
        return Err(LinalgError::Empty);
    }
    if let Some(pos) = a.data.iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite {
            row: pos / a.cols,
            col: pos % a.cols,
        });
    }
    let (mut u, mut sigma, mut v) = if a.rows >= a.cols {
        golub_kahan(a)?
    } else {
        let (u, s, v) = golub_kahan(&a.transpose())?;
        (v, s, u)
    };

    // sort descending, stable on ties
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    if order.iter().enumerate().any(|(k, &i)| k != i) {
        u = Mat::from_fn(u.rows, order.len(), |i, k| u[(i, order[k])]);
        v = Mat::from_fn(v.rows, order.len(), |i, k| v[(i, order[k])]);
        sigma = order.iter().map(|&i| sigma[i]).collect();
    }

    for k in 0..sigma.len() {
        let mut best = 0.0f64;
        let mut best_val = 0.0;
        for i in 0..u.rows {
            if u[(i, k)].abs() > best {
                best = u[(i, k)].abs();
                best_val = u[(i, k)];
            }
        }
        if best_val < 0.0 {
            for i in 0..u.rows {
                u[(i, k)] = -u[(i, k)];
            }
            for i in 0..v.rows {
                v[(i, k)] = -v[(i, k)];
            }
        }
    }
    Ok(SvdResult { u, sigma, v })
}

/// Householder vector for `x`: returns `(v, beta)` with `(I − beta·v·vᵀ)·x = ±‖x‖·e₀`
/// and `v[0] = 1`.
fn householder(x: &[f64]) -> (Vec<f64>, f64) {
    let mut v = x.to_vec();
    let sigma: f64 = x[1..].iter().map(|t| t * t).sum();
    v[0] = 1.0;
    if sigma == 0.0 {
        // already aligned with e₀; reflect only to make the pivot nonnegative
        if x[0] < 0.0 {
            return (v, 2.0);
        }
        return (v, 0.0);
    }
    let mu = (x[0] * x[0] + sigma).sqrt();
    let v0 = if x[0] <= 0.0 {
        x[0] - mu
    } else {
        -sigma / (x[0] + mu)
    };
    let beta = 2.0 * v0 * v0 / (sigma + v0 * v0);
    for t in v[1..].iter_mut() {
        *t /= v0;
    }
    (v, beta)
}

/// Rotation `(c, s, r)` with `c·f + s·g = r`, `−s·f + c·g = 0`.
#[inline]
fn givens(f: f64, g: f64) -> (f64, f64, f64) {
    if g == 0.0 {
        return (1.0, 0.0, f);
    }
    let r = f.hypot(g);
    (f / r, g / r, r)
}

/// In-place rotation of columns `p`, `q`: `col_p ← c·col_p + s·col_q`,
/// `col_q ← −s·col_p + c·col_q`.
#[inline]
/// Applies a plane rotation to rows `p` and `q` of `m`.
fn rotate_rows(m: &mut Mat, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols;
    let (lo, hi) = if p < q { (p, q) } else { (q, p) };
    let (head, tail) = m.data.split_at_mut(hi * cols);
    let (rl, rh) = (&mut head[lo * cols..(lo + 1) * cols], &mut tail[..cols]);
    let (rp, rq) = if p < q { (rl, rh) } else { (rh, rl) };
    for (a, b) in rp.iter_mut().zip(rq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x + s * y;
        *b = -s * x + c * y;
    }
}

/// `(I − beta·v·vᵀ)` applied from the left to rows `off..` and columns
/// `col0..` of `w`.
fn reflect_left(w: &mut Mat, hv: &[f64], beta: f64, off: usize, col0: usize) {
    let cols = w.cols;
    let mut acc = vec![0.0; cols - col0];
    for (i, h) in hv.iter().enumerate() {
        let row = &w.data[(off + i) * cols + col0..(off + i + 1) * cols];
        for (a, x) in acc.iter_mut().zip(row) {
            *a += h * x;
        }
    }
    for a in acc.iter_mut() {
        *a *= beta;
    }
    for (i, h) in hv.iter().enumerate() {
        let row = &mut w.data[(off + i) * cols + col0..(off + i + 1) * cols];
        for (x, a) in row.iter_mut().zip(&acc) {
            *x -= h * a;
        }
    }
}

/// `(I − beta·v·vᵀ)` applied from the right to columns `off..` of rows `row0..`.
fn reflect_right(w: &mut Mat, hv: &[f64], beta: f64, off: usize, row0: usize) {
    let cols = w.cols;
    for i in row0..w.rows {
        let row = &mut w.data[i * cols + off..(i + 1) * cols];
        let s = dot(row, hv) * beta;
        for (x, h) in row.iter_mut().zip(hv) {
            *x -= s * h;
        }
    }
}

/// SVD of a tall matrix (`rows >= cols`), unsorted and unsigned-normalized.
fn golub_kahan(a: &Mat) -> Result<(Mat, Vec<f64>, Mat)> {
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut left: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n);
    let mut right: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n.saturating_sub(2));

    for k in 0..n {
        let x: Vec<f64> = (k..m).map(|i| w[(i, k)]).collect();
        let (hv, beta) = householder(&x);
        if beta != 0.0 {
            reflect_left(&mut w, &hv, beta, k, k);
        }
        left.push((hv, beta));

        if k + 2 < n {
            let (hv, beta) = householder(&w.row(k)[k + 1..]);
            if beta != 0.0 {
                reflect_right(&mut w, &hv, beta, k + 1, k);
            }
            right.push((hv, beta));
        }
    }

    let mut d: Vec<f64> = (0..n).map(|k| w[(k, k)]).collect();
    let mut e: Vec<f64> = (0..n.saturating_sub(1)).map(|k| w[(k, k + 1)]).collect();

    // U = H₀·H₁·…·H_{n−1} applied to the first n columns of I_m
    let mut u = Mat::zeros(m, n);
    for k in 0..n {
        u[(k, k)] = 1.0;
    }
    for k in (0..n).rev() {
        let (hv, beta) = &left[k];
        if *beta != 0.0 {
            reflect_left(&mut u, hv, *beta, k, k);
        }
    }
    let mut v = Mat::identity(n);
    for k in (0..right.len()).rev() {
        let (hv, beta) = &right[k];
        if *beta != 0.0 {
            reflect_left(&mut v, hv, *beta, k + 1, k + 1);
        }
    }

    // rotations act on columns of U and V, i.e. on rows of their transposes
    let mut ut = u.transpose();
    let mut vt = v.transpose();
    bidiagonal_qr(&mut d, &mut e, &mut ut, &mut vt, m)?;

    for k in 0..n {
        if d[k] < 0.0 {
            d[k] = -d[k];
            for x in vt.row_mut(k) {
                *x = -*x;
            }
        }
    }
    Ok((ut.transpose(), d, vt.transpose()))
}

/// Diagonalizes the upper bidiagonal `(d, e)`, accumulating left rotations
/// into the rows of `ut` and right rotations into the rows of `vt`.
fn bidiagonal_qr(
    d: &mut [f64],
    e: &mut [f64],
    ut: &mut Mat,
    vt: &mut Mat,
    rows: usize,
) -> Result<()> {
    let n = d.len();
    if n < 2 {
        return Ok(());
    }
    let eps = f64::EPSILON;
    let anorm = (0..n).fold(0.0f64, |acc, i| {
        acc.max(d[i].abs() + if i + 1 < n { e[i].abs() } else { 0.0 })
    });
    if anorm == 0.0 {
        return Ok(());
    }
    let zero_tol = eps * anorm;
    let max_iter = 75 * n * n.max(8);
    let mut iter = 0usize;

    let mut hi = n - 1;
    while hi > 0 {
        for i in 0..hi {
            if e[i].abs() <= eps * (d[i].abs() + d[i + 1].abs()) {
                e[i] = 0.0;
            }
        }
        if e[hi - 1] == 0.0 {
            hi -= 1;
            continue;
        }
        let mut lo = hi - 1;
        while lo > 0 && e[lo - 1] != 0.0 {
            lo -= 1;
        }

        iter += 1;
        if iter > max_iter {
            let residual = e.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let sigma_max = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let sigma_min = d.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
            return Err(LinalgError::ConvergenceFailure {
                iterations: iter,
                rows,
                cols: n,
                residual,
                sigma_max,
                sigma_min,
            });
        }

        // a negligible diagonal entry splits the block once its row is chased out
        if let Some(z) = (lo..=hi).find(|&i| d[i].abs() <= zero_tol) {
            d[z] = 0.0;
            if z < hi {
                let mut f = e[z];
                e[z] = 0.0;
                for j in z + 1..=hi {
                    let (c, s, r) = givens(d[j], f);
                    d[j] = r;
                    if j < hi {
                        f = -s * e[j];
                        e[j] *= c;
                    }
                    rotate_rows(ut, j, z, c, s);
                }
            } else {
                let mut f = e[hi - 1];
                e[hi - 1] = 0.0;
                for j in (lo..hi).rev() {
                    let (c, s, r) = givens(d[j], f);
                    d[j] = r;
                    if j > lo {
                        f = -s * e[j - 1];
                        e[j - 1] *= c;
                    }
                    rotate_rows(vt, j, hi, c, s);
                }
            }
            continue;
        }

        // Wilkinson shift from the trailing 2x2 block of BᵀB
        let t11 = d[hi - 1] * d[hi - 1]
            + if hi - 1 > lo {
                e[hi - 2] * e[hi - 2]
            } else {
                0.0
            };
        let t12 = d[hi - 1] * e[hi - 1];
        let t22 = d[hi] * d[hi] + e[hi - 1] * e[hi - 1];
        let half = 0.5 * (t11 - t22);
        let mu = if t12 == 0.0 {
            t22
        } else {
            let denom = half + half.signum() * half.hypot(t12);
            let denom = if denom == 0.0 { t12.abs() } else { denom };
            t22 - t12 * t12 / denom
        };

        let mut y = d[lo] * d[lo] - mu;
        let mut z = d[lo] * e[lo];
        for k in lo..hi {
            let (c, s, r) = givens(y, z);
            if k > lo {
                e[k - 1] = r;
            }
            let dk = d[k];
            let ek = e[k];
            d[k] = c * dk + s * ek;
            e[k] = -s * dk + c * ek;
            let bulge = s * d[k + 1];
            d[k + 1] *= c;
            rotate_rows(vt, k, k + 1, c, s);

            let (c, s, r) = givens(d[k], bulge);
            d[k] = r;
            let ek = e[k];
            let dk1 = d[k + 1];
            e[k] = c * ek + s * dk1;
            d[k + 1] = -s * ek + c * dk1;
            rotate_rows(ut, k, k + 1, c, s);
            if k + 1 < hi {
                z = s * e[k + 1];
                e[k + 1] *= c;
                y = e[k];
            }
        }
    }
    Ok(())
}
