//! Dense kernels for symmetric positive-definite matrices.
//!
//! Everything here is row-major `f64`. Dimensions stay small (a few hundred
//! at most), so the routines are plain loops without blocking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default first non-zero jitter tried by [`factorize_escalating`].
pub const DEFAULT_JITTER: f64 = 1e-9;
/// Largest jitter [`factorize_escalating`] will add before giving up.
pub const MAX_JITTER: f64 = 1e-3;

const SYMMETRY_TOL: f64 = 1e-9;

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
                context: "matrix data length",
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(pos));
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

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from equally long rows. `cols` is needed for the
    /// zero-row case.
    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                    context: "row length",
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Appends one row whose entries are already known to be finite.
    pub(crate) fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: other.rows,
                context: "matmul inner dimension",
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                actual: v.len(),
                context: "matrix-vector product",
            });
        }
        Ok(self.row_iter().map(|r| dot(r, v)).collect())
    }

    /// Rows at `indices`, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                actual: other.rows * other.cols,
                context: "matrix sum",
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn add_to_diagonal(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += value;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Checks squareness and symmetry within `1e-9` relative to the largest
    /// entry.
    pub fn check_symmetric(&self) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                actual: self.cols,
                context: "square matrix",
            });
        }
        let scale = self.max_abs().max(1.0);
        for i in 0..self.rows {
            for j in 0..i {
                let gap = (self.get(i, j) - self.get(j, i)).abs();
                if gap > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric { i, j, gap });
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `m · mᵀ`.
pub fn gram(m: &Matrix) -> Matrix {
    let n = m.rows;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let ri = m.row(i);
        for j in 0..=i {
            let v = dot(ri, m.row(j));
            out.data[i * n + j] = v;
            out.data[j * n + i] = v;
        }
    }
    out
}

/// `mᵀ · m`, accumulated row by row.
pub fn gram_transposed(m: &Matrix) -> Matrix {
    let n = m.cols;
    let mut out = Matrix::zeros(n, n);
    for r in m.row_iter() {
        add_outer_lower(&mut out, r, 1.0);
    }
    mirror_lower(&mut out);
    out
}

/// Adds `w · x xᵀ` to the lower triangle of `a`.
pub(crate) fn add_outer_lower(a: &mut Matrix, x: &[f64], w: f64) {
    let n = a.cols;
    for i in 0..n {
        let wxi = w * x[i];
        if wxi == 0.0 {
            continue;
        }
        let row = &mut a.data[i * n..i * n + i + 1];
        for (aij, &xj) in row.iter_mut().zip(x) {
            *aij += wxi * xj;
        }
    }
}

pub(crate) fn mirror_lower(a: &mut Matrix) {
    let n = a.cols;
    for i in 0..n {
        for j in 0..i {
            a.data[j * n + i] = a.data[i * n + j];
        }
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    dim: usize,
    lower: Vec<f64>,
    jitter: f64,
}

/// Factorizes `a + jitter·I`.
pub fn cholesky_factorize(a: &Matrix, jitter: f64) -> Result<SpdFactor> {
    a.check_symmetric()?;
    factorize_unchecked(a, jitter)
}

fn factorize_unchecked(a: &Matrix, jitter: f64) -> Result<SpdFactor> {
    let n = a.rows;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = a.data[j * n + j] + jitter;
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite {
                index: j,
                pivot: diag,
                jitter,
            });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a.data[i * n + j];
            let (ri, rj) = (&l[i * n..i * n + j], &l[j * n..j * n + j]);
            s -= dot(ri, rj);
            l[i * n + j] = s / ljj;
        }
    }
    Ok(SpdFactor {
        dim: n,
        lower: l,
        jitter,
    })
}

/// Factorizes `a`, retrying with jitter `1e-9, 1e-8, …, 1e-3` when the plain
/// factorization hits a non-positive pivot.
pub fn factorize_escalating(a: &Matrix) -> Result<SpdFactor> {
    a.check_symmetric()?;
    match factorize_unchecked(a, 0.0) {
        Ok(f) => return Ok(f),
        Err(Error::NotPositiveDefinite { .. }) => {}
        Err(e) => return Err(e),
    }
    let mut jitter = DEFAULT_JITTER;
    loop {
        match factorize_unchecked(a, jitter) {
            Ok(f) => return Ok(f),
            Err(e @ Error::NotPositiveDefinite { .. }) if jitter >= MAX_JITTER => return Err(e),
            Err(Error::NotPositiveDefinite { .. }) => jitter *= 10.0,
            Err(e) => return Err(e),
        }
    }
}

impl SpdFactor {
    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Jitter that was added to the diagonal before factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    #[inline]
    pub fn lower(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    pub fn lower_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.lower.clone(),
        }
    }

    /// `L · Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        gram(&self.lower_matrix())
    }

    fn check_dim(&self, len: usize, context: &'static str) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: len,
                context,
            });
        }
        Ok(())
    }

    /// Solves `L y = b` in place.
    pub fn forward_solve_in_place(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let s = b[i] - dot(row, &b[..i]);
            b[i] = s / self.lower[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_solve_in_place(&self, y: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
    }

    /// `L · z`, used to draw correlated Gaussians.
    pub fn lower_mul(&self, z: &[f64], out: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            out[i] = dot(&self.lower[i * n..i * n + i + 1], &z[..=i]);
        }
    }

    /// Applies a rank-one update so the factor represents `A + w·u·uᵀ`.
    pub fn rank_one_update(&mut self, u: &[f64], w: f64) -> Result<()> {
        self.check_dim(u.len(), "rank-one update vector")?;
        if w < 0.0 {
            return Err(Error::InvalidConfig("rank-one update weight must be non-negative".into()));
        }
        let n = self.dim;
        let sw = w.sqrt();
        let mut x: Vec<f64> = u.iter().map(|v| v * sw).collect();
        for k in 0..n {
            let lkk = self.lower[k * n + k];
            let r = lkk.hypot(x[k]);
            let c = r / lkk;
            let s = x[k] / lkk;
            self.lower[k * n + k] = r;
            for i in (k + 1)..n {
                let lik = (self.lower[i * n + k] + s * x[i]) / c;
                self.lower[i * n + k] = lik;
                x[i] = c * x[i] - s * lik;
            }
        }
        Ok(())
    }
}

/// `log det A = 2 Σ log L_ii`, natural log.
pub fn log_det(f: &SpdFactor) -> f64 {
    2.0 * (0..f.dim).map(|i| f.lower(i, i).ln()).sum::<f64>()
}

pub fn spd_solve(f: &SpdFactor, b: &[f64]) -> Result<Vec<f64>> {
    f.check_dim(b.len(), "solve right-hand side")?;
    let mut x = b.to_vec();
    f.forward_solve_in_place(&mut x);
    f.backward_solve_in_place(&mut x);
    Ok(x)
}

/// `uᵀ A⁻¹ u = ‖L⁻¹u‖²`.
pub fn quadratic_form(f: &SpdFactor, u: &[f64]) -> Result<f64> {
    f.check_dim(u.len(), "quadratic form vector")?;
    let mut y = u.to_vec();
    f.forward_solve_in_place(&mut y);
    Ok(norm_sq(&y))
}

/// Exact `log det(A + w·u·uᵀ) − log det(A) = log(1 + w·uᵀA⁻¹u)`.
pub fn rank_one_logdet_gain(f: &SpdFactor, u: &[f64], w: f64) -> Result<f64> {
    if w < 0.0 {
        return Err(Error::InvalidConfig("gain weight must be non-negative".into()));
    }
    Ok((w * quadratic_form(f, u)?).ln_1p())
}

/// `log det(I + m·mᵀ)`, evaluated on whichever Gram orientation is smaller.
pub fn log_det_identity_plus_gram(m: &Matrix) -> Result<f64> {
    if m.rows == 0 || m.cols == 0 {
        return Ok(0.0);
    }
    let mut g = if m.rows <= m.cols {
        gram(m)
    } else {
        gram_transposed(m)
    };
    g.add_to_diagonal(1.0);
    Ok(log_det(&factorize_escalating(&g)?))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    a.check_symmetric()?;
    let n = a.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = nalgebra::DMatrix::from_row_slice(n, n, &a.data);
    let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}
