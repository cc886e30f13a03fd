//! Dense linear algebra on small row-major matrices.
//!
//! Everything here is sized for the factor dimensions this crate works with
//! (a few hundred rows at most): Cholesky factorization, Householder least
//! squares and a cyclic Jacobi eigensolver for symmetric input.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use thiserror::Error;

/// Relative tolerance used when deciding whether a matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} is {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
}

/// Dense real matrix stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{} entries", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in code and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: nrows, cols: ncols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest |a_ij - a_ji|.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        self.is_square() && self.asymmetry() <= rel_tol * self.max_abs().max(f64::MIN_POSITIVE)
    }

    /// (A + Aᵀ)/2.
    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Selfᵀ · rhs without materializing the transpose.
    pub fn tr_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "tr_matmul dimension mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec dimension mismatch");
        (0..self.rows).map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "elementwise dimension mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        self.zip_with(rhs, |a, b| a - b)
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// result[i*n + k, j*n + l] = a[i,j] · b[k,l].
pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Matrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

fn check_symmetric(a: &Matrix) -> Result<(), LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch {
            expected: "square matrix".into(),
            found: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(LinalgError::NotSymmetric { asymmetry: a.asymmetry() });
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric matrix. The input is symmetrized
/// first; any pivot ≤ 0 (or non-finite) fails.
pub fn cholesky(a: &Matrix) -> Result<Matrix, LinalgError> {
    check_symmetric(a)?;
    cholesky_unchecked(&a.symmetrized())
}

fn cholesky_unchecked(a: &Matrix) -> Result<Matrix, LinalgError> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Symmetric positive definite matrix together with its Cholesky factor.
#[derive(Clone, PartialEq)]
pub struct SpdMatrix {
    matrix: Matrix,
    chol: Matrix,
}

impl SpdMatrix {
    pub fn new(a: Matrix) -> Result<Self, LinalgError> {
        check_symmetric(&a)?;
        let matrix = a.symmetrized();
        let chol = cholesky_unchecked(&matrix)?;
        Ok(SpdMatrix { matrix, chol })
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix { matrix: Matrix::identity(dim), chol: Matrix::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    /// Lower triangular L with LLᵀ = A.
    pub fn cholesky_factor(&self) -> &Matrix {
        &self.chol
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves A·X = B.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix, LinalgError> {
        let n = self.dim();
        if b.rows() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: format!("{n} rows"),
                found: format!("{} rows", b.rows()),
            });
        }
        let l = &self.chol;
        let mut x = b.clone();
        for col in 0..b.cols() {
            for i in 0..n {
                let mut s = x[(i, col)];
                for k in 0..i {
                    s -= l[(i, k)] * x[(k, col)];
                }
                x[(i, col)] = s / l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = x[(i, col)];
                for k in (i + 1)..n {
                    s -= l[(k, i)] * x[(k, col)];
                }
                x[(i, col)] = s / l[(i, i)];
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.dim())).expect("identity has matching dimension").symmetrized()
    }

    pub fn scaled(&self, s: f64) -> Result<SpdMatrix, LinalgError> {
        SpdMatrix::new(self.matrix.scaled(s))
    }
}

impl fmt::Debug for SpdMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Spd{:?}", self.matrix)
    }
}

pub fn logdet_spd(a: &SpdMatrix) -> f64 {
    a.logdet()
}

pub fn spd_solve(a: &SpdMatrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    a.solve(b)
}

/// Eigendecomposition of a symmetric matrix: `values` ascending, `vectors`
/// holds the matching unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEigen {
    /// V · diag(f(λ)) · Vᵀ.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        Matrix::from_fn(n, n, |i, j| (0..n).map(|k| v[(i, k)] * fv[k] * v[(j, k)]).sum())
    }
}

/// Cyclic Jacobi eigensolver.
pub fn sym_eigen(a: &Matrix) -> Result<SymEigen, LinalgError> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let fro = m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();

    for sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off == 0.0 || off.sqrt() <= f64::MIN_POSITIVE * fro {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                // negligible against both diagonal entries
                let g = 100.0 * apq.abs();
                if sweep > 3 && m[(p, p)].abs() + g == m[(p, p)].abs() && m[(q, q)].abs() + g == m[(q, q)].abs() {
                    m[(p, q)] = 0.0;
                    m[(q, p)] = 0.0;
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(SymEigen { values, vectors })
}

/// Symmetric M with M·A·M = I, from the eigendecomposition of A.
pub fn sym_inv_sqrt(a: &SpdMatrix) -> Result<SpdMatrix, LinalgError> {
    let eig = sym_eigen(a.matrix())?;
    if let Some((pivot, &value)) = eig.values.iter().enumerate().find(|(_, &l)| !(l > 0.0)) {
        return Err(LinalgError::NotPositiveDefinite { pivot, value });
    }
    SpdMatrix::new(eig.reconstruct_with(|l| 1.0 / l.sqrt()).symmetrized())
}

/// Largest singular value. Symmetric input goes through its eigenvalues,
/// anything else through the eigenvalues of AᵀA.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.max_abs() == 0.0 {
        return 0.0;
    }
    if a.is_symmetric(SYMMETRY_TOL) {
        let eig = sym_eigen(a).expect("symmetric input");
        eig.values.iter().fold(0.0, |m: f64, l| m.max(l.abs()))
    } else {
        let ata = a.tr_matmul(a).symmetrized();
        let eig = sym_eigen(&ata).expect("AᵀA is symmetric");
        eig.values.last().copied().unwrap_or(0.0).max(0.0).sqrt()
    }
}

/// Least-squares solution of X·B ≈ Y by Householder QR. Returns `None` when
/// a column of X is (numerically) dependent on the preceding ones.
pub fn qr_least_squares(x: &Matrix, y: &Matrix) -> Option<Matrix> {
    let (n, p) = x.shape();
    assert_eq!(y.rows(), n, "least squares row mismatch");
    assert!(n >= p, "least squares needs at least as many rows as columns");
    let q = y.cols();
    let mut a = x.clone();
    let mut b = y.clone();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);

    for k in 0..p {
        let norm = (k..n).map(|i| a[(i, k)] * a[(i, k)]).sum::<f64>().sqrt();
        if norm <= 1e-14 * scale * (n as f64).sqrt() {
            return None;
        }
        let alpha = if a[(k, k)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| a[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in k..p {
            let dot: f64 = (k..n).map(|i| v[i - k] * a[(i, j)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                a[(i, j)] -= f * v[i - k];
            }
        }
        for j in 0..q {
            let dot: f64 = (k..n).map(|i| v[i - k] * b[(i, j)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                b[(i, j)] -= f * v[i - k];
            }
        }
    }

    let mut beta = Matrix::zeros(p, q);
    for j in 0..q {
        for i in (0..p).rev() {
            let mut s = b[(i, j)];
            for k in (i + 1)..p {
                s -= a[(i, k)] * beta[(k, j)];
            }
            beta[(i, j)] = s / a[(i, i)];
        }
    }
    Some(beta)
}
