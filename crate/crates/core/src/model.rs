//! The separable correlation model: Σ = W(U ⊗ V)W.
//!
//! Cell convention: a response vector of length q = r·c is the column-stacked
//! r×c data matrix. Position `k * r + l` (0-based) holds data-matrix cell
//! (row l, column k); rows are indexed by the V factor (r, e.g. locations) and
//! columns by the U factor (c, e.g. time points). Under this layout
//! (U ⊗ V)[(k, l), (k', l')] = U[k, k'] · V[l, l'].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kronecker, qr_least_squares, sym_eigen, sym_inv_sqrt, Matrix, SpdMatrix};

/// Smallest allowed λ_min / λ_max for a correlation factor.
pub const NEAR_SINGULAR_RATIO: f64 = 1e-12;

/// Vector position of data-matrix cell (row `l`, column `k`).
#[inline]
pub fn cell_index(l: usize, k: usize, r: usize) -> usize {
    k * r + l
}

/// Responses, design and the r×c cell layout.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Matrix,
    x: Matrix,
    r: usize,
    c: usize,
}

impl Dataset {
    pub fn new(y: Matrix, x: Matrix, r: usize, c: usize) -> Result<Self> {
        let (n, q) = y.shape();
        if r == 0 || c == 0 {
            return Err(Error::InvalidDataset("r and c must be positive".into()));
        }
        if r * c != q {
            return Err(Error::InvalidDataset(format!("r*c={} != q={q}", r * c)));
        }
        if n < 2 {
            return Err(Error::InvalidDataset(format!("need at least 2 observations, got {n}")));
        }
        if x.rows() != n {
            return Err(Error::InvalidDataset(format!("design has {} rows but responses have {n}", x.rows())));
        }
        if x.cols() == 0 || x.cols() > n {
            return Err(Error::InvalidDataset(format!("design has {} columns for n={n}", x.cols())));
        }
        if !y.is_finite() || !x.is_finite() {
            return Err(Error::InvalidDataset("non-finite entries".into()));
        }
        let xtx = x.tr_matmul(&x);
        let eig = sym_eigen(&xtx)?;
        let hi = eig.values.last().copied().unwrap_or(0.0);
        let lo = eig.values.first().copied().unwrap_or(0.0);
        let rcond = if hi > 0.0 { lo / hi } else { 0.0 };
        if !(rcond >= 1e-12) {
            return Err(Error::SingularDesign { rcond });
        }
        Ok(Dataset { y, x, r, c })
    }

    /// Dataset with the default intercept-only design.
    pub fn intercept_only(y: Matrix, r: usize, c: usize) -> Result<Self> {
        let x = Matrix::from_fn(y.rows(), 1, |_, _| 1.0);
        Dataset::new(y, x, r, c)
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn n(&self) -> usize {
        self.y.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn q(&self) -> usize {
        self.y.cols()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn c(&self) -> usize {
        self.c
    }

    /// Same design and layout, different responses.
    pub fn with_responses(&self, y: Matrix) -> Result<Self> {
        if y.shape() != self.y.shape() {
            return Err(Error::InvalidDataset("response shape changed".into()));
        }
        Ok(Dataset { y, x: self.x.clone(), r: self.r, c: self.c })
    }
}

/// Positive definite correlation matrix (unit diagonal).
#[derive(Clone, PartialEq)]
pub struct CorrelationFactor(SpdMatrix);

impl CorrelationFactor {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidCorrelation(format!("{}x{} is not square", m.rows(), m.cols())));
        }
        let dim = m.rows();
        for i in 0..dim {
            if (m[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidCorrelation(format!("diagonal entry {i} is {}", m[(i, i)])));
            }
            for j in 0..dim {
                if i != j && !(m[(i, j)].abs() < 1.0) {
                    return Err(Error::InvalidCorrelation(format!("entry ({i},{j}) = {} outside (-1, 1)", m[(i, j)])));
                }
            }
        }
        let spd = SpdMatrix::new(m)?;
        if dim > 1 {
            let eig = sym_eigen(spd.matrix())?;
            let lo = eig.values[0];
            let hi = eig.values[dim - 1];
            if lo < NEAR_SINGULAR_RATIO * hi {
                return Err(Error::InvalidCorrelation(format!("near singular: eigenvalue ratio {:e}", lo / hi)));
            }
        }
        Ok(CorrelationFactor(spd))
    }

    pub fn identity(dim: usize) -> Self {
        CorrelationFactor(SpdMatrix::identity(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_spd(&self) -> &SpdMatrix {
        &self.0
    }

    pub fn matrix(&self) -> &Matrix {
        self.0.matrix()
    }
}

impl fmt::Debug for CorrelationFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Correlation{:?}", self.0.matrix())
    }
}

/// Strictly positive, finite standard deviations (the diagonal of W).
#[derive(Debug, Clone, PartialEq)]
pub struct StdDevVector(Vec<f64>);

impl StdDevVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidStdDev("empty".into()));
        }
        if let Some((j, v)) = w.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidStdDev(format!("w[{j}] = {v}")));
        }
        Ok(StdDevVector(w))
    }

    pub fn ones(q: usize) -> Self {
        StdDevVector(vec![1.0; q])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Identified parameter point (β, U, V, w).
#[derive(Debug, Clone, PartialEq)]
pub struct SepCorParams {
    pub beta: Matrix,
    pub u: CorrelationFactor,
    pub v: CorrelationFactor,
    pub w: StdDevVector,
}

impl SepCorParams {
    pub fn sigma(&self) -> SpdMatrix {
        assemble_sigma(self.u.as_spd(), self.v.as_spd(), &self.w)
            .expect("identified parameters always give a positive definite covariance")
    }
}

/// Point of the relaxed space: U and V are arbitrary covariance matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedParams {
    pub u: SpdMatrix,
    pub v: SpdMatrix,
    pub w: StdDevVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    Converged,
    MaxIterations,
    IndefiniteU,
    IndefiniteV,
}

impl Termination {
    pub fn is_indefinite(self) -> bool {
        matches!(self, Termination::IndefiniteU | Termination::IndefiniteV)
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Termination::Converged => "Converged",
            Termination::MaxIterations => "MaxIterations",
            Termination::IndefiniteU => "IndefiniteU",
            Termination::IndefiniteV => "IndefiniteV",
        };
        f.write_str(s)
    }
}

/// Outcome of an iterative fit.
#[derive(Debug, Clone)]
pub struct FitReport<P> {
    pub params: P,
    /// Profiled objective at `params`.
    pub nll: f64,
    /// Objective at the starting point followed by one value per iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

pub fn least_squares_beta(d: &Dataset) -> Result<Matrix> {
    qr_least_squares(d.x(), d.y()).ok_or(Error::SingularDesign { rcond: 0.0 })
}

/// Rows yᵢ − βᵀxᵢ.
pub fn residuals(d: &Dataset, beta: &Matrix) -> Matrix {
    let fitted = d.x().matmul(beta);
    d.y() - &fitted
}

/// S⋆(β) = Σᵢ (yᵢ − βᵀxᵢ)(yᵢ − βᵀxᵢ)ᵀ / n.
pub fn residual_scatter(d: &Dataset, beta: &Matrix) -> Matrix {
    let e = residuals(d, beta);
    e.tr_matmul(&e).scaled(1.0 / d.n() as f64).symmetrized()
}

/// The r×c matrices Eᵢ with vec(Eᵢ) = W⁻¹(yᵢ − βᵀxᵢ).
pub fn scaled_residual_matrices(d: &Dataset, beta: &Matrix, w: &StdDevVector) -> Vec<Matrix> {
    let e = residuals(d, beta);
    let (r, c) = (d.r(), d.c());
    let w = w.as_slice();
    (0..d.n())
        .map(|i| {
            let row = e.row(i);
            Matrix::from_fn(r, c, |l, k| {
                let j = cell_index(l, k, r);
                row[j] / w[j]
            })
        })
        .collect()
}

/// Σ = W(U ⊗ V)W.
pub fn assemble_sigma(u: &SpdMatrix, v: &SpdMatrix, w: &StdDevVector) -> Result<SpdMatrix> {
    let q = u.dim() * v.dim();
    if w.len() != q {
        return Err(Error::InvalidStdDev(format!("expected {q} entries, got {}", w.len())));
    }
    let w = w.as_slice();
    let mut sigma = kronecker(u.matrix(), v.matrix());
    for a in 0..q {
        for b in 0..q {
            sigma[(a, b)] *= w[a] * w[b];
        }
    }
    Ok(SpdMatrix::new(sigma)?)
}

/// Σ_{j,j'} (U⁻¹ ⊗ V⁻¹)[j,j'] · S[j',j] / (w_j w_j') = tr(S Σ⁻¹).
pub(crate) fn kron_trace(u_inv: &Matrix, v_inv: &Matrix, s: &Matrix, w: &[f64]) -> f64 {
    let (c, r) = (u_inv.rows(), v_inv.rows());
    let mut total = 0.0;
    for k in 0..c {
        for kk in 0..c {
            let ukk = u_inv[(k, kk)];
            for l in 0..r {
                let j = cell_index(l, k, r);
                let s_row = s.row(j);
                let mut acc = 0.0;
                for ll in 0..r {
                    let jj = cell_index(ll, kk, r);
                    acc += v_inv[(l, ll)] * s_row[jj] / w[jj];
                }
                total += ukk * acc / w[j];
            }
        }
    }
    total
}

fn check_factor_dims(d: &Dataset, u: &SpdMatrix, v: &SpdMatrix, w: &StdDevVector) -> Result<()> {
    if u.dim() != d.c() || v.dim() != d.r() || w.len() != d.q() {
        return Err(Error::InvalidDataset(format!(
            "parameter dims (c={}, r={}, q={}) do not match data (c={}, r={}, q={})",
            u.dim(),
            v.dim(),
            w.len(),
            d.c(),
            d.r(),
            d.q()
        )));
    }
    Ok(())
}

/// log|W(U⊗V)W| + tr(S⋆(β)[W(U⊗V)W]⁻¹), evaluated through the Kronecker
/// structure. U and V may be any positive definite matrices.
pub fn nll_g(d: &Dataset, beta: &Matrix, u: &SpdMatrix, v: &SpdMatrix, w: &StdDevVector) -> Result<f64> {
    check_factor_dims(d, u, v, w)?;
    let s = residual_scatter(d, beta);
    Ok(structured_objective(u, v, w, &s, &u.inverse(), &v.inverse()))
}

pub(crate) fn structured_objective(
    u: &SpdMatrix,
    v: &SpdMatrix,
    w: &StdDevVector,
    s: &Matrix,
    u_inv: &Matrix,
    v_inv: &Matrix,
) -> f64 {
    let (c, r) = (u.dim(), v.dim());
    let log_w: f64 = w.as_slice().iter().map(|x| x.ln()).sum();
    2.0 * log_w + r as f64 * u.logdet() + c as f64 * v.logdet() + kron_trace(u_inv, v_inv, s, w.as_slice())
}

/// Profiled objective g₁(U, V, W) = g(β̂, U, V, W), through the residual
/// matrices Eᵢ: log|W(U⊗V)W| + n⁻¹ Σᵢ tr(Eᵢ U⁻¹ Eᵢᵀ V⁻¹).
pub fn nll_g1(d: &Dataset, u: &SpdMatrix, v: &SpdMatrix, w: &StdDevVector) -> Result<f64> {
    check_factor_dims(d, u, v, w)?;
    let beta = least_squares_beta(d)?;
    let es = scaled_residual_matrices(d, &beta, w);
    let u_inv = u.inverse();
    let mut trace = 0.0;
    for e in &es {
        // tr(E U⁻¹ Eᵀ V⁻¹) = tr(Eᵀ V⁻¹ E U⁻¹)
        let ve = v.solve(e)?;
        let a = e.tr_matmul(&ve);
        trace += (0..d.c())
            .flat_map(|i| (0..d.c()).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * u_inv[(j, i)])
            .sum::<f64>();
    }
    let (c, r) = (d.c() as f64, d.r() as f64);
    let log_w: f64 = w.as_slice().iter().map(|x| x.ln()).sum();
    Ok(2.0 * log_w + r * u.logdet() + c * v.logdet() + trace / d.n() as f64)
}

/// Dense objective for an arbitrary covariance: log|Σ| + tr(S⋆(β) Σ⁻¹).
pub fn nll_sigma(d: &Dataset, beta: &Matrix, sigma: &SpdMatrix) -> Result<f64> {
    if sigma.dim() != d.q() {
        return Err(Error::InvalidDataset(format!("sigma has dim {} but q={}", sigma.dim(), d.q())));
    }
    let s = residual_scatter(d, beta);
    let x = sigma.solve(&s)?;
    Ok(sigma.logdet() + x.trace())
}

/// D^{-1/2} A D^{-1/2} with an exact unit diagonal.
pub(crate) fn rescale_to_correlation(a: &SpdMatrix) -> Result<CorrelationFactor> {
    let m = a.matrix();
    let d = m.diag();
    let dim = m.rows();
    let corr = Matrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { m[(i, j)] / (d[i] * d[j]).sqrt() });
    CorrelationFactor::new(corr)
}

/// Maps a relaxed point to the unique identified point with the same Σ.
pub fn identify(y: &RelaxedParams) -> Result<(CorrelationFactor, CorrelationFactor, StdDevVector)> {
    let (c, r) = (y.u.dim(), y.v.dim());
    if y.w.len() != r * c {
        return Err(Error::InvalidStdDev(format!("expected {} entries, got {}", r * c, y.w.len())));
    }
    let du = y.u.matrix().diag();
    let dv = y.v.matrix().diag();
    let u = rescale_to_correlation(&y.u)?;
    let v = rescale_to_correlation(&y.v)?;
    let wt = y.w.as_slice();
    let mut w = vec![0.0; r * c];
    for k in 0..c {
        for l in 0..r {
            let j = cell_index(l, k, r);
            w[j] = wt[j] * (du[k] * dv[l]).sqrt();
        }
    }
    Ok((u, v, StdDevVector::new(w)?))
}

/// Rows Σ̂^{-1/2}(yᵢ − β̂ᵀxᵢ).
pub fn standardized_residuals(d: &Dataset, fit: &SepCorParams) -> Result<Matrix> {
    let sigma = fit.sigma();
    let m = sym_inv_sqrt(&sigma)?;
    let e = residuals(d, &fit.beta);
    // m is symmetric, so (m eᵢ)ᵀ = eᵢᵀ m
    Ok(e.matmul(m.matrix()))
}

/// Free covariance parameters of the separable correlation model.
pub fn sepcor_param_count(r: usize, c: usize) -> usize {
    c * (c - 1) / 2 + r * (r - 1) / 2 + r * c
}

/// Free covariance parameters of the separable covariance model.
pub fn sepcov_param_count(r: usize, c: usize) -> usize {
    c * (c - 1) / 2 + r * (r - 1) / 2 + r + c - 1
}

pub fn unrestricted_param_count(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Extra parameters the separable correlation model spends over separable
/// covariance: rc − r − c + 1.
pub fn sepcor_minus_sepcov(r: usize, c: usize) -> usize {
    sepcor_param_count(r, c) - sepcov_param_count(r, c)
}
