//! Maximum likelihood estimators for the three covariance models.
//!
//! `fit_sepcor` is the block coordinate descent for separable correlation:
//! closed-form updates of U and V over covariance matrices, a rescaling back
//! to correlation factors with the same Σ, then a cyclic sweep of exact
//! one-dimensional minimizations over the standard deviations.
//!
//! The U and V updates are computed from the W-scaled residual scatter
//! S_W = W⁻¹ S W⁻¹, which is the same sum as Σᵢ Eᵢᵀ V⁻¹ Eᵢ / n regrouped, so
//! an iteration costs O(q²) regardless of n. `update_u` and `update_v` keep the
//! per-observation form.

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::linalg::{kronecker, sym_eigen, Matrix, SpdMatrix};
use crate::model::{
    cell_index, identify, least_squares_beta, rescale_to_correlation, residual_scatter, structured_objective,
    CorrelationFactor, Dataset, FitReport, RelaxedParams, SepCorParams, StdDevVector, Termination, NEAR_SINGULAR_RATIO,
};
use crate::rng::{keyed_rng, rescaled_wishart};

/// Lower clamp for starting standard deviations.
const MIN_START_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Identity,
    SampleBased,
    Random(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Stop once the objective changes by at most this much.
    pub epsilon: f64,
    pub max_iterations: usize,
    pub init: InitStrategy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { epsilon: 1e-10, max_iterations: 10_000, init: InitStrategy::Identity }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Separable covariance estimate Σ = Ũ ⊗ Ṽ, normalized so Ũ[0,0] = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SepCovParams {
    pub beta: Matrix,
    pub u_tilde: SpdMatrix,
    pub v_tilde: SpdMatrix,
}

impl SepCovParams {
    pub fn sigma(&self) -> SpdMatrix {
        SpdMatrix::new(kronecker(self.u_tilde.matrix(), self.v_tilde.matrix()))
            .expect("Kronecker product of positive definite factors")
    }

    /// The same Σ written as (β, U, V, w).
    pub fn to_sepcor(&self) -> SepCorParams {
        let q = self.u_tilde.dim() * self.v_tilde.dim();
        let (u, v, w) =
            identify(&RelaxedParams { u: self.u_tilde.clone(), v: self.v_tilde.clone(), w: StdDevVector::ones(q) })
                .expect("positive definite factors rescale to correlation factors");
        SepCorParams { beta: self.beta.clone(), u, v, w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum UpdateError {
    #[error("U update is not positive definite")]
    IndefiniteU,
    #[error("V update is not positive definite")]
    IndefiniteV,
}

impl From<UpdateError> for Termination {
    fn from(e: UpdateError) -> Self {
        match e {
            UpdateError::IndefiniteU => Termination::IndefiniteU,
            UpdateError::IndefiniteV => Termination::IndefiniteV,
        }
    }
}

/// Cholesky plus a condition check; rank-deficient sums of outer products
/// usually factor with tiny positive pivots.
fn well_conditioned(m: Matrix) -> Option<SpdMatrix> {
    let spd = SpdMatrix::new(m).ok()?;
    if spd.dim() > 1 {
        let eig = sym_eigen(spd.matrix()).ok()?;
        if eig.values[0] < NEAR_SINGULAR_RATIO * eig.values[spd.dim() - 1] {
            return None;
        }
    }
    Some(spd)
}

fn check_residual_dims(e: &[Matrix]) -> (usize, usize) {
    let (r, c) = e.first().map(Matrix::shape).expect("at least one residual matrix");
    assert!(e.iter().all(|m| m.shape() == (r, c)), "residual matrices must share a shape");
    (r, c)
}

/// Ũ = Σᵢ Eᵢᵀ V⁻¹ Eᵢ / (n r).
pub fn update_u(e: &[Matrix], v: &SpdMatrix) -> std::result::Result<SpdMatrix, UpdateError> {
    let (r, c) = check_residual_dims(e);
    assert_eq!(v.dim(), r, "V has the wrong dimension");
    let mut acc = Matrix::zeros(c, c);
    for ei in e {
        let ve = v.solve(ei).expect("dimensions checked");
        acc = &acc + &ei.tr_matmul(&ve);
    }
    let u = acc.scaled(1.0 / (e.len() * r) as f64).symmetrized();
    SpdMatrix::new(u).map_err(|_| UpdateError::IndefiniteU)
}

/// Ṽ = Σᵢ Eᵢ U⁻¹ Eᵢᵀ / (n c).
pub fn update_v(e: &[Matrix], u: &SpdMatrix) -> std::result::Result<SpdMatrix, UpdateError> {
    let (r, c) = check_residual_dims(e);
    assert_eq!(u.dim(), c, "U has the wrong dimension");
    let mut acc = Matrix::zeros(r, r);
    for ei in e {
        let et = ei.transpose();
        let ue = u.solve(&et).expect("dimensions checked");
        acc = &acc + &ei.matmul(&ue);
    }
    let v = acc.scaled(1.0 / (e.len() * c) as f64).symmetrized();
    SpdMatrix::new(v).map_err(|_| UpdateError::IndefiniteV)
}

/// S_W[j, j'] = S[j, j'] / (w_j w_j').
fn scale_scatter(s: &Matrix, w: &[f64]) -> Matrix {
    Matrix::from_fn(s.rows(), s.cols(), |a, b| s[(a, b)] / (w[a] * w[b]))
}

/// Ũ[k,k'] = (1/r) Σ_{l,l'} V⁻¹[l,l'] S_W[(k,l),(k',l')].
fn u_from_scatter(sw: &Matrix, v_inv: &Matrix, c: usize) -> Matrix {
    let r = v_inv.rows();
    let mut u = Matrix::zeros(c, c);
    for k in 0..c {
        for kk in k..c {
            let mut acc = 0.0;
            for l in 0..r {
                let row = sw.row(cell_index(l, k, r));
                for ll in 0..r {
                    acc += v_inv[(l, ll)] * row[cell_index(ll, kk, r)];
                }
            }
            u[(k, kk)] = acc / r as f64;
            u[(kk, k)] = acc / r as f64;
        }
    }
    u
}

/// Ṽ[l,l'] = (1/c) Σ_{k,k'} U⁻¹[k,k'] S_W[(k,l),(k',l')].
fn v_from_scatter(sw: &Matrix, u_inv: &Matrix, r: usize) -> Matrix {
    let c = u_inv.rows();
    let mut v = Matrix::zeros(r, r);
    for k in 0..c {
        for kk in 0..c {
            let ukk = u_inv[(k, kk)];
            for l in 0..r {
                let row = sw.row(cell_index(l, k, r));
                for ll in 0..r {
                    v[(l, ll)] += ukk * row[cell_index(ll, kk, r)];
                }
            }
        }
    }
    v.scaled(1.0 / c as f64).symmetrized()
}

/// Positive root of w² − a·w − R⁻¹_{jj} S_{jj} = 0 with
/// a = Σ_{l≠j} R⁻¹_{jl} S_{lj} / w_l and R⁻¹ = U⁻¹ ⊗ V⁻¹.
fn w_root(u_inv: &Matrix, v_inv: &Matrix, w: &[f64], s: &Matrix, j: usize) -> f64 {
    let r = v_inv.rows();
    let (k, l) = (j / r, j % r);
    let s_row = s.row(j);
    let mut a = 0.0;
    for kk in 0..u_inv.rows() {
        let ukk = u_inv[(k, kk)];
        for ll in 0..r {
            let jj = cell_index(ll, kk, r);
            if jj != j {
                a += ukk * v_inv[(l, ll)] * s_row[jj] / w[jj];
            }
        }
    }
    let b = 4.0 * u_inv[(k, k)] * v_inv[(l, l)] * s_row[j];
    let root = (a * a + b).sqrt();
    if a >= 0.0 {
        0.5 * (a + root)
    } else {
        // same root, without cancellation
        0.5 * b / (root - a)
    }
}

/// Exact minimizer of g₁ over w_j with all other coordinates held fixed.
pub fn update_w(
    u: &CorrelationFactor,
    v: &CorrelationFactor,
    w_current: &StdDevVector,
    s: &Matrix,
    j: usize,
) -> Result<f64> {
    let q = u.dim() * v.dim();
    if s.shape() != (q, q) || w_current.len() != q || j >= q {
        return Err(Error::InvalidDataset(format!("update_w: inconsistent dims for q={q}, j={j}")));
    }
    if !(s[(j, j)] > 0.0) {
        return Err(Error::DegenerateScatter { index: j, value: s[(j, j)] });
    }
    Ok(w_root(&u.as_spd().inverse(), &v.as_spd().inverse(), w_current.as_slice(), s, j))
}

/// Profiled inputs shared by all estimators.
struct Profile {
    beta: Matrix,
    s: Matrix,
}

fn profile(d: &Dataset) -> Result<Profile> {
    let beta = least_squares_beta(d)?;
    let s = residual_scatter(d, &beta);
    if let Some(j) = (0..d.q()).find(|&j| !(s[(j, j)] > 0.0)) {
        return Err(Error::DegenerateScatter { index: j, value: s[(j, j)] });
    }
    Ok(Profile { beta, s })
}

/// Starting point (U, V, w) for the coordinate descent.
pub fn initialize(d: &Dataset, strategy: InitStrategy) -> Result<(CorrelationFactor, CorrelationFactor, StdDevVector)> {
    let beta = least_squares_beta(d)?;
    let s = residual_scatter(d, &beta);
    Ok(initialize_from_scatter(&s, d.r(), d.c(), strategy))
}

fn initialize_from_scatter(
    s: &Matrix,
    r: usize,
    c: usize,
    strategy: InitStrategy,
) -> (CorrelationFactor, CorrelationFactor, StdDevVector) {
    let sd: Vec<f64> = s.diag().iter().map(|x| x.max(0.0).sqrt().max(MIN_START_STD)).collect();
    let w = StdDevVector::new(sd.clone()).expect("clamped positive");
    let (u, v) = match strategy {
        InitStrategy::Identity => (CorrelationFactor::identity(c), CorrelationFactor::identity(r)),
        InitStrategy::SampleBased => {
            let corr = Matrix::from_fn(s.rows(), s.cols(), |a, b| s[(a, b)] / (sd[a] * sd[b]));
            let mut u = Matrix::identity(c);
            for k in 0..c {
                for kk in 0..c {
                    if k != kk {
                        u[(k, kk)] =
                            (0..r).map(|l| corr[(cell_index(l, k, r), cell_index(l, kk, r))]).sum::<f64>() / r as f64;
                    }
                }
            }
            let mut v = Matrix::identity(r);
            for l in 0..r {
                for ll in 0..r {
                    if l != ll {
                        v[(l, ll)] =
                            (0..c).map(|k| corr[(cell_index(l, k, r), cell_index(ll, k, r))]).sum::<f64>() / c as f64;
                    }
                }
            }
            let u = CorrelationFactor::new(u.symmetrized()).unwrap_or_else(|_| {
                debug!("sample-based U start is not positive definite; using identity");
                CorrelationFactor::identity(c)
            });
            let v = CorrelationFactor::new(v.symmetrized()).unwrap_or_else(|_| {
                debug!("sample-based V start is not positive definite; using identity");
                CorrelationFactor::identity(r)
            });
            (u, v)
        }
        InitStrategy::Random(seed) => (random_correlation(c, &[seed, 0]), random_correlation(r, &[seed, 1])),
    };
    (u, v, w)
}

fn random_correlation(dim: usize, key: &[u64]) -> CorrelationFactor {
    if dim == 1 {
        return CorrelationFactor::identity(1);
    }
    let mut rng = keyed_rng(key);
    loop {
        if let Ok(f) = CorrelationFactor::new(rescaled_wishart(dim, 2 * dim, &mut rng)) {
            return f;
        }
    }
}

fn warn_small_sample(d: &Dataset) {
    if d.n() <= d.p() + d.q() {
        debug!("n = {} <= p + q = {}: a global minimum is not guaranteed to exist", d.n(), d.p() + d.q());
    }
}

struct CorIterate {
    u: CorrelationFactor,
    v: CorrelationFactor,
    w: Vec<f64>,
    u_inv: Matrix,
    v_inv: Matrix,
}

impl CorIterate {
    fn new(u: CorrelationFactor, v: CorrelationFactor, w: Vec<f64>) -> Self {
        let u_inv = u.as_spd().inverse();
        let v_inv = v.as_spd().inverse();
        CorIterate { u, v, w, u_inv, v_inv }
    }

    fn objective(&self, s: &Matrix) -> f64 {
        let w = StdDevVector::new(self.w.clone()).expect("iterates keep w positive");
        structured_objective(self.u.as_spd(), self.v.as_spd(), &w, s, &self.u_inv, &self.v_inv)
    }

    fn step(&self, s: &Matrix, r: usize, c: usize) -> std::result::Result<CorIterate, UpdateError> {
        let sw = scale_scatter(s, &self.w);

        let ut = well_conditioned(u_from_scatter(&sw, &self.v_inv, c)).ok_or(UpdateError::IndefiniteU)?;
        rescale_to_correlation(&ut).map_err(|_| UpdateError::IndefiniteU)?;
        // Ṽ is the partial minimizer given the unrescaled Ũ
        let ut_inv = ut.inverse();
        let vt = well_conditioned(v_from_scatter(&sw, &ut_inv, r)).ok_or(UpdateError::IndefiniteV)?;

        let relaxed = RelaxedParams { u: ut, v: vt, w: StdDevVector::new(self.w.clone()).expect("positive") };
        let (u, v, w_tilde) = identify(&relaxed).map_err(|_| UpdateError::IndefiniteV)?;
        let mut next = CorIterate::new(u, v, w_tilde.into_vec());

        for j in 0..next.w.len() {
            let wj = w_root(&next.u_inv, &next.v_inv, &next.w, s, j);
            next.w[j] = wj;
        }
        Ok(next)
    }
}

/// Separable correlation MLE starting from `cfg.init`.
pub fn fit_sepcor(d: &Dataset, cfg: &SolverConfig) -> Result<FitReport<SepCorParams>> {
    cfg.validate()?;
    let prof = profile(d)?;
    let (u, v, w) = initialize_from_scatter(&prof.s, d.r(), d.c(), cfg.init);
    run_sepcor(d, cfg, prof, u, v, w)
}

/// Separable correlation MLE from an explicit starting point.
pub fn fit_sepcor_from(
    d: &Dataset,
    cfg: &SolverConfig,
    u: CorrelationFactor,
    v: CorrelationFactor,
    w: StdDevVector,
) -> Result<FitReport<SepCorParams>> {
    cfg.validate()?;
    if u.dim() != d.c() || v.dim() != d.r() || w.len() != d.q() {
        return Err(Error::InvalidDataset("starting point dims do not match the data".into()));
    }
    let prof = profile(d)?;
    run_sepcor(d, cfg, prof, u, v, w)
}

fn run_sepcor(
    d: &Dataset,
    cfg: &SolverConfig,
    prof: Profile,
    u: CorrelationFactor,
    v: CorrelationFactor,
    w: StdDevVector,
) -> Result<FitReport<SepCorParams>> {
    warn_small_sample(d);
    let Profile { beta, s } = prof;
    let (r, c) = (d.r(), d.c());

    let mut current = CorIterate::new(u, v, w.into_vec());
    let mut g = current.objective(&s);
    let mut trace = vec![g];
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < cfg.max_iterations {
        match current.step(&s, r, c) {
            Ok(next) => {
                let g_next = next.objective(&s);
                current = next;
                iterations += 1;
                trace.push(g_next);
                let change = (g_next - g).abs();
                g = g_next;
                if change <= cfg.epsilon {
                    termination = Termination::Converged;
                    break;
                }
            }
            Err(e) => {
                termination = e.into();
                break;
            }
        }
    }

    let params = SepCorParams {
        beta,
        u: current.u,
        v: current.v,
        w: StdDevVector::new(current.w).expect("iterates keep w positive"),
    };
    Ok(FitReport { params, nll: g, objective_trace: trace, iterations, termination })
}

/// Runs one fit per starting strategy and keeps the lowest final objective;
/// ties go to the earliest start.
pub fn fit_sepcor_multistart(
    d: &Dataset,
    cfg: &SolverConfig,
    starts: &[InitStrategy],
) -> Result<FitReport<SepCorParams>> {
    if starts.is_empty() {
        return Err(Error::InvalidConfig("multi-start needs at least one start".into()));
    }
    let fits: Vec<Result<FitReport<SepCorParams>>> =
        starts.par_iter().map(|&init| fit_sepcor(d, &SolverConfig { init, ..*cfg })).collect();
    let mut best: Option<FitReport<SepCorParams>> = None;
    for fit in fits {
        let fit = fit?;
        if best.as_ref().is_none_or(|b| fit.nll < b.nll) {
            best = Some(fit);
        }
    }
    Ok(best.expect("non-empty"))
}

/// Flip-flop iteration for the separable covariance model Σ = Ũ ⊗ Ṽ.
pub fn fit_sepcov(d: &Dataset, cfg: &SolverConfig) -> Result<FitReport<SepCovParams>> {
    cfg.validate()?;
    let Profile { beta, s } = profile(d)?;
    let (r, c) = (d.r(), d.c());
    if d.n() as f64 <= r as f64 / c as f64 + c as f64 / r as f64 + 1.0 {
        debug!("n = {} is below the flip-flop uniqueness threshold", d.n());
    }

    let objective = |u: &SpdMatrix, v: &SpdMatrix, u_inv: &Matrix, v_inv: &Matrix| {
        structured_objective(u, v, &StdDevVector::ones(r * c), &s, u_inv, v_inv)
    };

    let (u0, _, _) = initialize_from_scatter(&s, r, c, cfg.init);
    let mut u = u0.as_spd().clone();
    let mut u_inv = u.inverse();
    let Some(mut v) = well_conditioned(v_from_scatter(&s, &u_inv, r)) else {
        let params = SepCovParams { beta, u_tilde: u, v_tilde: SpdMatrix::identity(r) };
        return Ok(FitReport {
            params,
            nll: f64::NAN,
            objective_trace: Vec::new(),
            iterations: 0,
            termination: Termination::IndefiniteV,
        });
    };
    let mut v_inv = v.inverse();
    let mut g = objective(&u, &v, &u_inv, &v_inv);
    let mut trace = vec![g];
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < cfg.max_iterations {
        let Some(u_next) = well_conditioned(u_from_scatter(&s, &v_inv, c)) else {
            termination = Termination::IndefiniteU;
            break;
        };
        let u_next_inv = u_next.inverse();
        let Some(v_next) = well_conditioned(v_from_scatter(&s, &u_next_inv, r)) else {
            termination = Termination::IndefiniteV;
            break;
        };
        // Ũ[0,0] = 1; moving the scale into Ṽ leaves Σ unchanged
        let scale = u_next.matrix()[(0, 0)];
        u = u_next.scaled(1.0 / scale)?;
        v = v_next.scaled(scale)?;
        u_inv = u.inverse();
        v_inv = v.inverse();

        let g_next = objective(&u, &v, &u_inv, &v_inv);
        iterations += 1;
        trace.push(g_next);
        let change = (g_next - g).abs();
        g = g_next;
        if change <= cfg.epsilon {
            termination = Termination::Converged;
            break;
        }
    }

    let params = SepCovParams { beta, u_tilde: u, v_tilde: v };
    Ok(FitReport { params, nll: g, objective_trace: trace, iterations, termination })
}

/// Unrestricted MLE S⋆(β̂); requires n − p > q.
pub fn fit_unrestricted(d: &Dataset) -> Result<SpdMatrix> {
    if d.n() <= d.p() + d.q() {
        return Err(Error::NotEstimable(format!(
            "unrestricted MLE needs n - p > q (n={}, p={}, q={})",
            d.n(),
            d.p(),
            d.q()
        )));
    }
    let beta = least_squares_beta(d)?;
    let s = residual_scatter(d, &beta);
    well_conditioned(s).ok_or_else(|| Error::NotEstimable("residual scatter is singular".into()))
}
