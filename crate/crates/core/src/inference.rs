//! Likelihood ratios and parametric bootstrap tests of separability.
//!
//! Two nested comparisons are supported: separable covariance against
//! separable correlation, and separable correlation against an unrestricted
//! covariance. Ratios are handled on the log scale throughout; the plain
//! ratio exp{−(n/2)[g(β, Σ₀) − g(β, Σ_A)]} underflows quickly for large n.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SpdMatrix};
use crate::model::{nll_sigma, Dataset, Termination};
use crate::rng::keyed_rng;
use crate::solver::{fit_sepcor, fit_sepcor_from, fit_sepcov, fit_unrestricted, SolverConfig};

/// Maximum fraction of bootstrap refits allowed to fail.
pub const MAX_FAILED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypothesisKind {
    /// H₀ separable covariance vs H_A separable correlation.
    CovVsCor,
    /// H₀ separable correlation vs H_A unrestricted covariance.
    CorVsUnrestricted,
}

impl fmt::Display for HypothesisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HypothesisKind::CovVsCor => "cov-vs-cor",
            HypothesisKind::CorVsUnrestricted => "cor-vs-unrestricted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisTest {
    pub kind: HypothesisKind,
    pub b_replicates: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl HypothesisTest {
    pub fn validate(&self, d: &Dataset) -> Result<()> {
        if self.b_replicates == 0 {
            return Err(Error::InvalidConfig("need at least one bootstrap replicate".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.kind == HypothesisKind::CorVsUnrestricted && d.n() < d.p() + d.q() {
            return Err(Error::NotEstimable(format!(
                "cor-vs-unrestricted needs n >= p + q (n={}, p={}, q={})",
                d.n(),
                d.p(),
                d.q()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub kind: HypothesisKind,
    pub log_lr_observed: f64,
    pub lr_observed: f64,
    /// log ξ_j for the replicates that were kept, in replicate order.
    pub log_xi: Vec<f64>,
    pub xi: Vec<f64>,
    pub p_value: f64,
    pub reject: bool,
    pub b_effective: usize,
    pub failed_replicates: usize,
    pub alpha: f64,
}

/// Row i is βᵀxᵢ + L zᵢ with LLᵀ = Σ and zᵢ drawn from the stream keyed by
/// (seed, replicate, i).
pub fn sample_mvn(beta: &Matrix, sigma: &SpdMatrix, x: &Matrix, seed: u64, replicate: u64) -> Result<Matrix> {
    let q = sigma.dim();
    if beta.cols() != q || beta.rows() != x.cols() {
        return Err(Error::InvalidDataset(format!(
            "beta is {}x{} but x has {} columns and sigma is {q}x{q}",
            beta.rows(),
            beta.cols(),
            x.cols()
        )));
    }
    let mean = x.matmul(beta);
    let l = sigma.cholesky_factor();
    let mut y = Matrix::zeros(x.rows(), q);
    for i in 0..x.rows() {
        let mut rng = keyed_rng(&[seed, replicate, i as u64]);
        let z: Vec<f64> = (0..q).map(|_| rand::Rng::sample(&mut rng, rand_distr::StandardNormal)).collect();
        let row = y.row_mut(i);
        for a in 0..q {
            let lz: f64 = (0..=a).map(|b| l[(a, b)] * z[b]).sum();
            row[a] = mean[(i, a)] + lz;
        }
    }
    Ok(y)
}

/// log L(β, Σ₀) − log L(β, Σ_A).
pub fn log_likelihood_ratio(d: &Dataset, sigma0: &SpdMatrix, sigma_a: &SpdMatrix, beta: &Matrix) -> Result<f64> {
    let g0 = nll_sigma(d, beta, sigma0)?;
    let ga = nll_sigma(d, beta, sigma_a)?;
    Ok(-0.5 * d.n() as f64 * (g0 - ga))
}

pub fn likelihood_ratio(d: &Dataset, sigma0: &SpdMatrix, sigma_a: &SpdMatrix, beta: &Matrix) -> Result<f64> {
    log_likelihood_ratio(d, sigma0, sigma_a, beta).map(f64::exp)
}

/// Lower empirical α-quantile: the ⌈αB⌉-th smallest value.
pub fn lower_quantile(sorted: &[f64], alpha: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let k = ((alpha * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Reject iff the observed ratio is strictly below the lower α-quantile of
/// the bootstrap ratios. Works on either scale since log is monotone.
pub fn quantile_decision(observed: f64, replicates: &[f64], alpha: f64) -> bool {
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    observed < lower_quantile(&sorted, alpha)
}

/// (1 + #{ξ_j ≤ observed}) / (B + 1).
pub fn add_one_p_value(observed: f64, replicates: &[f64]) -> f64 {
    let hits = replicates.iter().filter(|&&x| x <= observed).count();
    (1 + hits) as f64 / (replicates.len() + 1) as f64
}

/// Null and alternative fits on one dataset.
#[derive(Debug, Clone)]
pub struct NestedFit {
    pub beta: Matrix,
    pub null_sigma: SpdMatrix,
    pub null_nll: f64,
    pub alt_nll: f64,
    /// Indefinite termination of either fit, if any.
    pub failure: Option<Termination>,
}

impl NestedFit {
    /// log of L(Σ̂₀, β̂) / L(Σ̂_A, β̂).
    pub fn log_ratio(&self, n: usize) -> f64 {
        -0.5 * n as f64 * (self.null_nll - self.alt_nll)
    }
}

/// Fits the null and alternative models of `kind`. For the covariance null the
/// alternative fit starts from the null estimate, so the alternative objective
/// never ends above the null one.
pub fn fit_nested(d: &Dataset, kind: HypothesisKind, cfg: &SolverConfig) -> Result<NestedFit> {
    match kind {
        HypothesisKind::CovVsCor => {
            let null = fit_sepcov(d, cfg)?;
            if null.termination.is_indefinite() {
                return Ok(NestedFit {
                    beta: null.params.beta.clone(),
                    null_sigma: null.params.sigma(),
                    null_nll: null.nll,
                    alt_nll: f64::NAN,
                    failure: Some(null.termination),
                });
            }
            let start = null.params.to_sepcor();
            let alt = fit_sepcor_from(d, cfg, start.u, start.v, start.w)?;
            Ok(NestedFit {
                beta: null.params.beta.clone(),
                null_sigma: null.params.sigma(),
                null_nll: null.nll,
                alt_nll: alt.nll,
                failure: alt.termination.is_indefinite().then_some(alt.termination),
            })
        }
        HypothesisKind::CorVsUnrestricted => {
            let null = fit_sepcor(d, cfg)?;
            let alt = fit_unrestricted(d)?;
            let alt_nll = alt.logdet() + d.q() as f64;
            Ok(NestedFit {
                null_sigma: null.params.sigma(),
                beta: null.params.beta,
                null_nll: null.nll,
                alt_nll,
                failure: null.termination.is_indefinite().then_some(null.termination),
            })
        }
    }
}

/// Parametric bootstrap likelihood ratio test.
pub fn bootstrap_test(d: &Dataset, t: &HypothesisTest, cfg: &SolverConfig) -> Result<TestResult> {
    t.validate(d)?;
    cfg.validate()?;
    let observed = fit_nested(d, t.kind, cfg)?;
    if let Some(term) = observed.failure {
        return Err(Error::FitFailed(term));
    }
    let log_obs = observed.log_ratio(d.n());

    let outcomes: Vec<Option<f64>> = (0..t.b_replicates as u64)
        .into_par_iter()
        .map(|j| {
            let y = sample_mvn(&observed.beta, &observed.null_sigma, d.x(), t.seed, j).ok()?;
            let dj = d.with_responses(y).ok()?;
            let fit = fit_nested(&dj, t.kind, cfg).ok()?;
            fit.failure.is_none().then(|| fit.log_ratio(d.n()))
        })
        .collect();

    let log_xi: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failed = outcomes.len() - log_xi.len();
    if failed as f64 > MAX_FAILED_FRACTION * t.b_replicates as f64 || log_xi.is_empty() {
        return Err(Error::InsufficientReplicates { failed, total: t.b_replicates });
    }
    if failed > 0 {
        log::warn!("{failed} of {} bootstrap refits failed and were excluded", t.b_replicates);
    }

    Ok(TestResult {
        kind: t.kind,
        log_lr_observed: log_obs,
        lr_observed: log_obs.exp(),
        xi: log_xi.iter().map(|x| x.exp()).collect(),
        p_value: add_one_p_value(log_obs, &log_xi),
        reject: quantile_decision(log_obs, &log_xi, t.alpha),
        b_effective: log_xi.len(),
        failed_replicates: failed,
        alpha: t.alpha,
        log_xi,
    })
}
