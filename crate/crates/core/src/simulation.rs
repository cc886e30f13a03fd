//! Monte-Carlo comparison of the three estimators and the separability tests.
//!
//! Each replicate j of a scenario draws its data from the stream keyed by
//! (scenario seed, j) and derives its bootstrap seeds from the same key, so a
//! report depends only on the scenario and the solver settings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::inference::{bootstrap_test, fit_nested, sample_mvn, HypothesisKind, HypothesisTest};
use crate::linalg::{spectral_norm, Matrix, SpdMatrix};
use crate::model::{
    assemble_sigma, sepcor_minus_sepcov, sepcor_param_count, unrestricted_param_count, CorrelationFactor, Dataset,
    StdDevVector, Termination,
};
use crate::rng::{derive_seed, keyed_rng, rescaled_wishart};
use crate::solver::{fit_sepcor, fit_sepcov, fit_unrestricted, SolverConfig};

/// Level of the asymptotic χ² tests.
pub const NAIVE_ALPHA: f64 = 0.05;

const WISHART_STREAM: u64 = 0x5769_7368;
const BOOT_COV_STREAM: u64 = 0xb0;
const BOOT_COR_STREAM: u64 = 0xb1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Ar1(f64),
    #[serde(rename = "cs")]
    CompoundSymmetric(f64),
    #[serde(rename = "wishart")]
    RescaledWishart {
        df: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WKind {
    Identity,
    /// Standard deviations evenly spaced over [lo, hi].
    EvenlySpaced {
        lo: f64,
        hi: f64,
    },
    /// Variances evenly spaced over [lo, hi]; w_j is the square root.
    EvenlySpacedVariances {
        lo: f64,
        hi: f64,
    },
}

impl WKind {
    /// Standard deviations evenly spaced over [0.1, 10].
    pub const EVENLY_SPACED: WKind = WKind::EvenlySpaced { lo: 0.1, hi: 10.0 };
    /// Variances evenly spaced over [0.1, 10].
    pub const EVENLY_SPACED_VARIANCES: WKind = WKind::EvenlySpacedVariances { lo: 0.1, hi: 10.0 };

    pub fn label(&self) -> &'static str {
        match self {
            WKind::Identity => "identity",
            WKind::EvenlySpaced { .. } => "evenly_spaced",
            WKind::EvenlySpacedVariances { .. } => "evenly_spaced_variances",
        }
    }
}

/// ρ^{|i−j|}.
pub fn gen_ar1(dim: usize, rho: f64) -> Result<CorrelationFactor> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidRho { dim, rho });
    }
    CorrelationFactor::new(Matrix::from_fn(dim, dim, |i, j| rho.powi(i.abs_diff(j) as i32)))
}

/// Unit diagonal, every off-diagonal equal to ρ.
pub fn gen_cs(dim: usize, rho: f64) -> Result<CorrelationFactor> {
    let lower = if dim > 1 { -1.0 / (dim as f64 - 1.0) } else { f64::NEG_INFINITY };
    if !(rho > lower && rho < 1.0) {
        return Err(Error::InvalidRho { dim, rho });
    }
    CorrelationFactor::new(Matrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho }))
        .map_err(|_| Error::InvalidRho { dim, rho })
}

/// Wishart(I, df) draw rescaled to unit diagonal.
pub fn gen_rescaled_wishart(dim: usize, df: usize, seed: u64) -> Result<CorrelationFactor> {
    if df < dim {
        return Err(Error::InvalidConfig(format!("Wishart df = {df} is below dim = {dim}")));
    }
    let mut rng = keyed_rng(&[seed, WISHART_STREAM]);
    CorrelationFactor::new(rescaled_wishart(dim, df, &mut rng))
}

fn linspace(lo: f64, hi: f64, q: usize) -> Vec<f64> {
    if q == 1 {
        return vec![lo];
    }
    (0..q).map(|j| lo + j as f64 * (hi - lo) / (q - 1) as f64).collect()
}

/// Standard deviations in vec order.
pub fn gen_w(q: usize, kind: WKind) -> StdDevVector {
    let w = match kind {
        WKind::Identity => return StdDevVector::ones(q),
        WKind::EvenlySpaced { lo, hi } => linspace(lo, hi, q),
        WKind::EvenlySpacedVariances { lo, hi } => linspace(lo, hi, q).into_iter().map(f64::sqrt).collect(),
    };
    StdDevVector::new(w).expect("endpoints validated by the scenario")
}

pub fn spectral_error(est: &SpdMatrix, truth: &SpdMatrix) -> f64 {
    spectral_norm(&(est.matrix() - truth.matrix()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n: usize,
    pub r: usize,
    pub c: usize,
    pub u_kind: FactorKind,
    pub v_kind: FactorKind,
    pub w_kind: WKind,
    #[serde(default = "default_replicates")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_replicates() -> usize {
    200
}

fn factor(dim: usize, kind: FactorKind) -> Result<CorrelationFactor> {
    match kind {
        FactorKind::Ar1(rho) => gen_ar1(dim, rho),
        FactorKind::CompoundSymmetric(rho) => gen_cs(dim, rho),
        FactorKind::RescaledWishart { df, seed } => gen_rescaled_wishart(dim, df, seed),
    }
}

fn invalid(field: &'static str, message: impl Into<String>) -> Error {
    Error::InvalidScenario { field, message: message.into() }
}

impl Scenario {
    pub fn q(&self) -> usize {
        self.r * self.c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid("n", format!("need n >= 2, got {}", self.n)));
        }
        if self.r == 0 {
            return Err(invalid("r", "must be positive"));
        }
        if self.c == 0 {
            return Err(invalid("c", "must be positive"));
        }
        if self.m == 0 {
            return Err(invalid("m", "need at least one replicate"));
        }
        factor(self.c, self.u_kind).map_err(|e| invalid("u_kind", e.to_string()))?;
        factor(self.r, self.v_kind).map_err(|e| invalid("v_kind", e.to_string()))?;
        if let WKind::EvenlySpaced { lo, hi } | WKind::EvenlySpacedVariances { lo, hi } = self.w_kind {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(invalid("w_kind", format!("need 0 < lo <= hi, got lo={lo}, hi={hi}")));
            }
        }
        Ok(())
    }

    /// True Σ = W(U ⊗ V)W of the scenario.
    pub fn true_sigma(&self) -> Result<SpdMatrix> {
        self.validate()?;
        let u = factor(self.c, self.u_kind)?;
        let v = factor(self.r, self.v_kind)?;
        assemble_sigma(u.as_spd(), v.as_spd(), &gen_w(self.q(), self.w_kind))
    }

    /// Intercept-only dataset of replicate `j`.
    pub fn replicate_data(&self, sigma: &SpdMatrix, j: u64) -> Result<Dataset> {
        let x = Matrix::from_fn(self.n, 1, |_, _| 1.0);
        let y = sample_mvn(&Matrix::zeros(1, self.q()), sigma, &x, self.seed, j)?;
        Dataset::new(y, x, self.r, self.c)
    }
}

/// Which tests to run inside each replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestSettings {
    /// Asymptotic χ² likelihood ratio tests.
    pub naive: bool,
    /// Bootstrap replicates B; `None` skips the bootstrap tests.
    pub bootstrap_replicates: Option<usize>,
    pub alpha: f64,
    pub hypotheses: Vec<HypothesisKind>,
}

impl Default for TestSettings {
    fn default() -> Self {
        TestSettings {
            naive: true,
            bootstrap_replicates: None,
            alpha: 0.05,
            hypotheses: vec![HypothesisKind::CovVsCor, HypothesisKind::CorVsUnrestricted],
        }
    }
}

impl TestSettings {
    fn runs(&self, kind: HypothesisKind) -> bool {
        self.hypotheses.contains(&kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl MeanSe {
    /// Mean with standard error sd/√m; `None` for an empty sample.
    pub fn from_samples(x: &[f64]) -> Option<Self> {
        if x.is_empty() {
            return None;
        }
        let m = x.len() as f64;
        let mean = x.iter().sum::<f64>() / m;
        let se = if x.len() > 1 {
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
            (var / m).sqrt()
        } else {
            0.0
        };
        Some(MeanSe { mean, se, count: x.len() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate {
    pub rate: f64,
    pub se: f64,
    pub count: usize,
}

impl Rate {
    /// Binomial rate with standard error √(p̂(1−p̂)/m).
    pub fn from_decisions(d: &[bool]) -> Option<Self> {
        if d.is_empty() {
            return None;
        }
        let m = d.len() as f64;
        let rate = d.iter().filter(|&&x| x).count() as f64 / m;
        Some(Rate { rate, se: (rate * (1.0 - rate) / m).sqrt(), count: d.len() })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TerminationCounts {
    pub converged: usize,
    pub max_iterations: usize,
    pub indefinite_u: usize,
    pub indefinite_v: usize,
}

impl TerminationCounts {
    pub fn record(&mut self, t: Termination) {
        match t {
            Termination::Converged => self.converged += 1,
            Termination::MaxIterations => self.max_iterations += 1,
            Termination::IndefiniteU => self.indefinite_u += 1,
            Termination::IndefiniteV => self.indefinite_v += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.converged + self.max_iterations + self.indefinite_u + self.indefinite_v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: Scenario,
    pub err_cor: Option<MeanSe>,
    pub err_cov: Option<MeanSe>,
    pub err_ur: Option<MeanSe>,
    pub rej_cov: Option<Rate>,
    pub rej_cov_b: Option<Rate>,
    pub rej_cor: Option<Rate>,
    pub rej_cor_b: Option<Rate>,
    pub sepcor_terminations: TerminationCounts,
    pub sepcov_terminations: TerminationCounts,
    /// Replicates whose bootstrap test could not be completed.
    pub bootstrap_failures: usize,
}

/// Degrees of freedom of the χ² reference for `kind`.
pub fn naive_df(kind: HypothesisKind, r: usize, c: usize) -> usize {
    match kind {
        HypothesisKind::CovVsCor => sepcor_minus_sepcov(r, c),
        HypothesisKind::CorVsUnrestricted => unrestricted_param_count(r * c) - sepcor_param_count(r, c),
    }
}

/// Decision of the asymptotic test given −2·log λ = n(g₀ − g_A).
pub fn naive_decision(n: usize, null_nll: f64, alt_nll: f64, df: usize) -> bool {
    if df == 0 {
        return false;
    }
    let stat = (n as f64 * (null_nll - alt_nll)).max(0.0);
    let crit = ChiSquared::new(df as f64).expect("positive df").inverse_cdf(1.0 - NAIVE_ALPHA);
    stat > crit
}

/// Asymptotic χ² likelihood ratio test at level 0.05.
pub fn naive_lrt(d: &Dataset, kind: HypothesisKind, cfg: &SolverConfig) -> Result<bool> {
    let fit = fit_nested(d, kind, cfg)?;
    if let Some(t) = fit.failure {
        return Err(Error::FitFailed(t));
    }
    Ok(naive_decision(d.n(), fit.null_nll, fit.alt_nll, naive_df(kind, d.r(), d.c())))
}

#[derive(Debug, Default)]
struct ReplicateOutcome {
    cor: Option<Termination>,
    cov: Option<Termination>,
    err_cor: Option<f64>,
    err_cov: Option<f64>,
    err_ur: Option<f64>,
    naive_cov: Option<bool>,
    naive_cor: Option<bool>,
    boot_cov: Option<bool>,
    boot_cor: Option<bool>,
    boot_failures: usize,
}

fn run_replicate(
    s: &Scenario,
    sigma: &SpdMatrix,
    cfg: &SolverConfig,
    tests: Option<&TestSettings>,
    j: u64,
) -> ReplicateOutcome {
    let mut out = ReplicateOutcome::default();
    let Ok(d) = s.replicate_data(sigma, j) else {
        return out;
    };
    let ur_estimable = d.n() > d.p() + d.q();

    let cor = fit_sepcor(&d, cfg).ok();
    let cov = fit_sepcov(&d, cfg).ok();
    out.cor = cor.as_ref().map(|f| f.termination);
    out.cov = cov.as_ref().map(|f| f.termination);
    let converged = |t: Option<Termination>| t == Some(Termination::Converged);
    if let (Some(f), true) = (&cor, converged(out.cor)) {
        out.err_cor = Some(spectral_error(&f.params.sigma(), sigma));
    }
    if let (Some(f), true) = (&cov, converged(out.cov)) {
        out.err_cov = Some(spectral_error(&f.params.sigma(), sigma));
    }
    let ur = if ur_estimable { fit_unrestricted(&d).ok() } else { None };
    if let Some(ur) = &ur {
        out.err_ur = Some(spectral_error(ur, sigma));
    }

    let Some(tests) = tests else {
        return out;
    };
    if tests.naive {
        if let (Some(cor), Some(cov), true, true) = (&cor, &cov, converged(out.cor), converged(out.cov)) {
            if tests.runs(HypothesisKind::CovVsCor) {
                let df = naive_df(HypothesisKind::CovVsCor, s.r, s.c);
                out.naive_cov = Some(naive_decision(d.n(), cov.nll, cor.nll, df));
            }
            if let (Some(ur), true) = (&ur, tests.runs(HypothesisKind::CorVsUnrestricted)) {
                let df = naive_df(HypothesisKind::CorVsUnrestricted, s.r, s.c);
                out.naive_cor = Some(naive_decision(d.n(), cor.nll, ur.logdet() + d.q() as f64, df));
            }
        }
    }
    if let Some(b) = tests.bootstrap_replicates {
        let mut boot = |kind: HypothesisKind, stream: u64| {
            let t =
                HypothesisTest { kind, b_replicates: b, alpha: tests.alpha, seed: derive_seed(&[s.seed, j, stream]) };
            match bootstrap_test(&d, &t, cfg) {
                Ok(res) => Some(res.reject),
                Err(e) => {
                    log::debug!("replicate {j}: {kind} bootstrap failed: {e}");
                    out.boot_failures += 1;
                    None
                }
            }
        };
        let cov_b = tests.runs(HypothesisKind::CovVsCor).then(|| boot(HypothesisKind::CovVsCor, BOOT_COV_STREAM));
        let cor_b = (ur_estimable && tests.runs(HypothesisKind::CorVsUnrestricted))
            .then(|| boot(HypothesisKind::CorVsUnrestricted, BOOT_COR_STREAM));
        out.boot_cov = cov_b.flatten();
        out.boot_cor = cor_b.flatten();
    }
    out
}

/// Runs all replicates of `s` (in parallel on the current rayon pool) and
/// aggregates them in replicate order.
pub fn run_scenario(s: &Scenario, cfg: &SolverConfig, tests: Option<&TestSettings>) -> Result<ScenarioReport> {
    cfg.validate()?;
    if let Some(t) = tests {
        if !(t.alpha > 0.0 && t.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", t.alpha)));
        }
        if t.bootstrap_replicates == Some(0) {
            return Err(Error::InvalidConfig("bootstrap_replicates must be positive".into()));
        }
    }
    let sigma = s.true_sigma()?;
    let outcomes: Vec<ReplicateOutcome> =
        (0..s.m as u64).into_par_iter().map(|j| run_replicate(s, &sigma, cfg, tests, j)).collect();

    let mut sepcor_terminations = TerminationCounts::default();
    let mut sepcov_terminations = TerminationCounts::default();
    for o in &outcomes {
        if let Some(t) = o.cor {
            sepcor_terminations.record(t);
        }
        if let Some(t) = o.cov {
            sepcov_terminations.record(t);
        }
    }
    let collect_f = |f: fn(&ReplicateOutcome) -> Option<f64>| -> Vec<f64> { outcomes.iter().filter_map(f).collect() };
    let collect_b = |f: fn(&ReplicateOutcome) -> Option<bool>| -> Vec<bool> { outcomes.iter().filter_map(f).collect() };

    Ok(ScenarioReport {
        scenario: *s,
        err_cor: MeanSe::from_samples(&collect_f(|o| o.err_cor)),
        err_cov: MeanSe::from_samples(&collect_f(|o| o.err_cov)),
        err_ur: MeanSe::from_samples(&collect_f(|o| o.err_ur)),
        rej_cov: Rate::from_decisions(&collect_b(|o| o.naive_cov)),
        rej_cov_b: Rate::from_decisions(&collect_b(|o| o.boot_cov)),
        rej_cor: Rate::from_decisions(&collect_b(|o| o.naive_cor)),
        rej_cor_b: Rate::from_decisions(&collect_b(|o| o.boot_cor)),
        sepcor_terminations,
        sepcov_terminations,
        bootstrap_failures: outcomes.iter().map(|o| o.boot_failures).sum(),
    })
}
