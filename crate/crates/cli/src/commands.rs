use std::io;
use std::process::ExitCode;

use anyhow::{Context, Result};
use log::{info, warn};
use sepcor_core::inference::{bootstrap_test, HypothesisKind, HypothesisTest};
use sepcor_core::linalg::Matrix;
use sepcor_core::model::{Dataset, Termination};
use sepcor_core::simulation::{run_scenario, MeanSe, Rate, ScenarioReport};
use sepcor_core::solver::{fit_sepcor, fit_sepcov, fit_unrestricted, InitStrategy, SolverConfig};
use serde::Serialize;

use crate::io::{read_matrix, row_major_to_vec_order, write_json, write_matrix_csv, MatrixJson};
use crate::{config, DataArgs, FitArgs, Hypothesis, Init, Model, SimulateArgs, SolverArgs, TestArgs};

fn load_dataset(a: &DataArgs) -> Result<Dataset> {
    let mut y = read_matrix(&a.y, a.header)?;
    if a.r * a.c != y.cols() {
        anyhow::bail!("r*c={} != q={}", a.r * a.c, y.cols());
    }
    if a.transpose_cells {
        y = row_major_to_vec_order(&y, a.r, a.c)?;
    }
    let x = match &a.x {
        Some(p) => read_matrix(p, a.header)?,
        None => Matrix::from_fn(y.rows(), 1, |_, _| 1.0),
    };
    let d = Dataset::new(y, x, a.r, a.c)?;
    info!("loaded n={}, p={}, r={}, c={}", d.n(), d.p(), d.r(), d.c());
    Ok(d)
}

fn solver_config(a: &SolverArgs, seed: u64) -> Result<SolverConfig> {
    let init = match a.init {
        Init::Identity => InitStrategy::Identity,
        Init::Sample => InitStrategy::SampleBased,
        Init::Random => InitStrategy::Random(seed),
    };
    let cfg = SolverConfig { epsilon: a.tol, max_iterations: a.max_iter, init };
    cfg.validate()?;
    Ok(cfg)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => anyhow::bail!("--workers must be positive"),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().context("cannot start worker pool")?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Serialize)]
struct FitOutput {
    model: &'static str,
    beta: MatrixJson,
    #[serde(rename = "U", skip_serializing_if = "Option::is_none")]
    u: Option<MatrixJson>,
    #[serde(rename = "V", skip_serializing_if = "Option::is_none")]
    v: Option<MatrixJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    w: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<MatrixJson>,
    nll: f64,
    iterations: usize,
    termination: Termination,
    #[serde(skip_serializing_if = "Option::is_none")]
    objective_trace: Option<Vec<f64>>,
}

fn exit_code(t: Termination) -> ExitCode {
    match t {
        Termination::Converged => ExitCode::SUCCESS,
        Termination::MaxIterations => ExitCode::from(2),
        Termination::IndefiniteU | Termination::IndefiniteV => ExitCode::from(3),
    }
}

pub fn fit(a: FitArgs) -> Result<ExitCode> {
    let d = load_dataset(&a.data)?;
    let cfg = solver_config(&a.solver, a.seed)?;
    let (r, c) = (d.r() as f64, d.c() as f64);
    let (out, sigma) = match a.model {
        Model::Sepcor => {
            if d.n() <= d.p() + d.q() {
                warn!("n = {} <= p + q = {}: the likelihood may have no global maximum", d.n(), d.p() + d.q());
            }
            let f = fit_sepcor(&d, &cfg)?;
            let sigma = f.params.sigma().into_matrix();
            let out = FitOutput {
                model: "sepcor",
                beta: (&f.params.beta).into(),
                u: Some(f.params.u.matrix().into()),
                v: Some(f.params.v.matrix().into()),
                w: Some(f.params.w.as_slice().to_vec()),
                sigma: None,
                nll: f.nll,
                iterations: f.iterations,
                termination: f.termination,
                objective_trace: a.trace.then_some(f.objective_trace),
            };
            (out, sigma)
        }
        Model::Sepcov => {
            if (d.n() as f64) <= r / c + c / r + 1.0 {
                warn!("n = {} is too small for a unique separable covariance estimate", d.n());
            }
            let f = fit_sepcov(&d, &cfg)?;
            let sigma = f.params.sigma().into_matrix();
            let out = FitOutput {
                model: "sepcov",
                beta: (&f.params.beta).into(),
                u: Some(f.params.u_tilde.matrix().into()),
                v: Some(f.params.v_tilde.matrix().into()),
                w: None,
                sigma: None,
                nll: f.nll,
                iterations: f.iterations,
                termination: f.termination,
                objective_trace: a.trace.then_some(f.objective_trace),
            };
            (out, sigma)
        }
        Model::Unrestricted => {
            let s = fit_unrestricted(&d)?;
            let beta = sepcor_core::model::least_squares_beta(&d)?;
            let out = FitOutput {
                model: "unrestricted",
                beta: (&beta).into(),
                u: None,
                v: None,
                w: None,
                sigma: None,
                nll: s.logdet() + d.q() as f64,
                iterations: 0,
                termination: Termination::Converged,
                objective_trace: None,
            };
            (out, s.into_matrix())
        }
    };
    if let Some(p) = &a.sigma_csv {
        write_matrix_csv(&sigma, p)?;
    }
    let out = FitOutput { sigma: (a.emit_sigma || a.model == Model::Unrestricted).then(|| (&sigma).into()), ..out };
    if out.termination != Termination::Converged {
        warn!("fit stopped with termination {}", out.termination);
    }
    let code = exit_code(out.termination);
    write_json(&out, a.out.as_deref())?;
    Ok(code)
}

#[derive(Serialize)]
struct TestOutput {
    hypothesis: HypothesisKind,
    lr_observed: f64,
    log_lr_observed: f64,
    p_value: f64,
    reject: bool,
    b_effective: usize,
    failed_replicates: usize,
    alpha: f64,
    seed: u64,
}

pub fn test(a: TestArgs) -> Result<ExitCode> {
    let d = load_dataset(&a.data)?;
    let cfg = solver_config(&a.solver, a.seed)?;
    let kind = match a.hypothesis {
        Hypothesis::CovVsCor => HypothesisKind::CovVsCor,
        Hypothesis::CorVsUnrestricted => HypothesisKind::CorVsUnrestricted,
    };
    let t = HypothesisTest { kind, b_replicates: a.b, alpha: a.alpha, seed: a.seed };
    let res = with_workers(a.workers, || bootstrap_test(&d, &t, &cfg))??;
    let out = TestOutput {
        hypothesis: res.kind,
        lr_observed: res.lr_observed,
        log_lr_observed: res.log_lr_observed,
        p_value: res.p_value,
        reject: res.reject,
        b_effective: res.b_effective,
        failed_replicates: res.failed_replicates,
        alpha: res.alpha,
        seed: a.seed,
    };
    write_json(&out, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

pub const SIMULATION_HEADER: [&str; 18] = [
    "n",
    "r",
    "c",
    "w_kind",
    "err_cor",
    "se_err_cor",
    "err_cov",
    "se_err_cov",
    "err_ur",
    "se_err_ur",
    "rej_cov",
    "rej_cov_b",
    "rej_cor",
    "rej_cor_b",
    "term_converged",
    "term_maxiter",
    "term_indef_u",
    "term_indef_v",
];

fn simulation_row(rep: &ScenarioReport) -> Vec<String> {
    let mean = |m: Option<MeanSe>| m.map_or_else(String::new, |m| m.mean.to_string());
    let se = |m: Option<MeanSe>| m.map_or_else(String::new, |m| m.se.to_string());
    let rate = |r: Option<Rate>| r.map_or_else(String::new, |r| r.rate.to_string());
    let s = &rep.scenario;
    let t = &rep.sepcor_terminations;
    vec![
        s.n.to_string(),
        s.r.to_string(),
        s.c.to_string(),
        s.w_kind.label().to_string(),
        mean(rep.err_cor),
        se(rep.err_cor),
        mean(rep.err_cov),
        se(rep.err_cov),
        mean(rep.err_ur),
        se(rep.err_ur),
        rate(rep.rej_cov),
        rate(rep.rej_cov_b),
        rate(rep.rej_cor),
        rate(rep.rej_cor_b),
        t.converged.to_string(),
        t.max_iterations.to_string(),
        t.indefinite_u.to_string(),
        t.indefinite_v.to_string(),
    ]
}

pub fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let cfg = config::load(&a.config)?;
    let reports = with_workers(a.workers, || {
        cfg.scenarios
            .iter()
            .enumerate()
            .map(|(i, s)| {
                info!("scenario {}/{}: n={}, r={}, c={}", i + 1, cfg.scenarios.len(), s.n, s.r, s.c);
                run_scenario(s, &cfg.solver, cfg.tests.as_ref()).with_context(|| format!("scenario {i}"))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let sink: Box<dyn io::Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?),
        None => Box::new(io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(SIMULATION_HEADER)?;
    for rep in &reports {
        if rep.bootstrap_failures > 0 {
            warn!(
                "n={}, r={}, c={}: {} bootstrap tests failed",
                rep.scenario.n, rep.scenario.r, rep.scenario.c, rep.bootstrap_failures
            );
        }
        w.write_record(simulation_row(rep))?;
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}
