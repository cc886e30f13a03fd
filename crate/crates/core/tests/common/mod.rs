//! Shared fixtures and independent oracles for the integration tests. The
//! oracles use nalgebra so that they share no code with the crate under test.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use sepcor_core::linalg::{Matrix, SpdMatrix};
use sepcor_core::model::{CorrelationFactor, Dataset, StdDevVector};
use sepcor_core::rng::keyed_rng;
use sepcor_core::simulation::gen_rescaled_wishart;

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn normal_matrix(rows: usize, cols: usize, key: &[u64]) -> Matrix {
    let mut rng = keyed_rng(key);
    Matrix::from_fn(rows, cols, |_, _| rng.sample(rand_distr::StandardNormal))
}

/// ZᵀZ/dim + I/2, comfortably conditioned.
pub fn random_spd(dim: usize, key: &[u64]) -> SpdMatrix {
    let z = normal_matrix(dim + 2, dim, key);
    let mut a = z.tr_matmul(&z).scaled(1.0 / dim as f64);
    for i in 0..dim {
        a[(i, i)] += 0.5;
    }
    SpdMatrix::new(a).unwrap()
}

pub fn random_corr(dim: usize, seed: u64) -> CorrelationFactor {
    gen_rescaled_wishart(dim, 2 * dim + 3, seed).unwrap()
}

pub fn random_w(q: usize, key: &[u64]) -> StdDevVector {
    let mut rng = keyed_rng(key);
    StdDevVector::new((0..q).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap()
}

/// Dense W(U⊗V)W built entry by entry from the cell convention.
pub fn oracle_sigma(u: &Matrix, v: &Matrix, w: &[f64]) -> DMatrix<f64> {
    let (c, r) = (u.rows(), v.rows());
    let q = r * c;
    DMatrix::from_fn(q, q, |a, b| {
        let (k, l) = (a / r, a % r);
        let (kk, ll) = (b / r, b % r);
        w[a] * w[b] * u[(k, kk)] * v[(l, ll)]
    })
}

/// (XᵀX)⁻¹XᵀY via nalgebra.
pub fn oracle_beta(y: &Matrix, x: &Matrix) -> DMatrix<f64> {
    let (x, y) = (to_na(x), to_na(y));
    let xtx = x.transpose() * &x;
    xtx.cholesky().unwrap().solve(&(x.transpose() * y))
}

/// Residual scatter with β̂ from the normal equations.
pub fn oracle_scatter(y: &Matrix, x: &Matrix) -> DMatrix<f64> {
    let beta = oracle_beta(y, x);
    let e = to_na(y) - to_na(x) * beta;
    e.transpose() * &e / y.rows() as f64
}

/// log|Σ| + tr(S Σ⁻¹) by dense nalgebra Cholesky.
pub fn oracle_g(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    let ch = sigma.clone().cholesky().expect("positive definite");
    let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    logdet + ch.solve(s).trace()
}

/// Profiled objective of the separable correlation model, dense route.
pub fn oracle_g1(d: &Dataset, u: &Matrix, v: &Matrix, w: &[f64]) -> f64 {
    oracle_g(&oracle_scatter(d.y(), d.x()), &oracle_sigma(u, v, w))
}

/// Intercept-only data drawn from an arbitrary Σ with a fixed key.
pub fn data_from_sigma(n: usize, r: usize, c: usize, sigma: &SpdMatrix, key: u64) -> Dataset {
    let x = Matrix::from_fn(n, 1, |_, _| 1.0);
    let beta = Matrix::zeros(1, r * c);
    let y = sepcor_core::inference::sample_mvn(&beta, sigma, &x, key, 0).unwrap();
    Dataset::new(y, x, r, c).unwrap()
}

/// Data from a random separable correlation model with a two-column design.
pub fn sepcor_dataset(n: usize, r: usize, c: usize, seed: u64) -> Dataset {
    let u = random_corr(c, seed ^ 0x11);
    let v = random_corr(r, seed ^ 0x22);
    let w = random_w(r * c, &[seed, 0x33]);
    let sigma = sepcor_core::model::assemble_sigma(u.as_spd(), v.as_spd(), &w).unwrap();
    let t = normal_matrix(n, 1, &[seed, 0x44]);
    let x = Matrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { t[(i, 0)] });
    let beta = normal_matrix(2, r * c, &[seed, 0x55]);
    let y = sepcor_core::inference::sample_mvn(&beta, &sigma, &x, seed, 1).unwrap();
    Dataset::new(y, x, r, c).unwrap()
}

/// Free coordinates (U upper triangle, V upper triangle, w) of an identified point.
pub fn pack(u: &Matrix, v: &Matrix, w: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for m in [u, v] {
        for i in 0..m.rows() {
            for j in i + 1..m.rows() {
                out.push(m[(i, j)]);
            }
        }
    }
    out.extend_from_slice(w);
    out
}

pub fn unpack(theta: &[f64], r: usize, c: usize) -> (Matrix, Matrix, Vec<f64>) {
    let mut it = theta.iter().copied();
    let mut fill = |dim: usize| {
        let mut m = Matrix::identity(dim);
        for i in 0..dim {
            for j in i + 1..dim {
                let x = it.next().unwrap();
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
        }
        m
    };
    let u = fill(c);
    let v = fill(r);
    (u, v, it.collect())
}

/// Max central-difference partial of g₁ over the free coordinates.
pub fn max_fd_gradient(d: &Dataset, u: &Matrix, v: &Matrix, w: &[f64], h: f64) -> f64 {
    let s = oracle_scatter(d.y(), d.x());
    let theta = pack(u, v, w);
    let f = |t: &[f64]| {
        let (u, v, w) = unpack(t, d.r(), d.c());
        oracle_g(&s, &oracle_sigma(&u, &v, &w))
    };
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let mut p = theta.clone();
        let mut m = theta.clone();
        p[i] += h;
        m[i] -= h;
        worst = worst.max(((f(&p) - f(&m)) / (2.0 * h)).abs());
    }
    worst
}

/// Golden-section minimizer of a unimodal function on [lo, hi].
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// BFGS with central-difference gradients and Armijo backtracking.
/// Infeasible points are signalled by `f` returning +∞.
pub fn bfgs(f: impl Fn(&[f64]) -> f64, x0: &[f64], max_iter: usize) -> (Vec<f64>, f64) {
    let n = x0.len();
    let grad = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let h = 1e-6 * (1.0 + x[i].abs());
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    };
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut g = grad(&x);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    for _ in 0..max_iter {
        let gv = nalgebra::DVector::from_column_slice(&g);
        if gv.amax() < 1e-10 {
            break;
        }
        let mut dir = -(&h_inv * &gv);
        if dir.dot(&gv) >= 0.0 {
            h_inv = DMatrix::identity(n, n);
            dir = -gv.clone();
        }
        let mut step = 1.0;
        let slope = dir.dot(&gv);
        let mut accepted = None;
        while step > 1e-16 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + step * b).collect();
            let fc = f(&cand);
            if fc.is_finite() && fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else { break };
        let gn = grad(&xn);
        let s = nalgebra::DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let yv = nalgebra::DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&yv);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - rho * &s * yv.transpose();
            let right = &i - rho * &yv * s.transpose();
            h_inv = &left * &h_inv * &right + rho * &s * s.transpose();
        }
        let done = (fx - fnew).abs() < 1e-15 * (1.0 + fx.abs());
        x = xn;
        fx = fnew;
        g = gn;
        if done {
            break;
        }
    }
    (x, fx)
}
