// Independent reference implementations used as oracles. Nothing here calls
// into the library's linear algebra; only data containers are shared.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use stconfound::simulate::{Baseline, Grid};
use stconfound::{Dataset, Scenario, SpatialGraph};

pub fn laplacian(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n);
    for &(a, b) in edges {
        q[(a, a)] += 1.0;
        q[(b, b)] += 1.0;
        q[(a, b)] -= 1.0;
        q[(b, a)] -= 1.0;
    }
    q
}

pub fn path_edges(n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|i| (i - 1, i)).collect()
}

/// Eigenvectors with eigenvalue above `1e-9·λmax`, and their eigenvalues.
pub fn positive_part(q: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = SymmetricEigen::new(q.clone());
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..q.nrows()).filter(|&i| eig.eigenvalues[i] > 1e-9 * top).collect();
    let mut u = DMatrix::zeros(q.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        u.set_column(c, &eig.eigenvectors.column(i));
    }
    let lambda = DVector::from_iterator(keep.len(), keep.iter().map(|&i| eig.eigenvalues[i]));
    (u, lambda)
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows() * b.nrows(), a.ncols() * b.ncols(), |i, j| {
        a[(i / b.nrows(), j / b.ncols())] * b[(i % b.nrows(), j % b.ncols())]
    })
}

pub fn ones(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, 1, 1.0)
}

/// ST2 random-effect design: `(Z_k, diag precision of u_k)` for the spatial,
/// temporal and interaction blocks, in that order.
pub fn st2_blocks(
    edges: &[(usize, usize)],
    s: usize,
    t: usize,
) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    let (us, ls) = positive_part(&laplacian(s, edges));
    let (ut, lt) = positive_part(&laplacian(t, &path_edges(t)));
    let zi = kron(&ut, &us);
    let li = DVector::from_fn(lt.len() * ls.len(), |k, _| lt[k / ls.len()] * ls[k % ls.len()]);
    vec![(kron(&ones(t), &us), ls), (kron(&ut, &ones(s)), lt), (zi, li)]
}

pub fn design_with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    out.view_mut((0, 1), (x.nrows(), x.ncols())).copy_from(x);
    out
}

/// Newton–Raphson for a Poisson log-linear GLM with offset `log e`.
pub fn glm_newton(x: &DMatrix<f64>, observed: &DVector<f64>, expected: &DVector<f64>) -> DVector<f64> {
    let mut beta = DVector::zeros(x.ncols());
    beta[0] = (observed.sum() / expected.sum()).ln();
    for _ in 0..100 {
        let mu = DVector::from_fn(x.nrows(), |i, _| expected[i] * (x.row(i) * &beta)[0].exp());
        let grad = x.transpose() * (observed - &mu);
        let hess = x.transpose() * DMatrix::from_diagonal(&mu) * x;
        let step = hess.lu().solve(&grad).expect("GLM Hessian is singular");
        beta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    beta
}

/// Maximizes `Σ[Oη − e·exp(η)] − ½Σ_k u_kᵀ diag(λ_k) u_k / σ²_k` over
/// `(β, u)` with `η = Xβ + Σ Z_k u_k`. Returns `(β, [u_k])`.
pub fn penalized_newton(
    x: &DMatrix<f64>,
    blocks: &[(DMatrix<f64>, DVector<f64>)],
    sigma2: &[f64],
    observed: &DVector<f64>,
    expected: &DVector<f64>,
) -> (DVector<f64>, Vec<DVector<f64>>) {
    let n = x.nrows();
    let p = x.ncols();
    let q: usize = blocks.iter().map(|(z, _)| z.ncols()).sum();
    let mut g = DMatrix::zeros(n, p + q);
    g.view_mut((0, 0), (n, p)).copy_from(x);
    let mut penalty = DVector::zeros(p + q);
    let mut col = p;
    for ((z, lambda), s2) in blocks.iter().zip(sigma2) {
        g.view_mut((0, col), (n, z.ncols())).copy_from(z);
        for k in 0..z.ncols() {
            penalty[col + k] = lambda[k] / s2;
        }
        col += z.ncols();
    }
    let mut theta = DVector::zeros(p + q);
    theta[0] = (observed.sum() / expected.sum()).ln();
    for _ in 0..200 {
        let eta = &g * &theta;
        let mu = DVector::from_fn(n, |i, _| expected[i] * eta[i].exp());
        let grad = g.transpose() * (observed - &mu) - penalty.component_mul(&theta);
        let hess = g.transpose() * DMatrix::from_diagonal(&mu) * &g + DMatrix::from_diagonal(&penalty);
        let step = hess.cholesky().expect("penalized Hessian not PD").solve(&grad);
        theta += &step;
        if step.amax() < 1e-14 {
            break;
        }
    }
    let beta = theta.rows(0, p).into_owned();
    let mut us = Vec::new();
    let mut col = p;
    for (z, _) in blocks {
        us.push(theta.rows(col, z.ncols()).into_owned());
        col += z.ncols();
    }
    (beta, us)
}

/// Trace of the linear smoother mapping the working response to the fitted
/// working predictor: `tr(G(GᵀWG + D)⁻¹GᵀW)`.
pub fn hat_trace(
    x: &DMatrix<f64>,
    blocks: &[(DMatrix<f64>, DVector<f64>)],
    sigma2: &[f64],
    weights: &DVector<f64>,
) -> f64 {
    let n = x.nrows();
    let p = x.ncols();
    let q: usize = blocks.iter().map(|(z, _)| z.ncols()).sum();
    let mut g = DMatrix::zeros(n, p + q);
    g.view_mut((0, 0), (n, p)).copy_from(x);
    let mut d = DVector::zeros(p + q);
    let mut col = p;
    for ((z, lambda), s2) in blocks.iter().zip(sigma2) {
        g.view_mut((0, col), (n, z.ncols())).copy_from(z);
        for k in 0..z.ncols() {
            d[col + k] = lambda[k] / s2;
        }
        col += z.ncols();
    }
    let w = DMatrix::from_diagonal(weights);
    let a = g.transpose() * &w * &g + DMatrix::from_diagonal(&d);
    let h = &g * a.lu().try_inverse().expect("singular") * g.transpose() * w;
    h.trace()
}

/// REML log-likelihood of `y ~ N(Xβ, W⁻¹ + Σσ²_k M_k)` up to a constant.
pub fn reml_loglik(
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
    kernels: &[DMatrix<f64>],
    y: &DVector<f64>,
    sigma2: &[f64],
) -> f64 {
    let mut v = DMatrix::from_diagonal(&weights.map(|w| 1.0 / w));
    for (m, s) in kernels.iter().zip(sigma2) {
        v += m * *s;
    }
    let chol = v.cholesky().expect("V not PD");
    let logdet_v = 2.0 * chol.l().diagonal().map(f64::ln).sum();
    let vinv_x = chol.solve(x);
    let xtvx = x.transpose() * &vinv_x;
    let chol_x = xtvx.clone().cholesky().expect("XᵀV⁻¹X not PD");
    let logdet_x = 2.0 * chol_x.l().diagonal().map(f64::ln).sum();
    let vinv_y = chol.solve(y);
    let beta = chol_x.solve(&(x.transpose() * &vinv_y));
    let r = y - x * beta;
    let quad = (r.transpose() * chol.solve(&r))[0];
    -0.5 * (logdet_v + logdet_x + quad)
}

/// Maximizes the REML log-likelihood over `log σ²` by Newton's method with
/// central finite-difference derivatives and step halving.
pub fn reml_maximize(
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
    kernels: &[DMatrix<f64>],
    y: &DVector<f64>,
    start: &[f64],
) -> Vec<f64> {
    let k = start.len();
    let f = |th: &DVector<f64>| {
        let s: Vec<f64> = th.iter().map(|v| v.exp()).collect();
        reml_loglik(x, weights, kernels, y, &s)
    };
    let mut th = DVector::from_iterator(k, start.iter().map(|v| v.ln()));
    let h = 1e-4;
    for _ in 0..200 {
        let f0 = f(&th);
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..k {
            let mut a = th.clone();
            a[i] += h;
            let mut b = th.clone();
            b[i] -= h;
            let (fa, fb) = (f(&a), f(&b));
            grad[i] = (fa - fb) / (2.0 * h);
            hess[(i, i)] = (fa - 2.0 * f0 + fb) / (h * h);
            for j in 0..i {
                let shift = |di: f64, dj: f64| {
                    let mut c = th.clone();
                    c[i] += di;
                    c[j] += dj;
                    f(&c)
                };
                let v = (shift(h, h) - shift(h, -h) - shift(-h, h) + shift(-h, -h)) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        let neg = -&hess;
        let step = match neg.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => grad.clone() * 0.1,
        };
        let mut scale = 1.0;
        let mut next = &th + &step * scale;
        while f(&next) < f0 - 1e-12 && scale > 1e-6 {
            scale *= 0.5;
            next = &th + &step * scale;
        }
        th = next;
        if (step * scale).amax() < 1e-10 {
            break;
        }
    }
    th.iter().map(|v| v.exp()).collect()
}

/// Small simulated dataset on a path graph.
pub fn path_dataset(s: usize, t: usize, rho: f64, seed: u64) -> (SpatialGraph, Dataset) {
    let graph = SpatialGraph::path(s).unwrap();
    let scenario = Scenario {
        grid: Grid::Graph(graph.clone()),
        n_periods: t,
        beta: vec![-0.25],
        confounding_rho: vec![rho],
        baseline_expected: Baseline::Constant(50.0),
        seed,
        ..Scenario::desk()
    };
    let (data, _) = stconfound::simulate::generate(&scenario).unwrap();
    (graph, data)
}

pub fn lattice_dataset(rows: usize, cols: usize, t: usize, seed: u64) -> (SpatialGraph, Dataset) {
    let scenario = Scenario {
        grid: Grid::Lattice { rows, cols },
        n_periods: t,
        seed,
        ..Scenario::confounded()
    };
    let (data, _) = stconfound::simulate::generate(&scenario).unwrap();
    (scenario.grid.graph().unwrap(), data)
}

/// `‖a·v‖∞ / (max row norm of a · ‖v‖₂)`: scale-free residual of `a·v = 0`.
pub fn scaled_residual(a: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let scale = a.row_iter().map(|r| r.norm()).fold(0.0, f64::max) * v.norm();
    if scale == 0.0 {
        return 0.0;
    }
    (a * v).amax() / scale
}

pub fn max_rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / a.amax().max(b.amax()).max(1e-300)
}
