//! Penalized quasi-likelihood: an outer REML loop over the variance
//! components wrapped around IRLS on the working linear mixed model
//!
//! ```text
//! O* = η + (O − μ)/μ,   W = diag(μ),   V = W⁻¹ + Σ σ²_k Z_k C_k Z_kᵀ
//! β̂ = (X*ᵀV⁻¹X*)⁻¹ X*ᵀV⁻¹O*,   û_k = σ²_k C_k Z_kᵀ V⁻¹ (O* − X*β̂)
//! ```

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::diagnostics::poisson_deviance;
use crate::error::{Error, Result};
use crate::linalg::{max_abs_vec, scale_rows, spd_inverse, symmetrize};
use crate::model::{
    build_design, BlockLabel, Dataset, DesignBundle, ModelSpec, Standardization, Variant, WeightSource,
};
use crate::structures::Structures;

pub const SIGMA2_FLOOR: f64 = 1e-10;
const REL_FLOOR: f64 = 1e-8;
const MAX_HALVINGS: usize = 20;
const ETA_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SolverChoice {
    /// Woodbury when the total random dimension is below N/2, dense otherwise.
    #[default]
    Auto,
    Dense,
    Woodbury,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub warm_start: Option<VarianceComponents>,
    /// Cold-start value for every σ².
    pub initial_sigma2: f64,
    pub solver: SolverChoice,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-5,
            max_outer: 100,
            max_inner: 50,
            warm_start: None,
            initial_sigma2: 0.1,
            solver: SolverChoice::Auto,
        }
    }
}

impl FitOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tol)));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("iteration limits must be at least 1".into()));
        }
        if !(self.initial_sigma2 > 0.0) {
            return Err(Error::Config("initial σ² must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2: BTreeMap<BlockLabel, f64>,
    /// From the inverse REML Fisher information at the reported σ²; absent
    /// when that information matrix is singular.
    pub standard_errors: BTreeMap<BlockLabel, f64>,
    /// Set when the estimate sits on the 1e-10 floor.
    pub at_boundary: BTreeMap<BlockLabel, bool>,
}

impl VarianceComponents {
    pub fn from_values(values: impl IntoIterator<Item = (BlockLabel, f64)>) -> Self {
        let sigma2: BTreeMap<_, _> = values.into_iter().collect();
        let at_boundary = sigma2.iter().map(|(k, v)| (*k, *v <= SIGMA2_FLOOR)).collect();
        Self {
            sigma2,
            standard_errors: BTreeMap::new(),
            at_boundary,
        }
    }

    pub fn get(&self, label: BlockLabel) -> Option<f64> {
        self.sigma2.get(&label).copied()
    }

    /// Values in the order of `labels`; every label must be present.
    pub fn ordered(&self, labels: &[BlockLabel]) -> Result<Vec<f64>> {
        labels
            .iter()
            .map(|l| {
                self.get(*l).ok_or_else(|| {
                    Error::LabelMismatch(format!(
                        "no σ² for the {l} block (have: {})",
                        self.sigma2.keys().map(|k| k.name()).collect::<Vec<_>>().join(", ")
                    ))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub variant: Variant,
    pub n_areas: usize,
    pub n_periods: usize,
    /// `["(Intercept)", x1, …]`.
    pub coefficient_names: Vec<String>,
    #[serde(with = "crate::linalg::flat::vector")]
    pub beta: DVector<f64>,
    /// `(X*ᵀV⁻¹X*)⁻¹`, conditional on the estimated σ².
    #[serde(with = "crate::linalg::flat::matrix")]
    pub beta_cov: DMatrix<f64>,
    /// Effects on their own scale: ξ (S), γ (T), δ (TS).
    #[serde(with = "crate::linalg::flat::vector_map")]
    pub random_effects: BTreeMap<BlockLabel, DVector<f64>>,
    /// Each block's contribution `Z_k û_k` to the linear predictor (TS).
    #[serde(with = "crate::linalg::flat::vector_map")]
    pub contributions: BTreeMap<BlockLabel, DVector<f64>>,
    pub variance_components: VarianceComponents,
    #[serde(with = "crate::linalg::flat::vector")]
    pub fitted_mu: DVector<f64>,
    /// Excludes the offset: `μ = e·exp(η)`.
    #[serde(with = "crate::linalg::flat::vector")]
    pub linear_predictor: DVector<f64>,
    #[serde(with = "crate::linalg::flat::vector")]
    pub working_weights: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub inner_iterations: usize,
    pub em_fallbacks: usize,
    pub deviance: f64,
    pub effective_df: f64,
    pub wall_time_seconds: f64,
    pub standardization: Option<Standardization>,
}

impl FitResult {
    pub fn beta_se(&self) -> DVector<f64> {
        self.beta_cov.diagonal().map(f64::sqrt)
    }

    pub fn aic(&self) -> f64 {
        self.deviance + 2.0 * self.effective_df
    }

    /// 95% Wald intervals `β̂ ± 1.959964·SE`.
    pub fn wald_intervals(&self) -> Vec<(f64, f64)> {
        let se = self.beta_se();
        self.beta
            .iter()
            .zip(se.iter())
            .map(|(b, s)| (b - crate::Z_975 * s, b + crate::Z_975 * s))
            .collect()
    }

    pub fn sigma2(&self, label: BlockLabel) -> Option<f64> {
        self.variance_components.get(label)
    }
}

/// Previous σ² relabelled to `target`'s blocks (for ST2 → ST3/ST4).
pub fn warm_start_from(previous: &FitResult, target: &DesignBundle) -> Result<VarianceComponents> {
    if !previous.converged {
        return Err(Error::Config(format!(
            "cannot warm start from a {} fit that did not converge",
            previous.variant
        )));
    }
    let labels = target.labels();
    let values = previous.variance_components.ordered(&labels)?;
    Ok(VarianceComponents::from_values(labels.into_iter().zip(values)))
}

/// Working linear mixed model `y ~ N(Xβ, W⁻¹ + Σσ²_k M_k)`.
#[derive(Debug, Clone)]
pub struct WorkingModel {
    pub x: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub response: DVector<f64>,
    /// `M_k = Z_k C_k Z_kᵀ`.
    pub kernels: Vec<DMatrix<f64>>,
    /// `rank(C_k)`, used by the EM fallback.
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct VarianceUpdate {
    pub sigma2: Vec<f64>,
    pub score: DVector<f64>,
    pub information: DMatrix<f64>,
    pub at_boundary: Vec<bool>,
    pub em_fallback: bool,
}

/// REML projection `P = V⁻¹ − V⁻¹X(XᵀV⁻¹X)⁻¹XᵀV⁻¹` from an explicit `V⁻¹`.
fn reml_projection(vinv: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let vx = vinv * x;
    let a_inv = spd_inverse(&(x.transpose() * &vx), "X*ᵀV⁻¹X*")?;
    Ok(symmetrize(&(vinv - &vx * a_inv * vx.transpose())))
}

fn dense_v(weights: &DVector<f64>, kernels: &[DMatrix<f64>], sigma2: &[f64]) -> DMatrix<f64> {
    let n = weights.len();
    let mut v = DMatrix::from_diagonal(&weights.map(|w| 1.0 / w));
    for (m, s) in kernels.iter().zip(sigma2) {
        v.zip_apply(m, |a, b| *a += s * b);
    }
    debug_assert_eq!(v.nrows(), n);
    v
}

/// One REML Fisher-scoring step at `sigma2`, falling back to an EM step when
/// the information matrix is not positive definite.
pub fn update_variance_components(model: &WorkingModel, sigma2: &[f64]) -> Result<VarianceUpdate> {
    let k = model.kernels.len();
    if sigma2.len() != k || model.ranks.len() != k {
        return Err(Error::InvalidDimension(format!(
            "{} variance components for {k} kernels",
            sigma2.len()
        )));
    }
    if sigma2.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config("σ² must be positive".into()));
    }
    let v = dense_v(&model.weights, &model.kernels, sigma2);
    let vinv = spd_inverse(&v, "V")?;
    let p = reml_projection(&vinv, &model.x)?;
    reml_step(&p, &model.response, &model.kernels, &model.ranks, sigma2)
}

fn reml_step(
    p: &DMatrix<f64>,
    y: &DVector<f64>,
    kernels: &[DMatrix<f64>],
    ranks: &[usize],
    sigma2: &[f64],
) -> Result<VarianceUpdate> {
    let k = kernels.len();
    let py = p * y;
    let pm: Vec<DMatrix<f64>> = kernels.iter().map(|m| p * m).collect();
    let mut score = DVector::zeros(k);
    let mut info = DMatrix::zeros(k, k);
    for a in 0..k {
        let quad = py.dot(&(&kernels[a] * &py));
        score[a] = 0.5 * (quad - pm[a].trace());
        for b in 0..=a {
            // tr(PM_a PM_b) = Σ_ij (PM_a)_ij (PM_b)_ji
            let t = pm[a].dot(&pm[b].transpose());
            info[(a, b)] = 0.5 * t;
            info[(b, a)] = 0.5 * t;
        }
    }

    let fisher = info.clone().cholesky().filter(|c| c.l().diagonal().iter().all(|d| *d > 0.0));
    let (mut new, em_fallback) = match fisher {
        Some(chol) => {
            let step = chol.solve(&score);
            (sigma2.iter().zip(step.iter()).map(|(s, d)| s + d).collect::<Vec<_>>(), false)
        }
        None => {
            let mut out = Vec::with_capacity(k);
            for a in 0..k {
                let rank = ranks[a].max(1) as f64;
                let mut step = 2.0 * sigma2[a] * sigma2[a] * score[a] / rank;
                let mut cand = sigma2[a] + step;
                let mut halvings = 0;
                while !(cand > 0.0) && halvings < MAX_HALVINGS {
                    step *= 0.5;
                    cand = sigma2[a] + step;
                    halvings += 1;
                }
                out.push(cand);
            }
            (out, true)
        }
    };
    let mut at_boundary = vec![false; k];
    for (s, b) in new.iter_mut().zip(at_boundary.iter_mut()) {
        if !s.is_finite() {
            return Err(Error::Singular("variance update is not finite".into()));
        }
        if *s <= SIGMA2_FLOOR {
            *s = SIGMA2_FLOOR;
            *b = true;
        }
    }
    Ok(VarianceUpdate {
        sigma2: new,
        score,
        information: info,
        at_boundary,
        em_fallback,
    })
}

/// Factorized `V` for one IRLS evaluation.
enum VSolver {
    Dense(Cholesky<f64, Dyn>),
    Woodbury {
        weights: DVector<f64>,
        /// `WZ`
        wz: DMatrix<f64>,
        /// `G` (block-diagonal `σ²_k C_k`)
        g: DMatrix<f64>,
        /// LU of `I + ZᵀWZG`
        lu: LU<f64, Dyn, Dyn>,
    },
}

impl VSolver {
    fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            VSolver::Dense(chol) => chol.solve(rhs),
            VSolver::Woodbury { weights, wz, g, lu } => {
                let wr = scale_rows(weights, rhs);
                let inner = lu.solve(&(wz.transpose() * rhs)).expect("checked invertible");
                wr - wz * (g * inner)
            }
        }
    }

    fn inverse(&self, n: usize) -> DMatrix<f64> {
        match self {
            VSolver::Dense(chol) => chol.inverse(),
            VSolver::Woodbury { .. } => symmetrize(&self.solve(&DMatrix::identity(n, n))),
        }
    }
}

struct Workspace<'a> {
    bundle: &'a DesignBundle,
    observed: &'a DVector<f64>,
    log_expected: DVector<f64>,
    kernels: Vec<DMatrix<f64>>,
    z_all: DMatrix<f64>,
    offsets: Vec<usize>,
    woodbury: bool,
}

impl<'a> Workspace<'a> {
    fn new(bundle: &'a DesignBundle, data: &'a Dataset, solver: SolverChoice) -> Result<Self> {
        let n = data.n_cells();
        if bundle.n_cells() != n || bundle.n_areas != data.n_areas || bundle.n_periods != data.n_periods {
            return Err(Error::InvalidDimension(format!(
                "design is for S={}, T={} but data has S={}, T={}",
                bundle.n_areas, bundle.n_periods, data.n_areas, data.n_periods
            )));
        }
        if bundle.n_fixed() != data.n_covariates() + 1 {
            return Err(Error::InvalidDimension(format!(
                "design has {} fixed columns but data has {} covariates",
                bundle.n_fixed(),
                data.n_covariates()
            )));
        }
        let q = bundle.random_dim();
        let woodbury = match solver {
            SolverChoice::Auto => 2 * q < n,
            SolverChoice::Dense => false,
            SolverChoice::Woodbury => true,
        };
        let kernels = bundle.blocks.iter().map(|b| b.marginal_kernel()).collect();
        let mut z_all = DMatrix::zeros(n, q);
        let mut offsets = Vec::with_capacity(bundle.blocks.len());
        let mut at = 0;
        for b in &bundle.blocks {
            offsets.push(at);
            z_all.columns_mut(at, b.dim()).copy_from(&b.z);
            at += b.dim();
        }
        Ok(Self {
            bundle,
            observed: &data.observed,
            log_expected: data.expected.map(f64::ln),
            kernels,
            z_all,
            offsets,
            woodbury,
        })
    }

    fn factorize(&self, weights: &DVector<f64>, sigma2: &[f64]) -> Result<VSolver> {
        if self.woodbury && !self.bundle.blocks.is_empty() {
            let q = self.z_all.ncols();
            let mut g = DMatrix::zeros(q, q);
            for ((b, &off), s) in self.bundle.blocks.iter().zip(&self.offsets).zip(sigma2) {
                g.view_mut((off, off), (b.dim(), b.dim())).copy_from(&(&b.cov * *s));
            }
            let wz = scale_rows(weights, &self.z_all);
            let m = DMatrix::identity(q, q) + self.z_all.transpose() * &wz * &g;
            let lu = m.lu();
            if !lu.is_invertible() {
                return Err(Error::Singular("I + ZᵀWZG is singular".into()));
            }
            Ok(VSolver::Woodbury {
                weights: weights.clone(),
                wz,
                g,
                lu,
            })
        } else {
            let v = dense_v(weights, &self.kernels, sigma2);
            let chol = v
                .cholesky()
                .ok_or_else(|| Error::Singular("working covariance V is not positive definite".into()))?;
            Ok(VSolver::Dense(chol))
        }
    }
}

/// Result of IRLS at fixed σ².
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub beta: DVector<f64>,
    pub beta_cov: DMatrix<f64>,
    /// `û_k` in each block's own coordinates.
    pub latent: Vec<DVector<f64>>,
    pub contributions: Vec<DVector<f64>>,
    pub linear_predictor: DVector<f64>,
    pub weights: DVector<f64>,
    pub working_response: DVector<f64>,
    pub iterations: usize,
}

struct Evaluation {
    beta: DVector<f64>,
    beta_cov: DMatrix<f64>,
    latent: Vec<DVector<f64>>,
    contributions: Vec<DVector<f64>>,
    eta: DVector<f64>,
    weights: DVector<f64>,
    response: DVector<f64>,
    solver: VSolver,
}

fn evaluate(ws: &Workspace, sigma2: &[f64], eta: &DVector<f64>) -> Result<Evaluation> {
    let x = &ws.bundle.x_star;
    let mu = (eta + &ws.log_expected).map(f64::exp);
    let weights = mu.clone();
    let response = DVector::from_fn(eta.len(), |i, _| eta[i] + (ws.observed[i] - mu[i]) / mu[i]);
    let solver = ws.factorize(&weights, sigma2)?;
    let vx = solver.solve(x);
    let beta_cov = spd_inverse(&(x.transpose() * &vx), "X*ᵀV⁻¹X*")?;
    let beta = &beta_cov * (vx.transpose() * &response);
    let resid = &response - x * &beta;
    let py = solver.solve(&DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()));
    let py = py.column(0).into_owned();
    let mut new_eta = x * &beta;
    let mut latent = Vec::with_capacity(ws.bundle.blocks.len());
    let mut contributions = Vec::with_capacity(ws.bundle.blocks.len());
    for (b, s) in ws.bundle.blocks.iter().zip(sigma2) {
        let u = &b.cov * (b.z.transpose() * &py) * *s;
        let c = &b.z * &u;
        new_eta += &c;
        latent.push(u);
        contributions.push(c);
    }
    Ok(Evaluation {
        beta,
        beta_cov,
        latent,
        contributions,
        eta: new_eta,
        weights,
        response,
        solver,
    })
}

fn rel_change_vec(new: &DVector<f64>, old: &DVector<f64>) -> f64 {
    max_abs_vec(&(new - old)) / max_abs_vec(old).max(REL_FLOOR)
}

fn inner_loop(
    ws: &Workspace,
    sigma2: &[f64],
    start: &DVector<f64>,
    tol: f64,
    max_inner: usize,
    outer: usize,
) -> Result<(Evaluation, usize, bool)> {
    let wrap = |inner: usize, e: Error| match e {
        Error::Singular(m) => Error::Numerical {
            outer,
            inner,
            message: m,
        },
        other => other,
    };
    let mut eta = start.clone();
    for it in 1..=max_inner {
        let ev = evaluate(ws, sigma2, &eta).map_err(|e| wrap(it, e))?;
        let mut proposal = ev.eta;
        let mut halvings = 0;
        while proposal.iter().any(|v| !v.is_finite() || *v > ETA_LIMIT) {
            if halvings == MAX_HALVINGS {
                return Err(Error::Numerical {
                    outer,
                    inner: it,
                    message: format!("linear predictor overflow after {MAX_HALVINGS} step halvings"),
                });
            }
            proposal = (&eta + &proposal) * 0.5;
            halvings += 1;
        }
        let change = rel_change_vec(&proposal, &eta);
        eta = proposal;
        if change <= tol / 10.0 {
            let fin = evaluate(ws, sigma2, &eta).map_err(|e| wrap(it + 1, e))?;
            return Ok((fin, it, true));
        }
    }
    let fin = evaluate(ws, sigma2, &eta).map_err(|e| wrap(max_inner + 1, e))?;
    Ok((fin, max_inner, false))
}

/// IRLS on the working model at fixed σ² (ordered as `bundle.blocks`).
pub fn irls_inner(
    bundle: &DesignBundle,
    data: &Dataset,
    sigma2: &[f64],
    start: &DVector<f64>,
    tol: f64,
    max_inner: usize,
) -> Result<InnerSolution> {
    if sigma2.len() != bundle.blocks.len() || sigma2.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config(format!(
            "need {} positive σ² values, got {:?}",
            bundle.blocks.len(),
            sigma2
        )));
    }
    let ws = Workspace::new(bundle, data, SolverChoice::Auto)?;
    if start.len() != data.n_cells() {
        return Err(Error::InvalidDimension("start vector length differs from cell count".into()));
    }
    let (ev, iterations, _) = inner_loop(&ws, sigma2, start, tol, max_inner, 0)?;
    let mu = (&ev.eta + &ws.log_expected).map(f64::exp);
    Ok(InnerSolution {
        beta: ev.beta,
        beta_cov: ev.beta_cov,
        latent: ev.latent,
        contributions: ev.contributions,
        linear_predictor: ev.eta,
        weights: mu,
        working_response: ev.response,
        iterations,
    })
}

/// Start `η = log((O + 0.1)/e)`.
pub fn default_start(data: &Dataset) -> DVector<f64> {
    DVector::from_fn(data.n_cells(), |i, _| ((data.observed[i] + 0.1) / data.expected[i]).ln())
}

/// `N − tr(W⁻¹P)`: trace of the map from working response to fitted working
/// linear predictor.
pub(crate) fn df_from_projection(p: &DMatrix<f64>, weights: &DVector<f64>) -> f64 {
    let n = weights.len();
    n as f64 - (0..n).map(|i| p[(i, i)] / weights[i]).sum::<f64>()
}

pub fn fit(bundle: &DesignBundle, data: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    let started = Instant::now();
    opts.validate()?;
    let ws = Workspace::new(bundle, data, opts.solver)?;
    let labels = bundle.labels();
    let n = data.n_cells();
    let ranks: Vec<usize> = bundle.blocks.iter().map(|b| b.rank).collect();

    let mut sigma2: Vec<f64> = match &opts.warm_start {
        Some(vc) => vc.ordered(&labels)?.into_iter().map(|s| s.max(SIGMA2_FLOOR)).collect(),
        None => vec![opts.initial_sigma2; labels.len()],
    };

    let mut eta = default_start(data);
    let mut prev_beta: Option<DVector<f64>> = None;
    let mut inner_total = 0;
    let mut em_fallbacks = 0;
    let mut outer = 0;
    let mut last_info: Option<DMatrix<f64>> = None;

    let (ev, p, converged) = loop {
        outer += 1;
        let (ev, inner_iters, _) = inner_loop(&ws, &sigma2, &eta, opts.tol, opts.max_inner, outer)?;
        inner_total += inner_iters;
        eta = ev.eta.clone();

        let numerical = |e: Error| match e {
            Error::Singular(m) => Error::Numerical {
                outer,
                inner: inner_iters,
                message: m,
            },
            other => other,
        };
        let vinv = ev.solver.inverse(n);
        let p = reml_projection(&vinv, &bundle.x_star).map_err(numerical)?;

        let beta_change = prev_beta.as_ref().map(|b| rel_change_vec(&ev.beta, b));
        prev_beta = Some(ev.beta.clone());

        if labels.is_empty() {
            break (ev, p, true);
        }

        let update = reml_step(&p, &ev.response, &ws.kernels, &ranks, &sigma2).map_err(numerical)?;
        if update.em_fallback {
            em_fallbacks += 1;
        }
        let sigma_change = sigma2
            .iter()
            .zip(&update.sigma2)
            .map(|(old, new)| (new - old).abs() / old.max(REL_FLOOR))
            .fold(0.0, f64::max);
        last_info = Some(update.information.clone());

        let done = matches!(beta_change, Some(c) if c <= opts.tol) && sigma_change <= opts.tol;
        if done || outer >= opts.max_outer {
            break (ev, p, done);
        }
        sigma2 = update.sigma2;
    };

    let eta = ev.eta.clone();
    let fitted_mu = (&eta + &ws.log_expected).map(f64::exp);
    let deviance = poisson_deviance(&data.observed, &fitted_mu)?;
    let effective_df = df_from_projection(&p, &ev.weights);

    let mut standard_errors = BTreeMap::new();
    if let Some(info) = &last_info {
        let inv = info.clone().try_inverse();
        for (i, l) in labels.iter().enumerate() {
            let se = inv.as_ref().map(|m| m[(i, i)]).filter(|v| *v >= 0.0).map(f64::sqrt);
            if let Some(se) = se {
                standard_errors.insert(*l, se);
            }
        }
    }
    let variance_components = VarianceComponents {
        sigma2: labels.iter().copied().zip(sigma2.iter().copied()).collect(),
        standard_errors,
        at_boundary: labels.iter().zip(&sigma2).map(|(l, s)| (*l, *s <= SIGMA2_FLOOR)).collect(),
    };

    let mut random_effects = BTreeMap::new();
    let mut contributions = BTreeMap::new();
    for ((b, u), c) in bundle.blocks.iter().zip(&ev.latent).zip(&ev.contributions) {
        random_effects.insert(b.label, &b.latent_map * u);
        contributions.insert(b.label, c.clone());
    }

    let mut coefficient_names = vec!["(Intercept)".to_string()];
    coefficient_names.extend(data.covariate_names.iter().cloned());

    Ok(FitResult {
        variant: bundle.variant,
        n_areas: data.n_areas,
        n_periods: data.n_periods,
        coefficient_names,
        beta: ev.beta,
        beta_cov: ev.beta_cov,
        random_effects,
        contributions,
        variance_components,
        working_weights: fitted_mu.clone(),
        fitted_mu,
        linear_predictor: eta,
        converged,
        iterations: outer,
        inner_iterations: inner_total,
        em_fallbacks,
        deviance,
        effective_df,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        standardization: None,
    })
}

/// Builds the design for `spec` and fits it. ST3/ST4 take their frozen
/// weights (and, unless `opts` already has one, their warm start) from
/// `reference`, a converged ST2 fit.
pub fn fit_model(
    spec: &ModelSpec,
    data: &Dataset,
    structures: &Structures,
    opts: &FitOptions,
    reference: Option<&FitResult>,
) -> Result<(DesignBundle, FitResult)> {
    if !spec.variant.needs_weights() {
        let bundle = build_design(spec, data, structures, None)?;
        let fit = fit(&bundle, data, opts)?;
        return Ok((bundle, fit));
    }
    let reference = reference.ok_or_else(|| {
        Error::Config(format!("{} needs a fitted ST2 model for its weights", spec.variant))
    })?;
    if spec.weight_source == WeightSource::FromSt2Fit && reference.variant != Variant::St2 {
        return Err(Error::Config(format!(
            "weights must come from an ST2 fit, got {}",
            reference.variant
        )));
    }
    if !reference.converged {
        return Err(Error::Config(format!(
            "the {} fit supplying weights did not converge",
            reference.variant
        )));
    }
    let bundle = build_design(spec, data, structures, Some(&reference.working_weights))?;
    let mut opts = opts.clone();
    if opts.warm_start.is_none() {
        opts.warm_start = Some(warm_start_from(reference, &bundle)?);
    }
    let fit = fit(&bundle, data, &opts)?;
    Ok((bundle, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structures::SpatialGraph;

    fn dataset(s: usize, t: usize, observed: Vec<f64>, expected: Vec<f64>, x: DMatrix<f64>) -> Dataset {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Dataset::new(s, t, DVector::from_vec(observed), DVector::from_vec(expected), x, names).unwrap()
    }

    #[test]
    fn single_observation_closed_form() {
        let data = dataset(1, 1, vec![5.0], vec![1.0], DMatrix::zeros(1, 0));
        let g = SpatialGraph::new(1, vec![]).unwrap();
        let st = Structures::new(&g, 1).unwrap();
        let bundle = build_design(&ModelSpec::new(Variant::St1), &data, &st, None).unwrap();
        let sol = irls_inner(&bundle, &data, &[], &DVector::zeros(1), 1e-10, 50).unwrap();
        assert!((sol.beta[0] - 5f64.ln()).abs() < 1e-10);
        assert!((sol.weights[0] - 5.0).abs() < 1e-9);
    }

    fn mixed_instance() -> (Dataset, Structures) {
        let g = SpatialGraph::path(4).unwrap();
        let st = Structures::new(&g, 3).unwrap();
        let x = DMatrix::from_column_slice(
            12,
            1,
            &[0.3, -1.2, 0.8, 0.1, -0.4, 1.5, -0.9, 0.2, 0.6, -0.3, -1.1, 0.4],
        );
        let obs = vec![12.0, 4.0, 15.0, 9.0, 7.0, 21.0, 5.0, 11.0, 14.0, 8.0, 3.0, 13.0];
        (dataset(4, 3, obs, vec![10.0; 12], x), st)
    }

    #[test]
    fn null_data_gives_zero_effects() {
        let (_, st) = mixed_instance();
        let data = dataset(4, 3, vec![10.0; 12], vec![10.0; 12], DMatrix::zeros(12, 0));
        let bundle = build_design(&ModelSpec::new(Variant::St2), &data, &st, None).unwrap();
        let fit = fit(&bundle, &data, &FitOptions::default()).unwrap();
        assert!(fit.beta[0].abs() < 1e-8);
        for c in fit.contributions.values() {
            assert!(c.amax() < 1e-6);
        }
    }

    #[test]
    fn woodbury_and_dense_solvers_agree() {
        let (data, st) = mixed_instance();
        let spec = ModelSpec::new(Variant::St2);
        let bundle = build_design(&spec, &data, &st, None).unwrap();
        // keep only the low-dimensional temporal block so both routes apply
        let mut small = bundle.clone();
        small.blocks.retain(|b| b.label == BlockLabel::Temporal);
        let dense = fit(&small, &data, &FitOptions { solver: SolverChoice::Dense, ..Default::default() }).unwrap();
        let wood = fit(&small, &data, &FitOptions { solver: SolverChoice::Woodbury, ..Default::default() }).unwrap();
        assert!((&dense.beta - &wood.beta).amax() < 1e-9);
        assert!((dense.deviance - wood.deviance).abs() < 1e-8);
        assert!((dense.effective_df - wood.effective_df).abs() < 1e-8);
    }

    #[test]
    fn mu_matches_linear_predictor_and_fit_is_deterministic() {
        let (data, st) = mixed_instance();
        let bundle = build_design(&ModelSpec::new(Variant::St2), &data, &st, None).unwrap();
        let a = fit(&bundle, &data, &FitOptions::default()).unwrap();
        let b = fit(&bundle, &data, &FitOptions::default()).unwrap();
        assert!(a.converged);
        for i in 0..12 {
            let mu = data.expected[i] * a.linear_predictor[i].exp();
            assert!((mu - a.fitted_mu[i]).abs() <= 1e-12 * mu);
        }
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.variance_components, b.variance_components);
        assert!((a.aic() - (a.deviance + 2.0 * a.effective_df)).abs() < 1e-12);
    }

    #[test]
    fn warm_start_label_mismatch() {
        let (data, st) = mixed_instance();
        let bundle = build_design(&ModelSpec::new(Variant::St2), &data, &st, None).unwrap();
        let opts = FitOptions {
            warm_start: Some(VarianceComponents::from_values([(BlockLabel::Spatial, 0.2)])),
            ..Default::default()
        };
        assert!(matches!(fit(&bundle, &data, &opts), Err(Error::LabelMismatch(_))));
    }

    #[test]
    fn em_fallback_keeps_values_positive() {
        // an indefinite information matrix forces the EM route
        let p = DMatrix::identity(3, 3);
        let kernels = vec![DMatrix::identity(3, 3), DMatrix::identity(3, 3)];
        let y = DVector::from_vec(vec![0.1, -0.2, 0.05]);
        let up = reml_step(&p, &y, &kernels, &[3, 3], &[0.5, 0.5]).unwrap();
        assert!(up.em_fallback);
        assert!(up.sigma2.iter().all(|s| *s > 0.0));
    }
}
