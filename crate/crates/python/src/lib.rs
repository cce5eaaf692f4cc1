use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stconfound::diagnostics::{confounding_correlations, poisson_deviance as deviance_impl, ModelComparison};
use stconfound::io::{load_adjacency, load_dataset, serialize_fit, default_ids};
use stconfound::model::{parse_blocks, ModelSpec, Variant};
use stconfound::projections::{constrained_covariance as constrained_impl, kriging_covariance as kriging_impl};
use stconfound::simulate::{generate, Scenario};
use stconfound::structures::build_spatial_precision;
use stconfound::{fit_model, Error, FitOptions};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        4 => PyIOError::new_err(e.to_string()),
        5 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[pyclass(name = "SpatialGraph", module = "stconfound_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySpatialGraph {
    inner: stconfound::SpatialGraph,
}

#[pymethods]
impl PySpatialGraph {
    /// Undirected graph on `n_areas` areas from 0-based `(i, j)` edges.
    #[new]
    fn new(n_areas: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        let inner = stconfound::SpatialGraph::new(n_areas, edges).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn lattice(rows: usize, cols: usize) -> PyResult<Self> {
        Ok(Self {
            inner: stconfound::SpatialGraph::lattice(rows, cols).map_err(to_py)?,
        })
    }

    /// Reads a 1-based edge list or 0/1 adjacency matrix file.
    #[staticmethod]
    #[pyo3(signature = (path, n_areas=None))]
    fn load(path: &str, n_areas: Option<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: load_adjacency(path, n_areas).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_areas(&self) -> usize {
        self.inner.n_areas()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    fn is_connected(&self) -> bool {
        self.inner.is_connected()
    }

    /// ICAR structure matrix as a list of rows.
    fn precision(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows_of(&build_spatial_precision(&self.inner).map_err(to_py)?))
    }

    fn __repr__(&self) -> String {
        format!("SpatialGraph(n_areas={}, edges={})", self.inner.n_areas(), self.inner.edges().len())
    }
}

#[pyclass(name = "Dataset", module = "stconfound_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: stconfound::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Per-cell vectors in area-fastest order (cell = t·S + i); `covariates`
    /// is a list of N rows.
    #[new]
    #[pyo3(signature = (n_areas, n_periods, observed, expected, covariates=None, names=None))]
    fn new(
        n_areas: usize,
        n_periods: usize,
        observed: Vec<f64>,
        expected: Vec<f64>,
        covariates: Option<Vec<Vec<f64>>>,
        names: Option<Vec<String>>,
    ) -> PyResult<Self> {
        let n = observed.len();
        let x = match covariates {
            Some(rows) if !rows.is_empty() => matrix_from_rows(&rows, "covariates")?,
            _ => DMatrix::zeros(n, 0),
        };
        let names = names.unwrap_or_else(|| (1..=x.ncols()).map(|j| format!("x{j}")).collect());
        let inner = stconfound::Dataset::new(
            n_areas,
            n_periods,
            DVector::from_vec(observed),
            DVector::from_vec(expected),
            x,
            names,
        )
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads the long-format CSV (area,time,observed,expected|population,…).
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_dataset(path).map_err(to_py)?.data,
        })
    }

    /// Copy with covariates centred and scaled to unit sample variance.
    fn standardized(&self) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.standardized().map_err(to_py)?.0,
        })
    }

    #[getter]
    fn n_areas(&self) -> usize {
        self.inner.n_areas
    }

    #[getter]
    fn n_periods(&self) -> usize {
        self.inner.n_periods
    }

    #[getter]
    fn observed(&self) -> Vec<f64> {
        vec_of(&self.inner.observed)
    }

    #[getter]
    fn expected(&self) -> Vec<f64> {
        vec_of(&self.inner.expected)
    }

    #[getter]
    fn covariates(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.covariates)
    }

    #[getter]
    fn covariate_names(&self) -> Vec<String> {
        self.inner.covariate_names.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.n_cells()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_areas={}, n_periods={}, covariates={:?})",
            self.inner.n_areas, self.inner.n_periods, self.inner.covariate_names
        )
    }
}

#[pyclass(name = "FitResult", module = "stconfound_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFitResult {
    inner: stconfound::FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn model(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn coefficient_names(&self) -> Vec<String> {
        self.inner.coefficient_names.clone()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        vec_of(&self.inner.beta)
    }

    #[getter]
    fn beta_se(&self) -> Vec<f64> {
        vec_of(&self.inner.beta_se())
    }

    #[getter]
    fn beta_cov(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.beta_cov)
    }

    /// 95% Wald intervals, one `(low, high)` per coefficient.
    #[getter]
    fn intervals(&self) -> Vec<(f64, f64)> {
        self.inner.wald_intervals()
    }

    #[getter]
    fn sigma2(&self) -> BTreeMap<String, f64> {
        self.inner
            .variance_components
            .sigma2
            .iter()
            .map(|(k, v)| (k.name().to_string(), *v))
            .collect()
    }

    #[getter]
    fn random_effects(&self) -> BTreeMap<String, Vec<f64>> {
        self.inner
            .random_effects
            .iter()
            .map(|(k, v)| (k.name().to_string(), vec_of(v)))
            .collect()
    }

    #[getter]
    fn fitted_mu(&self) -> Vec<f64> {
        vec_of(&self.inner.fitted_mu)
    }

    #[getter]
    fn linear_predictor(&self) -> Vec<f64> {
        vec_of(&self.inner.linear_predictor)
    }

    #[getter]
    fn working_weights(&self) -> Vec<f64> {
        vec_of(&self.inner.working_weights)
    }

    #[getter]
    fn deviance(&self) -> f64 {
        self.inner.deviance
    }

    #[getter]
    fn effective_df(&self) -> f64 {
        self.inner.effective_df
    }

    #[getter]
    fn aic(&self) -> f64 {
        self.inner.aic()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Writes fit.json, coefficients.csv, random_effects.csv and risks.csv.
    fn save(&self, directory: &str) -> PyResult<()> {
        let areas = default_ids(self.inner.n_areas);
        let times = default_ids(self.inner.n_periods);
        serialize_fit(&self.inner, directory, &areas, &times).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "FitResult(model={}, converged={}, deviance={:.3}, effective_df={:.3})",
            self.inner.variant, self.inner.converged, self.inner.deviance, self.inner.effective_df
        )
    }
}

/// Fits `model` ("st1"…"st4") to `data` on `graph`. ST3/ST4 need the ST2 fit
/// as `reference` (its weights are frozen and its σ² used as a warm start).
#[pyfunction]
#[pyo3(signature = (graph, data, model="st2", reference=None, restrict=None, tol=1e-5, max_outer=100, max_inner=50))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    graph: &PySpatialGraph,
    data: &PyDataset,
    model: &str,
    reference: Option<&PyFitResult>,
    restrict: Option<&str>,
    tol: f64,
    max_outer: usize,
    max_inner: usize,
) -> PyResult<PyFitResult> {
    let variant: Variant = model.parse().map_err(to_py)?;
    let mut spec = ModelSpec::new(variant);
    if let Some(r) = restrict {
        spec.restrict_blocks = parse_blocks(r).map_err(to_py)?;
    }
    let opts = FitOptions {
        tol,
        max_outer,
        max_inner,
        ..FitOptions::default()
    };
    let (g, d) = (graph.inner.clone(), data.inner.clone());
    let reference = reference.map(|r| r.inner.clone());
    let result = py.detach(move || -> stconfound::Result<stconfound::FitResult> {
        let structures = stconfound::Structures::new(&g, d.n_periods)?;
        Ok(fit_model(&spec, &d, &structures, &opts, reference.as_ref())?.1)
    });
    Ok(PyFitResult {
        inner: result.map_err(to_py)?,
    })
}

/// Fits the requested models (ST2 first when ST3/ST4 need it) and returns
/// one `{model, deviance, effective_df, aic, wall_time_seconds}` dict each.
#[pyfunction]
#[pyo3(signature = (graph, data, models=vec!["st1".to_string(), "st2".into(), "st3".into(), "st4".into()], tol=1e-5))]
fn compare(
    py: Python<'_>,
    graph: &PySpatialGraph,
    data: &PyDataset,
    models: Vec<String>,
    tol: f64,
) -> PyResult<Vec<BTreeMap<String, Py<PyAny>>>> {
    let mut variants: Vec<Variant> = models.iter().map(|m| m.parse()).collect::<Result<_, _>>().map_err(to_py)?;
    variants.sort();
    variants.dedup();
    let (g, d) = (graph.inner.clone(), data.inner.clone());
    let opts = FitOptions { tol, ..FitOptions::default() };
    let cmp = py
        .detach(move || -> stconfound::Result<ModelComparison> {
            let st = stconfound::Structures::new(&g, d.n_periods)?;
            let mut cmp = ModelComparison::default();
            let mut st2: Option<(stconfound::FitResult, f64)> = None;
            for v in variants {
                let t0 = std::time::Instant::now();
                let reference = if v.needs_weights() {
                    if st2.is_none() {
                        let t = std::time::Instant::now();
                        let f = fit_model(&ModelSpec::new(Variant::St2), &d, &st, &opts, None)?.1;
                        st2 = Some((f, t.elapsed().as_secs_f64()));
                    }
                    st2.as_ref().map(|(f, _)| f)
                } else {
                    None
                };
                let f = fit_model(&ModelSpec::new(v), &d, &st, &opts, reference)?.1;
                let mut secs = t0.elapsed().as_secs_f64();
                if v.needs_weights() {
                    secs += st2.as_ref().map_or(0.0, |(_, t)| *t);
                }
                if v == Variant::St2 {
                    st2 = Some((f.clone(), secs));
                }
                cmp.push(v.name(), &f, secs);
            }
            Ok(cmp)
        })
        .map_err(to_py)?;
    cmp.records
        .iter()
        .map(|r| {
            let mut row = BTreeMap::new();
            row.insert("model".to_string(), r.label.clone().into_pyobject(py)?.into_any().unbind());
            row.insert("deviance".into(), r.deviance.into_pyobject(py)?.into_any().unbind());
            row.insert("effective_df".into(), r.effective_df.into_pyobject(py)?.into_any().unbind());
            row.insert("aic".into(), r.aic.into_pyobject(py)?.into_any().unbind());
            row.insert("wall_time_seconds".into(), r.wall_time_seconds.into_pyobject(py)?.into_any().unbind());
            Ok(row)
        })
        .collect()
}

/// Generates a synthetic dataset. `scenario` is `key = value` text (empty for
/// the default 5×4 lattice, T = 10 scenario). Returns `(graph, data, truth_json)`.
#[pyfunction]
#[pyo3(signature = (scenario="", seed=None))]
fn simulate(scenario: &str, seed: Option<u64>) -> PyResult<(PySpatialGraph, PyDataset, String)> {
    let mut sc: Scenario = scenario.parse().map_err(to_py)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let (data, truth) = generate(&sc).map_err(to_py)?;
    let graph = sc.grid.graph().map_err(to_py)?;
    let truth = serde_json::to_string(&truth).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((PySpatialGraph { inner: graph }, PyDataset { inner: data }, truth))
}

#[pyfunction]
fn poisson_deviance(observed: Vec<f64>, mu: Vec<f64>) -> PyResult<f64> {
    deviance_impl(&DVector::from_vec(observed), &DVector::from_vec(mu)).map_err(to_py)
}

/// Per-covariate correlations with the smallest-non-null spatial eigenvector
/// (one per period) and temporal eigenvector (one per area); `None` where a
/// slice is constant.
#[pyfunction]
fn correlations(
    graph: &PySpatialGraph,
    data: &PyDataset,
) -> PyResult<BTreeMap<String, (Vec<Option<f64>>, Vec<Option<f64>>)>> {
    let st = stconfound::Structures::new(&graph.inner, data.inner.n_periods).map_err(to_py)?;
    let c = confounding_correlations(&data.inner, &st.spatial, st.temporal.as_ref()).map_err(to_py)?;
    Ok(c.covariate_names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let temporal = c.temporal.get(j).cloned().unwrap_or_default();
            (name.clone(), (c.spatial[j].clone(), temporal))
        })
        .collect())
}

/// `L(LᵀQL)⁻¹Lᵀ` with `L` spanning the null space of the constraint rows `b`.
#[pyfunction]
fn constrained_covariance(q: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let q = matrix_from_rows(&q, "q")?;
    let b = if b.is_empty() { DMatrix::zeros(0, q.ncols()) } else { matrix_from_rows(&b, "b")? };
    Ok(rows_of(&constrained_impl(&q, &b).map_err(to_py)?.covariance))
}

/// `Q⁻ − Q⁻Bᵀ(BQ⁻Bᵀ)⁻¹BQ⁻` with the Moore–Penrose inverse of `q`.
#[pyfunction]
fn kriging_covariance(q: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let q = matrix_from_rows(&q, "q")?;
    let b = if b.is_empty() { DMatrix::zeros(0, q.ncols()) } else { matrix_from_rows(&b, "b")? };
    Ok(rows_of(&kriging_impl(&q, &b).map_err(to_py)?))
}

#[pymodule]
fn stconfound_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpatialGraph>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(poisson_deviance, m)?)?;
    m.add_function(wrap_pyfunction!(correlations, m)?)?;
    m.add_function(wrap_pyfunction!(constrained_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(kriging_covariance, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
