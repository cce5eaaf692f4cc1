//! Synthetic spatio-temporal count data with known fixed effects and
//! controllable spatial confounding, plus a parallel replicate study.
//!
//! Randomness comes from ChaCha20 seeded by `Scenario::seed`; replicate `r`
//! uses stream `r`, so results do not depend on thread scheduling.

use std::collections::BTreeMap;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, ones};
use crate::model::{standardize_covariates, BlockLabel, Dataset, ModelSpec, Variant};
use crate::pql::{fit_model, FitOptions, FitResult};
use crate::structures::{PrecisionSpectrum, SpatialGraph, Structures};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Grid {
    Lattice { rows: usize, cols: usize },
    Graph(SpatialGraph),
}

impl Grid {
    pub fn graph(&self) -> Result<SpatialGraph> {
        match self {
            Grid::Lattice { rows, cols } => SpatialGraph::lattice(*rows, *cols),
            Grid::Graph(g) => Ok(g.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Baseline {
    Constant(f64),
    PerCell(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub grid: Grid,
    pub n_periods: usize,
    pub intercept: f64,
    /// Slopes only, one per covariate.
    pub beta: Vec<f64>,
    pub sigma2: BTreeMap<BlockLabel, f64>,
    /// Target correlation of each covariate with the smallest-non-null
    /// spatial eigenvector, per period.
    pub confounding_rho: Vec<f64>,
    pub baseline_expected: Baseline,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self::desk()
    }
}

impl Scenario {
    /// 5×4 lattice, T = 10, β = (−0.25, 0.10), 50 expected cases per cell,
    /// variance components of the size seen in the application, no confounding.
    pub fn desk() -> Self {
        Self {
            grid: Grid::Lattice { rows: 5, cols: 4 },
            n_periods: 10,
            intercept: 0.0,
            beta: vec![-0.25, 0.10],
            sigma2: BTreeMap::from([
                (BlockLabel::Spatial, 0.2),
                (BlockLabel::Temporal, 0.013),
                (BlockLabel::Interaction, 0.02),
            ]),
            confounding_rho: vec![0.0, 0.0],
            baseline_expected: Baseline::Constant(50.0),
            seed: 20240917,
        }
    }

    /// The desk scenario with the first covariate at ρ = 0.9.
    pub fn confounded() -> Self {
        Self {
            confounding_rho: vec![0.9, 0.0],
            ..Self::desk()
        }
    }

    pub fn n_covariates(&self) -> usize {
        self.beta.len()
    }

    pub fn sigma2_of(&self, label: BlockLabel) -> f64 {
        self.sigma2.get(&label).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_periods == 0 {
            return Err(Error::Config("scenario needs at least one period".into()));
        }
        if self.confounding_rho.len() != self.beta.len() {
            return Err(Error::Config(format!(
                "{} confounding correlations for {} coefficients",
                self.confounding_rho.len(),
                self.beta.len()
            )));
        }
        if let Some(r) = self.confounding_rho.iter().find(|r| !(r.abs() <= 1.0)) {
            return Err(Error::Config(format!("confounding correlation {r} outside [-1, 1]")));
        }
        if let Some((l, v)) = self.sigma2.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("σ² for the {l} block must be non-negative, got {v}")));
        }
        if self.beta.iter().chain([&self.intercept]).any(|b| !b.is_finite()) {
            return Err(Error::Config("coefficients must be finite".into()));
        }
        match &self.baseline_expected {
            Baseline::Constant(e) if !(*e > 0.0 && e.is_finite()) => {
                Err(Error::Config(format!("baseline expected count must be positive, got {e}")))
            }
            Baseline::PerCell(v) if v.iter().any(|e| !(*e > 0.0 && e.is_finite())) => {
                Err(Error::Config("baseline expected counts must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    fn expected(&self, n: usize) -> Result<DVector<f64>> {
        match &self.baseline_expected {
            Baseline::Constant(e) => Ok(DVector::from_element(n, *e)),
            Baseline::PerCell(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            Baseline::PerCell(v) => Err(Error::Config(format!(
                "{} per-cell baseline values for {n} cells",
                v.len()
            ))),
        }
    }
}

/// Parses `key = value` lines (`#` comments) on top of the desk defaults.
///
/// Keys: `rows`, `cols`, `periods`, `intercept`, `beta`, `rho`,
/// `sigma2_spatial`, `sigma2_temporal`, `sigma2_interaction`, `baseline`,
/// `seed`. List values are comma separated.
impl FromStr for Scenario {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut sc = Scenario::desk();
        let (mut rows, mut cols) = match sc.grid {
            Grid::Lattice { rows, cols } => (rows, cols),
            Grid::Graph(_) => unreachable!(),
        };
        let mut rho_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Parse(format!("line {}: invalid {what} '{value}'", lineno + 1));
            let num = || value.parse::<f64>().map_err(|_| bad(key));
            let int = || value.parse::<usize>().map_err(|_| bad(key));
            let list = || -> Result<Vec<f64>> {
                value
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().map_err(|_| bad(key)))
                    .collect()
            };
            match key {
                "rows" => rows = int()?,
                "cols" => cols = int()?,
                "periods" => sc.n_periods = int()?,
                "intercept" => sc.intercept = num()?,
                "beta" => sc.beta = list()?,
                "rho" => {
                    sc.confounding_rho = list()?;
                    rho_set = true;
                }
                "sigma2_spatial" => {
                    sc.sigma2.insert(BlockLabel::Spatial, num()?);
                }
                "sigma2_temporal" => {
                    sc.sigma2.insert(BlockLabel::Temporal, num()?);
                }
                "sigma2_interaction" => {
                    sc.sigma2.insert(BlockLabel::Interaction, num()?);
                }
                "baseline" => sc.baseline_expected = Baseline::Constant(num()?),
                "seed" => sc.seed = value.parse().map_err(|_| bad(key))?,
                other => {
                    return Err(Error::Parse(format!("line {}: unknown key '{other}'", lineno + 1)))
                }
            }
        }
        if !rho_set && sc.confounding_rho.len() != sc.beta.len() {
            sc.confounding_rho = vec![0.0; sc.beta.len()];
        }
        sc.grid = Grid::Lattice { rows, cols };
        sc.validate()?;
        Ok(sc)
    }
}

/// Everything drawn while generating one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    /// `[intercept, slopes…]`.
    pub beta: Vec<f64>,
    pub sigma2: BTreeMap<BlockLabel, f64>,
    #[serde(with = "crate::linalg::flat::vector")]
    pub spatial: DVector<f64>,
    #[serde(with = "crate::linalg::flat::vector")]
    pub temporal: DVector<f64>,
    #[serde(with = "crate::linalg::flat::vector")]
    pub interaction: DVector<f64>,
    /// Excludes the offset.
    #[serde(with = "crate::linalg::flat::vector")]
    pub linear_predictor: DVector<f64>,
    pub replicate: u64,
}

fn rng_for(seed: u64, replicate: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

fn normals(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Draws `U_r diag(√(σ²/λ)) z`, an intrinsic-prior draw on the range space.
fn intrinsic_draw(rng: &mut ChaCha20Rng, spectrum: &PrecisionSpectrum, sigma2: f64) -> DVector<f64> {
    let z = normals(rng, spectrum.range_dim());
    if sigma2 == 0.0 {
        return DVector::zeros(spectrum.dim());
    }
    let coef = DVector::from_fn(z.len(), |i, _| z[i] * (sigma2 / spectrum.range_eigenvalues[i]).sqrt());
    &spectrum.range_basis * coef
}

/// Covariate slice with per-slice correlation exactly `rho` with `u`:
/// `ρ·√S·u + √(1−ρ²)·n`, where `n` is Gaussian noise orthogonalized against
/// 1 and `u` and rescaled to norm √S.
fn confounded_slice(rng: &mut ChaCha20Rng, u: &DVector<f64>, rho: f64) -> Result<DVector<f64>> {
    let s = u.len();
    let root_s = (s as f64).sqrt();
    let mut out = u * (rho * root_s);
    if rho.abs() < 1.0 {
        let one = DVector::from_element(s, 1.0 / root_s);
        let mut noise = normals(rng, s);
        for _ in 0..2 {
            noise -= &one * one.dot(&noise);
            noise -= u * u.dot(&noise);
        }
        let norm = noise.norm();
        if !(norm > 1e-8) {
            return Err(Error::Config(format!(
                "cannot build a covariate with correlation {rho} on {s} areas"
            )));
        }
        out += noise * ((1.0 - rho * rho).sqrt() * root_s / norm);
    }
    Ok(out)
}

/// Generates replicate `replicate` of `scenario` on precomputed structures.
pub fn generate_with(
    scenario: &Scenario,
    structures: &Structures,
    replicate: u64,
) -> Result<(Dataset, TruthRecord)> {
    scenario.validate()?;
    let s = structures.n_areas();
    let t = scenario.n_periods;
    if structures.n_periods() != t {
        return Err(Error::InvalidDimension(format!(
            "structures have T={} but the scenario has T={t}",
            structures.n_periods()
        )));
    }
    let n = s * t;
    let p = scenario.n_covariates();
    let mut rng = rng_for(scenario.seed, replicate);

    let u = structures
        .spatial
        .smallest_range_eigenvector()
        .ok_or_else(|| Error::Config("the spatial graph needs at least two areas".into()))?;
    let mut raw = DMatrix::zeros(n, p);
    for (j, &rho) in scenario.confounding_rho.iter().enumerate() {
        for tt in 0..t {
            let slice = confounded_slice(&mut rng, &u, rho)?;
            raw.view_mut((tt * s, j), (s, 1)).copy_from(&slice);
        }
    }
    let covariates = if p > 0 {
        standardize_covariates(&raw)?.0
    } else {
        raw
    };

    let spatial = intrinsic_draw(&mut rng, &structures.spatial, scenario.sigma2_of(BlockLabel::Spatial));
    let (temporal, interaction) = match (&structures.temporal, &structures.interaction) {
        (Some(tp), Some(ip)) => (
            intrinsic_draw(&mut rng, tp, scenario.sigma2_of(BlockLabel::Temporal)),
            intrinsic_draw(&mut rng, ip, scenario.sigma2_of(BlockLabel::Interaction)),
        ),
        _ => (DVector::zeros(t), DVector::zeros(n)),
    };

    let beta = DVector::from_column_slice(&scenario.beta);
    let mut eta = &covariates * &beta;
    eta.add_scalar_mut(scenario.intercept);
    eta += kron(&ones(t), &DMatrix::from_column_slice(s, 1, spatial.as_slice())).column(0);
    eta += kron(&DMatrix::from_column_slice(t, 1, temporal.as_slice()), &ones(s)).column(0);
    eta += &interaction;

    let expected = scenario.expected(n)?;
    let mut observed = DVector::zeros(n);
    for i in 0..n {
        let mean = expected[i] * eta[i].exp();
        observed[i] = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| Error::Config(format!("Poisson mean {mean}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
    }

    let names = (1..=p).map(|j| format!("x{j}")).collect();
    let data = Dataset::new(s, t, observed, expected, covariates, names)?;
    let mut full_beta = vec![scenario.intercept];
    full_beta.extend_from_slice(&scenario.beta);
    let truth = TruthRecord {
        beta: full_beta,
        sigma2: scenario.sigma2.clone(),
        spatial,
        temporal,
        interaction,
        linear_predictor: eta,
        replicate,
    };
    Ok((data, truth))
}

/// Replicate 0 of `scenario`.
pub fn generate(scenario: &Scenario) -> Result<(Dataset, TruthRecord)> {
    scenario.validate()?;
    let structures = Structures::new(&scenario.grid.graph()?, scenario.n_periods)?;
    generate_with(scenario, &structures, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFit {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub deviance: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: u64,
    /// Per model name; `None` when the fit failed.
    pub fits: BTreeMap<String, Option<ReplicateFit>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub model: String,
    pub coefficient: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub mean_abs_estimate: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    /// Share of 95% Wald intervals containing the truth.
    pub coverage: f64,
    pub n_used: usize,
}

impl CoefficientSummary {
    /// Monte Carlo standard error of `mean_estimate`.
    pub fn mc_se(&self) -> f64 {
        self.empirical_sd / (self.n_used as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub n_reps: usize,
    pub summaries: Vec<CoefficientSummary>,
    /// Replicates excluded per model (failed or not converged).
    pub excluded: BTreeMap<String, usize>,
    pub replicates: Vec<ReplicateOutcome>,
}

impl StudyReport {
    pub fn summary(&self, model: &str, coefficient: &str) -> Option<&CoefficientSummary> {
        self.summaries
            .iter()
            .find(|s| s.model == model && s.coefficient == coefficient)
    }
}

fn model_name(spec: &ModelSpec) -> String {
    spec.variant.name().to_string()
}

fn run_replicate(
    scenario: &Scenario,
    structures: &Structures,
    models: &[ModelSpec],
    opts: &FitOptions,
    r: u64,
) -> Result<ReplicateOutcome> {
    let (data, _) = generate_with(scenario, structures, r)?;
    let needs_st2 = models.iter().any(|m| m.variant.needs_weights());
    let mut st2: Option<FitResult> = None;
    let mut fits = BTreeMap::new();
    let summarize = |f: &FitResult| ReplicateFit {
        beta: f.beta.iter().copied().collect(),
        se: f.beta_se().iter().copied().collect(),
        deviance: f.deviance,
        converged: f.converged,
    };
    if needs_st2 || models.iter().any(|m| m.variant == Variant::St2) {
        let spec = models
            .iter()
            .find(|m| m.variant == Variant::St2)
            .cloned()
            .unwrap_or_else(|| ModelSpec::new(Variant::St2));
        let res = fit_model(&spec, &data, structures, opts, None).map(|(_, f)| f).ok();
        if models.iter().any(|m| m.variant == Variant::St2) {
            fits.insert(model_name(&spec), res.as_ref().map(summarize));
        }
        st2 = res;
    }
    for spec in models.iter().filter(|m| m.variant != Variant::St2) {
        let res = fit_model(spec, &data, structures, opts, st2.as_ref())
            .map(|(_, f)| summarize(&f))
            .ok();
        fits.insert(model_name(spec), res);
    }
    Ok(ReplicateOutcome { replicate: r, fits })
}

/// Fits every model to `n_reps` independent replicates (in parallel) and
/// summarizes bias, spread, reported SE and Wald coverage per coefficient.
pub fn replicate_study(
    scenario: &Scenario,
    n_reps: usize,
    models: &[ModelSpec],
    opts: &FitOptions,
) -> Result<StudyReport> {
    if n_reps == 0 {
        return Err(Error::Config("a study needs at least one replicate".into()));
    }
    if models.is_empty() {
        return Err(Error::Config("a study needs at least one model".into()));
    }
    scenario.validate()?;
    let structures = Structures::new(&scenario.grid.graph()?, scenario.n_periods)?;
    let replicates: Vec<ReplicateOutcome> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| run_replicate(scenario, &structures, models, opts, r))
        .collect::<Result<_>>()?;

    let mut truth = vec![scenario.intercept];
    truth.extend_from_slice(&scenario.beta);
    let mut coef_names = vec!["(Intercept)".to_string()];
    coef_names.extend((1..=scenario.n_covariates()).map(|j| format!("x{j}")));

    let mut summaries = Vec::new();
    let mut excluded = BTreeMap::new();
    for spec in models {
        let name = model_name(spec);
        let used: Vec<&ReplicateFit> = replicates
            .iter()
            .filter_map(|r| r.fits.get(&name).and_then(|f| f.as_ref()))
            .filter(|f| f.converged)
            .collect();
        excluded.insert(name.clone(), n_reps - used.len());
        if used.is_empty() {
            continue;
        }
        let m = used.len() as f64;
        for (j, coef) in coef_names.iter().enumerate() {
            let est: Vec<f64> = used.iter().map(|f| f.beta[j]).collect();
            let mean = est.iter().sum::<f64>() / m;
            let sd = if used.len() > 1 {
                (est.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                0.0
            };
            let covered = used
                .iter()
                .filter(|f| (f.beta[j] - truth[j]).abs() <= crate::Z_975 * f.se[j])
                .count();
            summaries.push(CoefficientSummary {
                model: name.clone(),
                coefficient: coef.clone(),
                truth: truth[j],
                mean_estimate: mean,
                mean_abs_estimate: est.iter().map(|b| b.abs()).sum::<f64>() / m,
                empirical_sd: sd,
                mean_se: used.iter().map(|f| f.se[j]).sum::<f64>() / m,
                coverage: covered as f64 / m,
                n_used: used.len(),
            });
        }
    }
    Ok(StudyReport {
        scenario: scenario.clone(),
        n_reps,
        summaries,
        excluded,
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::confounding_correlations;

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let sc = Scenario::confounded();
        let (a, ta) = generate(&sc).unwrap();
        let (b, tb) = generate(&sc).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let st = Structures::new(&sc.grid.graph().unwrap(), sc.n_periods).unwrap();
        let (c, _) = generate_with(&sc, &st, 1).unwrap();
        assert_ne!(a.observed, c.observed);
    }

    #[test]
    fn confounding_correlation_is_exact() {
        let sc = Scenario {
            sigma2: BTreeMap::from([(BlockLabel::Spatial, 2.0)]),
            ..Scenario::confounded()
        };
        let (data, _) = generate(&sc).unwrap();
        let st = Structures::new(&sc.grid.graph().unwrap(), sc.n_periods).unwrap();
        let c = confounding_correlations(&data, &st.spatial, st.temporal.as_ref()).unwrap();
        for v in &c.spatial[0] {
            assert!((v.unwrap() - 0.9).abs() < 1e-10);
        }
        for v in &c.spatial[1] {
            assert!(v.unwrap().abs() < 1e-10);
        }
    }

    #[test]
    fn latent_draws_satisfy_sum_to_zero() {
        let (data, truth) = generate(&Scenario::desk()).unwrap();
        assert!(truth.spatial.sum().abs() < 1e-10);
        assert!(truth.temporal.sum().abs() < 1e-10);
        let (s, t) = (data.n_areas, data.n_periods);
        for i in 0..s {
            let row: f64 = (0..t).map(|tt| truth.interaction[tt * s + i]).sum();
            assert!(row.abs() < 1e-10);
        }
        for tt in 0..t {
            let col: f64 = (0..s).map(|i| truth.interaction[tt * s + i]).sum();
            assert!(col.abs() < 1e-10);
        }
    }

    #[test]
    fn generated_covariates_are_already_standardized() {
        let (data, _) = generate(&Scenario::confounded()).unwrap();
        let (again, _) = standardize_covariates(&data.covariates).unwrap();
        assert!((again - &data.covariates).amax() < 1e-12);
    }

    #[test]
    fn scenario_file_parsing() {
        let sc: Scenario = "# test\nrows = 3\ncols = 3\nperiods = 4\nbeta = 0.5\nrho = 0.7\nsigma2_spatial = 0\nseed = 9\n"
            .parse()
            .unwrap();
        assert_eq!(sc.grid, Grid::Lattice { rows: 3, cols: 3 });
        assert_eq!(sc.n_periods, 4);
        assert_eq!(sc.beta, vec![0.5]);
        assert_eq!(sc.confounding_rho, vec![0.7]);
        assert_eq!(sc.sigma2_of(BlockLabel::Spatial), 0.0);
        assert_eq!(sc.seed, 9);
        assert!("rho = 1.5, 0".parse::<Scenario>().is_err());
        assert!("colour = red".parse::<Scenario>().is_err());
        assert!("beta = 0.1\nrho = 0.2, 0.3".parse::<Scenario>().is_err());
    }
}
