//! Deviance, effective degrees of freedom, model comparison, confounding
//! correlations and multiplicative pattern decomposition.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::model::{BlockLabel, Dataset, DesignBundle};
use crate::pql::{df_from_projection, FitResult};
use crate::structures::PrecisionSpectrum;

/// `2·Σ[O·log(O/μ) − (O − μ)]`, with `O = 0` cells contributing `2μ`.
pub fn poisson_deviance(observed: &DVector<f64>, mu: &DVector<f64>) -> Result<f64> {
    if observed.len() != mu.len() {
        return Err(Error::InvalidDimension(format!(
            "{} counts but {} fitted means",
            observed.len(),
            mu.len()
        )));
    }
    if let Some(i) = mu.iter().position(|m| !(*m > 0.0)) {
        return Err(Error::InvalidData(format!("fitted mean at cell {} is not positive", i + 1)));
    }
    let d: f64 = observed
        .iter()
        .zip(mu.iter())
        .map(|(&o, &m)| if o > 0.0 { o * (o / m).ln() - (o - m) } else { m })
        .sum();
    Ok((2.0 * d).max(0.0))
}

/// Trace of the working-model hat matrix at the fit's weights and σ².
pub fn effective_df(fit: &FitResult, bundle: &DesignBundle) -> Result<f64> {
    let labels = bundle.labels();
    let sigma2 = fit.variance_components.ordered(&labels)?;
    let w = &fit.working_weights;
    let mut v = DMatrix::from_diagonal(&w.map(|x| 1.0 / x));
    for (b, s) in bundle.blocks.iter().zip(&sigma2) {
        v += b.marginal_kernel() * *s;
    }
    let vinv = spd_inverse(&v, "V")?;
    let x = &bundle.x_star;
    let vx = &vinv * x;
    let a_inv = spd_inverse(&(x.transpose() * &vx), "X*ᵀV⁻¹X*")?;
    let p = &vinv - &vx * a_inv * vx.transpose();
    Ok(df_from_projection(&p, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub label: String,
    pub deviance: f64,
    pub effective_df: f64,
    pub aic: f64,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub records: Vec<ComparisonRecord>,
}

impl ModelComparison {
    pub fn push(&mut self, label: impl Into<String>, fit: &FitResult, wall_time_seconds: f64) {
        self.records.push(ComparisonRecord {
            label: label.into(),
            deviance: fit.deviance,
            effective_df: fit.effective_df,
            aic: fit.aic(),
            wall_time_seconds,
        });
    }

    pub fn get(&self, label: &str) -> Option<&ComparisonRecord> {
        self.records.iter().find(|r| r.label == label)
    }

    pub fn best_by_aic(&self) -> Option<&ComparisonRecord> {
        self.records.iter().min_by(|a, b| a.aic.total_cmp(&b.aic))
    }
}

/// Pearson correlation, `None` when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    let scale_a = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let scale_b = b.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if saa.sqrt() <= 1e-12 * scale_a * n.sqrt() || sbb.sqrt() <= 1e-12 * scale_b * n.sqrt() {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Correlations of each covariate with the smallest-non-null-eigenvalue
/// spatial eigenvector (one per period) and temporal eigenvector (one per
/// area). `None` marks a constant slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDiagnostic {
    pub covariate_names: Vec<String>,
    /// `[covariate][period]`
    pub spatial: Vec<Vec<Option<f64>>>,
    /// `[covariate][area]`; empty when T = 1.
    pub temporal: Vec<Vec<Option<f64>>>,
}

pub fn confounding_correlations(
    data: &Dataset,
    spatial: &PrecisionSpectrum,
    temporal: Option<&PrecisionSpectrum>,
) -> Result<CorrelationDiagnostic> {
    let (s, t) = (data.n_areas, data.n_periods);
    if spatial.dim() != s {
        return Err(Error::InvalidDimension(format!(
            "spatial spectrum has dimension {} but data has {s} areas",
            spatial.dim()
        )));
    }
    if let Some(tp) = temporal {
        if tp.dim() != t {
            return Err(Error::InvalidDimension(format!(
                "temporal spectrum has dimension {} but data has {t} periods",
                tp.dim()
            )));
        }
    }
    let u_s = spatial
        .smallest_range_eigenvector()
        .ok_or_else(|| Error::InvalidDimension("spatial precision has no range space".into()))?;
    let u_t = temporal.and_then(|tp| tp.smallest_range_eigenvector());

    let mut out = CorrelationDiagnostic {
        covariate_names: data.covariate_names.clone(),
        spatial: Vec::new(),
        temporal: Vec::new(),
    };
    for j in 0..data.n_covariates() {
        let col = data.covariates.column(j);
        let per_period = (0..t)
            .map(|tt| {
                let slice: Vec<f64> = (0..s).map(|i| col[tt * s + i]).collect();
                pearson(&slice, u_s.as_slice())
            })
            .collect();
        out.spatial.push(per_period);
        if let Some(u_t) = &u_t {
            let per_area = (0..s)
                .map(|i| {
                    let slice: Vec<f64> = (0..t).map(|tt| col[tt * s + i]).collect();
                    pearson(&slice, u_t.as_slice())
                })
                .collect();
            out.temporal.push(per_area);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    Area,
    Period,
    Cell,
}

/// Exponentiated block contribution at its natural resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub resolution: Resolution,
    #[serde(with = "crate::linalg::flat::vector")]
    pub values: DVector<f64>,
}

impl Pattern {
    pub fn at(&self, area: usize, period: usize, n_areas: usize) -> f64 {
        match self.resolution {
            Resolution::Area => self.values[area],
            Resolution::Period => self.values[period],
            Resolution::Cell => self.values[period * n_areas + area],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDecomposition {
    pub n_areas: usize,
    pub n_periods: usize,
    pub spatial: Option<Pattern>,
    pub temporal: Option<Pattern>,
    pub interaction: Option<Pattern>,
    /// `exp(η)`, so that `risks·e = μ`.
    #[serde(with = "crate::linalg::flat::vector")]
    pub risks: DVector<f64>,
}

/// Splits the fitted relative risk into multiplicative spatial, temporal and
/// interaction components. Unrestricted main effects are reported per area or
/// per period; restricted (ST3) blocks vary over both and are reported per cell.
pub fn decompose_patterns(fit: &FitResult, bundle: &DesignBundle) -> Result<PatternDecomposition> {
    if fit.variant != bundle.variant || fit.linear_predictor.len() != bundle.n_cells() {
        return Err(Error::InvalidDimension(format!(
            "{} fit does not match the {} design",
            fit.variant, bundle.variant
        )));
    }
    let mut out = PatternDecomposition {
        n_areas: fit.n_areas,
        n_periods: fit.n_periods,
        spatial: None,
        temporal: None,
        interaction: None,
        risks: fit.linear_predictor.map(f64::exp),
    };
    for block in &bundle.blocks {
        let natural = match block.label {
            BlockLabel::Spatial => Resolution::Area,
            BlockLabel::Temporal => Resolution::Period,
            BlockLabel::Interaction => Resolution::Cell,
        };
        let pattern = if block.restricted || natural == Resolution::Cell {
            let c = fit.contributions.get(&block.label).ok_or_else(|| {
                Error::LabelMismatch(format!("fit has no {} contribution", block.label))
            })?;
            Pattern {
                resolution: Resolution::Cell,
                values: c.map(f64::exp),
            }
        } else {
            let e = fit.random_effects.get(&block.label).ok_or_else(|| {
                Error::LabelMismatch(format!("fit has no {} effect", block.label))
            })?;
            Pattern {
                resolution: natural,
                values: e.map(f64::exp),
            }
        };
        match block.label {
            BlockLabel::Spatial => out.spatial = Some(pattern),
            BlockLabel::Temporal => out.temporal = Some(pattern),
            BlockLabel::Interaction => out.interaction = Some(pattern),
        }
    }
    Ok(out)
}
