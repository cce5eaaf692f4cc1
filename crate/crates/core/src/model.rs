//! Datasets, covariate standardization and design assembly for the model
//! roster ST1–ST4.
//!
//! All per-cell vectors use the area-fastest layout: cell `(area i, period t)`
//! sits at row `t·S + i`, matching the `(1_T ⊗ I_S)` / `(I_T ⊗ 1_S)` Kronecker
//! ordering of the random-effect designs.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, ones};
use crate::projections::{
    constrained_covariance, constraint_matrices_with, weighted_projector, with_intercept,
    ConstraintSet, RedundantRow,
};
use crate::structures::Structures;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dataset {
    pub n_areas: usize,
    pub n_periods: usize,
    pub observed: DVector<f64>,
    pub expected: DVector<f64>,
    pub population: Option<DVector<f64>>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        n_areas: usize,
        n_periods: usize,
        observed: DVector<f64>,
        expected: DVector<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = n_areas * n_periods;
        if n == 0 {
            return Err(Error::InvalidDimension("dataset needs at least one area and one period".into()));
        }
        if observed.len() != n || expected.len() != n || covariates.nrows() != n {
            return Err(Error::InvalidDimension(format!(
                "S={n_areas}, T={n_periods} needs {n} cells; got {} counts, {} expected, {} covariate rows",
                observed.len(),
                expected.len(),
                covariates.nrows()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::InvalidDimension(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        for (k, &o) in observed.iter().enumerate() {
            if !(o >= 0.0 && o.fract() == 0.0 && o.is_finite()) {
                let (i, t) = (k % n_areas, k / n_areas);
                return Err(Error::InvalidData(format!(
                    "observed count {o} at area {}, time {} is not a non-negative integer",
                    i + 1,
                    t + 1
                )));
            }
        }
        for (k, &e) in expected.iter().enumerate() {
            if !(e > 0.0 && e.is_finite()) {
                let (i, t) = (k % n_areas, k / n_areas);
                return Err(Error::InvalidData(format!(
                    "expected count {e} at area {}, time {} is not positive",
                    i + 1,
                    t + 1
                )));
            }
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("covariates contain non-finite values".into()));
        }
        Ok(Self {
            n_areas,
            n_periods,
            observed,
            expected,
            population: None,
            covariates,
            covariate_names,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.n_areas * self.n_periods
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// Row of cell `(area, period)`, both 0-based.
    pub fn index(&self, area: usize, period: usize) -> usize {
        period * self.n_areas + area
    }

    /// Copy with standardized covariates and the record needed to undo it.
    pub fn standardized(&self) -> Result<(Dataset, Standardization)> {
        let (x, record) = standardize_covariates(&self.covariates)?;
        let mut out = self.clone();
        out.covariates = x;
        Ok((out, record.with_names(self.covariate_names.clone())))
    }

    /// Relabels areas: old area `i` becomes `perm[i]` in every period.
    pub fn permute_areas(&self, perm: &[usize]) -> Dataset {
        let s = self.n_areas;
        let n = self.n_cells();
        let mut dest = vec![0; n];
        for t in 0..self.n_periods {
            for i in 0..s {
                dest[t * s + i] = t * s + perm[i];
            }
        }
        let mut observed = DVector::zeros(n);
        let mut expected = DVector::zeros(n);
        let mut covariates = DMatrix::zeros(n, self.n_covariates());
        for k in 0..n {
            observed[dest[k]] = self.observed[k];
            expected[dest[k]] = self.expected[k];
            covariates.set_row(dest[k], &self.covariates.row(k));
        }
        let population = self.population.as_ref().map(|p| {
            let mut out = DVector::zeros(n);
            for k in 0..n {
                out[dest[k]] = p[k];
            }
            out
        });
        Dataset {
            observed,
            expected,
            population,
            covariates,
            ..self.clone()
        }
    }
}

/// Per-column centring and scaling applied to the covariates.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Standardization {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// Variance divisor used for the scales.
    pub convention: String,
}

impl Standardization {
    fn with_names(mut self, names: Vec<String>) -> Self {
        self.names = names;
        self
    }

    /// `[β₀, β₁…β_p]` on the standardized scale → raw covariate scale.
    pub fn back_transform(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut out = beta.clone();
        for j in 0..self.means.len() {
            out[j + 1] = beta[j + 1] / self.scales[j];
            out[0] -= beta[j + 1] * self.means[j] / self.scales[j];
        }
        out
    }

    pub fn apply(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = raw.clone();
        for j in 0..self.means.len() {
            out.column_mut(j)
                .apply(|v| *v = (*v - self.means[j]) / self.scales[j]);
        }
        out
    }
}

/// Centres every column and scales it to unit sample variance (divisor `N − 1`).
pub fn standardize_covariates(raw: &DMatrix<f64>) -> Result<(DMatrix<f64>, Standardization)> {
    let n = raw.nrows();
    if n < 2 && raw.ncols() > 0 {
        return Err(Error::InvalidDimension("standardization needs at least two rows".into()));
    }
    let mut means = Vec::with_capacity(raw.ncols());
    let mut scales = Vec::with_capacity(raw.ncols());
    for (j, col) in raw.column_iter().enumerate() {
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ZeroVariance(j));
        }
        means.push(mean);
        scales.push(sd);
    }
    let record = Standardization {
        names: (1..=raw.ncols()).map(|j| format!("x{j}")).collect(),
        means,
        scales,
        convention: "sample variance (N-1)".into(),
    };
    Ok((record.apply(raw), record))
}

/// Internal standardization: `e = n · ΣO / Σn`.
pub fn expected_counts(observed: &DVector<f64>, population: &DVector<f64>) -> Result<DVector<f64>> {
    if observed.len() != population.len() {
        return Err(Error::InvalidDimension(format!(
            "{} counts but {} populations",
            observed.len(),
            population.len()
        )));
    }
    if let Some(k) = population.iter().position(|p| !(*p > 0.0 && p.is_finite())) {
        return Err(Error::InvalidData(format!("population at cell {} is not positive", k + 1)));
    }
    let total_pop: f64 = population.sum();
    let rate = observed.sum() / total_pop;
    if !(rate > 0.0) {
        return Err(Error::InvalidData("no observed cases: expected counts would be zero".into()));
    }
    Ok(population * rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Fixed effects only.
    St1,
    /// Reparameterized ICAR + RW1 + Type IV model.
    St2,
    /// Restricted regression.
    St3,
    /// Orthogonality constraints.
    St4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::St1, Variant::St2, Variant::St3, Variant::St4];

    pub fn needs_weights(self) -> bool {
        matches!(self, Variant::St3 | Variant::St4)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::St1 => "ST1",
            Variant::St2 => "ST2",
            Variant::St3 => "ST3",
            Variant::St4 => "ST4",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "st1" => Ok(Variant::St1),
            "st2" => Ok(Variant::St2),
            "st3" => Ok(Variant::St3),
            "st4" => Ok(Variant::St4),
            other => Err(Error::Config(format!(
                "unknown model '{other}', expected one of st1, st2, st3, st4"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BlockLabel {
    Spatial,
    Temporal,
    Interaction,
}

impl BlockLabel {
    pub const ALL: [BlockLabel; 3] = [BlockLabel::Spatial, BlockLabel::Temporal, BlockLabel::Interaction];

    pub fn name(self) -> &'static str {
        match self {
            BlockLabel::Spatial => "spatial",
            BlockLabel::Temporal => "temporal",
            BlockLabel::Interaction => "interaction",
        }
    }
}

impl fmt::Display for BlockLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "spatial" | "s" => Ok(BlockLabel::Spatial),
            "temporal" | "t" => Ok(BlockLabel::Temporal),
            "interaction" | "st" => Ok(BlockLabel::Interaction),
            other => Err(Error::Config(format!(
                "unknown block '{other}', expected spatial, temporal or interaction"
            ))),
        }
    }
}

/// Parses a comma-separated block list such as `spatial,temporal`.
pub fn parse_blocks(s: &str) -> Result<Vec<BlockLabel>> {
    let mut out: Vec<BlockLabel> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WeightSource {
    #[default]
    FromSt2Fit,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Blocks premultiplied by the restriction operator (ST3 only).
    pub restrict_blocks: Vec<BlockLabel>,
    pub weight_source: WeightSource,
    /// Which dependent interaction constraint row ST4 drops.
    pub redundant_row: RedundantRow,
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            restrict_blocks: BlockLabel::ALL.to_vec(),
            weight_source: WeightSource::default(),
            redundant_row: RedundantRow::default(),
        }
    }

    pub fn restricted(blocks: &[BlockLabel]) -> Result<Self> {
        let spec = Self {
            restrict_blocks: blocks.to_vec(),
            ..Self::new(Variant::St3)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::St3 && self.restrict_blocks.is_empty() {
            return Err(Error::Config("ST3 needs at least one restricted block".into()));
        }
        Ok(())
    }
}

/// One random-effect block of the working mixed model: contribution
/// `Z·u` with `u ~ N(0, σ²·cov)`; `latent_map·u` is the effect on its
/// original (area, period or cell) scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomBlock {
    pub label: BlockLabel,
    pub z: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub latent_map: DMatrix<f64>,
    /// Rank of `cov`.
    pub rank: usize,
    /// Constraint matrix whose rows span the null space of `cov` (ST4).
    pub constraint: Option<DMatrix<f64>>,
    pub restricted: bool,
}

impl RandomBlock {
    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    /// `Z·cov·Zᵀ`.
    pub fn marginal_kernel(&self) -> DMatrix<f64> {
        let zc = &self.z * &self.cov;
        let mut m = zc * self.z.transpose();
        let mt = m.transpose();
        m += mt;
        m * 0.5
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignBundle {
    pub variant: Variant,
    pub n_areas: usize,
    pub n_periods: usize,
    /// `[1 : X]`, intercept first.
    pub x_star: DMatrix<f64>,
    pub blocks: Vec<RandomBlock>,
    /// Frozen `Ŵ` used for the ST3 projector or ST4 constraints.
    pub projector_weights: Option<DVector<f64>>,
    pub constraints: Option<ConstraintSet>,
}

impl DesignBundle {
    pub fn n_cells(&self) -> usize {
        self.x_star.nrows()
    }

    pub fn n_fixed(&self) -> usize {
        self.x_star.ncols()
    }

    pub fn labels(&self) -> Vec<BlockLabel> {
        self.blocks.iter().map(|b| b.label).collect()
    }

    pub fn block(&self, label: BlockLabel) -> Option<&RandomBlock> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn random_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }
}

/// Assembles the fixed design and random-effect blocks for one variant.
///
/// ST3 and ST4 need the frozen weights `Ŵ` (normally the working weights of
/// a converged ST2 fit).
pub fn build_design(
    spec: &ModelSpec,
    data: &Dataset,
    structures: &Structures,
    weights: Option<&DVector<f64>>,
) -> Result<DesignBundle> {
    spec.validate()?;
    let (s, t) = (data.n_areas, data.n_periods);
    if structures.n_areas() != s || structures.n_periods() != t {
        return Err(Error::InvalidDimension(format!(
            "structures are for S={}, T={} but data has S={s}, T={t}",
            structures.n_areas(),
            structures.n_periods()
        )));
    }
    let n = s * t;
    let x_star = with_intercept(&data.covariates);
    let weights = match (spec.variant.needs_weights(), weights) {
        (true, None) => {
            return Err(Error::Config(format!(
                "{} needs frozen weights from an ST2 fit or supplied by the user",
                spec.variant
            )))
        }
        (true, Some(w)) => {
            if w.len() != n {
                return Err(Error::InvalidDimension(format!("{} weights for {n} cells", w.len())));
            }
            Some(w.clone())
        }
        (false, _) => None,
    };

    let mut bundle = DesignBundle {
        variant: spec.variant,
        n_areas: s,
        n_periods: t,
        x_star,
        blocks: Vec::new(),
        projector_weights: weights.clone(),
        constraints: None,
    };

    match spec.variant {
        Variant::St1 => {}
        Variant::St2 => bundle.blocks = reparameterized_blocks(structures),
        Variant::St3 => {
            let w = weights.expect("checked above");
            let projector = weighted_projector(&data.covariates, &w)?;
            let mut blocks = reparameterized_blocks(structures);
            for block in &mut blocks {
                if spec.restrict_blocks.contains(&block.label) {
                    block.z = projector.restrict(&block.z);
                    block.restricted = true;
                }
            }
            bundle.blocks = blocks;
        }
        Variant::St4 => {
            let w = weights.expect("checked above");
            let cs = constraint_matrices_with(&data.covariates, &w, s, t, spec.redundant_row)?;
            let mut blocks = Vec::new();
            let v = constrained_covariance(&structures.spatial.q, &cs.spatial)?;
            blocks.push(RandomBlock {
                label: BlockLabel::Spatial,
                z: kron(&ones(t), &DMatrix::identity(s, s)),
                rank: v.basis.ncols(),
                cov: v.covariance,
                latent_map: DMatrix::identity(s, s),
                constraint: Some(cs.spatial.clone()),
                restricted: false,
            });
            if let (Some(temporal), Some(interaction)) = (&structures.temporal, &structures.interaction) {
                let v = constrained_covariance(&temporal.q, &cs.temporal)?;
                blocks.push(RandomBlock {
                    label: BlockLabel::Temporal,
                    z: kron(&DMatrix::identity(t, t), &ones(s)),
                    rank: v.basis.ncols(),
                    cov: v.covariance,
                    latent_map: DMatrix::identity(t, t),
                    constraint: Some(cs.temporal.clone()),
                    restricted: false,
                });
                let v = constrained_covariance(&interaction.q, &cs.interaction)?;
                blocks.push(RandomBlock {
                    label: BlockLabel::Interaction,
                    z: DMatrix::identity(n, n),
                    rank: v.basis.ncols(),
                    cov: v.covariance,
                    latent_map: DMatrix::identity(n, n),
                    constraint: Some(cs.interaction.clone()),
                    restricted: false,
                });
            }
            bundle.blocks = blocks;
            bundle.constraints = Some(cs);
        }
    }
    Ok(bundle)
}

/// Blocks `(1_T⊗U_sr)`, `(U_tr⊗1_S)`, `(U_tr⊗U_sr)` with covariances
/// `diag(λ)⁻¹`.
fn reparameterized_blocks(structures: &Structures) -> Vec<RandomBlock> {
    let s = structures.n_areas();
    let t = structures.n_periods();
    let spatial = &structures.spatial;
    let inv_diag = |v: &DVector<f64>| DMatrix::from_diagonal(&v.map(|l| 1.0 / l));
    let mut blocks = vec![RandomBlock {
        label: BlockLabel::Spatial,
        z: kron(&ones(t), &spatial.range_basis),
        cov: inv_diag(&spatial.range_eigenvalues),
        latent_map: spatial.range_basis.clone(),
        rank: spatial.range_dim(),
        constraint: None,
        restricted: false,
    }];
    if let (Some(temporal), Some(interaction)) = (&structures.temporal, &structures.interaction) {
        blocks.push(RandomBlock {
            label: BlockLabel::Temporal,
            z: kron(&temporal.range_basis, &ones(s)),
            cov: inv_diag(&temporal.range_eigenvalues),
            latent_map: temporal.range_basis.clone(),
            rank: temporal.range_dim(),
            constraint: None,
            restricted: false,
        });
        blocks.push(RandomBlock {
            label: BlockLabel::Interaction,
            z: interaction.range_basis.clone(),
            cov: inv_diag(&interaction.range_eigenvalues),
            latent_map: interaction.range_basis.clone(),
            rank: interaction.range_dim(),
            constraint: None,
            restricted: false,
        });
    }
    blocks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, scaled_product_residual};
    use crate::structures::SpatialGraph;

    #[test]
    fn standardize_simple_column() {
        let raw = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let (x, rec) = standardize_covariates(&raw).unwrap();
        assert!((x[(0, 0)] + 1.0).abs() < 1e-15);
        assert!(x[(1, 0)].abs() < 1e-15);
        assert!((x[(2, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(rec.means, vec![2.0]);
        assert_eq!(rec.scales, vec![1.0]);

        let (again, _) = standardize_covariates(&x).unwrap();
        assert!(max_abs(&(again - &x)) < 1e-12);
    }

    #[test]
    fn constant_column_is_rejected() {
        let raw = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0]);
        assert!(matches!(standardize_covariates(&raw), Err(Error::ZeroVariance(1))));
    }

    #[test]
    fn back_transform_preserves_linear_predictor() {
        let raw = DMatrix::from_row_slice(4, 2, &[1.0, 10.0, 2.0, 30.0, 4.0, 20.0, 8.0, 50.0]);
        let (x, rec) = standardize_covariates(&raw).unwrap();
        let beta = DVector::from_vec(vec![0.3, -0.2, 0.7]);
        let raw_beta = rec.back_transform(&beta);
        let eta_std = with_intercept(&x) * &beta;
        let eta_raw = with_intercept(&raw) * &raw_beta;
        assert!((eta_std - eta_raw).amax() < 1e-10);
    }

    #[test]
    fn expected_counts_examples() {
        let e = expected_counts(&DVector::from_vec(vec![1.0, 1.0]), &DVector::from_vec(vec![10.0, 10.0]))
            .unwrap();
        assert_eq!(e.as_slice(), &[1.0, 1.0]);
        let e = expected_counts(
            &DVector::from_vec(vec![3.0, 0.0, 0.0]),
            &DVector::from_vec(vec![1.0, 1.0, 1.0]),
        )
        .unwrap();
        assert_eq!(e.as_slice(), &[1.0, 1.0, 1.0]);
        assert!(expected_counts(&DVector::from_vec(vec![1.0, 2.0]), &DVector::from_vec(vec![1.0, 0.0]))
            .is_err());
    }

    #[test]
    fn dataset_rejects_bad_counts() {
        let ok = Dataset::new(
            2,
            1,
            DVector::from_vec(vec![1.0, 2.5]),
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::zeros(2, 0),
            vec![],
        );
        assert!(matches!(ok, Err(Error::InvalidData(_))));
    }

    #[test]
    fn variant_and_block_parsing() {
        assert_eq!("ST3".parse::<Variant>().unwrap(), Variant::St3);
        assert!("st5".parse::<Variant>().is_err());
        assert_eq!(
            parse_blocks("temporal, spatial").unwrap(),
            vec![BlockLabel::Spatial, BlockLabel::Temporal]
        );
        assert!(ModelSpec::restricted(&[]).is_err());
    }

    fn small_data(s: usize, t: usize, x: DMatrix<f64>) -> Dataset {
        let n = s * t;
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Dataset::new(s, t, DVector::from_element(n, 3.0), DVector::from_element(n, 2.0), x, names)
            .unwrap()
    }

    #[test]
    fn st1_has_no_blocks() {
        let g = SpatialGraph::path(3).unwrap();
        let st = Structures::new(&g, 2).unwrap();
        let x = DMatrix::from_column_slice(6, 1, &[0.1, 0.5, -0.3, 0.9, -1.0, 0.2]);
        let b = build_design(&ModelSpec::new(Variant::St1), &small_data(3, 2, x), &st, None).unwrap();
        assert!(b.blocks.is_empty());
        assert_eq!(b.x_star.ncols(), 2);
    }

    #[test]
    fn st2_random_dimension_is_st_minus_one() {
        let g = SpatialGraph::lattice(2, 3).unwrap();
        let st = Structures::new(&g, 4).unwrap();
        let data = small_data(6, 4, DMatrix::zeros(24, 0));
        let b = build_design(&ModelSpec::new(Variant::St2), &data, &st, None).unwrap();
        let dims: Vec<usize> = b.blocks.iter().map(|b| b.dim()).collect();
        assert_eq!(dims, vec![5, 3, 15]);
        assert_eq!(b.random_dim(), 6 * 4 - 1);
    }

    #[test]
    fn weighted_variants_need_weights() {
        let g = SpatialGraph::path(3).unwrap();
        let st = Structures::new(&g, 2).unwrap();
        let data = small_data(3, 2, DMatrix::zeros(6, 0));
        for v in [Variant::St3, Variant::St4] {
            assert!(matches!(
                build_design(&ModelSpec::new(v), &data, &st, None),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn st3_spatial_block_by_explicit_computation() {
        let g = SpatialGraph::path(3).unwrap();
        let st = Structures::new(&g, 2).unwrap();
        let x = DMatrix::from_column_slice(6, 1, &[0.4, -1.1, 0.2, 1.3, -0.6, -0.2]);
        let data = small_data(3, 2, x.clone());
        let w = DVector::from_element(6, 1.0);
        let b = build_design(&ModelSpec::new(Variant::St3), &data, &st, Some(&w)).unwrap();
        let z = &b.block(BlockLabel::Spatial).unwrap().z;
        assert_eq!(z.shape(), (6, 2));

        let xs = with_intercept(&x);
        let hat = &xs * (xs.transpose() * &xs).try_inverse().unwrap() * xs.transpose();
        let expected = (DMatrix::identity(6, 6) - hat) * kron(&ones(2), &st.spatial.range_basis);
        assert!(max_abs(&(z - expected)) < 1e-12);
        assert!(scaled_product_residual(&xs.transpose(), z) < 1e-12);
    }

    #[test]
    fn st3_with_orthogonal_covariates_matches_st2() {
        let g = SpatialGraph::lattice(2, 2).unwrap();
        let st = Structures::new(&g, 3).unwrap();
        let w = DVector::from_element(12, 1.0);

        // intercept-only: every block is already orthogonal to 1
        let data = small_data(4, 3, DMatrix::zeros(12, 0));
        let b2 = build_design(&ModelSpec::new(Variant::St2), &data, &st, None).unwrap();
        let b3 = build_design(&ModelSpec::new(Variant::St3), &data, &st, Some(&w)).unwrap();
        for (a, b) in b2.blocks.iter().zip(&b3.blocks) {
            assert!((&a.z - &b.z).norm() <= 1e-10);
        }

        // a purely temporal covariate leaves the spatial block untouched
        let temporal = st.temporal.as_ref().unwrap();
        let x = kron(&temporal.range_basis.columns(0, 1).into_owned(), &ones(4));
        let data = small_data(4, 3, x);
        let b2 = build_design(&ModelSpec::new(Variant::St2), &data, &st, None).unwrap();
        let spec = ModelSpec::restricted(&[BlockLabel::Spatial]).unwrap();
        let b3 = build_design(&spec, &data, &st, Some(&w)).unwrap();
        let (a, b) = (b2.block(BlockLabel::Spatial).unwrap(), b3.block(BlockLabel::Spatial).unwrap());
        assert!((&a.z - &b.z).norm() <= 1e-10);
    }

    #[test]
    fn st4_blocks_use_full_designs_and_constrained_covariances() {
        let g = SpatialGraph::path(3).unwrap();
        let st = Structures::new(&g, 3).unwrap();
        let x = DMatrix::from_column_slice(9, 1, &[0.4, -1.1, 0.2, 1.3, -0.6, -0.2, 0.8, -0.1, 0.5]);
        let data = small_data(3, 3, x);
        let w = DVector::from_vec(vec![1.0, 2.0, 1.5, 0.7, 1.2, 2.2, 0.9, 1.1, 1.6]);
        let b = build_design(&ModelSpec::new(Variant::St4), &data, &st, Some(&w)).unwrap();
        let dims: Vec<usize> = b.blocks.iter().map(|b| b.dim()).collect();
        assert_eq!(dims, vec![3, 3, 9]);
        let ranks: Vec<usize> = b.blocks.iter().map(|b| b.rank).collect();
        assert_eq!(ranks, vec![1, 1, 3]);
        for block in &b.blocks {
            let c = block.constraint.as_ref().unwrap();
            assert!(scaled_product_residual(c, &block.cov) < 1e-8);
        }

        // T = p + 1 leaves the temporal effect no free direction
        let st = Structures::new(&g, 2).unwrap();
        let data = small_data(3, 2, DMatrix::from_column_slice(6, 1, &[0.4, -1.1, 0.2, 1.3, -0.6, -0.2]));
        let w = DVector::from_element(6, 1.0);
        assert!(matches!(
            build_design(&ModelSpec::new(Variant::St4), &data, &st, Some(&w)),
            Err(Error::IllPosedConstraints(_))
        ));
    }

    #[test]
    fn permute_areas_roundtrip() {
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let data = small_data(3, 2, x);
        let perm = [2, 0, 1];
        let p = data.permute_areas(&perm);
        assert_eq!(p.covariates[(2, 0)], 0.0);
        assert_eq!(p.covariates[(5, 0)], 3.0);
        let inv = [1, 2, 0];
        assert_eq!(p.permute_areas(&inv), data);
    }
}
