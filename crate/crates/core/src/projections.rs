//! Weighted orthogonal projectors for restricted regression, weighted
//! orthogonality constraint matrices, and the oblique projections and
//! constrained covariances they induce on intrinsic Gaussian effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, projector_range_basis, scale_rows, spd_inverse, symmetrize};
use crate::structures::spectral_split;

/// `[1 : X]`.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::from_element(n, x.ncols() + 1, 1.0);
    out.view_mut((0, 1), (n, x.ncols())).copy_from(x);
    out
}

/// Indices of columns that are (numerically) linear combinations of the
/// columns before them, after scaling every column to unit norm.
pub fn dependent_columns(m: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..m.ncols() {
        let col = m.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            dependent.push(j);
            continue;
        }
        let mut r = col / norm;
        // two passes of Gram-Schmidt keep the residual accurate
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&r);
                r.axpy(-c, q, 1.0);
            }
        }
        let rn = r.norm();
        if rn < 1e-9 {
            dependent.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    dependent
}

/// Orthogonal projector onto the complement of `Ŵ^{1/2}[1 : X]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedProjector {
    pub weights: DVector<f64>,
    /// `Ŵ^{1/2}·X_*`
    pub k: DMatrix<f64>,
    /// Orthonormal basis of the eigenvalue-one eigenspace of `P^c`.
    pub l: DMatrix<f64>,
}

impl WeightedProjector {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `Ŵ^{-1/2} L Lᵀ Ŵ^{1/2}` applied to the columns of `z`.
    pub fn restrict(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let sqrt_w = self.weights.map(f64::sqrt);
        let inv_sqrt_w = sqrt_w.map(|v| 1.0 / v);
        let lt = self.l.transpose() * scale_rows(&sqrt_w, z);
        scale_rows(&inv_sqrt_w, &(&self.l * lt))
    }

    /// The explicit `N × N` restriction operator `Ŵ^{-1/2} L Lᵀ Ŵ^{1/2}`.
    pub fn restriction_operator(&self) -> DMatrix<f64> {
        self.restrict(&DMatrix::identity(self.dim(), self.dim()))
    }
}

pub fn weighted_projector(x: &DMatrix<f64>, weights: &DVector<f64>) -> Result<WeightedProjector> {
    let n = x.nrows();
    if weights.len() != n {
        return Err(Error::InvalidDimension(format!(
            "{} weights for {} design rows",
            weights.len(),
            n
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::InvalidData("projector weights must be positive and finite".into()));
    }
    let x_star = with_intercept(x);
    if x_star.ncols() > n {
        return Err(Error::InvalidDimension(format!(
            "{} fixed-effect columns exceed {} observations",
            x_star.ncols(),
            n
        )));
    }
    let sqrt_w = weights.map(f64::sqrt);
    let k = scale_rows(&sqrt_w, &x_star);
    let dependent = dependent_columns(&k);
    if !dependent.is_empty() {
        return Err(Error::Collinear { columns: dependent });
    }
    let ktk_inv = spd_inverse(&(k.transpose() * &k), "X_*ᵀŴX_*")?;
    let hat = &k * ktk_inv * k.transpose();
    let pc = DMatrix::identity(n, n) - hat;
    let l = projector_range_basis(&pc);
    let expected = n - x_star.ncols();
    if l.ncols() != expected {
        return Err(Error::Singular(format!(
            "projector complement has {} unit eigenvalues, expected {expected}",
            l.ncols()
        )));
    }
    Ok(WeightedProjector {
        weights: weights.clone(),
        k,
        l,
    })
}

/// Which of the linearly dependent area/period sum rows of the interaction
/// constraint matrix is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RedundantRow {
    #[default]
    LastTemporal,
    LastSpatial,
}

/// Weighted orthogonality constraints for the spatial, temporal and
/// interaction effects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintSet {
    /// `X_*ᵀŴ(1_T ⊗ I_S)`, `(p+1) × S`
    pub spatial: DMatrix<f64>,
    /// `X_*ᵀŴ(I_T ⊗ 1_S)`, `(p+1) × T`
    pub temporal: DMatrix<f64>,
    /// `[(1_T⊗I_S) : (I_T⊗1_S) : X]ᵀŴ` with one dependent sum row dropped,
    /// `(S+T+p−1) × TS`
    pub interaction: DMatrix<f64>,
}

pub fn constraint_matrices(
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
    n_areas: usize,
    n_periods: usize,
) -> Result<ConstraintSet> {
    constraint_matrices_with(x, weights, n_areas, n_periods, RedundantRow::default())
}

pub fn constraint_matrices_with(
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
    n_areas: usize,
    n_periods: usize,
    drop: RedundantRow,
) -> Result<ConstraintSet> {
    let (s, t) = (n_areas, n_periods);
    let n = s * t;
    if x.nrows() != n || weights.len() != n {
        return Err(Error::InvalidDimension(format!(
            "constraints for S={s}, T={t} need {n} rows; got X with {} and {} weights",
            x.nrows(),
            weights.len()
        )));
    }
    let p = x.ncols();
    let x_star = with_intercept(x);

    let mut spatial = DMatrix::zeros(p + 1, s);
    let mut temporal = DMatrix::zeros(p + 1, t);
    for tt in 0..t {
        for i in 0..s {
            let idx = tt * s + i;
            let w = weights[idx];
            for r in 0..=p {
                let v = w * x_star[(idx, r)];
                spatial[(r, i)] += v;
                temporal[(r, tt)] += v;
            }
        }
    }

    let (skip_area, skip_period) = match drop {
        RedundantRow::LastTemporal => (None, Some(t - 1)),
        RedundantRow::LastSpatial => (Some(s - 1), None),
    };
    let area_rows: Vec<usize> = (0..s).filter(|&i| Some(i) != skip_area).collect();
    let period_rows: Vec<usize> = (0..t).filter(|&tt| Some(tt) != skip_period).collect();
    let rows = area_rows.len() + period_rows.len() + p;
    let mut interaction = DMatrix::zeros(rows, n);
    for (r, &i) in area_rows.iter().enumerate() {
        for tt in 0..t {
            let idx = tt * s + i;
            interaction[(r, idx)] = weights[idx];
        }
    }
    let off = area_rows.len();
    for (r, &tt) in period_rows.iter().enumerate() {
        for i in 0..s {
            let idx = tt * s + i;
            interaction[(off + r, idx)] = weights[idx];
        }
    }
    let off = off + period_rows.len();
    for j in 0..p {
        for idx in 0..n {
            interaction[(off + j, idx)] = weights[idx] * x[(idx, j)];
        }
    }
    Ok(ConstraintSet {
        spatial,
        temporal,
        interaction,
    })
}

/// Orthonormal basis of the orthogonal complement of the row space of `b`,
/// taken from the unit eigenvalues of `I − Bᵀ(BBᵀ)⁻¹B`.
pub fn complement_basis(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = b.ncols();
    if b.nrows() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    if b.nrows() >= n {
        return Err(Error::IllPosedConstraints(format!(
            "{} constraints on {n} coordinates leave no free directions",
            b.nrows()
        )));
    }
    let bbt_inv = spd_inverse(&(b * b.transpose()), "BBᵀ")
        .map_err(|_| Error::IllPosedConstraints("constraint rows are linearly dependent".into()))?;
    let proj = DMatrix::identity(n, n) - b.transpose() * bbt_inv * b;
    let l = projector_range_basis(&proj);
    if l.ncols() != n - b.nrows() {
        return Err(Error::IllPosedConstraints(format!(
            "constraint complement has dimension {}, expected {}",
            l.ncols(),
            n - b.nrows()
        )));
    }
    Ok(l)
}

/// `(LᵀQL)⁻¹`, failing when the kernel of `Q` meets the complement of the
/// constraints.
fn reduced_precision_inverse(q: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = symmetrize(&(l.transpose() * q * l));
    if m.nrows() == 0 {
        return Ok(m);
    }
    let chol = m.clone().cholesky().ok_or_else(|| {
        Error::IllPosedConstraints("LᵀQL is singular: the constraints do not exclude the kernel of Q".into())
    })?;
    let diag: Vec<f64> = (0..m.nrows()).map(|i| chol.l_dirty()[(i, i)].powi(2)).collect();
    let hi = diag.iter().cloned().fold(0.0, f64::max);
    let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo <= 1e-13 * hi {
        return Err(Error::IllPosedConstraints(format!(
            "LᵀQL is numerically singular (pivot ratio {:e}): the constraints do not exclude the kernel of Q",
            lo / hi
        )));
    }
    Ok(chol.inverse())
}

fn check_constraint_shapes(q: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if q.nrows() != q.ncols() || b.ncols() != q.nrows() {
        return Err(Error::InvalidDimension(format!(
            "Q is {}x{} but B has {} columns",
            q.nrows(),
            q.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ObliqueProjection {
    /// `L(LᵀQL)⁻¹LᵀQ`
    pub projector: DMatrix<f64>,
    pub basis: DMatrix<f64>,
}

pub fn oblique_projector(q: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<ObliqueProjection> {
    check_constraint_shapes(q, b)?;
    let l = complement_basis(b)?;
    let m_inv = reduced_precision_inverse(q, &l)?;
    let projector = &l * m_inv * l.transpose() * q;
    Ok(ObliqueProjection { projector, basis: l })
}

/// Covariance of an intrinsic Gaussian vector conditioned on `B·y = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstrainedCovariance {
    /// `L(LᵀQL)⁻¹Lᵀ`
    pub covariance: DMatrix<f64>,
    pub basis: DMatrix<f64>,
}

pub fn constrained_covariance(q: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<ConstrainedCovariance> {
    check_constraint_shapes(q, b)?;
    let l = complement_basis(b)?;
    let m_inv = reduced_precision_inverse(q, &l)?;
    let covariance = symmetrize(&(&l * m_inv * l.transpose()));
    Ok(ConstrainedCovariance { covariance, basis: l })
}

/// Conditioning by kriging with the Moore–Penrose inverse:
/// `Q⁻ − Q⁻Bᵀ(BQ⁻Bᵀ)⁻¹BQ⁻`. Besides `B`, the result is also annihilated
/// by the kernel of `Q`.
pub fn kriging_covariance(q: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_constraint_shapes(q, b)?;
    let q_pinv = spectral_split(q)?.pseudo_inverse();
    if b.nrows() == 0 {
        return Ok(q_pinv);
    }
    let qb = &q_pinv * b.transpose();
    let inner = b * &qb;
    let scale = b.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max) * max_abs(&q_pinv);
    let min_eig = symmetrize(&inner).symmetric_eigenvalues().min();
    if !(min_eig > 1e-12 * scale) {
        return Err(Error::Singular(format!(
            "BQ⁻Bᵀ has eigenvalue {min_eig:e} relative to scale {scale:e}: constraints lie in the kernel of Q"
        )));
    }
    let inner_inv = spd_inverse(&inner, "BQ⁻Bᵀ")?;
    Ok(symmetrize(&(&q_pinv - &qb * inner_inv * qb.transpose())))
}
