//! Dense linear-algebra helpers shared by the modelling modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            out.view_mut((i * br, j * bc), (br, bc))
                .zip_apply(b, |o, v| *o = aij * v);
        }
    }
    out
}

pub fn ones(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, 1, 1.0)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// `‖a − b‖_F / max(‖b‖_F, tiny)`.
pub fn frobenius_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

pub fn max_column_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Largest absolute entry of `a·b`, divided by the product of the two
/// operands' largest column/row norms. Zero operands give zero.
pub fn scaled_product_residual(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let prod = a * b;
    let row_norm = a.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let col_norm = max_column_norm(b);
    let scale = row_norm * col_norm;
    if scale == 0.0 {
        0.0
    } else {
        max_abs(&prod) / scale
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric eigendecomposition with eigenvalues ascending and each
/// eigenvector's first non-negligible entry made positive.
pub fn sym_eigen_sorted(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

pub(crate) fn fix_sign(v: &mut DVector<f64>) {
    let scale = max_abs_vec(v);
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

/// Columns of `m` selected by index.
pub fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), idx.len());
    for (k, &j) in idx.iter().enumerate() {
        out.set_column(k, &m.column(j));
    }
    out
}

/// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
    Ok(chol.inverse())
}

/// Orthonormal basis for the eigenvalue-one eigenspace of a symmetric
/// projection matrix (eigenvalues are 0 or 1 up to round-off).
pub fn projector_range_basis(p: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_sorted(p);
    let keep: Vec<usize> = (0..values.len()).filter(|&i| values[i] > 0.5).collect();
    select_columns(&vectors, &keep)
}

/// Diagonal matrix from a vector, scaled entrywise by `f`.
pub fn diag_map(v: &DVector<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&v.map(f))
}

/// `diag(d) · m` without forming the diagonal matrix.
pub fn scale_rows(d: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d[i];
    }
    out
}

/// Serde adapters writing vectors as plain arrays and matrices as row lists,
/// instead of nalgebra's `[data, nrows, ncols]` encoding.
pub mod flat {
    use std::collections::BTreeMap;

    use nalgebra::{DMatrix, DVector};
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
            Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
        }
    }

    pub mod matrix {
        use super::*;

        pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
            let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
            rows.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
            let rows = Vec::<Vec<f64>>::deserialize(d)?;
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err(D::Error::custom("ragged matrix rows"));
            }
            Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
        }
    }

    pub mod vector_map {
        use super::*;

        pub fn serialize<K, S>(m: &BTreeMap<K, DVector<f64>>, s: S) -> Result<S::Ok, S::Error>
        where
            K: Serialize + Ord,
            S: Serializer,
        {
            let plain: BTreeMap<&K, &[f64]> = m.iter().map(|(k, v)| (k, v.as_slice())).collect();
            plain.serialize(s)
        }

        pub fn deserialize<'de, K, D>(d: D) -> Result<BTreeMap<K, DVector<f64>>, D::Error>
        where
            K: Deserialize<'de> + Ord,
            D: Deserializer<'de>,
        {
            let plain = BTreeMap::<K, Vec<f64>>::deserialize(d)?;
            Ok(plain.into_iter().map(|(k, v)| (k, DVector::from_vec(v))).collect())
        }
    }
}
