//! Structure matrices of the ICAR, RW1 and Type IV interaction priors and
//! their null/range spectral splits.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron, max_abs, select_columns, sym_eigen_sorted};

/// Relative threshold below which an eigenvalue is classified as null.
pub const NULL_EIGENVALUE_TOL: f64 = 1e-10;
/// Relative threshold below which a negative eigenvalue makes a matrix non-PSD.
pub const NEGATIVE_EIGENVALUE_TOL: f64 = 1e-8;

/// Areal adjacency over `n_areas` districts, stored as 0-based unordered
/// pairs `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpatialGraph {
    n_areas: usize,
    edges: Vec<(usize, usize)>,
}

impl SpatialGraph {
    /// Validates indices, self-loops and duplicates. Connectivity is checked
    /// when the precision matrix is built.
    pub fn new(n_areas: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_areas == 0 {
            return Err(Error::InvalidGraph("graph must have at least one area".into()));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (a, b) in edges {
            if a >= n_areas || b >= n_areas {
                return Err(Error::InvalidGraph(format!(
                    "edge ({}, {}) references an area outside 1..={n_areas}",
                    a + 1,
                    b + 1
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at area {}", a + 1)));
            }
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate edge ({}, {})",
                    key.0 + 1,
                    key.1 + 1
                )));
            }
            out.push(key);
        }
        out.sort_unstable();
        Ok(Self { n_areas, edges: out })
    }

    /// Converts a symmetric 0/1 adjacency matrix.
    pub fn from_adjacency_matrix(adj: &DMatrix<f64>) -> Result<Self> {
        let n = adj.nrows();
        if adj.ncols() != n {
            return Err(Error::InvalidGraph(format!(
                "adjacency matrix is {}x{}, expected square",
                n,
                adj.ncols()
            )));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            if adj[(i, i)] != 0.0 {
                return Err(Error::InvalidGraph(format!("self-loop at area {}", i + 1)));
            }
            for j in (i + 1)..n {
                let (a, b) = (adj[(i, j)], adj[(j, i)]);
                if a != b {
                    return Err(Error::InvalidGraph(format!(
                        "adjacency matrix is not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
                match a {
                    v if v == 0.0 => {}
                    v if v == 1.0 => edges.push((i, j)),
                    v => {
                        return Err(Error::InvalidGraph(format!(
                            "adjacency entry ({}, {}) is {v}, expected 0 or 1",
                            i + 1,
                            j + 1
                        )))
                    }
                }
            }
        }
        Self::new(n, edges)
    }

    /// Rook-neighbour lattice with `rows × cols` areas, numbered row-major.
    pub fn lattice(rows: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::new(rows * cols, edges)
    }

    /// Path graph `1 – 2 – … – n`.
    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i)))
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_areas];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut parent: Vec<usize> = (0..self.n_areas).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..self.n_areas {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    pub fn is_connected(&self) -> bool {
        self.components().len() == 1
    }

    /// Relabels areas: old area `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n_areas {
            return Err(Error::InvalidDimension(format!(
                "permutation has length {}, graph has {} areas",
                perm.len(),
                self.n_areas
            )));
        }
        Self::new(self.n_areas, self.edges.iter().map(|&(a, b)| (perm[a], perm[b])))
    }
}

/// ICAR structure matrix: degree on the diagonal, −1 between neighbours.
pub fn build_spatial_precision(graph: &SpatialGraph) -> Result<DMatrix<f64>> {
    let components = graph.components();
    if components.len() > 1 {
        return Err(Error::Disconnected { components });
    }
    let n = graph.n_areas();
    let mut q = DMatrix::zeros(n, n);
    for &(a, b) in graph.edges() {
        q[(a, b)] = -1.0;
        q[(b, a)] = -1.0;
        q[(a, a)] += 1.0;
        q[(b, b)] += 1.0;
    }
    Ok(q)
}

/// First-order random walk structure matrix.
pub fn build_rw1_precision(t: usize) -> Result<DMatrix<f64>> {
    if t < 2 {
        return Err(Error::InvalidDimension(format!(
            "RW1 precision needs at least 2 periods, got {t}"
        )));
    }
    let mut q = DMatrix::zeros(t, t);
    for i in 0..t {
        q[(i, i)] = if i == 0 || i == t - 1 { 1.0 } else { 2.0 };
        if i + 1 < t {
            q[(i, i + 1)] = -1.0;
            q[(i + 1, i)] = -1.0;
        }
    }
    Ok(q)
}

/// A rank-deficient precision matrix with its kernel and range eigenvectors.
///
/// `range_eigenvalues` is ascending and matches the columns of `range_basis`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecisionSpectrum {
    pub q: DMatrix<f64>,
    pub null_basis: DMatrix<f64>,
    pub range_basis: DMatrix<f64>,
    pub range_eigenvalues: DVector<f64>,
}

impl PrecisionSpectrum {
    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn kernel_dim(&self) -> usize {
        self.null_basis.ncols()
    }

    pub fn range_dim(&self) -> usize {
        self.range_basis.ncols()
    }

    /// `U_range · diag(λ) · U_rangeᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.range_basis * DMatrix::from_diagonal(&self.range_eigenvalues);
        scaled * self.range_basis.transpose()
    }

    /// Moore–Penrose inverse from the stored split (range eigenvalues inverted).
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let inv = self.range_eigenvalues.map(|l| 1.0 / l);
        let scaled = &self.range_basis * DMatrix::from_diagonal(&inv);
        scaled * self.range_basis.transpose()
    }

    /// Eigenvector of the smallest non-null eigenvalue, first entry made
    /// non-negative.
    pub fn smallest_range_eigenvector(&self) -> Option<DVector<f64>> {
        if self.range_dim() == 0 {
            return None;
        }
        let mut v = self.range_basis.column(0).into_owned();
        if v[0] < 0.0 {
            v.neg_mut();
        }
        Some(v)
    }

    /// `[U_null : U_range]`.
    pub fn full_basis(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        out.view_mut((0, 0), (n, self.kernel_dim())).copy_from(&self.null_basis);
        out.view_mut((0, self.kernel_dim()), (n, self.range_dim()))
            .copy_from(&self.range_basis);
        out
    }
}

/// Splits a symmetric PSD matrix into kernel and range eigenvectors.
pub fn spectral_split(q: &DMatrix<f64>) -> Result<PrecisionSpectrum> {
    let n = q.nrows();
    if q.ncols() != n || n == 0 {
        return Err(Error::InvalidDimension(format!(
            "spectral split needs a non-empty square matrix, got {}x{}",
            n,
            q.ncols()
        )));
    }
    let asym = max_abs(&(q - q.transpose()));
    if asym > 1e-10 * max_abs(q).max(1.0) {
        return Err(Error::InvalidDimension(format!(
            "matrix is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let (values, vectors) = sym_eigen_sorted(q);
    let lambda_max = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = values[0];
    if min < -NEGATIVE_EIGENVALUE_TOL * lambda_max {
        return Err(Error::NotPsd {
            min_eigenvalue: min,
            max_eigenvalue: lambda_max,
        });
    }
    let threshold = NULL_EIGENVALUE_TOL * lambda_max;
    let null_idx: Vec<usize> = (0..n).filter(|&i| values[i].abs() <= threshold).collect();
    let range_idx: Vec<usize> = (0..n).filter(|&i| values[i].abs() > threshold).collect();
    Ok(PrecisionSpectrum {
        q: q.clone(),
        null_basis: select_columns(&vectors, &null_idx),
        range_basis: select_columns(&vectors, &range_idx),
        range_eigenvalues: DVector::from_iterator(
            range_idx.len(),
            range_idx.iter().map(|&i| values[i]),
        ),
    })
}

/// Spectrum of `Q_temporal ⊗ Q_spatial` assembled from the factor spectra.
///
/// Kernel: `[U_tn⊗U_sn : U_tn⊗U_sr : U_tr⊗U_sn]`; range: `U_tr⊗U_sr` with
/// eigenvalue products, reordered ascending.
pub fn interaction_eigenstructure(
    spatial: &PrecisionSpectrum,
    temporal: &PrecisionSpectrum,
) -> PrecisionSpectrum {
    let (s, t) = (spatial.dim(), temporal.dim());
    let n = s * t;
    let pieces = [
        kron(&temporal.null_basis, &spatial.null_basis),
        kron(&temporal.null_basis, &spatial.range_basis),
        kron(&temporal.range_basis, &spatial.null_basis),
    ];
    let k: usize = pieces.iter().map(|p| p.ncols()).sum();
    let mut null_basis = DMatrix::zeros(n, k);
    let mut col = 0;
    for p in &pieces {
        null_basis.view_mut((0, col), (n, p.ncols())).copy_from(p);
        col += p.ncols();
    }

    let range_raw = kron(&temporal.range_basis, &spatial.range_basis);
    let values_raw = kron(
        &DMatrix::from_column_slice(temporal.range_dim(), 1, temporal.range_eigenvalues.as_slice()),
        &DMatrix::from_column_slice(spatial.range_dim(), 1, spatial.range_eigenvalues.as_slice()),
    );
    let mut order: Vec<usize> = (0..values_raw.nrows()).collect();
    order.sort_by(|&a, &b| values_raw[(a, 0)].total_cmp(&values_raw[(b, 0)]));
    let range_basis = select_columns(&range_raw, &order);
    let range_eigenvalues =
        DVector::from_iterator(order.len(), order.iter().map(|&i| values_raw[(i, 0)]));

    PrecisionSpectrum {
        q: kron(&temporal.q, &spatial.q),
        null_basis,
        range_basis,
        range_eigenvalues,
    }
}

/// Spectra of the spatial, temporal and interaction structure matrices for
/// one study region. With a single period only the spatial part exists.
#[derive(Debug, Clone)]
pub struct Structures {
    pub spatial: PrecisionSpectrum,
    pub temporal: Option<PrecisionSpectrum>,
    pub interaction: Option<PrecisionSpectrum>,
}

impl Structures {
    pub fn new(graph: &SpatialGraph, n_periods: usize) -> Result<Self> {
        if n_periods == 0 {
            return Err(Error::InvalidDimension("number of periods must be positive".into()));
        }
        let spatial = spectral_split(&build_spatial_precision(graph)?)?;
        if n_periods == 1 {
            return Ok(Self {
                spatial,
                temporal: None,
                interaction: None,
            });
        }
        let temporal = spectral_split(&build_rw1_precision(n_periods)?)?;
        let interaction = interaction_eigenstructure(&spatial, &temporal);
        Ok(Self {
            spatial,
            temporal: Some(temporal),
            interaction: Some(interaction),
        })
    }

    pub fn n_areas(&self) -> usize {
        self.spatial.dim()
    }

    pub fn n_periods(&self) -> usize {
        self.temporal.as_ref().map_or(1, |t| t.dim())
    }
}
