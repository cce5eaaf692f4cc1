// Randomized instances for the projection/structure invariant suite. Each
// check returns its worst scaled residual; tolerances live with the callers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use stconfound::projections::{constrained_covariance, constraint_matrices, oblique_projector, weighted_projector};
use stconfound::structures::{build_rw1_precision, build_spatial_precision, interaction_eigenstructure, spectral_split};
use stconfound::SpatialGraph;

use crate::common::kron;

#[derive(Debug, Clone)]
pub struct Instance {
    pub s: usize,
    pub t: usize,
    pub p: usize,
    pub graph: SpatialGraph,
    pub x: DMatrix<f64>,
    pub w: DVector<f64>,
}

/// `S ≤ 12`, `T ≤ 6`, `p ≤ 3`, with `S, T ≥ p + 2` so every constraint set
/// leaves free directions. The graph is a path plus random chords.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let p = rng.random_range(0..=3);
    let s = rng.random_range((p + 2).max(3)..=12);
    let t = rng.random_range(p + 2..=6);
    let mut edges: Vec<(usize, usize)> = (1..s).map(|i| (i - 1, i)).collect();
    for a in 0..s {
        for b in a + 2..s {
            if rng.random_bool(0.25) {
                edges.push((a, b));
            }
        }
    }
    let graph = SpatialGraph::new(s, edges).unwrap();
    let n = s * t;
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
    let w = DVector::from_fn(n, |_, _| rng.random_range(0.5..50.0));
    Instance { s, t, p, graph, x, w }
}

#[derive(Debug, Clone, Default)]
pub struct Residuals {
    /// `‖[U_n:U_r]ᵀ[U_n:U_r] − I‖∞`
    pub basis_orthonormal: f64,
    /// `‖Q·U_null‖∞ / ‖Q‖∞`
    pub kernel: f64,
    /// Frobenius relative error of `U_r diag(λ) U_rᵀ` against `Q`
    pub reconstruction: f64,
    /// `‖LᵀL − I‖∞`
    pub l_orthonormal: f64,
    /// `‖X_*ᵀŴ^{1/2}L‖∞ / max column norm of Ŵ^{1/2}X_*`
    pub l_orthogonal: f64,
    /// `‖H + LLᵀ − I‖∞` with `H` the weighted hat matrix
    pub completeness: f64,
    /// `‖P² − P‖_F / ‖P‖_F` over the three blocks
    pub idempotent: f64,
    /// `‖BP‖∞ / (max row norm of B · max column norm of P)`
    pub bp: f64,
    /// `‖PL − L‖∞`
    pub p_fixes_l: f64,
    /// `‖BV‖∞ / (max row norm of B · max column norm of V)`
    pub bv: f64,
    /// `‖VQV − V‖_F / ‖V‖_F`
    pub vqv: f64,
    /// `‖V − Vᵀ‖∞ / ‖V‖∞` and negative eigenvalues relative to the largest
    pub v_sym_psd: f64,
    /// Distance between kernel projectors and eigenvalue lists of the
    /// assembled and directly decomposed interaction matrix
    pub kronecker: f64,
}

fn amax(m: &DMatrix<f64>) -> f64 {
    m.amax()
}

fn max_row_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

fn max_col_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn ident(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

pub fn check(inst: &Instance) -> Residuals {
    let mut r = Residuals::default();
    let (s, t, n) = (inst.s, inst.t, inst.s * inst.t);

    let qs = build_spatial_precision(&inst.graph).unwrap();
    let qt = build_rw1_precision(t).unwrap();
    let spatial = spectral_split(&qs).unwrap();
    let temporal = spectral_split(&qt).unwrap();
    let interaction = interaction_eigenstructure(&spatial, &temporal);
    for sp in [&spatial, &temporal, &interaction] {
        let u = sp.full_basis();
        r.basis_orthonormal = r.basis_orthonormal.max(amax(&(u.transpose() * &u - ident(u.ncols()))));
        r.kernel = r.kernel.max(amax(&(&sp.q * &sp.null_basis)) / amax(&sp.q));
        r.reconstruction = r.reconstruction.max(rel_frob(&sp.reconstruct(), &sp.q));
    }
    if n <= 36 {
        let direct = spectral_split(&kron(&qt, &qs)).unwrap();
        let pk = |u: &DMatrix<f64>| u * u.transpose();
        let mut d = amax(&(pk(&direct.null_basis) - pk(&interaction.null_basis)));
        if direct.range_dim() == interaction.range_dim() {
            let top = direct.range_eigenvalues.amax();
            d = d.max((&direct.range_eigenvalues - &interaction.range_eigenvalues).amax() / top);
        } else {
            d = f64::INFINITY;
        }
        r.kronecker = d;
    }

    let wp = weighted_projector(&inst.x, &inst.w).unwrap();
    let l = &wp.l;
    r.l_orthonormal = amax(&(l.transpose() * l - ident(l.ncols())));
    r.l_orthogonal = amax(&(wp.k.transpose() * l)) / max_col_norm(&wp.k);
    let hat = &wp.k * (wp.k.transpose() * &wp.k).try_inverse().unwrap() * wp.k.transpose();
    r.completeness = amax(&(hat + l * l.transpose() - ident(n)));

    let cs = constraint_matrices(&inst.x, &inst.w, s, t).unwrap();
    for (q, b) in [(&qs, &cs.spatial), (&qt, &cs.temporal), (&interaction.q, &cs.interaction)] {
        let op = oblique_projector(q, b).unwrap();
        let pm = &op.projector;
        r.idempotent = r.idempotent.max(rel_frob(&(pm * pm), pm));
        r.bp = r.bp.max(amax(&(b * pm)) / (max_row_norm(b) * max_col_norm(pm)));
        r.p_fixes_l = r.p_fixes_l.max(amax(&(pm * &op.basis - &op.basis)));

        let v = constrained_covariance(q, b).unwrap().covariance;
        r.bv = r.bv.max(amax(&(b * &v)) / (max_row_norm(b) * max_col_norm(&v)));
        r.vqv = r.vqv.max(rel_frob(&(&v * q * &v), &v));
        let eig = v.clone().symmetric_eigenvalues();
        let top = eig.amax();
        let neg = (-eig.min()).max(0.0) / top;
        r.v_sym_psd = r.v_sym_psd.max(amax(&(&v - v.transpose())) / amax(&v)).max(neg);
    }
    r
}

impl Residuals {
    /// `(name, residual, tolerance)` for every invariant.
    pub fn table(&self) -> Vec<(&'static str, f64, f64)> {
        vec![
            ("[U_n:U_r] orthonormal", self.basis_orthonormal, 1e-10),
            ("Q·U_null = 0", self.kernel, 1e-8),
            ("Q = U_r Λ U_rᵀ", self.reconstruction, 1e-8),
            ("LᵀL = I", self.l_orthonormal, 1e-10),
            ("X_*ᵀŴ^{1/2}L = 0", self.l_orthogonal, 1e-8),
            ("H + LLᵀ = I", self.completeness, 1e-8),
            ("P² = P", self.idempotent, 1e-8),
            ("BP = 0", self.bp, 1e-8),
            ("PL = L", self.p_fixes_l, 1e-8),
            ("BV = 0", self.bv, 1e-8),
            ("VQV = V", self.vqv, 1e-8),
            ("V symmetric PSD", self.v_sym_psd, 1e-8),
            ("Kronecker = direct", self.kronecker, 1e-8),
        ]
    }

    #[allow(dead_code)]
    pub fn worst(a: Self, b: &Self) -> Self {
        Self {
            basis_orthonormal: a.basis_orthonormal.max(b.basis_orthonormal),
            kernel: a.kernel.max(b.kernel),
            reconstruction: a.reconstruction.max(b.reconstruction),
            l_orthonormal: a.l_orthonormal.max(b.l_orthonormal),
            l_orthogonal: a.l_orthogonal.max(b.l_orthogonal),
            completeness: a.completeness.max(b.completeness),
            idempotent: a.idempotent.max(b.idempotent),
            bp: a.bp.max(b.bp),
            p_fixes_l: a.p_fixes_l.max(b.p_fixes_l),
            bv: a.bv.max(b.bv),
            vqv: a.vqv.max(b.vqv),
            v_sym_psd: a.v_sym_psd.max(b.v_sym_psd),
            kronecker: a.kronecker.max(b.kronecker),
        }
    }
}
