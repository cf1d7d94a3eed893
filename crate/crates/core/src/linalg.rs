//! Dense matrix container and the exact numerical primitives shared by the
//! rest of the crate: weighted norms, a cyclic Jacobi symmetric
//! eigendecomposition, small Gram pseudo-inverses and power-iteration
//! spectral norm estimates.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flops::FlopCounter;

pub type Matrix = DMatrix<f64>;

/// Relative tolerance used when inverting sketched Gram matrices.
pub const GRAM_TOLERANCE: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symmetry {
    General,
    Symmetric,
    Spd,
}

/// The square nonsingular matrix whose inverse is sought.
#[derive(Debug, Clone)]
pub struct ProblemMatrix {
    data: Matrix,
    symmetry: Symmetry,
    symmetrization_correction: f64,
}

impl ProblemMatrix {
    /// Builds a problem matrix. Symmetric and SPD flags symmetrize the data
    /// as `(M + Mᵀ)/2` and record the largest entry changed; the SPD flag is
    /// additionally verified by a Cholesky factorization.
    pub fn new(data: Matrix, symmetry: Symmetry) -> Result<Self> {
        if data.nrows() == 0 || data.nrows() != data.ncols() {
            return Err(Error::dim(format!(
                "problem matrix must be square and nonempty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let (data, symmetrization_correction) = match symmetry {
            Symmetry::General => (data, 0.0),
            Symmetry::Symmetric | Symmetry::Spd => symmetrize(&data),
        };
        if symmetry == Symmetry::Spd && !is_spd(&data) {
            return Err(Error::NotSpd);
        }
        Ok(Self {
            data,
            symmetry,
            symmetrization_correction,
        })
    }

    pub fn general(data: Matrix) -> Result<Self> {
        Self::new(data, Symmetry::General)
    }

    pub fn symmetric(data: Matrix) -> Result<Self> {
        Self::new(data, Symmetry::Symmetric)
    }

    pub fn spd(data: Matrix) -> Result<Self> {
        Self::new(data, Symmetry::Spd)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn into_data(self) -> Matrix {
        self.data
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    pub fn symmetrization_correction(&self) -> f64 {
        self.symmetrization_correction
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetry != Symmetry::General || is_symmetric(&self.data, 0.0)
    }

    /// SPD test on demand (Cholesky); flagged matrices answer immediately.
    pub fn is_spd(&self) -> bool {
        match self.symmetry {
            Symmetry::Spd => true,
            _ => self.is_symmetric() && is_spd(&self.data),
        }
    }

    /// Upgrades the flag to SPD after verification.
    pub fn into_spd(self) -> Result<Self> {
        if !self.is_symmetric() {
            return Err(Error::NotSymmetric);
        }
        Self::new(self.data, Symmetry::Spd)
    }

    pub fn smallest_eigenvalue(&self) -> Result<f64> {
        Ok(symmetric_eigen(&self.data)?.min())
    }
}

/// Returns `(M + Mᵀ)/2` and the largest absolute entry change.
pub fn symmetrize(m: &Matrix) -> (Matrix, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let correction = (&sym - m).amax();
    (sym, correction)
}

pub fn is_symmetric(m: &Matrix, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn is_spd(m: &Matrix) -> bool {
    is_symmetric(m, 1e-12) && Cholesky::new(m.clone()).is_some()
}

/// Dense inverse by LU with partial pivoting.
pub fn invert(m: &Matrix) -> Result<Matrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim("cannot invert a non-square matrix"));
    }
    m.clone().try_inverse().ok_or(Error::Singular)
}

pub fn frobenius_dot(a: &Matrix, b: &Matrix) -> f64 {
    a.dot(b)
}

/// Symmetric eigendecomposition `M = Q·diag(values)·Qᵀ`, values ascending.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: DVector<f64>,
    pub vectors: Matrix,
}

impl EigenDecomposition {
    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `Q·diag(f(λ))·Qᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let fj = f(self.values[j]);
            scaled.column_mut(j).scale_mut(fj);
        }
        scaled * self.vectors.transpose()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.map(|v| v)
    }
}

/// Cyclic Jacobi eigendecomposition of the symmetric part of `m`.
pub fn symmetric_eigen(m: &Matrix) -> Result<EigenDecomposition> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::dim("eigendecomposition needs a square matrix"));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    // Symmetric input, so the column-major buffer doubles as row-major.
    let sym = (m + m.transpose()) * 0.5;
    let mut a: Vec<f64> = sym.as_slice().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = sym.norm();
    if scale > 0.0 {
        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += a[p * n + q] * a[p * n + q];
                }
            }
            if off.sqrt() <= f64::EPSILON * 1e-2 * scale {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let app = a[p * n + p];
                    let aqq = a[q * n + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = if theta.abs() > 1e150 {
                        0.5 / theta
                    } else {
                        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                    };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    a[p * n + p] = app - t * apq;
                    a[q * n + q] = aqq + t * apq;
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    for k in 0..n {
                        if k == p || k == q {
                            continue;
                        }
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        let new_p = c * akp - s * akq;
                        let new_q = s * akp + c * akq;
                        a[k * n + p] = new_p;
                        a[p * n + k] = new_p;
                        a[k * n + q] = new_q;
                        a[q * n + k] = new_q;
                    }
                    for k in 0..n {
                        let vkp = v[k * n + p];
                        let vkq = v[k * n + q];
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[i * n + i]));
    let vectors = Matrix::from_fn(n, n, |row, col| v[row * n + order[col]]);
    Ok(EigenDecomposition { values, vectors })
}

pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(symmetric_eigen(m)?.min())
}

/// Eigendecomposition-based pseudo-inverse of a small symmetric matrix.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: Matrix,
    /// Eigenvalues with `|λ| ≤ tol·max|λ|` that were zeroed.
    pub dropped: usize,
}

pub fn sym_pinv(m: &Matrix, tol: f64) -> Result<PseudoInverse> {
    let eig = symmetric_eigen(m)?;
    let cutoff = tol * eig.max_abs();
    let dropped = eig.values.iter().filter(|v| v.abs() <= cutoff).count();
    let matrix = eig.map(|v| if v.abs() <= cutoff { 0.0 } else { 1.0 / v });
    Ok(PseudoInverse { matrix, dropped })
}

/// Inverts a sketched Gram matrix, rejecting any loss of rank.
pub(crate) fn invert_gram(g: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    fc.small_inverse(g.nrows());
    let pinv = sym_pinv(g, GRAM_TOLERANCE)?;
    if pinv.dropped > 0 {
        return Err(Error::RankDeficient {
            dropped: pinv.dropped,
            size: g.nrows(),
        });
    }
    Ok(pinv.matrix)
}

/// `M^{-1/2}` of a small SPD matrix; eigenvalues at or below
/// `floor·λ_max` are reported as rank deficiency.
pub fn sym_inv_sqrt(m: &Matrix, floor: f64) -> Result<Matrix> {
    let eig = symmetric_eigen(m)?;
    let lmax = eig.max();
    let dropped = eig.values.iter().filter(|&&v| v <= floor * lmax).count();
    if lmax <= 0.0 || dropped > 0 {
        return Err(Error::RankDeficient {
            dropped: dropped.max(1),
            size: m.nrows(),
        });
    }
    Ok(eig.map(|v| 1.0 / v.sqrt()))
}

/// Principal square root of a symmetric PSD matrix. Eigenvalues in
/// `[-1e-10·‖M‖₂, 0)` are clamped to zero; more negative ones are an error.
pub fn sym_sqrt(m: &Matrix) -> Result<Matrix> {
    let eig = symmetric_eigen(m)?;
    let tolerance = 1e-10 * eig.max_abs();
    if eig.min() < -tolerance {
        return Err(Error::NegativeEigenvalue {
            value: eig.min(),
            tolerance,
        });
    }
    Ok(eig.map(|v| v.max(0.0).sqrt()))
}

/// Power iteration on `MᵀM`. The Rayleigh-type estimate `‖Mv‖` with unit
/// `v` never exceeds `‖M‖₂`.
pub fn spectral_norm_estimate(m: &Matrix, iters: usize, seed: u64) -> f64 {
    spectral_norm_estimate_counted(m, iters, seed, &mut FlopCounter::new())
}

pub(crate) fn spectral_norm_estimate_counted(
    m: &Matrix,
    iters: usize,
    seed: u64,
    fc: &mut FlopCounter,
) -> f64 {
    let cols = m.ncols();
    if cols == 0 || m.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(cols, |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let mv = m * &v;
        fc.gemm(m.nrows(), cols, 1);
        estimate = mv.norm();
        let w = m.tr_mul(&mv);
        fc.gemm(cols, m.nrows(), 1);
        let wn = w.norm();
        if wn == 0.0 {
            break;
        }
        v = w / wn;
    }
    let final_estimate = (m * &v).norm();
    fc.gemm(m.nrows(), cols, 1);
    estimate.max(final_estimate)
}

/// Weight matrix W of the weighted Frobenius norm `‖X‖_{F(W⁻¹)}`.
///
/// All kinds other than `Explicit` are symbolic in terms of the problem
/// matrix A and are only materialized on request.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightSpec {
    Identity,
    Explicit(Matrix),
    /// W = A⁻¹ (A must be SPD).
    InverseOfA,
    /// W = A² (A must be symmetric and nonsingular).
    ASquared,
    /// W = (AᵀA)⁻¹.
    GramInverseLeft,
    /// W = (AAᵀ)⁻¹.
    GramInverseRight,
    /// W = A (A must be SPD); implied by the DFP update.
    MatrixA,
}

impl WeightSpec {
    pub fn resolve(&self, a: &Matrix) -> Result<ResolvedWeight> {
        ResolvedWeight::new(self, a)
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightSpec::Identity => "identity",
            WeightSpec::Explicit(_) => "explicit",
            WeightSpec::InverseOfA => "inv-a",
            WeightSpec::ASquared => "a2",
            WeightSpec::GramInverseLeft => "gram-left",
            WeightSpec::GramInverseRight => "gram-right",
            WeightSpec::MatrixA => "a",
        }
    }
}

#[derive(Debug, Clone)]
enum WeightKind {
    Identity,
    Dense(Matrix),
    /// W = A⁻¹ applied through the Cholesky factor of A.
    InverseOfA(Cholesky<f64, Dyn>),
    ASquared(Matrix),
    GramLeft {
        lu: LU<f64, Dyn, Dyn>,
        lu_t: LU<f64, Dyn, Dyn>,
    },
    GramRight {
        lu: LU<f64, Dyn, Dyn>,
        lu_t: LU<f64, Dyn, Dyn>,
    },
}

/// A weight bound to a concrete problem matrix.
#[derive(Debug, Clone)]
pub struct ResolvedWeight {
    spec: WeightSpec,
    a: Matrix,
    kind: WeightKind,
    dense: OnceLock<Matrix>,
    inverse: OnceLock<Matrix>,
}

impl ResolvedWeight {
    pub fn identity(n: usize) -> Self {
        Self {
            spec: WeightSpec::Identity,
            a: Matrix::identity(n, n),
            kind: WeightKind::Identity,
            dense: OnceLock::new(),
            inverse: OnceLock::new(),
        }
    }

    fn new(spec: &WeightSpec, a: &Matrix) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::dim("weight needs a square problem matrix"));
        }
        let lu_pair = || -> Result<(LU<f64, Dyn, Dyn>, LU<f64, Dyn, Dyn>)> {
            let lu = a.clone().lu();
            if !lu.is_invertible() {
                return Err(Error::Singular);
            }
            Ok((lu, a.transpose().lu()))
        };
        let kind = match spec {
            WeightSpec::Identity => WeightKind::Identity,
            WeightSpec::Explicit(w) => {
                if w.nrows() != n || w.ncols() != n {
                    return Err(Error::dim(format!(
                        "weight is {}x{} but problem is {n}x{n}",
                        w.nrows(),
                        w.ncols()
                    )));
                }
                if !is_spd(w) {
                    return Err(Error::WeightNotSpd);
                }
                WeightKind::Dense(symmetrize(w).0)
            }
            WeightSpec::MatrixA => {
                if !is_spd(a) {
                    return Err(Error::WeightNotSpd);
                }
                WeightKind::Dense(symmetrize(a).0)
            }
            WeightSpec::InverseOfA => {
                if !is_symmetric(a, 1e-12) {
                    return Err(Error::WeightNotSpd);
                }
                let chol = Cholesky::new(symmetrize(a).0).ok_or(Error::WeightNotSpd)?;
                WeightKind::InverseOfA(chol)
            }
            WeightSpec::ASquared => {
                if !is_symmetric(a, 1e-12) {
                    return Err(Error::WeightNotSpd);
                }
                if !a.clone().lu().is_invertible() {
                    return Err(Error::WeightNotSpd);
                }
                WeightKind::ASquared(a.clone())
            }
            WeightSpec::GramInverseLeft => {
                let (lu, lu_t) = lu_pair()?;
                WeightKind::GramLeft { lu, lu_t }
            }
            WeightSpec::GramInverseRight => {
                let (lu, lu_t) = lu_pair()?;
                WeightKind::GramRight { lu, lu_t }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            a: a.clone(),
            kind,
            dense: OnceLock::new(),
            inverse: OnceLock::new(),
        })
    }

    pub fn spec(&self) -> &WeightSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.kind, WeightKind::Identity)
    }

    /// `W·m` without forming W for the symbolic kinds.
    pub fn apply(&self, m: &Matrix, fc: &mut FlopCounter) -> Matrix {
        let n = self.n();
        let p = m.ncols();
        match &self.kind {
            WeightKind::Identity => m.clone(),
            WeightKind::Dense(w) => {
                fc.gemm(n, n, p);
                w * m
            }
            WeightKind::InverseOfA(chol) => {
                fc.solve(n, p);
                chol.solve(m)
            }
            WeightKind::ASquared(a) => {
                fc.gemm(n, n, p);
                fc.gemm(n, n, p);
                a * (a * m)
            }
            WeightKind::GramLeft { lu, lu_t } => {
                // (AᵀA)⁻¹ m = A⁻¹ (A⁻ᵀ m)
                fc.solve(n, 2 * p);
                let y = lu_t.solve(m).expect("LU checked invertible");
                lu.solve(&y).expect("LU checked invertible")
            }
            WeightKind::GramRight { lu, lu_t } => {
                fc.solve(n, 2 * p);
                let y = lu.solve(m).expect("LU checked invertible");
                lu_t.solve(&y).expect("LU checked invertible")
            }
        }
    }

    /// W as a dense matrix.
    pub fn dense(&self) -> &Matrix {
        self.dense.get_or_init(|| match &self.kind {
            WeightKind::Identity => Matrix::identity(self.n(), self.n()),
            WeightKind::Dense(w) => w.clone(),
            _ => symmetrize(&self.apply(&Matrix::identity(self.n(), self.n()), &mut FlopCounter::new())).0,
        })
    }

    /// W⁻¹ as a dense matrix.
    pub fn dense_inverse(&self) -> &Matrix {
        self.inverse.get_or_init(|| {
            let n = self.n();
            let inv = match &self.kind {
                WeightKind::Identity => Matrix::identity(n, n),
                WeightKind::Dense(w) => Cholesky::new(w.clone()).expect("weight validated SPD").inverse(),
                WeightKind::InverseOfA(_) => self.a.clone(),
                WeightKind::ASquared(a) => {
                    let ainv = invert(a).expect("A validated nonsingular");
                    &ainv * &ainv
                }
                WeightKind::GramLeft { .. } => self.a.tr_mul(&self.a),
                WeightKind::GramRight { .. } => &self.a * self.a.transpose(),
            };
            symmetrize(&inv).0
        })
    }

    /// W^{1/2} (dense, desk-scale diagnostics only).
    pub fn sqrt(&self) -> Result<Matrix> {
        if self.is_identity() {
            return Ok(Matrix::identity(self.n(), self.n()));
        }
        sym_sqrt(self.dense())
    }

    /// W^{-1/2} (dense, desk-scale diagnostics only).
    pub fn inv_sqrt(&self) -> Result<Matrix> {
        if self.is_identity() {
            return Ok(Matrix::identity(self.n(), self.n()));
        }
        sym_sqrt(self.dense_inverse())
    }
}

/// `‖X‖_{F(W⁻¹)} = ‖W^{-1/2} X W^{-1/2}‖_F = √Tr(XᵀW⁻¹XW⁻¹)`.
pub fn weighted_frobenius_norm(x: &Matrix, w: &ResolvedWeight) -> Result<f64> {
    let n = w.n();
    if x.nrows() != n || x.ncols() != n {
        return Err(Error::dim(format!(
            "matrix is {}x{} but weight is {n}x{n}",
            x.nrows(),
            x.ncols()
        )));
    }
    if w.is_identity() {
        return Ok(x.norm());
    }
    let winv = w.dense_inverse();
    let left = winv * x;
    let right = x * winv;
    // Tr(XᵀW⁻¹XW⁻¹) = ⟨W⁻¹X, XW⁻¹⟩_F
    Ok(left.dot(&right).max(0.0).sqrt())
}

/// `‖Y‖_{W⁻¹} = ‖W^{-1/2} Y W^{-1/2}‖₂` (dense eigendecomposition).
pub fn weighted_operator_norm(y: &Matrix, w: &ResolvedWeight) -> Result<f64> {
    let half = w.inv_sqrt()?;
    let m = &half * y * &half;
    operator_norm(&m)
}

/// Exact spectral norm via the eigendecomposition of `MᵀM`.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    let gram = m.tr_mul(m);
    Ok(symmetric_eigen(&gram)?.max().max(0.0).sqrt())
}
