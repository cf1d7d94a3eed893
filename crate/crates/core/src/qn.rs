//! Named randomized quasi-Newton updates, each a closed-form
//! specialization of a generic sketch-and-project step.

use crate::error::{Error, Result};
use crate::flops::{mul, mul_tr, tr_mul, FlopCounter};
use crate::linalg::{self, Matrix, ResolvedWeight, Symmetry, WeightSpec};
use crate::simi;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateName {
    Kaczmarz,
    BadBroyden,
    Psb,
    GoodBroyden,
    Aip,
    Dfp,
    Bfgs,
    Column,
}

/// The inverse equation an update is projecting onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InverseEquation {
    /// `AX = I`
    Left,
    /// `XA = I`
    Right,
    /// `XA⁻¹ = I`: the iterate approaches A itself.
    Primal,
}

/// Weight, equation and requirement implied by a named update.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedUpdate {
    pub name: UpdateName,
    pub implied_weight: WeightSpec,
    pub equation: InverseEquation,
    pub symmetric_iterate: bool,
    pub requires: Symmetry,
    /// The primal iterate approaches A; the inverse is carried alongside.
    pub tracks_inverse_iterate: bool,
}

impl NamedUpdate {
    pub fn of(name: UpdateName) -> Self {
        use InverseEquation::*;
        let (implied_weight, equation, symmetric_iterate, requires) = match name {
            UpdateName::Kaczmarz => (WeightSpec::Identity, Left, false, Symmetry::General),
            UpdateName::BadBroyden => (WeightSpec::Identity, Right, false, Symmetry::General),
            UpdateName::Psb => (WeightSpec::Identity, Left, true, Symmetry::Symmetric),
            UpdateName::GoodBroyden => (WeightSpec::Identity, Primal, false, Symmetry::General),
            UpdateName::Aip => (WeightSpec::InverseOfA, Left, false, Symmetry::Spd),
            UpdateName::Dfp => (WeightSpec::MatrixA, Primal, true, Symmetry::Spd),
            UpdateName::Bfgs => (WeightSpec::InverseOfA, Left, true, Symmetry::Spd),
            UpdateName::Column => (WeightSpec::GramInverseLeft, Left, false, Symmetry::General),
        };
        Self {
            name,
            implied_weight,
            equation,
            symmetric_iterate,
            requires,
            tracks_inverse_iterate: equation == Primal,
        }
    }

    pub fn all() -> Vec<Self> {
        use UpdateName::*;
        [Kaczmarz, BadBroyden, Psb, GoodBroyden, Aip, Dfp, Bfgs, Column]
            .into_iter()
            .map(Self::of)
            .collect()
    }

    /// Rejects problem matrices that do not meet the update's requirement.
    pub fn check(&self, a: &linalg::ProblemMatrix) -> Result<()> {
        match self.requires {
            Symmetry::General => Ok(()),
            Symmetry::Symmetric if a.is_symmetric() => Ok(()),
            Symmetry::Symmetric => Err(Error::NotSymmetric),
            Symmetry::Spd if a.is_spd() => Ok(()),
            Symmetry::Spd => Err(Error::NotSpd),
        }
    }
}

/// `X + AᵀS(SᵀAAᵀS)⁻¹Sᵀ(I − AX)`: the row step with W = I.
pub fn kaczmarz_step(x: &Matrix, a: &Matrix, s: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    simi::step_row(x, a, &ResolvedWeight::identity(a.nrows()), s, fc)
}

/// `X + (I − XA)S(SᵀAᵀAS)⁻¹SᵀAᵀ`. Single-column sketches take the
/// rank-one path.
pub fn bad_broyden_step(x: &Matrix, a: &Matrix, s: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    if s.ncols() == 1 {
        bad_broyden_rank_one(x, a, s, fc)
    } else {
        simi::step_col(x, a, &ResolvedWeight::identity(a.nrows()), s, fc)
    }
}

/// `X + ((δ − Xγ)/‖γ‖²)γᵀ` with `δ = s` and `γ = As`.
pub fn bad_broyden_rank_one(x: &Matrix, a: &Matrix, s: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    let n = a.nrows();
    if s.ncols() != 1 || s.nrows() != n {
        return Err(Error::dim("rank-one update needs a single sketch column"));
    }
    let gamma = mul(a, s, fc);
    let norm_sq = gamma.norm_squared();
    fc.reduction(n, 1);
    if !(norm_sq > 0.0) {
        return Err(Error::RankDeficient { dropped: 1, size: 1 });
    }
    let mut d = -mul(x, &gamma, fc);
    d += s;
    d /= norm_sq;
    fc.elementwise(n, 2);
    let mut out = mul_tr(&d, &gamma, fc);
    out += x;
    fc.elementwise(n, n);
    Ok(out)
}

/// Block PSB: the symmetric step with W = I.
pub fn psb_step(x: &Matrix, a: &Matrix, s: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    let u = mul(a, s, fc);
    simi::sym_update(x, &u, &u, s, fc)
}

/// Good Broyden on coordinate `i`: `X⁺ = X + (A − X)e_ie_iᵀ`, with the
/// inverse kept by Sherman-Morrison. Updates both in place.
pub fn good_broyden_step(
    x: &mut Matrix,
    xinv: &mut Matrix,
    a: &Matrix,
    i: usize,
    fc: &mut FlopCounter,
) -> Result<()> {
    let n = a.nrows();
    if i >= n {
        return Err(Error::dim(format!("index {i} out of range for n = {n}")));
    }
    // X⁺ = X + u e_iᵀ with u = (A − X)e_i; the denominator
    // 1 + e_iᵀX⁻¹u equals e_iᵀX⁻¹Ae_i.
    let u = a.column(i) - x.column(i);
    fc.elementwise(n, 1);
    let xinv_u = &*xinv * &u;
    fc.gemm(n, n, 1);
    let denom = 1.0 + xinv_u[i];
    let scale = xinv.row(i).norm() * a.column(i).norm();
    if !(denom.abs() > 1e-14 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::DegeneratePivot(i));
    }
    let row = xinv.row(i).into_owned() / denom;
    *xinv -= &xinv_u * row;
    fc.gemm(n, 1, n);
    fc.elementwise(n, n);
    x.set_column(i, &a.column(i));
    Ok(())
}

/// `X + S(SᵀAS)⁻¹Sᵀ(I − AX)`: the row step with W = A⁻¹, which needs
/// only A.
pub fn aip_step(x: &Matrix, a: &Matrix, s: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    let (n, q) = (a.nrows(), s.ncols());
    let u = mul(a, s, fc);
    let g = tr_mul(s, &u, fc);
    let ginv = linalg::invert_gram(&linalg::symmetrize(&g).0, fc)?;
    let mut r = -tr_mul(&u, x, fc);
    for j in 0..n {
        for k in 0..q {
            r[(k, j)] += s[(j, k)];
        }
    }
    fc.elementwise(q, n);
    let t = mul(&ginv, &r, fc);
    let mut out = mul(s, &t, fc);
    out += x;
    fc.elementwise(n, n);
    Ok(out)
}

/// Block DFP toward A: `X⁺ = AΩA + (I − AΩ)X(I − ΩA)` with
/// `Ω = S(SᵀAS)⁻¹Sᵀ`, and the inverse updated by Woodbury:
/// `X⁺⁻¹ = X⁻¹ + S(SᵀAS)⁻¹Sᵀ − X⁻¹AS(SᵀAX⁻¹AS)⁻¹SᵀAX⁻¹`.
pub fn dfp_step(
    x: &Matrix,
    xinv: &Matrix,
    a: &Matrix,
    s: &Matrix,
    fc: &mut FlopCounter,
) -> Result<(Matrix, Matrix)> {
    let n = a.nrows();
    let u = mul(a, s, fc);
    // The projection onto {X : XS = AS, X = Xᵀ} in the A⁻¹-weighted norm.
    let next = simi::sym_update(x, s, &u, &u, fc)?;

    let g = tr_mul(s, &u, fc);
    let ginv = linalg::invert_gram(&linalg::symmetrize(&g).0, fc)?;
    let hu = mul(xinv, &u, fc);
    let h = tr_mul(&u, &hu, fc);
    let hinv = linalg::invert_gram(&linalg::symmetrize(&h).0, fc)?;
    let mut next_inv = mul_tr(&mul(s, &ginv, fc), s, fc);
    next_inv -= mul_tr(&mul(&hu, &hinv, fc), &hu, fc);
    next_inv += xinv;
    fc.elementwise(n, n);
    fc.elementwise(n, n);
    Ok((next, next_inv))
}

/// Block BFGS: `S(SᵀAS)⁻¹Sᵀ + (I − S(SᵀAS)⁻¹SᵀA)X(I − AS(SᵀAS)⁻¹Sᵀ)`.
pub fn bfgs_step(x: &Matrix, a: &Matrix, s: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    let u = mul(a, s, fc);
    simi::sym_update(x, &u, s, s, fc)
}

/// Column update with sketch `S = AV`.
///
/// Nonsymmetric: `X + V(VᵀAᵀAV)⁻¹Vᵀ(Aᵀ − AᵀAX)`, the row step with
/// W = (AᵀA)⁻¹. Symmetric: the symmetric step with the same weight, for
/// symmetric A and X.
pub fn column_update_step(
    x: &Matrix,
    a: &Matrix,
    v: &Matrix,
    symmetric: bool,
    fc: &mut FlopCounter,
) -> Result<Matrix> {
    let (n, q) = (a.nrows(), v.ncols());
    let s = mul(a, v, fc);
    if symmetric {
        // The step only depends on range(V). Rebase to V' = VR⁻¹ with AV = QR
        // so the Gram matrix is QᵀQ = I instead of VᵀA²V.
        let qr = s.qr();
        let (q_basis, r) = (qr.q(), qr.r());
        fc.add("qr", 2 * (n * q * q) as u64);
        let scale = r.diagonal().amax();
        let dropped = r.diagonal().iter().filter(|d| d.abs() <= 1e-14 * scale).count();
        if dropped > 0 || scale == 0.0 {
            return Err(Error::RankDeficient {
                dropped: dropped.max(1),
                size: q,
            });
        }
        let rebased = r
            .tr_solve_upper_triangular(&v.transpose())
            .ok_or(Error::RankDeficient { dropped: 1, size: q })?
            .transpose();
        fc.add("trsm", (n * q * q) as u64);
        // U = AS and WU = (AᵀA)⁻¹A²V = V for symmetric A.
        let u = mul(a, &q_basis, fc);
        return simi::sym_update(x, &u, &rebased, &q_basis, fc);
    }
    let g = tr_mul(&s, &s, fc);
    let ginv = linalg::invert_gram(&linalg::symmetrize(&g).0, fc)?;
    let t = tr_mul(a, &s, fc);
    // R = Sᵀ − (AᵀS)ᵀX = VᵀAᵀ − VᵀAᵀAX
    let mut r = -tr_mul(&t, x, fc);
    for j in 0..n {
        for k in 0..q {
            r[(k, j)] += s[(j, k)];
        }
    }
    fc.elementwise(q, n);
    let mut out = mul(v, &mul(&ginv, &r, fc), fc);
    out += x;
    fc.elementwise(n, n);
    Ok(out)
}
