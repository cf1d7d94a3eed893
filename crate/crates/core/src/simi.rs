//! The generic sketch-and-project steps: nonsymmetric row and column
//! variants and the symmetric variant.
//!
//! All kernels cost O(n²q) for an n×q sketch and never form W; weights
//! enter only through [`ResolvedWeight::apply`].

use crate::error::{Error, Result};
use crate::flops::{mul, mul_tr, tr_mul, FlopCounter};
use crate::linalg::{self, Matrix, ResolvedWeight};

fn check_shapes(x: &Matrix, a: &Matrix, s: &Matrix) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n || x.nrows() != n || x.ncols() != n {
        return Err(Error::dim(format!(
            "iterate is {}x{} and A is {}x{}",
            x.nrows(),
            x.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    if s.nrows() != n || s.ncols() == 0 {
        return Err(Error::dim(format!(
            "sketch is {}x{} for n = {n}",
            s.nrows(),
            s.ncols()
        )));
    }
    Ok(())
}

/// Row variant: `X + WAᵀS (SᵀAWAᵀS)⁻¹ Sᵀ(I − AX)`.
///
/// The result satisfies `SᵀAX⁺ = Sᵀ`.
pub fn step_row(
    x: &Matrix,
    a: &Matrix,
    w: &ResolvedWeight,
    s: &Matrix,
    fc: &mut FlopCounter,
) -> Result<Matrix> {
    check_shapes(x, a, s)?;
    let (n, q) = (a.nrows(), s.ncols());
    let m = tr_mul(a, s, fc);
    let v = w.apply(&m, fc);
    let g = tr_mul(&m, &v, fc);
    let ginv = linalg::invert_gram(&g, fc)?;
    let mut r = -tr_mul(&m, x, fc);
    for j in 0..n {
        for i in 0..q {
            r[(i, j)] += s[(j, i)];
        }
    }
    fc.elementwise(q, n);
    let t = mul(&ginv, &r, fc);
    let mut out = mul(&v, &t, fc);
    out += x;
    fc.elementwise(n, n);
    Ok(out)
}

/// Column variant: `X + (I − XA)S (SᵀAᵀWAS)⁻¹ SᵀAᵀW`.
///
/// The result satisfies `X⁺AS = S`.
pub fn step_col(
    x: &Matrix,
    a: &Matrix,
    w: &ResolvedWeight,
    s: &Matrix,
    fc: &mut FlopCounter,
) -> Result<Matrix> {
    check_shapes(x, a, s)?;
    let n = a.nrows();
    let u = mul(a, s, fc);
    let v = w.apply(&u, fc);
    let g = tr_mul(&u, &v, fc);
    let ginv = linalg::invert_gram(&g, fc)?;
    let mut p = -mul(x, &u, fc);
    p += s;
    fc.elementwise(n, s.ncols());
    let pg = mul(&p, &ginv, fc);
    let mut out = mul_tr(&pg, &v, fc);
    out += x;
    fc.elementwise(n, n);
    Ok(out)
}

/// Symmetric variant for symmetric A and X. The result is symmetric up to
/// rounding and satisfies `SᵀAX⁺ = Sᵀ`.
pub fn step_sym(
    x: &Matrix,
    a: &Matrix,
    w: &ResolvedWeight,
    s: &Matrix,
    fc: &mut FlopCounter,
) -> Result<Matrix> {
    check_shapes(x, a, s)?;
    let u = mul(a, s, fc);
    let v = w.apply(&u, fc);
    sym_update(x, &u, &v, s, fc)
}

/// Shared kernel of every symmetric update.
///
/// With `G = UᵀV`, `P = XU − S`, `B = PG⁻¹` and `C = G⁻¹UᵀPG⁻¹` it returns
/// `X − BVᵀ − VBᵀ + VCVᵀ`. For the symmetric variant `U = AS` and `V = WAS`;
/// BFGS has `V = S`, PSB `V = U`, and DFP is the same projection acting on
/// the equation `XS = AS`.
pub(crate) fn sym_update(
    x: &Matrix,
    u: &Matrix,
    v: &Matrix,
    s: &Matrix,
    fc: &mut FlopCounter,
) -> Result<Matrix> {
    let (n, q) = (x.nrows(), u.ncols());
    let g = tr_mul(u, v, fc);
    let ginv = linalg::invert_gram(&linalg::symmetrize(&g).0, fc)?;
    let mut p = mul(x, u, fc);
    p -= s;
    fc.elementwise(n, q);
    let t = tr_mul(u, &p, fc);
    let c = mul(&mul(&ginv, &t, fc), &ginv, fc);
    let b = mul(&p, &ginv, fc);
    let mut vc = mul(v, &c, fc);
    vc -= &b;
    fc.elementwise(n, q);
    let mut out = mul_tr(&vc, v, fc);
    out -= mul_tr(v, &b, fc);
    out += x;
    fc.elementwise(n, n);
    fc.elementwise(n, n);
    Ok(out)
}

/// The symmetric step written out literally as
/// `X − (XA − I)SΛSᵀAW + WASΛSᵀ(AX − I)(ASΛSᵀAW − I)` with
/// `Λ = (SᵀAWAS)⁻¹`. Dense in W; used as a test oracle.
pub fn step_sym_closed_form(x: &Matrix, a: &Matrix, w: &ResolvedWeight, s: &Matrix) -> Result<Matrix> {
    check_shapes(x, a, s)?;
    let n = a.nrows();
    let id = Matrix::identity(n, n);
    let wd = w.dense();
    let as_ = a * s;
    let lambda = linalg::invert(&(as_.transpose() * wd * &as_))?;
    let sls = s * &lambda * s.transpose();
    let first = (x * a - &id) * &sls * a * wd;
    let second = wd * a * &sls * (a * x - &id) * (a * &sls * a * wd - &id);
    Ok(x - first + second)
}

/// Re-symmetrizes in place, returning the largest entry changed.
pub fn resymmetrize(x: &mut Matrix) -> f64 {
    let (sym, drift) = linalg::symmetrize(x);
    *x = sym;
    drift
}
