//! Newton-Schulz and self-conditioned minimal residual iterations.

use crate::error::{Error, Result};
use crate::flops::{mul, FlopCounter};
use crate::linalg::{self, Matrix};

/// Power iterations used for the Newton-Schulz starting scale.
pub const NORM_ESTIMATE_ITERS: usize = 100;

/// `X⁺ = 2X − XAX`.
pub fn newton_schulz_step(x: &Matrix, a: &Matrix, fc: &mut FlopCounter) -> Result<Matrix> {
    check(x, a)?;
    let n = a.nrows();
    let xa = mul(x, a, fc);
    let mut out = -mul(&xa, x, fc);
    out += x * 2.0;
    fc.elementwise(n, n);
    fc.elementwise(n, n);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(out)
}

/// `X₀ = 0.99·Aᵀ/s²` with `s` a power-iteration estimate of `‖A‖₂`.
pub fn newton_schulz_init(a: &Matrix, seed: u64, fc: &mut FlopCounter) -> Result<Matrix> {
    let s = linalg::spectral_norm_estimate_counted(a, NORM_ESTIMATE_ITERS, seed, fc);
    if !(s > 0.0) {
        return Err(Error::NonPositive(s));
    }
    fc.elementwise(a.nrows(), a.ncols());
    Ok(a.transpose() * (0.99 / (s * s)))
}

/// Minimal residual iterate with its cached residual `R = I − AX`.
#[derive(Debug, Clone)]
pub struct MrState {
    pub x: Matrix,
    pub residual: Matrix,
    /// Steps skipped because `AXR` vanished.
    pub stagnated: usize,
}

impl MrState {
    pub fn new(x: Matrix, a: &Matrix) -> Result<Self> {
        check(&x, a)?;
        let residual = identity_minus(&(a * &x));
        Ok(Self {
            x,
            residual,
            stagnated: 0,
        })
    }

    /// `‖R‖_F` from the cache.
    pub fn residual_norm(&self) -> f64 {
        self.residual.norm()
    }

    /// Recomputes `R = I − AX`, returning the drift of the cached copy.
    pub fn revalidate(&mut self, a: &Matrix) -> f64 {
        let fresh = identity_minus(&(a * &self.x));
        let drift = (&fresh - &self.residual).norm();
        self.residual = fresh;
        drift
    }
}

/// `X₀ = (Tr A / Tr(AAᵀ))·I`.
pub fn mr_init(a: &Matrix) -> Result<Matrix> {
    let denom = a.norm_squared();
    if !(denom > 0.0) {
        return Err(Error::NonPositive(denom));
    }
    let n = a.nrows();
    Ok(Matrix::identity(n, n) * (a.trace() / denom))
}

/// `X⁺ = X + αXR` with `α = ⟨R, AXR⟩/‖AXR‖²_F`, the minimizer of
/// `‖I − A(X + αXR)‖_F`. Returns `α`; a vanishing `AXR` leaves the
/// state unchanged and counts as stagnation.
pub fn mr_step(state: &mut MrState, a: &Matrix, fc: &mut FlopCounter) -> Result<f64> {
    check(&state.x, a)?;
    let n = a.nrows();
    let p = mul(&state.x, &state.residual, fc);
    let q = mul(a, &p, fc);
    let num = linalg::frobenius_dot(&state.residual, &q);
    let den = q.norm_squared();
    fc.reduction(n, n);
    fc.reduction(n, n);
    if !(den > 0.0) {
        state.stagnated += 1;
        return Ok(0.0);
    }
    let alpha = num / den;
    state.x += p * alpha;
    state.residual -= q * alpha;
    fc.elementwise(n, n);
    fc.elementwise(n, n);
    if state.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(alpha)
}

fn check(x: &Matrix, a: &Matrix) -> Result<()> {
    if !a.is_square() || x.shape() != a.shape() {
        return Err(Error::dim(format!(
            "iterate is {}x{} and A is {}x{}",
            x.nrows(),
            x.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

fn identity_minus(m: &Matrix) -> Matrix {
    let mut r = -m;
    for i in 0..m.nrows() {
        r[(i, i)] += 1.0;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sketch::gaussian_matrix;
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    fn fc() -> FlopCounter {
        FlopCounter::new()
    }

    #[test]
    fn newton_schulz_scalar() {
        let a = scalar(2.0);
        let x1 = newton_schulz_step(&scalar(0.4), &a, &mut fc()).unwrap();
        assert!((x1[(0, 0)] - 0.48).abs() < 1e-12);
        let x2 = newton_schulz_step(&x1, &a, &mut fc()).unwrap();
        assert!((x2[(0, 0)] - 0.4992).abs() < 1e-12);
        assert_eq!(
            newton_schulz_step(&scalar(0.5), &a, &mut fc()).unwrap(),
            scalar(0.5)
        );
        assert_eq!(
            newton_schulz_step(&scalar(0.0), &a, &mut fc()).unwrap(),
            scalar(0.0)
        );
    }

    #[test]
    fn newton_schulz_init_examples() {
        assert!((newton_schulz_init(&scalar(2.0), 0, &mut fc()).unwrap()[(0, 0)] - 0.495).abs() < 1e-9);
        let i3 = Matrix::identity(3, 3);
        assert!((newton_schulz_init(&i3, 0, &mut fc()).unwrap() - &i3 * 0.99).amax() < 1e-9);
        let d = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        let expect = &d * (0.99 / 9.0);
        assert!((newton_schulz_init(&d, 0, &mut fc()).unwrap() - expect).amax() < 1e-9);
        assert!(newton_schulz_init(&Matrix::zeros(2, 2), 0, &mut fc()).is_err());
    }

    #[test]
    fn newton_schulz_init_contracts_on_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let b = gaussian_matrix(15, 15, &mut rng);
            let a = b.tr_mul(&b) + Matrix::identity(15, 15) * 0.1;
            let x0 = newton_schulz_init(&a, 1, &mut fc()).unwrap();
            let m = linalg::symmetrize(&(Matrix::identity(15, 15) - &x0 * &a)).0;
            assert!(linalg::symmetric_eigen(&m).unwrap().max_abs() < 1.0);
        }
    }

    #[test]
    fn newton_schulz_squares_the_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 8;
        let id = Matrix::identity(n, n);
        for _ in 0..50 {
            let a = gaussian_matrix(n, n, &mut rng) + &id * 4.0;
            let x = newton_schulz_init(&a, 3, &mut fc()).unwrap();
            let r = &id - &a * &x;
            let next = newton_schulz_step(&x, &a, &mut fc()).unwrap();
            let r1 = &id - &a * next;
            assert!((&r1 - &r * &r).amax() < 1e-10);
            let eps = linalg::operator_norm(&r).unwrap();
            if eps < 1.0 {
                assert!(linalg::operator_norm(&r1).unwrap() <= eps * eps + 1e-10);
            }
        }
    }

    #[test]
    fn mr_scalar() {
        let a = scalar(2.0);
        let mut st = MrState::new(scalar(0.25), &a).unwrap();
        let alpha = mr_step(&mut st, &a, &mut fc()).unwrap();
        assert!((alpha - 2.0).abs() < 1e-12);
        assert!((st.x[(0, 0)] - 0.5).abs() < 1e-12);
        assert!(st.residual_norm() < 1e-12);
        mr_step(&mut st, &a, &mut fc()).unwrap();
        assert_eq!(st.stagnated, 1);
        assert!((st.x[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mr_init_examples() {
        assert_eq!(mr_init(&scalar(2.0)).unwrap(), scalar(0.5));
        assert_eq!(mr_init(&Matrix::identity(3, 3)).unwrap(), Matrix::identity(3, 3));
        let d = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0]));
        assert!((mr_init(&d).unwrap() - Matrix::identity(2, 2) * 0.4).amax() < 1e-15);
        assert!(mr_init(&Matrix::zeros(2, 2)).is_err());
        // already exact on a scalar
        let mut st = MrState::new(mr_init(&scalar(2.0)).unwrap(), &scalar(2.0)).unwrap();
        assert_eq!(st.residual_norm(), 0.0);
        mr_step(&mut st, &scalar(2.0), &mut fc()).unwrap();
        assert_eq!(st.x, scalar(0.5));
    }

    #[test]
    fn mr_residual_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 7;
        let a = gaussian_matrix(n, n, &mut rng) + Matrix::identity(n, n) * 3.0;
        let mut st = MrState::new(mr_init(&a).unwrap(), &a).unwrap();
        for k in 0..1000 {
            let before = st.residual_norm();
            mr_step(&mut st, &a, &mut fc()).unwrap();
            let after = identity_minus(&(&a * &st.x)).norm();
            assert!(after <= before + 1e-12);
            if k % 50 == 0 {
                assert!(st.revalidate(&a) < 1e-8);
            }
        }
    }

    #[test]
    fn baselines_fix_the_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5;
        let a = gaussian_matrix(n, n, &mut rng) + Matrix::identity(n, n) * 3.0;
        let ainv = linalg::invert(&a).unwrap();
        let ns = newton_schulz_step(&ainv, &a, &mut fc()).unwrap();
        assert!((&ns - &ainv).amax() < 1e-12);
        let mut st = MrState::new(ainv.clone(), &a).unwrap();
        mr_step(&mut st, &a, &mut fc()).unwrap();
        assert!((&st.x - &ainv).amax() < 1e-12);
    }

    #[test]
    fn newton_schulz_from_identity_blows_up() {
        let a = Matrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0]));
        let mut x = Matrix::identity(2, 2);
        let mut out = Ok(());
        for _ in 0..100 {
            match newton_schulz_step(&x, &a, &mut fc()) {
                Ok(next) => x = next,
                Err(e) => {
                    out = Err(e);
                    break;
                }
            }
        }
        assert!(matches!(out, Err(Error::NonFinite)));
    }
}
