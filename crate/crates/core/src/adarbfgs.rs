//! Adaptive randomized BFGS with iterates held as `X = LLᵀ`.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::flops::{mul, tr_mul, FlopCounter};
use crate::linalg::{self, Matrix};
use crate::sketch::{ProbabilityRule, Sampler, SketchSample};

/// Eigenvalue floor, relative to the largest, for the q×q inverse square roots.
pub const INV_SQRT_FLOOR: f64 = 1e-14;

/// Factored iterate `X = LLᵀ`.
///
/// Keeps `diag(LᵀAL)` up to date so the block probabilities
/// `Tr(S_iᵀAS_i)/Tr(AX)` cost O(n) per step.
#[derive(Debug, Clone)]
pub struct FactoredState {
    l: Matrix,
    k: usize,
    diag: DVector<f64>,
}

impl FactoredState {
    pub fn new(l: Matrix, a: &Matrix) -> Result<Self> {
        if !l.is_square() || l.nrows() != a.nrows() {
            return Err(Error::dim(format!(
                "factor is {}x{} and A is {}x{}",
                l.nrows(),
                l.ncols(),
                a.nrows(),
                a.ncols()
            )));
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let diag = (l.transpose() * a * &l).diagonal();
        Ok(Self { l, k: 0, diag })
    }

    pub fn identity(a: &Matrix) -> Result<Self> {
        Self::new(Matrix::identity(a.nrows(), a.nrows()), a)
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    /// The maintained `diag(LᵀAL)`.
    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn reconstruct(&self) -> Matrix {
        reconstruct(self)
    }

    /// `Tr(S_iᵀAS_i)/Tr(LᵀAL)` for each block of columns of L. `None` when
    /// some block weight is not positive.
    pub fn block_probabilities(&self, blocks: &[Vec<usize>]) -> Option<Vec<f64>> {
        let weights: Vec<f64> = blocks
            .iter()
            .map(|b| b.iter().map(|&j| self.diag[j]).sum::<f64>())
            .collect();
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || !total.is_finite() {
            return None;
        }
        Some(weights.into_iter().map(|w| w / total).collect())
    }

    /// `‖I − ALLᵀ‖_F`, refreshing the maintained diagonal from the same
    /// product `M = AL`.
    pub fn residual_norm(&mut self, a: &Matrix) -> f64 {
        let m = a * &self.l;
        let mut r = -(&m * self.l.transpose());
        for i in 0..self.n() {
            r[(i, i)] += 1.0;
        }
        for j in 0..self.n() {
            self.diag[j] = self.l.column(j).dot(&m.column(j));
        }
        r.norm()
    }

    /// 2-norm condition number of L.
    pub fn condition_estimate(&self) -> f64 {
        let sv = self.l.clone().singular_values();
        sv.max() / sv.min()
    }
}

/// `X = LLᵀ`.
pub fn reconstruct(state: &FactoredState) -> Matrix {
    linalg::symmetrize(&(&state.l * state.l.transpose())).0
}

/// One BFGS step applied to the factor, with `S = LS̃`:
/// `L⁺ = L + SR((S̃ᵀS̃)^{-1/2}S̃ᵀ − RSᵀAL)` where `R = (SᵀAS)^{-1/2}`.
///
/// `s` must equal `L·s_tilde`. `orthonormal` skips forming
/// `(S̃ᵀS̃)^{-1/2}` when S̃ has orthonormal columns.
pub fn factored_update(
    state: &mut FactoredState,
    a: &Matrix,
    s_tilde: &Matrix,
    s: &Matrix,
    orthonormal: bool,
    fc: &mut FlopCounter,
) -> Result<()> {
    let (n, q) = (state.n(), s.ncols());
    if s.nrows() != n || s_tilde.shape() != s.shape() || a.nrows() != n {
        return Err(Error::dim("sketch and factor sizes disagree"));
    }
    let as_ = mul(a, s, fc);
    let g = linalg::symmetrize(&tr_mul(s, &as_, fc)).0;
    let r = linalg::sym_inv_sqrt(&g, INV_SQRT_FLOOR)?;
    fc.small_inverse(q);
    // Y = SᵀAL, using the symmetry of A
    let y = tr_mul(&as_, &state.l, fc);
    let mut k = -mul(&r, &y, fc);
    if orthonormal {
        k += s_tilde.transpose();
    } else {
        let h = linalg::sym_inv_sqrt(
            &linalg::symmetrize(&tr_mul(s_tilde, s_tilde, fc)).0,
            INV_SQRT_FLOOR,
        )?;
        fc.small_inverse(q);
        k += mul(&h, &s_tilde.transpose(), fc);
    }
    fc.elementwise(q, n);
    let k = mul(&r, &k, fc);

    let gk = mul(&g, &k, fc);
    for j in 0..n {
        let mut delta = 0.0;
        for i in 0..q {
            delta += k[(i, j)] * (2.0 * y[(i, j)] + gk[(i, j)]);
        }
        state.diag[j] += delta;
    }
    fc.add("reduction", (4 * q * n) as u64);

    state.l += mul(s, &k, fc);
    fc.elementwise(n, n);
    if state.l.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    state.k += 1;
    Ok(())
}

/// Factored update from S̃ alone, forming `S = LS̃`.
pub fn factored_update_from(
    state: &mut FactoredState,
    a: &Matrix,
    s_tilde: &Matrix,
    fc: &mut FlopCounter,
) -> Result<()> {
    let s = mul(&state.l, s_tilde, fc);
    factored_update(state, a, s_tilde, &s, false, fc)
}

/// One AdaRBFGS iteration: refresh block probabilities when the rule is
/// `Convenient`, draw `S = LS̃`, update the factor. Draws that make a q×q
/// Gram matrix numerically singular are redrawn up to the sampler limit.
pub fn adarbfgs_step(
    state: &mut FactoredState,
    a: &Matrix,
    sampler: &mut Sampler,
    probabilities: &ProbabilityRule,
    fc: &mut FlopCounter,
) -> Result<SketchSample> {
    if matches!(probabilities, ProbabilityRule::Convenient) {
        if let Some(p) = sampler.blocks().and_then(|b| state.block_probabilities(b)) {
            sampler.set_probabilities(p)?;
        }
    }
    let n = state.n();
    for _ in 0..=sampler.redraw_limit() {
        let sample = sampler.draw(Some(&state.l))?;
        let tilde = sample
            .pre_factor
            .as_ref()
            .ok_or_else(|| Error::config("sketch is not adaptive"))?;
        let selected = sample.columns.is_some();
        if !selected {
            // the sampler formed S = LS̃ for us
            fc.gemm(n, n, tilde.ncols());
        }
        let mut trial = FlopCounter::new();
        match factored_update(state, a, tilde, &sample.matrix, selected, &mut trial) {
            Ok(()) => {
                fc.merge(&trial);
                return Ok(sample);
            }
            Err(Error::RankDeficient { .. }) => fc.merge(&trial),
            Err(e) => return Err(e),
        }
    }
    Err(Error::RejectionLimit {
        rule: sampler.rule().to_string(),
        limit: sampler.redraw_limit(),
    })
}

/// `1 − λ_min(AX)/Tr(AX)`: the one-step contraction bound in the
/// `A`-weighted Frobenius norm for SPD `X` and `A`.
pub fn one_step_rate_bound(x: &Matrix, a: &Matrix) -> Result<f64> {
    if x.shape() != a.shape() || !a.is_square() {
        return Err(Error::dim("X and A must be square and of equal size"));
    }
    if !linalg::is_spd(a) {
        return Err(Error::NotSpd);
    }
    if !linalg::is_spd(x) {
        return Err(Error::NotSpd);
    }
    // AX is similar to CᵀXC with A = CCᵀ
    let c = a.clone().cholesky().ok_or(Error::NotSpd)?.l();
    let m = linalg::symmetrize(&(c.transpose() * x * &c)).0;
    let eig = linalg::symmetric_eigen(&m)?;
    let trace = m.trace();
    Ok((1.0 - eig.min() / trace).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ResolvedWeight, WeightSpec};
    use crate::qn::bfgs_step;
    use crate::sketch::{contiguous_blocks, gaussian_matrix, selector, Side, SketchKind, SketchRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let b = gaussian_matrix(n, n, rng) / (n as f64).sqrt();
        b.tr_mul(&b) + Matrix::identity(n, n) * 0.5
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn scalar_example() {
        let a = Matrix::from_element(1, 1, 4.0);
        let mut st = FactoredState::identity(&a).unwrap();
        let one = Matrix::from_element(1, 1, 1.0);
        factored_update(&mut st, &a, &one, &one, true, &mut FlopCounter::new()).unwrap();
        assert!((st.l()[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((st.reconstruct()[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((st.diag()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_sketch_gives_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 6;
        let a = spd(n, &mut rng);
        let mut st = FactoredState::identity(&a).unwrap();
        factored_update_from(&mut st, &a, &Matrix::identity(n, n), &mut FlopCounter::new()).unwrap();
        assert!(rel(&st.reconstruct(), &linalg::invert(&a).unwrap()) < 1e-10);
    }

    #[test]
    fn reconstruct_examples() {
        let a = Matrix::identity(2, 2);
        let l = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.0]);
        let st = FactoredState::new(l, &a).unwrap();
        assert_eq!(
            st.reconstruct(),
            Matrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 2.0])
        );
        let st = FactoredState::new(Matrix::from_diagonal(&DVector::from_vec(vec![3.0, -2.0])), &a).unwrap();
        assert_eq!(
            st.reconstruct(),
            Matrix::from_diagonal(&DVector::from_vec(vec![9.0, 4.0]))
        );
        assert_eq!(FactoredState::identity(&a).unwrap().reconstruct(), a);
    }

    #[test]
    fn rate_bound_examples() {
        let i2 = Matrix::identity(2, 2);
        assert!((one_step_rate_bound(&i2, &i2).unwrap() - 0.5).abs() < 1e-12);
        let a = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((one_step_rate_bound(&i2, &a).unwrap() - 0.75).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = spd(4, &mut rng);
        let bound = one_step_rate_bound(&linalg::invert(&a).unwrap(), &a).unwrap();
        assert!((bound - 0.75).abs() < 1e-10);
        let indefinite = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            one_step_rate_bound(&indefinite, &i2),
            Err(Error::NotSpd)
        ));
    }

    #[test]
    fn factored_matches_direct_bfgs() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 10;
        let a = spd(n, &mut rng);
        let mut st = FactoredState::identity(&a).unwrap();
        let mut worst: f64 = 0.0;
        for k in 0..1000 {
            let q = rng.random_range(1..=4);
            let tilde = if k % 2 == 0 {
                gaussian_matrix(n, q, &mut rng)
            } else {
                let mut cols: Vec<usize> = (0..n).collect();
                rand::seq::SliceRandom::shuffle(cols.as_mut_slice(), &mut rng);
                selector(n, &cols[..q])
            };
            let x = st.reconstruct();
            let s = st.l() * &tilde;
            let direct = bfgs_step(&x, &a, &s, &mut FlopCounter::new()).unwrap();
            factored_update_from(&mut st, &a, &tilde, &mut FlopCounter::new()).unwrap();
            worst = worst.max(rel(&st.reconstruct(), &direct));
            assert!(linalg::min_eigenvalue(&st.reconstruct()).unwrap() > 0.0);
        }
        assert!(worst < 1e-8, "factored vs direct discrepancy {worst}");
    }

    #[test]
    fn the_printed_r_form_is_not_bfgs() {
        // R = (S̃ᵀAS̃)^{-1/2} instead of (SᵀAS)^{-1/2} breaks the equivalence
        // as soon as L ≠ I.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let a = spd(n, &mut rng);
        let l = Matrix::identity(n, n) + gaussian_matrix(n, n, &mut rng) * 0.3;
        let tilde = selector(n, &[0, 2]);
        let s = &l * &tilde;
        let r = linalg::sym_inv_sqrt(&(tilde.transpose() * &a * &tilde), INV_SQRT_FLOOR).unwrap();
        let l_alt = &l + &s * &r * (tilde.transpose() - &r * s.transpose() * &a * &l);
        let direct = bfgs_step(&(&l * l.transpose()), &a, &s, &mut FlopCounter::new()).unwrap();
        assert!(rel(&(&l_alt * l_alt.transpose()), &direct) > 1e-3);
    }

    #[test]
    fn maintained_diagonal_tracks_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 9;
        let a = spd(n, &mut rng);
        let mut st = FactoredState::identity(&a).unwrap();
        for _ in 0..200 {
            let tilde = gaussian_matrix(n, 2, &mut rng);
            factored_update_from(&mut st, &a, &tilde, &mut FlopCounter::new()).unwrap();
        }
        let exact = (st.l().transpose() * &a * st.l()).diagonal();
        assert!((st.diag() - &exact).amax() < 1e-8 * exact.amax());
        let before = st.diag().clone();
        st.residual_norm(&a);
        assert!((st.diag() - before).amax() < 1e-8 * exact.amax());
    }

    #[test]
    fn step_through_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 12;
        let a = spd(n, &mut rng);
        let id = ResolvedWeight::identity(n);
        for (kind, p) in [
            (
                SketchKind::AdaptiveFactorCols {
                    blocks: contiguous_blocks(n, 3),
                },
                ProbabilityRule::Convenient,
            ),
            (
                SketchKind::AdaptiveFactorCols {
                    blocks: contiguous_blocks(n, 3),
                },
                ProbabilityRule::Uniform,
            ),
            (SketchKind::AdaptiveFactorGauss { q: 3 }, ProbabilityRule::Uniform),
        ] {
            let rule = SketchRule::new(kind, p.clone());
            let mut sampler = rule
                .sampler(&a, &id, Side::Row, ChaCha8Rng::seed_from_u64(2))
                .unwrap();
            let mut st = FactoredState::identity(&a).unwrap();
            let r0 = st.residual_norm(&a);
            let mut fc = FlopCounter::new();
            for _ in 0..300 {
                adarbfgs_step(&mut st, &a, &mut sampler, &p, &mut fc).unwrap();
            }
            assert!(st.residual_norm(&a) < 1e-6 * r0);
            assert!(fc.total() > 0);
            if p == ProbabilityRule::Convenient {
                let expect = st.block_probabilities(sampler.blocks().unwrap()).unwrap();
                assert!(expect
                    .iter()
                    .zip(sampler.probabilities())
                    .all(|(x, y)| (x - y).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn conditional_mean_respects_one_step_bound() {
        // exact expectation over the block partition, then a Monte-Carlo check
        // of the same quantity
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inv_a = WeightSpec::InverseOfA;
        for trial in 0..20 {
            let n = rng.random_range(3..=12);
            let a = spd(n, &mut rng);
            let ainv = linalg::invert(&a).unwrap();
            let w = inv_a.resolve(&a).unwrap();
            let l = Matrix::identity(n, n) + gaussian_matrix(n, n, &mut rng) * 0.2;
            let st = FactoredState::new(l, &a).unwrap();
            let x = st.reconstruct();
            let bound = one_step_rate_bound(&x, &a).unwrap();
            let err0 = linalg::weighted_frobenius_norm(&(&x - &ainv), &w)
                .unwrap()
                .powi(2);
            let blocks = contiguous_blocks(n, 1 + trial % 3);
            let p = st.block_probabilities(&blocks).unwrap();
            let errs: Vec<f64> = blocks
                .iter()
                .map(|b| {
                    let mut next = st.clone();
                    factored_update_from(&mut next, &a, &selector(n, b), &mut FlopCounter::new()).unwrap();
                    linalg::weighted_frobenius_norm(&(next.reconstruct() - &ainv), &w)
                        .unwrap()
                        .powi(2)
                })
                .collect();
            let mean: f64 = errs.iter().zip(&p).map(|(e, p)| e * p).sum();
            assert!(mean <= bound * err0 * (1.0 + 1e-10), "{mean} > {bound} * {err0}");

            let index = rand::distr::weighted::WeightedIndex::new(&p).unwrap();
            let draws: Vec<f64> = (0..2000)
                .map(|_| errs[rand::distr::Distribution::sample(&index, &mut rng)])
                .collect();
            let m = draws.iter().sum::<f64>() / draws.len() as f64;
            let var = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
            let se = (var / draws.len() as f64).sqrt();
            assert!(m <= bound * err0 + 3.0 * se);
        }
    }
}
