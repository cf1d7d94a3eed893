//! Convergence-rate diagnostics for discrete samplings: the random
//! projector, its expectation, the rate ρ with its bounds, scaled condition
//! numbers and the probability-optimization bound.
//!
//! Everything here is dense and O(n³); intended for desk-scale problems.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, ResolvedWeight};
use crate::sketch::{self, DiscreteSampling, InverseSource, Side};

/// Tolerance on the bounds `1 − E[q]/n ≤ ρ ≤ 1` and on spectra in `[0, 1]`.
pub const SPECTRUM_TOLERANCE: f64 = 1e-10;

fn oriented(a: &Matrix, side: Side) -> Matrix {
    match side {
        Side::Row => a.clone(),
        Side::Col => a.transpose(),
    }
}

/// `Z = AᵀS (SᵀAWAᵀS)⁻¹ SᵀA` on the row side; the column side uses Aᵀ in
/// place of A.
pub fn projector_z(a: &Matrix, w: &ResolvedWeight, s: &Matrix, side: Side) -> Result<Matrix> {
    if s.nrows() != a.nrows() {
        return Err(Error::dim(format!(
            "sketch has {} rows, A has {}",
            s.nrows(),
            a.nrows()
        )));
    }
    let m = oriented(a, side).tr_mul(s);
    let mut fc = crate::flops::FlopCounter::new();
    let gram = m.tr_mul(&w.apply(&m, &mut fc));
    let ginv = linalg::invert_gram(&gram, &mut fc)?;
    Ok(&m * ginv * m.transpose())
}

/// `E[Z] = Aᵀ𝐒 D² 𝐒ᵀA` with `D² = blockdiag(p_i (S_iᵀAWAᵀS_i)⁻¹)`.
pub fn expected_z_discrete(
    a: &Matrix,
    w: &ResolvedWeight,
    sampling: &DiscreteSampling,
    side: Side,
) -> Result<Matrix> {
    sampling.check_complete()?;
    let ao = oriented(a, side);
    let stacked = sampling.stacked();
    let total = stacked.ncols();
    let mut d2 = Matrix::zeros(total, total);
    let mut fc = crate::flops::FlopCounter::new();
    let mut at = 0;
    for (s, p) in sampling.members().iter().zip(sampling.probabilities()) {
        let q = s.ncols();
        let m = ao.tr_mul(s);
        let gram = m.tr_mul(&w.apply(&m, &mut fc));
        let ginv = linalg::invert_gram(&gram, &mut fc)?;
        d2.view_mut((at, at), (q, q)).copy_from(&(ginv * *p));
        at += q;
    }
    let m = ao.tr_mul(&stacked);
    Ok(linalg::symmetrize(&(&m * d2 * m.transpose())).0)
}

/// `Σ p_i Z_i` over every outcome; the oracle for the closed form.
pub fn expected_z_enumerated(
    a: &Matrix,
    w: &ResolvedWeight,
    sampling: &DiscreteSampling,
    side: Side,
) -> Result<Matrix> {
    let n = a.nrows();
    let mut total = Matrix::zeros(n, n);
    for (s, p) in sampling.members().iter().zip(sampling.probabilities()) {
        total += projector_z(a, w, s, side)? * *p;
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub expected_z: Matrix,
    /// Ascending spectrum of `W^{1/2} E[Z] W^{1/2}`.
    pub spectrum: Vec<f64>,
    pub rho: f64,
    /// `1 − E[q]/n`.
    pub lower_bound: f64,
    /// κ_{2,F} of `W^{1/2}Aᵀ𝐒` (row side).
    pub kappa_2f: Option<f64>,
    /// γ(p), available when the stacked sketch is square.
    pub gamma_bound: Option<f64>,
    pub descriptor: String,
}

impl RateReport {
    /// `1 − E[q]/n ≤ ρ ≤ 1` up to [`SPECTRUM_TOLERANCE`].
    pub fn sandwich_holds(&self) -> bool {
        self.lower_bound - SPECTRUM_TOLERANCE <= self.rho && self.rho <= 1.0 + SPECTRUM_TOLERANCE
    }

    /// Iterations sufficient for `E‖X_k − A⁻¹‖²` to shrink by ε.
    pub fn iterations_for(&self, epsilon: f64) -> f64 {
        iteration_complexity(epsilon, self.rho)
    }
}

/// `ρ = 1 − λ_min(W^{1/2} E[Z] W^{1/2})`.
pub fn rho(a: &Matrix, w: &ResolvedWeight, sampling: &DiscreteSampling, side: Side) -> Result<RateReport> {
    let n = a.nrows();
    let expected_z = expected_z_discrete(a, w, sampling, side)?;
    let half = w.sqrt()?;
    let conj = &half * &expected_z * &half;
    let eig = linalg::symmetric_eigen(&conj)?;
    let rho = 1.0 - eig.min();
    let lower_bound = 1.0 - sampling.expected_q() / n as f64;

    let m = &half * oriented(a, side).tr_mul(&sampling.stacked());
    let kappa_2f = kappa_2f(&m).ok();
    let gamma_bound = if sampling.stacked().ncols() == n {
        Some(gamma_upper_bound(a, w, sampling, side)?)
    } else {
        gamma_direct(&expected_z, w).ok()
    };
    let report = RateReport {
        expected_z,
        spectrum: eig.values.iter().copied().collect(),
        rho,
        lower_bound,
        kappa_2f,
        gamma_bound,
        descriptor: format!(
            "n={n} weight={} side={side:?} outcomes={} E[q]={}",
            w.spec().name(),
            sampling.len(),
            sampling.expected_q()
        ),
    };
    if !report.sandwich_holds() {
        return Err(Error::config(format!(
            "rate {rho} violates the bounds [{lower_bound}, 1]"
        )));
    }
    Ok(report)
}

/// `κ_{2,F}(M) = √(Tr(MMᵀ)/λ_min(MMᵀ))` for M with full row rank.
pub fn kappa_2f(m: &Matrix) -> Result<f64> {
    let gram = m * m.transpose();
    let eig = linalg::symmetric_eigen(&gram)?;
    let lmin = eig.min();
    if !(lmin > linalg::GRAM_TOLERANCE * eig.max_abs()) {
        let dropped = eig
            .values
            .iter()
            .filter(|&&v| v <= linalg::GRAM_TOLERANCE * eig.max_abs())
            .count();
        return Err(Error::RankDeficient {
            dropped,
            size: m.nrows(),
        });
    }
    Ok((gram.trace() / lmin).sqrt())
}

/// Minimizer of `Σ a_i/p_i` over the simplex: `p_i = √a_i / Σ√a_j`, with
/// optimal value `(Σ√a_i)²`.
pub fn fracsum_optimal_p(a: &[f64]) -> Result<(Vec<f64>, f64)> {
    if a.is_empty() {
        return Err(Error::config("empty weight vector"));
    }
    if let Some(&bad) = a.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositive(bad));
    }
    let roots: Vec<f64> = a.iter().map(|v| v.sqrt()).collect();
    let sum: f64 = roots.iter().sum();
    Ok((roots.iter().map(|r| r / sum).collect(), sum * sum))
}

/// `γ(p) = 1 − 1/Tr(W^{-1/2} E[Z]⁻¹ W^{-1/2})`.
///
/// Evaluated from the inverse of E[Z] and, for square stacked sketches,
/// also from the per-outcome expansion `Σ a_i/p_i`; the two must agree.
pub fn gamma_upper_bound(
    a: &Matrix,
    w: &ResolvedWeight,
    sampling: &DiscreteSampling,
    side: Side,
) -> Result<f64> {
    let ez = expected_z_discrete(a, w, sampling, side)?;
    let direct = gamma_direct(&ez, w)?;
    if sampling.stacked().ncols() == a.nrows() {
        let expansion = gamma_expansion(a, w, sampling, side)?;
        if (direct - expansion).abs() > 1e-8 * (1.0 + direct.abs()) {
            return Err(Error::config(format!(
                "γ paths disagree: direct {direct}, expansion {expansion}"
            )));
        }
    }
    Ok(direct)
}

/// The direct path, from a precomputed E[Z].
pub fn gamma_direct(expected_z: &Matrix, w: &ResolvedWeight) -> Result<f64> {
    let inv = linalg::invert(expected_z)?;
    // Tr(W^{-1/2} E⁻¹ W^{-1/2}) = Tr(E⁻¹ W⁻¹)
    let trace = if w.is_identity() {
        inv.trace()
    } else {
        inv.dot(&w.dense_inverse().transpose())
    };
    Ok(1.0 - 1.0 / trace)
}

/// The expansion path `1 − 1/Σ a_i/p_i`.
pub fn gamma_expansion(
    a: &Matrix,
    w: &ResolvedWeight,
    sampling: &DiscreteSampling,
    side: Side,
) -> Result<f64> {
    let ao = oriented(a, side);
    let costs = sketch::optimized_costs(sampling.members(), &ao, w, InverseSource::Exact)?;
    let sum: f64 = costs
        .iter()
        .zip(sampling.probabilities())
        .map(|(c, p)| c / p)
        .sum();
    Ok(1.0 - 1.0 / sum)
}

/// `k = ⌈log(1/ε)/(1 − ρ)⌉`: enough iterations for the expected squared
/// error to drop by ε. Infinite when ρ = 1.
pub fn iteration_complexity(epsilon: f64, rho: f64) -> f64 {
    ((1.0 / epsilon).ln() / (1.0 - rho)).ceil()
}

/// Half of [`iteration_complexity`]: enough for the squared norm of the
/// expected error to drop by ε.
pub fn iteration_complexity_expected(epsilon: f64, rho: f64) -> f64 {
    (0.5 * (1.0 / epsilon).ln() / (1.0 - rho)).ceil()
}

/// Bias/variance split of a sample of matrices around a target.
#[derive(Debug, Clone, Copy)]
pub struct ErrorDecomposition {
    /// `‖mean − target‖²`
    pub bias_sq: f64,
    /// mean of `‖X_j − target‖²`
    pub mean_sq_error: f64,
    /// mean of `‖X_j − mean‖²`
    pub variance: f64,
}

impl ErrorDecomposition {
    /// `mean_sq_error − variance − bias_sq`; zero up to rounding.
    pub fn residual(&self) -> f64 {
        self.mean_sq_error - self.variance - self.bias_sq
    }
}

/// Sample averages in the `F(W⁻¹)` norm, for which
/// `bias² = mean squared error − variance` holds exactly.
pub fn error_decomposition(
    samples: &[Matrix],
    target: &Matrix,
    w: &ResolvedWeight,
) -> Result<ErrorDecomposition> {
    if samples.is_empty() {
        return Err(Error::config("no samples"));
    }
    let count = samples.len() as f64;
    let mut mean = Matrix::zeros(target.nrows(), target.ncols());
    for s in samples {
        mean += s;
    }
    mean /= count;
    let sq = |m: &Matrix| -> Result<f64> { Ok(linalg::weighted_frobenius_norm(m, w)?.powi(2)) };
    let mut mean_sq_error = 0.0;
    let mut variance = 0.0;
    for s in samples {
        mean_sq_error += sq(&(s - target))?;
        variance += sq(&(s - &mean))?;
    }
    Ok(ErrorDecomposition {
        bias_sq: sq(&(&mean - target))?,
        mean_sq_error: mean_sq_error / count,
        variance: variance / count,
    })
}
