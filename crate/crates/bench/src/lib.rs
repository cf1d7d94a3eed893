//! Shared fixtures for the criterion benchmarks.

use stochinv::sketch::{gaussian_matrix, trial_stream};
use stochinv::{Matrix, ProblemMatrix};

/// Well-conditioned SPD matrix `GᵀG/n + I`.
pub fn spd(n: usize, seed: u64) -> ProblemMatrix {
    let g = gaussian_matrix(n, n, &mut trial_stream(seed, 0));
    ProblemMatrix::spd(g.tr_mul(&g) / n as f64 + Matrix::identity(n, n)).expect("shifted Gram is SPD")
}

/// Nonsymmetric matrix `G/√n + 3I`.
pub fn general(n: usize, seed: u64) -> ProblemMatrix {
    let g = gaussian_matrix(n, n, &mut trial_stream(seed, 0));
    ProblemMatrix::general(g / (n as f64).sqrt() + Matrix::identity(n, n) * 3.0).expect("square")
}

/// Gaussian sketch with `q` columns.
pub fn sketch(n: usize, q: usize, seed: u64) -> Matrix {
    gaussian_matrix(n, q, &mut trial_stream(seed, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_the_advertised_structure() {
        assert!(spd(20, 1).is_spd());
        assert_eq!(general(20, 1).n(), 20);
        assert_eq!(sketch(20, 4, 1).shape(), (20, 4));
    }
}
