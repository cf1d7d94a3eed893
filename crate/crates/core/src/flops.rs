//! Analytical floating point operation accounting.
//!
//! Counts follow one fixed convention so that the flops axis of a benchmark
//! is comparable between methods run by this tool:
//!
//! | kernel          | operation                                   | flops      |
//! |-----------------|---------------------------------------------|------------|
//! | `gemm`          | (m×k)·(k×p) dense product                   | 2·m·k·p    |
//! | `elementwise`   | add, subtract or scale an m×p matrix        | m·p        |
//! | `small_inverse` | inverse / inverse square root of a q×q Gram | 2·q³       |
//! | `reduction`     | trace of a product or squared norm (m×p)    | 2·m·p      |
//! | `solve`         | triangular solves with a stored LU, n×p rhs | 2·n²·p     |
//!
//! Transposition, column selection and copying are free. Adding the identity
//! to an n×n matrix costs n.
//!
//! Example: one Kaczmarz step with n = 3 and q = 1 costs 80 flops:
//! AᵀS 18, SᵀAAᵀS 6, its inverse 2, (AᵀS)ᵀX 18, Sᵀ − (AᵀS)ᵀX 3,
//! G⁻¹· 6, (AᵀS)· 18 and the final addition 9.

use std::collections::BTreeMap;

use crate::linalg::Matrix;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopCounter {
    total: u64,
    by_kernel: BTreeMap<&'static str, u64>,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, kernel: &'static str, flops: u64) {
        self.total += flops;
        *self.by_kernel.entry(kernel).or_insert(0) += flops;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn breakdown(&self) -> &BTreeMap<&'static str, u64> {
        &self.by_kernel
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (k, v) in &other.by_kernel {
            self.add(k, *v);
        }
    }

    pub(crate) fn gemm(&mut self, m: usize, k: usize, p: usize) {
        self.add("gemm", 2 * (m * k * p) as u64);
    }

    pub(crate) fn elementwise(&mut self, m: usize, p: usize) {
        self.add("elementwise", (m * p) as u64);
    }

    pub(crate) fn small_inverse(&mut self, q: usize) {
        self.add("small_inverse", 2 * (q * q * q) as u64);
    }

    pub(crate) fn reduction(&mut self, m: usize, p: usize) {
        self.add("reduction", 2 * (m * p) as u64);
    }

    pub(crate) fn solve(&mut self, n: usize, p: usize) {
        self.add("solve", 2 * (n * n * p) as u64);
    }
}

/// Dense product that records its cost.
pub(crate) fn mul(a: &Matrix, b: &Matrix, fc: &mut FlopCounter) -> Matrix {
    fc.gemm(a.nrows(), a.ncols(), b.ncols());
    a * b
}

/// `aᵀ·b` without materializing the transpose.
pub(crate) fn tr_mul(a: &Matrix, b: &Matrix, fc: &mut FlopCounter) -> Matrix {
    fc.gemm(a.ncols(), a.nrows(), b.ncols());
    a.tr_mul(b)
}

/// `a·bᵀ`.
pub(crate) fn mul_tr(a: &Matrix, b: &Matrix, fc: &mut FlopCounter) -> Matrix {
    fc.gemm(a.nrows(), a.ncols(), b.nrows());
    a * b.transpose()
}
