//! Shared helpers for unit tests.

use rand::Rng;

use crate::tensor::{frobenius_sqr, CMatrix, C64};

pub fn cn<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    crate::random::cn(rng)
}

pub fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    crate::random::complex_gaussian(rows, cols, 1.0, rng)
}

pub fn rel_err(a: &CMatrix, reference: &CMatrix) -> f64 {
    assert_eq!(a.shape(), reference.shape());
    (frobenius_sqr(&(a - reference)) / frobenius_sqr(reference)).sqrt()
}
