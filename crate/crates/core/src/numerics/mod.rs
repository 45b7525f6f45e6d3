//! Small dense linear algebra and polynomial kernel (n ≤ 8 throughout).
//!
//! Everything here is a pure function of its inputs.

mod care;
mod eigen;
mod matrix;
mod poly;

pub use care::{
    care_residual, is_hurwitz, solve_care, solve_care_with, solve_lyapunov, CareOptions,
    CareSolution, DEFAULT_CARE_RESIDUAL_TOL,
};
pub use eigen::{eigenvalues, matrix_rank, singular_values};
pub use matrix::{Lu, Matrix};
pub use num_complex::Complex64;
pub use poly::{poly_roots, Polynomial};

/// Tolerance under which a non-real value is treated as belonging to a
/// conjugate pair.
pub const CONJUGATE_PAIRING_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("eigenvalue iteration did not converge after {iterations} iterations (subdiagonal {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error(
        "Riccati solver failed after {iterations} iterations, residual {residual:e}: {reason}"
    )]
    SolverFailure {
        iterations: usize,
        residual: f64,
        reason: String,
    },
}

/// True when every non-real value has a partner equal to its conjugate
/// within [`CONJUGATE_PAIRING_TOL`] (relative to magnitude).
pub fn is_conjugate_symmetric(values: &[Complex64]) -> bool {
    let mut used = vec![false; values.len()];
    for (i, z) in values.iter().enumerate() {
        if z.im.abs() <= CONJUGATE_PAIRING_TOL * z.norm().max(1.0) || used[i] {
            continue;
        }
        let partner = (0..values.len()).find(|&j| {
            j != i
                && !used[j]
                && (values[j] - z.conj()).norm() <= CONJUGATE_PAIRING_TOL * z.norm().max(1.0)
        });
        match partner {
            Some(j) => {
                used[i] = true;
                used[j] = true;
            }
            None => return false,
        }
    }
    true
}
