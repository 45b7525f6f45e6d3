//! Continuous algebraic Riccati equation
//!
//! ```text
//! AᵀP + PA − P·B·R⁻¹·Bᵀ·P + Q = 0
//! ```
//!
//! An initial stabilising solution comes from the stable invariant subspace
//! of the Hamiltonian matrix, extracted with the scaled matrix-sign
//! iteration. Newton–Kleinman steps (one Lyapunov solve each) then polish it
//! until the residual contract is met.

use super::eigen::eigenvalues;
use super::{Matrix, NumericsError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CareOptions {
    /// Newton–Kleinman iteration cap.
    pub max_iterations: usize,
    /// Relative residual target, `‖res‖_F ≤ tol · max(1, ‖P‖_F)`.
    pub residual_tol: f64,
    /// Iteration cap for the matrix-sign initialisation.
    pub sign_max_iterations: usize,
}

pub const DEFAULT_CARE_RESIDUAL_TOL: f64 = 1e-8;

impl Default for CareOptions {
    fn default() -> Self {
        CareOptions {
            max_iterations: 50,
            residual_tol: DEFAULT_CARE_RESIDUAL_TOL,
            sign_max_iterations: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CareSolution {
    pub p: Matrix,
    /// Optimal feedback `K = R⁻¹BᵀP` for `u = −K·x`.
    pub gain: Matrix,
    pub residual: f64,
    pub iterations: usize,
}

pub fn solve_care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix, NumericsError> {
    solve_care_with(a, b, q, r, &CareOptions::default()).map(|s| s.p)
}

pub fn solve_care_with(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
    opts: &CareOptions,
) -> Result<CareSolution, NumericsError> {
    let n = a.rows();
    if !a.is_square() {
        return Err(NumericsError::InvalidInput("CARE: A must be square".into()));
    }
    if b.rows() != n {
        return Err(NumericsError::InvalidInput(format!(
            "CARE: B must have {n} rows"
        )));
    }
    let m = b.cols();
    if q.shape() != (n, n) {
        return Err(NumericsError::InvalidInput(format!(
            "CARE: Q must be {n}x{n}"
        )));
    }
    if r.shape() != (m, m) {
        return Err(NumericsError::InvalidInput(format!(
            "CARE: R must be {m}x{m}"
        )));
    }
    let sym_tol = 1e-12 * (1.0 + q.max_abs());
    if q.asymmetry() > sym_tol {
        return Err(NumericsError::InvalidInput(
            "CARE: Q must be symmetric".into(),
        ));
    }
    if r.asymmetry() > 1e-12 * (1.0 + r.max_abs()) || !is_positive_definite(r) {
        return Err(NumericsError::InvalidInput(
            "CARE: R must be symmetric positive definite".into(),
        ));
    }

    let r_inv = r.inverse()?;
    let bt = b.transpose();
    let s = &(b * &r_inv) * &bt;

    let mut p = match sign_function_init(a, &s, q, opts) {
        Some(p) => p,
        None => bass_init(a, b, &r_inv, q).map_err(|e| match e {
            NumericsError::SolverFailure { .. } => e,
            other => NumericsError::SolverFailure {
                iterations: 0,
                residual: f64::INFINITY,
                reason: format!(
                    "no stabilizing initial solution ({other}); (A, B) may not be stabilizable"
                ),
            },
        })?,
    };

    let mut residual = care_residual(a, &s, q, &p);
    let mut iterations = 0;
    // iterate past the target until the residual stops shrinking, so the
    // returned gain carries round-off error only
    while residual > 0.0 {
        let converged = residual <= opts.residual_tol * p.frobenius_norm().max(1.0);
        if iterations >= opts.max_iterations {
            if converged {
                break;
            }
            return Err(NumericsError::SolverFailure {
                iterations,
                residual,
                reason: "Newton–Kleinman did not reach the residual target".into(),
            });
        }
        let k = &(&r_inv * &bt) * &p;
        let acl = a - &(b * &k);
        if !is_hurwitz(&acl)? {
            return Err(NumericsError::SolverFailure {
                iterations,
                residual,
                reason: "iterate lost closed-loop stability; pair may not be stabilizable".into(),
            });
        }
        let rhs = -&(q + &(&(&k.transpose() * r) * &k));
        let next = solve_lyapunov(&acl, &rhs)?.symmetrize();
        let next_res = care_residual(a, &s, q, &next);
        iterations += 1;
        if !next_res.is_finite() {
            return Err(NumericsError::SolverFailure {
                iterations,
                residual,
                reason: "non-finite Newton iterate".into(),
            });
        }
        // stagnation at round-off level
        if next_res >= residual && (converged || iterations > 3) {
            break;
        }
        p = next;
        residual = next_res;
    }
    residual = care_residual(a, &s, q, &p);
    if residual > opts.residual_tol * p.frobenius_norm().max(1.0) {
        return Err(NumericsError::SolverFailure {
            iterations,
            residual,
            reason: "residual target not met".into(),
        });
    }
    let gain = &(&r_inv * &bt) * &p;
    let acl = a - &(b * &gain);
    if !is_hurwitz(&acl)? {
        return Err(NumericsError::SolverFailure {
            iterations,
            residual,
            reason: "solution is not stabilizing; (A, B) is not stabilizable".into(),
        });
    }
    Ok(CareSolution {
        p,
        gain,
        residual,
        iterations,
    })
}

/// Frobenius norm of `AᵀP + PA − PSP + Q` with `S = BR⁻¹Bᵀ`.
pub fn care_residual(a: &Matrix, s: &Matrix, q: &Matrix, p: &Matrix) -> f64 {
    let at_p = &a.transpose() * p;
    let p_a = p * a;
    let psp = &(p * s) * p;
    (&(&(&at_p + &p_a) - &psp) + q).frobenius_norm()
}

/// Solves `AᵀX + XA = C` through the Kronecker-sum linear system.
pub fn solve_lyapunov(a: &Matrix, c: &Matrix) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    if !a.is_square() || c.shape() != (n, n) {
        return Err(NumericsError::InvalidInput(
            "Lyapunov: shape mismatch".into(),
        ));
    }
    let mut k = Matrix::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for l in 0..n {
                k[(row, l * n + j)] += a[(l, i)];
                k[(row, i * n + l)] += a[(l, j)];
            }
        }
    }
    let rhs = Matrix::column(c.as_slice());
    let x = k.solve(&rhs)?;
    Matrix::from_vec(n, n, x.as_slice().to_vec())
}

pub fn is_hurwitz(m: &Matrix) -> Result<bool, NumericsError> {
    Ok(eigenvalues(m)?.iter().all(|z| z.re < 0.0))
}

fn is_positive_definite(m: &Matrix) -> bool {
    // Cholesky without storing the factor
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return false;
        }
        l[(j, j)] = d.sqrt();
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / l[(j, j)];
        }
    }
    true
}

fn sign_function_init(a: &Matrix, s: &Matrix, q: &Matrix, opts: &CareOptions) -> Option<Matrix> {
    let n = a.rows();
    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.set_block(0, 0, a);
    h.set_block(0, n, &-s);
    h.set_block(n, 0, &-q);
    h.set_block(n, n, &-&a.transpose());

    let mut z = h;
    let mut converged = false;
    for _ in 0..opts.sign_max_iterations {
        let lu = z.lu().ok()?;
        let det = lu.determinant();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let inv = lu.solve(&Matrix::identity(2 * n)).ok()?;
        let c = det.abs().powf(-1.0 / (2 * n) as f64);
        let next = (&z.scale(c) + &inv.scale(1.0 / c)).scale(0.5);
        let delta = (&next - &z).norm_1();
        z = next;
        if !z.is_finite() {
            return None;
        }
        if delta <= 1e-13 * z.norm_1() {
            converged = true;
            break;
        }
    }
    if !converged {
        return None;
    }
    let w11 = z.block(0, 0, n, n);
    let w12 = z.block(0, n, n, n);
    let w21 = z.block(n, 0, n, n);
    let w22 = z.block(n, n, n, n);
    let eye = Matrix::identity(n);
    // [W12; W22 + I] P = -[W11 + I; W21], solved in the least-squares sense
    let mut lhs = Matrix::zeros(2 * n, n);
    lhs.set_block(0, 0, &w12);
    lhs.set_block(n, 0, &(&w22 + &eye));
    let mut rhs = Matrix::zeros(2 * n, n);
    rhs.set_block(0, 0, &-&(&w11 + &eye));
    rhs.set_block(n, 0, &-&w21);
    let lt = lhs.transpose();
    let p = (&lt * &lhs).solve(&(&lt * &rhs)).ok()?;
    p.is_finite().then(|| p.symmetrize())
}

/// Bass' construction: for β above the spectral abscissa of −A, the solution
/// Z of (A + βI)Z + Z(A + βI)ᵀ = 2BR⁻¹Bᵀ is positive definite for a controllable
/// pair and K = R⁻¹BᵀZ⁻¹ stabilises A − BK. Returns the Lyapunov cost of that gain.
fn bass_init(a: &Matrix, b: &Matrix, r_inv: &Matrix, q: &Matrix) -> Result<Matrix, NumericsError> {
    let n = a.rows();
    let beta = a.norm_1() + 1.0;
    let shifted = a + &Matrix::identity(n).scale(beta);
    let bt = b.transpose();
    let rhs = (&(b * r_inv) * &bt).scale(2.0);
    // solve shifted·Z + Z·shiftedᵀ = rhs, i.e. Aᵀ-form with Aᵀ := shiftedᵀ
    let z = solve_lyapunov(&shifted.transpose(), &rhs)?.symmetrize();
    let k = &(r_inv * &bt) * &z.inverse()?;
    let acl = a - &(b * &k);
    if !is_hurwitz(&acl)? {
        return Err(NumericsError::SolverFailure {
            iterations: 0,
            residual: f64::INFINITY,
            reason: "no stabilizing initial gain found; (A, B) is not stabilizable".into(),
        });
    }
    let r = r_inv.inverse()?;
    let cost = -&(q + &(&(&k.transpose() * &r) * &k));
    Ok(solve_lyapunov(&acl, &cost)?.symmetrize())
}
