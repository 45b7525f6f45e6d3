//! Real nonsymmetric eigenvalues (balancing, Householder reduction to upper
//! Hessenberg form, Francis double-shift QR) and singular values by one-sided
//! Jacobi rotations.

use num_complex::Complex64;

use super::{Matrix, NumericsError};

const MAX_QR_ITERATIONS: usize = 60;

/// Eigenvalues of a real square matrix. Complex values appear as adjacent
/// exact conjugate pairs, positive imaginary part first.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex64>, NumericsError> {
    if !m.is_square() {
        return Err(NumericsError::InvalidInput(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(NumericsError::InvalidInput(
            "matrix has non-finite entries".into(),
        ));
    }
    let balanced = balance(m);
    hessenberg_eigenvalues(hessenberg(balanced))
}

/// Diagonal similarity transform that equalises row and column norms
/// (powers of two only, so it is exact in floating point).
pub(crate) fn balance(m: &Matrix) -> Matrix {
    const RADIX: f64 = 2.0;
    let n = m.rows();
    let mut a = m.clone();
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / RADIX;
            while c < g {
                f *= RADIX;
                c *= RADIX * RADIX;
            }
            g = r * RADIX;
            while c > g {
                f /= RADIX;
                c /= RADIX * RADIX;
            }
            if (c + r) / f < 0.95 * s {
                done = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
    }
    a
}

/// Orthogonal similarity reduction to upper Hessenberg form.
pub(crate) fn hessenberg(mut a: Matrix) -> Matrix {
    let n = a.rows();
    if n < 3 {
        return a;
    }
    for k in 0..n - 2 {
        let norm: f64 = (k + 1..n).map(|i| a[(i, k)].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = a[(k + 1, k)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k + 1..n).map(|i| a[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= vnorm);
        // A <- H A
        for j in 0..n {
            let dot: f64 = v
                .iter()
                .enumerate()
                .map(|(i, vi)| vi * a[(k + 1 + i, j)])
                .sum();
            for (i, vi) in v.iter().enumerate() {
                a[(k + 1 + i, j)] -= 2.0 * vi * dot;
            }
        }
        // A <- A H
        for i in 0..n {
            let dot: f64 = v
                .iter()
                .enumerate()
                .map(|(j, vj)| vj * a[(i, k + 1 + j)])
                .sum();
            for (j, vj) in v.iter().enumerate() {
                a[(i, k + 1 + j)] -= 2.0 * vj * dot;
            }
        }
        a[(k + 1, k)] = alpha;
        for i in k + 2..n {
            a[(i, k)] = 0.0;
        }
    }
    a
}

/// Francis double-shift QR on an upper Hessenberg matrix.
pub(crate) fn hessenberg_eigenvalues(mut a: Matrix) -> Result<Vec<Complex64>, NumericsError> {
    let n = a.rows() as isize;
    let mut wr = vec![Complex64::new(0.0, 0.0); n as usize];
    macro_rules! at {
        ($i:expr, $j:expr) => {
            a[(($i) as usize, ($j) as usize)]
        };
    }
    let eps = f64::EPSILON;
    let mut anorm = 0.0;
    for i in 0..n {
        for j in (i - 1).max(0)..n {
            anorm += at!(i, j).abs();
        }
    }
    let mut nn = n - 1;
    let mut t = 0.0;
    while nn >= 0 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l > 0 {
                let mut s = at!(l - 1, l - 1).abs() + at!(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if at!(l, l - 1).abs() <= eps * s {
                    at!(l, l - 1) = 0.0;
                    break;
                }
                l -= 1;
            }
            let mut x = at!(nn, nn);
            if l == nn {
                wr[nn as usize] = Complex64::new(x + t, 0.0);
                nn -= 1;
            } else {
                let mut y = at!(nn - 1, nn - 1);
                let mut w = at!(nn, nn - 1) * at!(nn - 1, nn);
                if l == nn - 1 {
                    let p = 0.5 * (y - x);
                    let q = p * p + w;
                    let mut z = q.abs().sqrt();
                    x += t;
                    if q >= 0.0 {
                        z = p + if p >= 0.0 { z } else { -z };
                        wr[(nn - 1) as usize] = Complex64::new(x + z, 0.0);
                        wr[nn as usize] =
                            Complex64::new(if z != 0.0 { x - w / z } else { x + z }, 0.0);
                    } else {
                        wr[(nn - 1) as usize] = Complex64::new(x + p, z);
                        wr[nn as usize] = Complex64::new(x + p, -z);
                    }
                    nn -= 2;
                } else {
                    if its == MAX_QR_ITERATIONS {
                        return Err(NumericsError::NoConvergence {
                            iterations: its,
                            residual: at!(nn, nn - 1).abs(),
                        });
                    }
                    if its > 0 && its % 10 == 0 {
                        // exceptional shift
                        t += x;
                        for i in 0..=nn {
                            at!(i, i) -= x;
                        }
                        let s = at!(nn, nn - 1).abs() + at!(nn - 1, nn - 2).abs();
                        x = 0.75 * s;
                        y = x;
                        w = -0.4375 * s * s;
                    }
                    its += 1;
                    let (mut p, mut q, mut r): (f64, f64, f64);
                    let mut m = nn - 2;
                    loop {
                        let z = at!(m, m);
                        r = x - z;
                        let s = y - z;
                        p = (r * s - w) / at!(m + 1, m) + at!(m, m + 1);
                        q = at!(m + 1, m + 1) - z - r - s;
                        r = at!(m + 2, m + 1);
                        let s = p.abs() + q.abs() + r.abs();
                        p /= s;
                        q /= s;
                        r /= s;
                        if m == l {
                            break;
                        }
                        let u = at!(m, m - 1).abs() * (q.abs() + r.abs());
                        let v =
                            p.abs() * (at!(m - 1, m - 1).abs() + z.abs() + at!(m + 1, m + 1).abs());
                        if u <= eps * v {
                            break;
                        }
                        m -= 1;
                    }
                    for i in m..nn - 1 {
                        at!(i + 2, i) = 0.0;
                        if i != m {
                            at!(i + 2, i - 1) = 0.0;
                        }
                    }
                    let mut k = m;
                    while k < nn {
                        if k != m {
                            p = at!(k, k - 1);
                            q = at!(k + 1, k - 1);
                            r = if k + 1 != nn { at!(k + 2, k - 1) } else { 0.0 };
                            x = p.abs() + q.abs() + r.abs();
                            if x != 0.0 {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        let norm = (p * p + q * q + r * r).sqrt();
                        let s = if p >= 0.0 { norm } else { -norm };
                        if s != 0.0 {
                            if k == m {
                                if l != m {
                                    at!(k, k - 1) = -at!(k, k - 1);
                                }
                            } else {
                                at!(k, k - 1) = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            let z = r / s;
                            q /= p;
                            r /= p;
                            for j in k..=nn {
                                let mut pp = at!(k, j) + q * at!(k + 1, j);
                                if k + 1 != nn {
                                    pp += r * at!(k + 2, j);
                                    at!(k + 2, j) -= pp * z;
                                }
                                at!(k + 1, j) -= pp * y;
                                at!(k, j) -= pp * x;
                            }
                            let mmin = if nn < k + 3 { nn } else { k + 3 };
                            for i in l..=mmin {
                                let mut pp = x * at!(i, k) + y * at!(i, k + 1);
                                if k + 1 != nn {
                                    pp += z * at!(i, k + 2);
                                    at!(i, k + 2) -= pp * r;
                                }
                                at!(i, k + 1) -= pp * q;
                                at!(i, k) -= pp;
                            }
                        }
                        k += 1;
                    }
                }
            }
            if l + 1 >= nn {
                break;
            }
        }
    }
    Ok(wr)
}

/// Singular values in descending order (one-sided Jacobi).
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut u = m.clone();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..rows {
                    alpha += u[(i, p)] * u[(i, p)];
                    beta += u[(i, q)] * u[(i, q)];
                    gamma += u[(i, p)] * u[(i, q)];
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let up = u[(i, p)];
                    let uq = u[(i, q)];
                    u[(i, p)] = c * up - s * uq;
                    u[(i, q)] = s * up + c * uq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| u[(i, j)].powi(2)).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Numerical rank: number of singular values above `tol` times the largest.
pub fn matrix_rank(m: &Matrix, tol: f64) -> Result<usize, NumericsError> {
    if !(tol > 0.0) {
        return Err(NumericsError::InvalidInput(format!(
            "rank tolerance must be positive, got {tol}"
        )));
    }
    let sv = singular_values(m);
    let largest = sv.first().copied().unwrap_or(0.0);
    if largest == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * largest).count())
}
