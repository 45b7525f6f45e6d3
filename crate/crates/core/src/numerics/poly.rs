use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::eigen::{balance, hessenberg_eigenvalues};
use super::{Matrix, NumericsError};

/// Real polynomial with coefficients in descending degree order.
///
/// Leading zeros are stripped on construction, so the leading coefficient is
/// nonzero unless the polynomial is identically zero (stored as `[0.0]`).
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Polynomial {
    type Error = NumericsError;

    fn try_from(c: Vec<f64>) -> Result<Self, Self::Error> {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::InvalidInput(
                "polynomial coefficients must be finite".into(),
            ));
        }
        Ok(Polynomial::new(c))
    }
}

impl From<Polynomial> for Vec<f64> {
    fn from(p: Polynomial) -> Self {
        p.coeffs
    }
}

impl Polynomial {
    pub fn new(coeffs: impl Into<Vec<f64>>) -> Self {
        let mut coeffs: Vec<f64> = coeffs.into();
        let first_nonzero = coeffs.iter().position(|&c| c != 0.0);
        match first_nonzero {
            Some(i) => {
                coeffs.drain(..i);
            }
            None => coeffs = vec![0.0],
        }
        Polynomial { coeffs }
    }

    pub fn zero() -> Self {
        Polynomial { coeffs: vec![0.0] }
    }

    pub fn constant(c: f64) -> Self {
        Polynomial::new(vec![c])
    }

    /// Monic polynomial with the given roots. Complex roots must come in
    /// conjugate pairs for the result to be real; imaginary residue is dropped.
    pub fn from_roots(roots: &[Complex64]) -> Self {
        let mut c = vec![Complex64::new(1.0, 0.0)];
        for &r in roots {
            let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
            for (i, &ci) in c.iter().enumerate() {
                next[i] += ci;
                next[i + 1] -= ci * r;
            }
            c = next;
        }
        Polynomial::new(c.iter().map(|z| z.re).collect::<Vec<_>>())
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.len() == 1 && self.coeffs[0] == 0.0
    }

    pub fn leading(&self) -> f64 {
        self.coeffs[0]
    }

    /// Coefficient of `s^power` (zero when out of range).
    pub fn coeff_of_power(&self, power: usize) -> f64 {
        let deg = self.degree();
        if power > deg {
            0.0
        } else {
            self.coeffs[deg - power]
        }
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn eval_complex(&self, z: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    pub fn derivative(&self) -> Polynomial {
        let deg = self.degree();
        if deg == 0 {
            return Polynomial::zero();
        }
        Polynomial::new(
            self.coeffs[..deg]
                .iter()
                .enumerate()
                .map(|(i, &c)| c * (deg - i) as f64)
                .collect::<Vec<_>>(),
        )
    }

    pub fn scale(&self, s: f64) -> Polynomial {
        Polynomial::new(self.coeffs.iter().map(|c| c * s).collect::<Vec<_>>())
    }

    pub fn add(&self, other: &Polynomial) -> Polynomial {
        let n = self.coeffs.len().max(other.coeffs.len());
        let pad = |p: &Polynomial| {
            let mut v = vec![0.0; n - p.coeffs.len()];
            v.extend_from_slice(&p.coeffs);
            v
        };
        let (a, b) = (pad(self), pad(other));
        Polynomial::new(a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<_>>())
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = vec![0.0; self.coeffs.len() + other.coeffs.len() - 1];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Polynomial::new(out)
    }

    /// Divides by the leading coefficient.
    pub fn monic(&self) -> Polynomial {
        if self.is_zero() {
            return self.clone();
        }
        self.scale(1.0 / self.leading())
    }

    /// Drops leading coefficients whose magnitude is below `rel_tol` times
    /// the largest coefficient. Used to clean round-off from exact-degree
    /// computations such as resolvent expansions.
    pub fn trim_leading(&self, rel_tol: f64) -> Polynomial {
        let scale = self.coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        let keep_from = self
            .coeffs
            .iter()
            .position(|c| c.abs() > rel_tol * scale)
            .unwrap_or(self.coeffs.len() - 1);
        Polynomial::new(self.coeffs[keep_from..].to_vec())
    }

    pub fn roots(&self) -> Result<Vec<Complex64>, NumericsError> {
        poly_roots(self)
    }
}

impl fmt::Debug for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Polynomial{:?}", self.coeffs)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let deg = self.degree();
        let mut terms = Vec::new();
        for (i, &c) in self.coeffs.iter().enumerate() {
            if c == 0.0 && deg > 0 {
                continue;
            }
            let p = deg - i;
            terms.push(match p {
                0 => format!("{c}"),
                1 => format!("{c}s"),
                _ => format!("{c}s^{p}"),
            });
        }
        write!(f, "{}", terms.join(" + "))
    }
}

/// Roots of a real polynomial from the eigenvalues of its balanced companion
/// matrix, followed by a guarded Newton polish against the original
/// coefficients. Exact zero roots (trailing zero coefficients) are split off
/// first and reported as exactly `0`.
pub fn poly_roots(p: &Polynomial) -> Result<Vec<Complex64>, NumericsError> {
    if p.is_zero() {
        return Err(NumericsError::InvalidInput(
            "polynomial is identically zero".into(),
        ));
    }
    let deg = p.degree();
    if deg == 0 {
        return Err(NumericsError::InvalidInput(
            "constant polynomial has no roots".into(),
        ));
    }
    let c = p.coeffs();
    let zero_roots = c.iter().rev().take_while(|&&v| v == 0.0).count();
    let mut roots = vec![Complex64::new(0.0, 0.0); zero_roots];
    let reduced = &c[..c.len() - zero_roots];
    let n = reduced.len() - 1;
    if n == 0 {
        return Ok(roots);
    }
    if n == 1 {
        roots.push(Complex64::new(-reduced[1] / reduced[0], 0.0));
        return Ok(roots);
    }
    let mut companion = Matrix::zeros(n, n);
    for j in 0..n {
        companion[(0, j)] = -reduced[j + 1] / reduced[0];
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    let balanced = balance(&companion);
    let mut found = hessenberg_eigenvalues(balanced)?;
    let reduced_poly = Polynomial::new(reduced.to_vec());
    polish_roots(&reduced_poly, &mut found);
    roots.extend(found);
    Ok(roots)
}

fn polish_roots(p: &Polynomial, roots: &mut [Complex64]) {
    let dp = p.derivative();
    let mut i = 0;
    while i < roots.len() {
        let z = roots[i];
        let paired = z.im != 0.0 && i + 1 < roots.len() && roots[i + 1] == z.conj();
        let mut best = z;
        let mut best_res = p.eval_complex(z).norm();
        let mut cur = z;
        for _ in 0..4 {
            let d = dp.eval_complex(cur);
            if d.norm() == 0.0 {
                break;
            }
            let mut next = cur - p.eval_complex(cur) / d;
            if z.im == 0.0 {
                next.im = 0.0;
            }
            let res = p.eval_complex(next).norm();
            if !(res < best_res) {
                break;
            }
            best = next;
            best_res = res;
            cur = next;
        }
        roots[i] = best;
        if paired {
            roots[i + 1] = best.conj();
            i += 2;
        } else {
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted_re(mut v: Vec<Complex64>) -> Vec<Complex64> {
        v.sort_by(|a, b| {
            a.re.partial_cmp(&b.re)
                .unwrap()
                .then(a.im.partial_cmp(&b.im).unwrap())
        });
        v
    }

    #[test]
    fn difference_of_squares() {
        let r = sorted_re(poly_roots(&Polynomial::new(vec![1.0, 0.0, -1.0])).unwrap());
        assert!((r[0].re + 1.0).abs() < 1e-14 && r[0].im == 0.0);
        assert!((r[1].re - 1.0).abs() < 1e-14 && r[1].im == 0.0);
    }

    #[test]
    fn trailing_zero_gives_exact_zero_root() {
        let p = Polynomial::new(vec![1.0, 22.11, 157.6, 365.3, 0.0]);
        let r = poly_roots(&p).unwrap();
        assert_eq!(r.len(), 4);
        assert_eq!(r.iter().filter(|z| z.re == 0.0 && z.im == 0.0).count(), 1);
        assert_eq!(r.iter().filter(|z| z.re < 0.0).count(), 3);
        for z in &r {
            assert!(p.eval_complex(*z).norm() <= 1e-7 * p.norm());
        }
    }

    #[test]
    fn triple_root_cluster() {
        let p = Polynomial::new(vec![1.0, 3.0, 3.0, 1.0]);
        for z in poly_roots(&p).unwrap() {
            assert!((z - Complex64::new(-1.0, 0.0)).norm() < 1e-4, "{z}");
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(poly_roots(&Polynomial::zero()).is_err());
        assert!(poly_roots(&Polynomial::constant(3.0)).is_err());
    }

    #[test]
    fn leading_zeros_are_stripped() {
        let p = Polynomial::new(vec![0.0, 0.0, 2.0, 1.0]);
        assert_eq!(p.degree(), 1);
        assert_eq!(p.coeffs(), &[2.0, 1.0]);
        assert_eq!(p.coeff_of_power(0), 1.0);
        assert_eq!(p.coeff_of_power(5), 0.0);
    }

    #[test]
    fn arithmetic() {
        let a = Polynomial::new(vec![1.0, 1.0]);
        let b = Polynomial::new(vec![1.0, 2.0]);
        assert_eq!(a.mul(&b).coeffs(), &[1.0, 3.0, 2.0]);
        assert_eq!(a.add(&b.scale(-1.0)).coeffs(), &[-1.0]);
        assert_eq!(a.mul(&b).derivative().coeffs(), &[2.0, 3.0]);
        assert_eq!(
            Polynomial::new(vec![1e-20, 1.0, 2.0])
                .trim_leading(1e-12)
                .coeffs(),
            &[1.0, 2.0]
        );
    }
}
