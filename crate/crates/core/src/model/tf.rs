use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{ModelError, StateSpace};
use crate::numerics::{Matrix, Polynomial};

/// Root distance below which a numerator and denominator root are treated
/// as a common factor.
pub const CANCELLATION_TOL: f64 = 1e-7;

/// SISO rational transfer function `num(s)/den(s)` with a monic denominator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TfRepr", into = "TfRepr")]
pub struct RationalTF {
    num: Polynomial,
    den: Polynomial,
}

#[derive(Serialize, Deserialize)]
struct TfRepr {
    num: Polynomial,
    den: Polynomial,
}

impl TryFrom<TfRepr> for RationalTF {
    type Error = ModelError;

    fn try_from(r: TfRepr) -> Result<Self, ModelError> {
        RationalTF::new(r.num, r.den)
    }
}

impl From<RationalTF> for TfRepr {
    fn from(t: RationalTF) -> Self {
        TfRepr {
            num: t.num,
            den: t.den,
        }
    }
}

impl RationalTF {
    pub fn new(num: Polynomial, den: Polynomial) -> Result<Self, ModelError> {
        if den.is_zero() {
            return Err(ModelError::Invalid(
                "denominator is identically zero".into(),
            ));
        }
        let lead = den.leading();
        Ok(RationalTF {
            num: num.scale(1.0 / lead),
            den: den.scale(1.0 / lead),
        })
    }

    pub fn from_coeffs(num: &[f64], den: &[f64]) -> Result<Self, ModelError> {
        Self::new(Polynomial::new(num.to_vec()), Polynomial::new(den.to_vec()))
    }

    pub fn num(&self) -> &Polynomial {
        &self.num
    }

    pub fn den(&self) -> &Polynomial {
        &self.den
    }

    pub fn is_proper(&self) -> bool {
        self.num.degree() <= self.den.degree() || self.num.is_zero()
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.num.eval_complex(s) / self.den.eval_complex(s)
    }

    pub fn freq_response(&self, omega: f64) -> Complex64 {
        self.eval(Complex64::new(0.0, omega))
    }

    pub fn poles(&self) -> Result<Vec<Complex64>, ModelError> {
        if self.den.degree() == 0 {
            return Ok(Vec::new());
        }
        Ok(self.den.roots()?)
    }

    pub fn zeros(&self) -> Result<Vec<Complex64>, ModelError> {
        if self.num.is_zero() || self.num.degree() == 0 {
            return Ok(Vec::new());
        }
        Ok(self.num.roots()?)
    }

    /// `num(0)/den(0)`; infinite when there is a pole at the origin.
    pub fn dc_gain(&self) -> f64 {
        self.num.eval(0.0) / self.den.eval(0.0)
    }

    pub fn scale(&self, k: f64) -> RationalTF {
        RationalTF {
            num: self.num.scale(k),
            den: self.den.clone(),
        }
    }

    /// Closed loop of `k·G` under unity negative feedback:
    /// `k·num / (den + k·num)`.
    pub fn feedback(&self, k: f64) -> Result<RationalTF, ModelError> {
        let kn = self.num.scale(k);
        RationalTF::new(kn.clone(), self.den.add(&kn))
    }

    /// Characteristic polynomial `den + k·num` of the proportional closure.
    pub fn closure_polynomial(&self, k: f64) -> Polynomial {
        self.den.add(&self.num.scale(k))
    }

    /// Removes numerator/denominator root pairs closer than `tol`.
    pub fn cancel_common_factors(&self, tol: f64) -> Result<RationalTF, ModelError> {
        if self.num.is_zero() || self.num.degree() == 0 || self.den.degree() == 0 {
            return Ok(self.clone());
        }
        let zeros = self.num.roots()?;
        let mut poles = self.den.roots()?;
        let mut kept_zeros = Vec::new();
        let mut cancelled = false;
        for z in zeros {
            let hit = poles
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - z).norm()))
                .filter(|(_, d)| *d < tol)
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
            match hit {
                Some((i, _)) => {
                    poles.remove(i);
                    cancelled = true;
                }
                None => kept_zeros.push(z),
            }
        }
        if !cancelled {
            return Ok(self.clone());
        }
        let num = Polynomial::from_roots(&kept_zeros).scale(self.num.leading());
        RationalTF::new(num, Polynomial::from_roots(&poles))
    }
}

/// Transfer function from input `input` to output `output` of `sys`.
///
/// The resolvent `(sI − A)⁻¹` is expanded with the Faddeev–LeVerrier
/// recursion, so numerator and denominator come out as exact polynomial
/// coefficients. The constant term of the characteristic polynomial is taken
/// from an LU determinant, which keeps structurally singular `A` at exactly
/// zero. Common factors are cancelled only when roots coincide within
/// [`CANCELLATION_TOL`].
pub fn ss_to_tf(sys: &StateSpace, input: usize, output: usize) -> Result<RationalTF, ModelError> {
    if input >= sys.b.cols() {
        return Err(ModelError::IndexOutOfRange(format!(
            "input {input} of {}",
            sys.b.cols()
        )));
    }
    if output >= sys.c.rows() {
        return Err(ModelError::IndexOutOfRange(format!(
            "output {output} of {}",
            sys.c.rows()
        )));
    }
    let n = sys.order();
    let a = &sys.a;
    let b = Matrix::column(&sys.b.col_vec(input));
    let c = Matrix::row(sys.c.row_slice(output));
    let d = sys.d[(output, input)];

    let (char_poly, adjugate_terms) = faddeev_leverrier(a)?;
    // numerator of C·adj(sI − A)·B, descending powers s^{n-1} … s^0
    let mut num = vec![0.0; n + 1];
    for (k, mk) in adjugate_terms.iter().enumerate() {
        num[k + 1] = (&(&c * mk) * &b)[(0, 0)];
    }
    let den = char_poly.coeffs().to_vec();
    if d != 0.0 {
        for (ni, di) in num.iter_mut().zip(&den) {
            *ni += d * di;
        }
    }
    let num = Polynomial::new(num).trim_leading(1e-12);
    let tf = RationalTF::new(num, char_poly)?;
    tf.cancel_common_factors(CANCELLATION_TOL)
}

/// Characteristic polynomial of `a` (descending, monic) and the matrices
/// `M_1 … M_n` with `adj(sI − A) = Σ M_k·s^{n−k}`.
pub(crate) fn faddeev_leverrier(a: &Matrix) -> Result<(Polynomial, Vec<Matrix>), ModelError> {
    let n = a.rows();
    let eye = Matrix::identity(n);
    let mut coeffs = vec![0.0; n + 1];
    coeffs[0] = 1.0;
    let mut terms = Vec::with_capacity(n);
    let mut mk = eye.clone();
    for k in 1..=n {
        if k > 1 {
            mk = &(a * &mk) + &eye.scale(coeffs[k - 1]);
        }
        let amk = a * &mk;
        coeffs[k] = -amk.trace() / k as f64;
        terms.push(mk.clone());
    }
    let sign = if n.is_multiple_of(2) { 1.0 } else { -1.0 };
    coeffs[n] = sign * a.determinant()?;
    Ok((Polynomial::new(coeffs), terms))
}
