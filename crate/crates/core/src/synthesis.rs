//! Controller design: PI velocity loop, LQR state feedback, controllability.

use serde::{Deserialize, Serialize};

use crate::identification::FirstOrderFit;
use crate::model::{linearize, ModelError, RationalTF, RobotParams, StateSpace, PITCH_STATES};
use crate::numerics::{
    eigenvalues, matrix_rank, solve_care_with, CareOptions, Complex64, Matrix, NumericsError,
    Polynomial,
};

/// Relative threshold used for the controllability rank.
pub const CONTROLLABILITY_RANK_TOL: f64 = 1e-10;
/// Number of time constants in the settling-time interpretation `t_s = 5τ`.
pub const SETTLING_TIME_CONSTANTS: f64 = 5.0;
pub const GAIN_CONVENTION: &str = "u = -k*x";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("infeasible placement: {0}")]
    InfeasiblePlacement(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PIGains {
    #[serde(rename = "Kp")]
    pub kp: f64,
    #[serde(rename = "Ki")]
    pub ki: f64,
}

/// Places the two closed-loop poles of `K/(τs+1)` under `Kp + Ki/s` at
/// `−p1` and `−p2` by matching `τs² + (1 + K·Kp)s + K·Ki = τ(s+p1)(s+p2)`.
pub fn pi_place_poles(plant: &FirstOrderFit, p1: f64, p2: f64) -> Result<PIGains, SynthError> {
    let (k, tau) = (plant.gain, plant.tau);
    if !(tau > 0.0 && k.is_finite() && k != 0.0) {
        return Err(SynthError::InfeasiblePlacement(format!(
            "plant K={k}, tau={tau}"
        )));
    }
    if !(p1 > 0.0 && p2 > 0.0) {
        return Err(SynthError::InfeasiblePlacement(
            "poles must lie in the open left half-plane".into(),
        ));
    }
    let s1 = tau * (p1 + p2);
    let s0 = tau * p1 * p2;
    // 1 + K·Kp = s1 must be positive, i.e. Kp + 1/K has the sign of K
    if (s1 / k) <= 0.0 || s0 / k < 0.0 {
        return Err(SynthError::InfeasiblePlacement(format!(
            "Kp + 1/K_m = {} is not positive",
            s1 / k
        )));
    }
    Ok(PIGains {
        kp: (s1 - 1.0) / k,
        ki: s0 / k,
    })
}

/// Dominant pole at `−5/settle_time`, fast pole at `−max_natural_freq`.
pub fn pi_pole_placement(
    plant: &FirstOrderFit,
    settle_time: f64,
    max_natural_freq: f64,
) -> Result<PIGains, SynthError> {
    if !(settle_time > 0.0) {
        return Err(SynthError::InfeasiblePlacement(format!(
            "settle_time must be > 0, got {settle_time}"
        )));
    }
    let dominant = SETTLING_TIME_CONSTANTS / settle_time;
    if !(max_natural_freq > dominant) {
        return Err(SynthError::InfeasiblePlacement(format!(
            "max natural frequency {max_natural_freq} must exceed the dominant pole {dominant}"
        )));
    }
    pi_place_poles(plant, dominant, max_natural_freq)
}

/// Reference-to-output transfer function `K(Kp·s + Ki)/(τs² + (1+K·Kp)s + K·Ki)`.
pub fn pi_closed_loop(plant: &FirstOrderFit, gains: &PIGains) -> Result<RationalTF, SynthError> {
    let (k, tau) = (plant.gain, plant.tau);
    let num = Polynomial::new(vec![k * gains.kp, k * gains.ki]);
    let den = Polynomial::new(vec![tau, 1.0 + k * gains.kp, k * gains.ki]);
    Ok(RationalTF::new(num, den)?)
}

/// `1/min|Re(pole)|` over the poles of a stable transfer function.
pub fn dominant_time_constant(tf: &RationalTF) -> Result<f64, SynthError> {
    let poles = tf.poles()?;
    let slowest = poles.iter().map(|p| -p.re).fold(f64::INFINITY, f64::min);
    if !(slowest > 0.0) {
        return Err(SynthError::InfeasiblePlacement(
            "closed loop is not asymptotically stable".into(),
        ));
    }
    Ok(1.0 / slowest)
}

/// Diagonal state weight and scalar input weight of the quadratic cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LQRWeights {
    pub q: Vec<f64>,
    pub r: f64,
}

impl LQRWeights {
    pub fn new(q: Vec<f64>, r: f64) -> Result<Self, SynthError> {
        let w = LQRWeights { q, r };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.q.is_empty() {
            return Err(SynthError::InvalidWeights("Q is empty".into()));
        }
        if let Some(v) = self.q.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(SynthError::InvalidWeights(format!(
                "Q diagonal entries must be ≥ 0, got {v}"
            )));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(SynthError::InvalidWeights(format!(
                "R must be > 0, got {}",
                self.r
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> LQRWeights {
        LQRWeights {
            q: self.q.iter().map(|v| v * c).collect(),
            r: self.r * c,
        }
    }

    /// `Q = diag(0, 1, 0)`, `R = 100` for `(φ̇, θ, θ̇)`.
    pub fn published_lqr3() -> Self {
        LQRWeights {
            q: vec![0.0, 1.0, 0.0],
            r: 100.0,
        }
    }

    /// `Q = diag(1, 0.01, 1, 0.01)`, `R = 100` for `(φ, φ̇, θ, θ̇)`.
    pub fn published_lqr4() -> Self {
        LQRWeights {
            q: vec![1.0, 0.01, 1.0, 0.01],
            r: 100.0,
        }
    }
}

/// State-feedback gains under the convention `u = −k·x̃`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainVector {
    pub k: Vec<f64>,
    #[serde(default = "default_convention")]
    pub convention: String,
}

fn default_convention() -> String {
    GAIN_CONVENTION.to_string()
}

impl GainVector {
    pub fn new(k: Vec<f64>) -> Self {
        GainVector {
            k,
            convention: default_convention(),
        }
    }

    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }

    /// `−k·x`.
    pub fn control(&self, x: &[f64]) -> f64 {
        -self.k.iter().zip(x).map(|(k, x)| k * x).sum::<f64>()
    }

    pub fn as_row(&self) -> Matrix {
        Matrix::row(&self.k)
    }
}

#[derive(Clone, Debug)]
pub struct LqrDesign {
    pub gains: GainVector,
    pub p: Matrix,
    pub residual: f64,
    pub closed_loop_poles: Vec<Complex64>,
}

/// `k = R⁻¹BᵀP` with `P` from the continuous algebraic Riccati equation.
pub fn lqr(sys: &StateSpace, w: &LQRWeights) -> Result<LqrDesign, SynthError> {
    lqr_with(sys, w, &CareOptions::default())
}

pub fn lqr_with(
    sys: &StateSpace,
    w: &LQRWeights,
    opts: &CareOptions,
) -> Result<LqrDesign, SynthError> {
    w.validate()?;
    let n = sys.order();
    if w.q.len() != n {
        return Err(SynthError::InvalidWeights(format!(
            "Q has {} entries for a {n}-state system",
            w.q.len()
        )));
    }
    if sys.b.cols() != 1 {
        return Err(SynthError::InvalidWeights(
            "scalar R requires a single-input system".into(),
        ));
    }
    let q = Matrix::from_diag(&w.q);
    let r = Matrix::from_diag(&[w.r]);
    let sol = solve_care_with(&sys.a, &sys.b, &q, &r, opts)?;
    let k = sol.gain.row_slice(0).to_vec();
    let acl = &sys.a - &(&sys.b * &sol.gain);
    Ok(LqrDesign {
        gains: GainVector::new(k),
        p: sol.p,
        residual: sol.residual,
        closed_loop_poles: eigenvalues(&acl)?,
    })
}

/// Inner pitch loop on `(φ̇, θ, θ̇)`.
pub fn lqr3(params: &RobotParams, w: &LQRWeights) -> Result<LqrDesign, SynthError> {
    lqr(&linearize(params)?.reduce(&PITCH_STATES)?, w)
}

/// Full state feedback on `(φ, φ̇, θ, θ̇)`.
pub fn lqr4(params: &RobotParams, w: &LQRWeights) -> Result<LqrDesign, SynthError> {
    lqr(&linearize(params)?, w)
}

/// `Co = [B, AB, …, Aⁿ⁻¹B]` and its numerical rank.
pub fn controllability(sys: &StateSpace) -> Result<(Matrix, usize), SynthError> {
    let n = sys.order();
    let m = sys.b.cols();
    let mut co = Matrix::zeros(n, n * m);
    let mut blk = sys.b.clone();
    for i in 0..n {
        co.set_block(0, i * m, &blk);
        blk = &sys.a * &blk;
    }
    let rank = matrix_rank(&co, CONTROLLABILITY_RANK_TOL)?;
    Ok((co, rank))
}
