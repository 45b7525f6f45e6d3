//! Lateral-plane model of the balancing robot.
//!
//! Generalised coordinates are the longitudinal position `p` and the body
//! pitch `θ`; the wheel angle `φ` is measured relative to the body so that
//! `p = r·(φ + θ)`. Wheels are massless, friction is neglected, and the
//! potential energy is referenced to the upright equilibrium.

mod params;
mod tf;

pub use params::RobotParams;
pub use tf::{ss_to_tf, RationalTF};

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, NumericsError};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `(φ, φ̇, θ, θ̇)`, radians and radians per second.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantState {
    pub phi: f64,
    pub phi_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

impl PlantState {
    pub fn new(phi: f64, phi_dot: f64, theta: f64, theta_dot: f64) -> Self {
        PlantState {
            phi,
            phi_dot,
            theta,
            theta_dot,
        }
    }

    pub fn from_array(x: [f64; 4]) -> Self {
        PlantState::new(x[0], x[1], x[2], x[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.phi, self.phi_dot, self.theta, self.theta_dot]
    }

    pub fn position(&self, params: &RobotParams) -> f64 {
        params.r * (self.phi + self.theta)
    }

    pub fn velocity(&self, params: &RobotParams) -> f64 {
        params.r * (self.phi_dot + self.theta_dot)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.to_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Solves the coupled equations of motion for a given wheel torque:
///
/// ```text
/// rm·p̈ + rlm·cosθ·θ̈ = T + rlm·sinθ·θ̇²
/// lm·cosθ·p̈ + 2l²m·θ̈ = −T + glm·sinθ
/// ```
///
/// Returns `(p̈, θ̈)`. The mass-matrix determinant `r·l²·m²·(2 − cos²θ)` never
/// vanishes for positive parameters.
pub fn accelerations(s: &PlantState, torque: f64, p: &RobotParams) -> (f64, f64) {
    let (m, r, l, g) = (p.m, p.r, p.l, p.g);
    let (sin, cos) = s.theta.sin_cos();
    let a11 = r * m;
    let a12 = r * l * m * cos;
    let a21 = l * m * cos;
    let a22 = 2.0 * l * l * m;
    let b1 = torque + r * l * m * sin * s.theta_dot * s.theta_dot;
    let b2 = -torque + g * l * m * sin;
    let det = mass_matrix_determinant(s.theta, p);
    let p_ddot = (b1 * a22 - a12 * b2) / det;
    let theta_ddot = (a11 * b2 - a21 * b1) / det;
    (p_ddot, theta_ddot)
}

/// `r·l²·m²·(2 − cos²θ)`.
pub fn mass_matrix_determinant(theta: f64, p: &RobotParams) -> f64 {
    let c = theta.cos();
    p.r * p.l * p.l * p.m * p.m * (2.0 - c * c)
}

/// Inverse dynamics for a prescribed relative wheel acceleration `φ̈`:
/// substitutes `p̈ = r(φ̈ + θ̈)` and solves for `(θ̈, T)`. The pitch
/// coefficient `m·(r² + 2rl·cosθ + 2l²)` is strictly positive.
pub fn actuated_accelerations(s: &PlantState, phi_ddot: f64, p: &RobotParams) -> (f64, f64) {
    let (m, r, l, g) = (p.m, p.r, p.l, p.g);
    let (sin, cos) = s.theta.sin_cos();
    let td2 = s.theta_dot * s.theta_dot;
    // sum of both equations eliminates T
    let coeff = m * (r * r + 2.0 * r * l * cos + 2.0 * l * l);
    let theta_ddot =
        (-(r * r * m + r * l * m * cos) * phi_ddot + r * l * m * sin * td2 + g * l * m * sin)
            / coeff;
    let p_ddot = r * (phi_ddot + theta_ddot);
    let torque = r * m * p_ddot + r * l * m * cos * theta_ddot - r * l * m * sin * td2;
    (theta_ddot, torque)
}

/// State derivative with the velocity loop enforced algebraically.
pub fn actuated_derivative(s: &PlantState, u_ref: f64, p: &RobotParams) -> ([f64; 4], f64) {
    let phi_ddot = (p.k * u_ref - s.phi_dot) / p.t_em;
    let (theta_ddot, torque) = actuated_accelerations(s, phi_ddot, p);
    ([s.phi_dot, phi_ddot, s.theta_dot, theta_ddot], torque)
}

/// State derivative for a given torque (motors acting as pure torque source).
pub fn torque_derivative(s: &PlantState, torque: f64, p: &RobotParams) -> [f64; 4] {
    let (p_ddot, theta_ddot) = accelerations(s, torque, p);
    let phi_ddot = p_ddot / p.r - theta_ddot;
    [s.phi_dot, phi_ddot, s.theta_dot, theta_ddot]
}

/// Kinetic plus potential energy of the body, zero at upright rest:
/// `½m(ṗ² + 2lṗθ̇cosθ + 2l²θ̇²) + mgl(cosθ − 1)`.
///
/// The `2l²` pitch term carries the body's own inertia about its centre
/// of mass (`ml²`) on top of the point-mass contribution, which is what the
/// `2l²m·θ̈` term in the equations of motion implies.
pub fn mechanical_energy(s: &PlantState, p: &RobotParams) -> f64 {
    let v = s.velocity(p);
    let w = s.theta_dot;
    let kinetic = 0.5 * p.m * (v * v + 2.0 * p.l * v * w * s.theta.cos() + 2.0 * p.l * p.l * w * w);
    let potential = p.m * p.g * p.l * (s.theta.cos() - 1.0);
    kinetic + potential
}

/// Linear state-space model `ẋ = Ax + Bu`, `y = Cx + Du`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpace {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub d: Matrix,
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
}

impl StateSpace {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self, ModelError> {
        let d = Matrix::zeros(c.rows(), b.cols());
        Self::with_feedthrough(a, b, c, d)
    }

    pub fn with_feedthrough(
        a: Matrix,
        b: Matrix,
        c: Matrix,
        d: Matrix,
    ) -> Result<Self, ModelError> {
        let n = a.rows();
        if !a.is_square() {
            return Err(ModelError::Invalid("A must be square".into()));
        }
        if b.rows() != n || c.cols() != n || d.shape() != (c.rows(), b.cols()) {
            return Err(ModelError::Invalid(format!(
                "incompatible shapes A {:?}, B {:?}, C {:?}, D {:?}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape()
            )));
        }
        let labels = |prefix: &str, k: usize| {
            (0..k)
                .map(|i| format!("{prefix}{}", i + 1))
                .collect::<Vec<_>>()
        };
        Ok(StateSpace {
            state_labels: labels("x", n),
            input_labels: labels("u", b.cols()),
            output_labels: labels("y", c.rows()),
            a,
            b,
            c,
            d,
        })
    }

    pub fn with_labels(mut self, states: &[&str], inputs: &[&str], outputs: &[&str]) -> Self {
        assert_eq!(states.len(), self.order());
        assert_eq!(inputs.len(), self.b.cols());
        assert_eq!(outputs.len(), self.c.rows());
        self.state_labels = states.iter().map(|s| s.to_string()).collect();
        self.input_labels = inputs.iter().map(|s| s.to_string()).collect();
        self.output_labels = outputs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn order(&self) -> usize {
        self.a.rows()
    }

    /// Keeps only the listed states (rows/columns of A, rows of B, columns of C).
    pub fn reduce(&self, states: &[usize]) -> Result<StateSpace, ModelError> {
        if states.iter().any(|&i| i >= self.order()) {
            return Err(ModelError::IndexOutOfRange(format!(
                "state index in {states:?}"
            )));
        }
        let inputs: Vec<usize> = (0..self.b.cols()).collect();
        let outputs: Vec<usize> = (0..self.c.rows()).collect();
        Ok(StateSpace {
            a: self.a.select(states, states),
            b: self.b.select(states, &inputs),
            c: self.c.select(&outputs, states),
            d: self.d.clone(),
            state_labels: states
                .iter()
                .map(|&i| self.state_labels[i].clone())
                .collect(),
            input_labels: self.input_labels.clone(),
            output_labels: self.output_labels.clone(),
        })
    }

    pub fn poles(&self) -> Result<Vec<crate::numerics::Complex64>, ModelError> {
        Ok(crate::numerics::eigenvalues(&self.a)?)
    }
}

/// Combined robot model with state `(φ, φ̇, θ, θ̇)`, input `φ̇_ref` and
/// outputs `(p, θ)`.
pub fn linearize(p: &RobotParams) -> Result<StateSpace, ModelError> {
    p.validate()?;
    let eta = p.eta();
    let lever = p.l * p.m + p.r * p.m;
    let mut a = Matrix::zeros(4, 4);
    a[(0, 1)] = 1.0;
    a[(1, 1)] = -1.0 / p.t_em;
    a[(2, 3)] = 1.0;
    a[(3, 1)] = lever / (p.t_em * eta);
    a[(3, 2)] = p.g * p.l * p.m / (p.r * eta);
    let b = Matrix::column(&[0.0, p.k / p.t_em, 0.0, -p.k * lever / (p.t_em * eta)]);
    let c = Matrix::from_rows(&[&[p.r, 0.0, p.r, 0.0], &[0.0, 0.0, 1.0, 0.0]])?;
    Ok(StateSpace::new(a, b, c)?.with_labels(
        &["phi", "phi_dot", "theta", "theta_dot"],
        &["phi_dot_ref"],
        &["p", "theta"],
    ))
}

/// State indices `(φ̇, θ, θ̇)` used by the three-state pitch stabiliser.
pub const PITCH_STATES: [usize; 3] = [1, 2, 3];
