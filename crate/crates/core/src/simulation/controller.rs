//! Discrete controller stack executed at the control rate.

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::model::RobotParams;
use crate::synthesis::GainVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Full state feedback on `(φ, φ̇, θ, θ̇)`.
    Lqr4,
    /// Outer proportional position loop around the three-state pitch loop.
    Cascade,
    /// Raw wheel-velocity reference passed straight to the velocity loop.
    VelocityRef,
}

impl ControlMode {
    /// Wire name, as used in configs and protocol payloads.
    pub fn name(self) -> &'static str {
        match self {
            ControlMode::Lqr4 => "lqr4",
            ControlMode::Cascade => "cascade",
            ControlMode::VelocityRef => "velocity_ref",
        }
    }

    pub fn gain_len(self) -> Option<usize> {
        match self {
            ControlMode::Lqr4 => Some(4),
            ControlMode::Cascade => Some(3),
            ControlMode::VelocityRef => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct References {
    /// Position set point [m].
    pub p_ref: f64,
    /// Pitch set point [rad].
    pub theta_ref: f64,
    /// Wheel-velocity reference [rad/s]. In the feedback modes it also
    /// drives the position set point forward at `r·φ̇_ref`.
    pub phi_dot_ref: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub mode: ControlMode,
    #[serde(default = "empty_gains")]
    pub gains: GainVector,
    #[serde(rename = "Kp_pos", default)]
    pub kp_pos: f64,
    #[serde(default)]
    pub references: References,
}

fn empty_gains() -> GainVector {
    GainVector::new(Vec::new())
}

impl ControllerConfig {
    pub fn lqr4(gains: GainVector) -> Self {
        ControllerConfig {
            mode: ControlMode::Lqr4,
            gains,
            kp_pos: 0.0,
            references: References::default(),
        }
    }

    pub fn cascade(gains: GainVector, kp_pos: f64) -> Self {
        ControllerConfig {
            mode: ControlMode::Cascade,
            gains,
            kp_pos,
            references: References::default(),
        }
    }

    pub fn velocity_ref(phi_dot_ref: f64) -> Self {
        ControllerConfig {
            mode: ControlMode::VelocityRef,
            gains: empty_gains(),
            kp_pos: 0.0,
            references: References {
                phi_dot_ref,
                ..References::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if let Some(n) = self.mode.gain_len() {
            if self.gains.len() != n {
                return Err(SimError::InvalidConfig(format!(
                    "{} mode needs {n} gains, got {}",
                    self.mode.name(),
                    self.gains.len()
                )));
            }
        }
        let r = &self.references;
        if self
            .gains
            .k
            .iter()
            .chain([&self.kp_pos, &r.p_ref, &r.theta_ref, &r.phi_dot_ref])
            .any(|v| !v.is_finite())
        {
            return Err(SimError::InvalidConfig(
                "controller values must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// What the controller sees: encoder angle and rate, estimated pitch and
/// measured pitch rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub phi: f64,
    pub phi_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
}

/// Velocity-loop reference `u` for the active law.
///
/// * `lqr4`: `u = −k·(φ − φ_ref, φ̇ − φ̇_ref, θ − θ_ref − offset, θ̇)` with
///   `φ_ref = p_ref/r − θ_ref − offset`
/// * `cascade`: `θ_cmd = Kp_pos·(p_ref − p) + θ_ref + offset`, then
///   `u = −k·(φ̇, θ − θ_cmd, θ̇)`
/// * `velocity_ref`: `u = φ̇_ref`
pub fn control_law(
    cfg: &ControllerConfig,
    refs: &References,
    m: &Measurement,
    params: &RobotParams,
    offset: f64,
) -> f64 {
    let k = &cfg.gains;
    match cfg.mode {
        ControlMode::Lqr4 => {
            let theta_ref = refs.theta_ref + offset;
            let phi_ref = refs.p_ref / params.r - theta_ref;
            k.control(&[
                m.phi - phi_ref,
                m.phi_dot - refs.phi_dot_ref,
                m.theta - theta_ref,
                m.theta_dot,
            ])
        }
        ControlMode::Cascade => {
            let p = params.r * (m.phi + m.theta);
            let theta_cmd = cfg.kp_pos * (refs.p_ref - p) + refs.theta_ref + offset;
            k.control(&[m.phi_dot, m.theta - theta_cmd, m.theta_dot])
        }
        ControlMode::VelocityRef => refs.phi_dot_ref,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meas(x: [f64; 4]) -> Measurement {
        Measurement {
            phi: x[0],
            phi_dot: x[1],
            theta: x[2],
            theta_dot: x[3],
        }
    }

    #[test]
    fn lqr4_at_zero_reference_is_plain_state_feedback() {
        let cfg = ControllerConfig::lqr4(GainVector::new(vec![1.0, 2.0, 3.0, 4.0]));
        let u = control_law(
            &cfg,
            &References::default(),
            &meas([1.0, 1.0, 1.0, 1.0]),
            &RobotParams::default(),
            0.0,
        );
        assert_eq!(u, -10.0);
    }

    #[test]
    fn cascade_error_sign() {
        let cfg = ControllerConfig::cascade(GainVector::new(vec![0.0, 1.0, 0.0]), 0.5);
        let refs = References {
            p_ref: 1.0,
            ..References::default()
        };
        // θ_cmd = 0.5, so u = −(0 − 0.5) = 0.5
        let u = control_law(&cfg, &refs, &meas([0.0; 4]), &RobotParams::default(), 0.0);
        assert!((u - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gain_length_checked() {
        let mut cfg = ControllerConfig::lqr4(GainVector::new(vec![1.0; 5]));
        assert!(cfg.validate().is_err());
        cfg.gains = GainVector::new(vec![1.0; 4]);
        assert!(cfg.validate().is_ok());
        assert!(ControllerConfig::velocity_ref(2.0).validate().is_ok());
    }
}
