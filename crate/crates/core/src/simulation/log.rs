use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::SafetyStatus;
use crate::model::PlantState;

pub const CSV_HEADER: &str = "t,phi,phi_dot,theta,theta_dot,p,u,T,theta_est,enabled,slip,batt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub t: f64,
    #[serde(flatten)]
    pub state: PlantState,
    pub p: f64,
    /// Velocity-loop reference `φ̇_ref` [rad/s].
    pub u: f64,
    /// Wheel torque [N·m].
    #[serde(rename = "T")]
    pub torque: f64,
    pub theta_est: f64,
    pub safety: SafetyStatus,
}

impl TelemetryFrame {
    pub fn csv_row(&self) -> String {
        let s = &self.state;
        let f = &self.safety;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.t,
            s.phi,
            s.phi_dot,
            s.theta,
            s.theta_dot,
            self.p,
            self.u,
            self.torque,
            self.theta_est,
            f.motors_enabled as u8,
            f.slip_detected as u8,
            f.battery_low as u8
        )
    }
}

pub fn frames_to_csv(frames: &[TelemetryFrame]) -> String {
    let mut out = String::with_capacity(64 * (frames.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for fr in frames {
        let _ = writeln!(out, "{}", fr.csv_row());
    }
    out
}
