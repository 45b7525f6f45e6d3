//! Angle limiter, slip latch and battery monitor.

use serde::{Deserialize, Serialize};

use super::SimError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyStatus {
    pub motors_enabled: bool,
    pub angle_ok: bool,
    pub slip_detected: bool,
    pub battery_low: bool,
    pub delta_p_ddot: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleLimits {
    /// Lower trip angle [rad], excluded from the allowed range.
    pub lower: f64,
    /// Upper trip angle [rad], excluded from the allowed range.
    pub upper: f64,
    /// After a trip, motors re-enable once `|θ|` drops below this [rad].
    pub reenable: f64,
}

impl Default for AngleLimits {
    fn default() -> Self {
        AngleLimits {
            lower: (-30f64).to_radians(),
            upper: 40f64.to_radians(),
            reenable: 5f64.to_radians(),
        }
    }
}

/// `lower < θ < upper`, with hysteresis once tripped.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleLimiter {
    limits: AngleLimits,
    tripped: bool,
}

impl AngleLimiter {
    pub fn new(limits: AngleLimits) -> Self {
        AngleLimiter {
            limits,
            tripped: false,
        }
    }

    pub fn in_range(&self, theta: f64) -> bool {
        theta > self.limits.lower && theta < self.limits.upper
    }

    pub fn update(&mut self, theta: f64) -> bool {
        if self.tripped {
            if theta.abs() < self.limits.reenable {
                self.tripped = false;
            }
        } else if !self.in_range(theta) {
            self.tripped = true;
        }
        !self.tripped
    }

    pub fn is_tripped(&self) -> bool {
        self.tripped
    }
}

/// Stateless range check with the default limits.
pub fn angle_limiter(theta: f64) -> bool {
    AngleLimiter::new(AngleLimits::default()).in_range(theta)
}

/// Holds the slip flag for `hold` seconds after the last exceedance.
#[derive(Clone, Debug, PartialEq)]
pub struct SlipLatch {
    hold: f64,
    remaining: f64,
}

impl SlipLatch {
    pub fn new(hold: f64) -> Self {
        SlipLatch {
            hold,
            remaining: 0.0,
        }
    }

    pub fn update(&mut self, raw: bool, dt: f64) -> bool {
        if raw {
            self.remaining = self.hold;
            return true;
        }
        self.remaining = (self.remaining - dt).max(0.0);
        // tolerance absorbs rounding from repeated subtraction
        self.remaining > 1e-12
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryConfig {
    pub cells: Vec<f64>,
    pub low_threshold: f64,
    /// Cell voltage lost per unit of `|T|·dt` [V/(N·m·s)].
    pub drain_per_torque_second: f64,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig {
            cells: vec![3.3; 3],
            low_threshold: 2.9,
            drain_per_torque_second: 2e-3,
        }
    }
}

/// True iff any cell is strictly below `threshold`.
pub fn battery_monitor_with(cells: &[f64], threshold: f64) -> Result<bool, SimError> {
    if cells.is_empty() {
        return Err(SimError::InvalidConfig("battery has no cells".into()));
    }
    Ok(cells.iter().any(|&v| v < threshold))
}

pub fn battery_monitor(cells: &[f64]) -> Result<bool, SimError> {
    battery_monitor_with(cells, BatteryConfig::default().low_threshold)
}
