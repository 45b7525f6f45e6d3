//! Fixed-step closed-loop simulator.
//!
//! The plant is integrated with classic RK4 at `dt_physics`; the sensor,
//! safety and controller stack runs every `dt_control` and holds its output
//! in between. The velocity loop is realised by inverse dynamics, so in the
//! small-signal limit the simulator reduces exactly to the linear model.

mod controller;
mod log;
mod safety;
mod sensors;

pub use controller::{control_law, ControlMode, ControllerConfig, Measurement, References};
pub use log::{frames_to_csv, TelemetryFrame, CSV_HEADER};
pub use safety::{
    angle_limiter, battery_monitor, battery_monitor_with, AngleLimiter, AngleLimits, BatteryConfig,
    SafetyStatus, SlipLatch,
};
pub use sensors::{
    accel_tilt, complementary_filter, imu_emulate, slip_monitor, slip_offset, ImuNoise, ImuReading,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    actuated_accelerations, actuated_derivative, torque_derivative, PlantState, RobotParams,
};

/// Magnitude beyond which any state or torque counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Relative tolerance for `dt_control` being a multiple of `dt_physics`.
const STEP_RATIO_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("simulation diverged at t = {t} s")]
    Diverged { t: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    /// The controller reads the true pitch and pitch rate.
    #[default]
    Ideal,
    /// Pitch from the complementary filter, rate from the gyro.
    Complementary { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt_physics: f64,
    pub dt_control: f64,
    pub duration: f64,
    pub initial: PlantState,
    pub controller: ControllerConfig,
    /// Gear deadband half-width [rad]; 0 disables backlash.
    pub backlash_halfwidth: f64,
    /// Wheel torque saturation [N·m]; 0 disables it.
    pub torque_limit: f64,
    pub imu_noise: ImuNoise,
    pub seed: u64,
    /// Constant pitch reference offset [rad] added by the controller.
    pub theta_ref_offset: f64,
    pub estimator: Estimator,
    /// `|Δp̈|` above which slip is flagged [m/s²].
    pub slip_threshold: f64,
    /// Time the slip flag stays latched after the last exceedance [s].
    pub slip_hold: f64,
    pub angle_limits: AngleLimits,
    pub battery: BatteryConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_physics: 1e-3,
            dt_control: 5e-3,
            duration: 5.0,
            initial: PlantState::default(),
            controller: ControllerConfig::lqr4(crate::fixtures::reference_values().lqr4_gains()),
            backlash_halfwidth: 0.0,
            torque_limit: 0.0,
            imu_noise: ImuNoise::default(),
            seed: 0,
            theta_ref_offset: 0.0,
            estimator: Estimator::Ideal,
            slip_threshold: 3.0,
            slip_hold: 0.5,
            angle_limits: AngleLimits::default(),
            battery: BatteryConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.dt_physics > 0.0 && self.dt_physics.is_finite()) {
            return bad(format!("dt_physics must be > 0, got {}", self.dt_physics));
        }
        if !(self.dt_control >= self.dt_physics && self.dt_control.is_finite()) {
            return bad(format!(
                "dt_control must be ≥ dt_physics, got {}",
                self.dt_control
            ));
        }
        let ratio = self.dt_control / self.dt_physics;
        if (ratio - ratio.round()).abs() > STEP_RATIO_TOL * ratio {
            return bad(format!("dt_control/dt_physics = {ratio} is not an integer"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be > 0, got {}", self.duration));
        }
        if !self.initial.is_finite() {
            return bad("initial state must be finite".into());
        }
        self.controller.validate()?;
        for (name, v) in [
            ("backlash_halfwidth", self.backlash_halfwidth),
            ("torque_limit", self.torque_limit),
            ("imu_noise.accel_sigma", self.imu_noise.accel_sigma),
            ("imu_noise.gyro_sigma", self.imu_noise.gyro_sigma),
            ("slip_hold", self.slip_hold),
            (
                "battery.drain_per_torque_second",
                self.battery.drain_per_torque_second,
            ),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        if !(self.slip_threshold > 0.0) {
            return bad(format!(
                "slip_threshold must be > 0, got {}",
                self.slip_threshold
            ));
        }
        if !self.theta_ref_offset.is_finite() {
            return bad("theta_ref_offset must be finite".into());
        }
        if let Estimator::Complementary { alpha } = self.estimator {
            if !(0.0..=1.0).contains(&alpha) {
                return bad(format!("alpha must lie in [0, 1], got {alpha}"));
            }
        }
        let l = &self.angle_limits;
        if !(l.lower < 0.0 && l.upper > 0.0 && l.reenable > 0.0) {
            return bad("angle limits must bracket 0".into());
        }
        if self.battery.cells.is_empty() || self.battery.cells.iter().any(|v| !v.is_finite()) {
            return bad("battery needs at least one finite cell voltage".into());
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.dt_control / self.dt_physics).round() as usize
    }

    pub fn control_steps(&self) -> usize {
        (self.duration / self.dt_control + 1e-9).floor() as usize
    }
}

/// One RK4 step of the actuated plant without backlash. If `torque_limit`
/// is positive the torque is clipped in every stage and the plant falls
/// back to torque mode. Returns the new state and the torque at the start
/// of the step.
pub fn step_physics(
    state: &PlantState,
    u_ref: f64,
    dt: f64,
    torque_limit: f64,
    params: &RobotParams,
) -> (PlantState, f64) {
    let f = |s: &PlantState| actuated_or_saturated(s, u_ref, torque_limit, params);
    let (k1, t0) = f(state);
    let x = state.to_array();
    let at =
        |k: &[f64; 4], h: f64| PlantState::from_array(std::array::from_fn(|i| x[i] + h * k[i]));
    let (k2, _) = f(&at(&k1, 0.5 * dt));
    let (k3, _) = f(&at(&k2, 0.5 * dt));
    let (k4, _) = f(&at(&k3, dt));
    let next =
        std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    (PlantState::from_array(next), t0)
}

/// One RK4 step with the wheels driven by a constant torque.
pub fn step_torque(state: &PlantState, torque: f64, dt: f64, params: &RobotParams) -> PlantState {
    let f = |s: &PlantState| torque_derivative(s, torque, params);
    let x = state.to_array();
    let at =
        |k: &[f64; 4], h: f64| PlantState::from_array(std::array::from_fn(|i| x[i] + h * k[i]));
    let k1 = f(state);
    let k2 = f(&at(&k1, 0.5 * dt));
    let k3 = f(&at(&k2, 0.5 * dt));
    let k4 = f(&at(&k3, dt));
    PlantState::from_array(std::array::from_fn(|i| {
        x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    }))
}

fn actuated_or_saturated(
    s: &PlantState,
    u_ref: f64,
    torque_limit: f64,
    params: &RobotParams,
) -> ([f64; 4], f64) {
    let (d, t) = actuated_derivative(s, u_ref, params);
    if torque_limit > 0.0 && t.abs() > torque_limit {
        let t = t.clamp(-torque_limit, torque_limit);
        return (torque_derivative(s, t, params), t);
    }
    (d, t)
}

/// Gear contact during one physics step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Contact {
    /// No gear model: wheel and motor are rigidly joined.
    Rigid,
    Engaged,
    Free,
}

/// Extended state `(φ, φ̇, θ, θ̇, ψ, ψ̇)` where `ψ` is the motor-side angle.
type Ext = [f64; 6];

/// Deterministic closed-loop simulation.
///
/// [`Simulator::control_update`] samples the sensors at the current time,
/// runs the safety logic and the controller and returns the telemetry
/// frame; [`Simulator::advance`] integrates one control period with that
/// command held.
#[derive(Clone, Debug)]
pub struct Simulator {
    cfg: SimConfig,
    params: RobotParams,
    x: Ext,
    step_index: u64,
    u: f64,
    enabled: bool,
    refs: References,
    limiter: AngleLimiter,
    slip: SlipLatch,
    cells: Vec<f64>,
    theta_est: f64,
    estimator_ready: bool,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(cfg: SimConfig, params: RobotParams) -> Result<Self, SimError> {
        cfg.validate()?;
        params
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        let s = cfg.initial;
        let limiter = AngleLimiter::new(cfg.angle_limits);
        let enabled = limiter.in_range(s.theta);
        Ok(Simulator {
            x: [s.phi, s.phi_dot, s.theta, s.theta_dot, s.phi, s.phi_dot],
            step_index: 0,
            u: 0.0,
            enabled,
            refs: cfg.controller.references,
            limiter,
            slip: SlipLatch::new(cfg.slip_hold),
            cells: cfg.battery.cells.clone(),
            theta_est: s.theta,
            estimator_ready: false,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            params,
            cfg,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn params(&self) -> &RobotParams {
        &self.params
    }

    pub fn controller(&self) -> &ControllerConfig {
        &self.cfg.controller
    }

    pub fn references(&self) -> &References {
        &self.refs
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.cfg.dt_control
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn state(&self) -> PlantState {
        PlantState::new(self.x[0], self.x[1], self.x[2], self.x[3])
    }

    pub fn cell_voltages(&self) -> &[f64] {
        &self.cells
    }

    /// Replaces the control law. References given in `cfg` take effect as
    /// given.
    pub fn set_controller(&mut self, cfg: ControllerConfig) -> Result<(), SimError> {
        cfg.validate()?;
        self.refs = cfg.references;
        self.cfg.controller = cfg;
        Ok(())
    }

    pub fn set_references(&mut self, refs: References) -> Result<(), SimError> {
        if ![refs.p_ref, refs.theta_ref, refs.phi_dot_ref]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(SimError::InvalidConfig("references must be finite".into()));
        }
        self.refs = refs;
        self.cfg.controller.references = refs;
        Ok(())
    }

    /// Applies a validated change to the simulation options. The caller's
    /// candidate is checked as a whole before anything is replaced.
    pub fn set_options(&mut self, candidate: SimConfig) -> Result<(), SimError> {
        candidate.validate()?;
        if candidate.dt_physics != self.cfg.dt_physics
            || candidate.dt_control != self.cfg.dt_control
        {
            return Err(SimError::InvalidConfig(
                "step sizes cannot change in a running simulation".into(),
            ));
        }
        self.limiter = AngleLimiter::new(candidate.angle_limits);
        if candidate.slip_hold != self.cfg.slip_hold {
            self.slip = SlipLatch::new(candidate.slip_hold);
        }
        self.cfg = candidate;
        Ok(())
    }

    fn wheel(x: &Ext) -> PlantState {
        PlantState::new(x[0], x[1], x[2], x[3])
    }

    fn contact(&self, x: &Ext) -> Contact {
        let h = self.cfg.backlash_halfwidth;
        if h <= 0.0 {
            return Contact::Rigid;
        }
        let gap = x[4] - x[0];
        let edge = h * (1.0 - 1e-9);
        if gap.abs() < edge || !self.enabled {
            return Contact::Free;
        }
        let psi_ddot = (self.params.k * self.u - x[5]) / self.params.t_em;
        let (_, t_req) = actuated_accelerations(&Self::wheel(x), psi_ddot, &self.params);
        if (gap > 0.0 && t_req >= 0.0) || (gap < 0.0 && t_req <= 0.0) {
            Contact::Engaged
        } else {
            Contact::Free
        }
    }

    /// Extended derivative and torque for the held command.
    fn derivative(&self, x: &Ext, u: f64, enabled: bool, contact: Contact) -> (Ext, f64) {
        let s = Self::wheel(x);
        let p = &self.params;
        let lim = self.cfg.torque_limit;
        if !enabled {
            let d = torque_derivative(&s, 0.0, p);
            return ([d[0], d[1], d[2], d[3], x[5], d[1]], 0.0);
        }
        match contact {
            Contact::Rigid => {
                let (d, t) = actuated_or_saturated(&s, u, lim, p);
                ([d[0], d[1], d[2], d[3], d[0], d[1]], t)
            }
            Contact::Engaged => {
                let psi_ddot = (p.k * u - x[5]) / p.t_em;
                let (theta_ddot, t) = actuated_accelerations(&s, psi_ddot, p);
                if lim > 0.0 && t.abs() > lim {
                    let t = t.clamp(-lim, lim);
                    let d = torque_derivative(&s, t, p);
                    return ([d[0], d[1], d[2], d[3], x[5], psi_ddot], t);
                }
                ([x[1], psi_ddot, x[3], theta_ddot, x[5], psi_ddot], t)
            }
            Contact::Free => {
                let d = torque_derivative(&s, 0.0, p);
                let psi_ddot = (p.k * u - x[5]) / p.t_em;
                ([d[0], d[1], d[2], d[3], x[5], psi_ddot], 0.0)
            }
        }
    }

    /// Sensors, safety logic and controller at the current instant.
    pub fn control_update(&mut self) -> TelemetryFrame {
        let p = self.params;
        let dt = self.cfg.dt_control;
        let contact = self.contact(&self.x);
        let (dx, _) = self.derivative(&self.x, self.u, self.enabled, contact);
        let wheel = Self::wheel(&self.x);
        let p_ddot = p.r * (dx[1] + dx[3]);
        let (enc_phi, enc_rate, enc_acc) = if contact == Contact::Rigid {
            (self.x[0], self.x[1], dx[1])
        } else {
            (self.x[4], self.x[5], dx[5])
        };
        let imu = imu_emulate(&wheel, p_ddot, p.g, &self.cfg.imu_noise, &mut self.rng);
        let (theta_hat, rate_hat) = match self.cfg.estimator {
            Estimator::Ideal => (wheel.theta, wheel.theta_dot),
            Estimator::Complementary { alpha } => {
                let est = if self.estimator_ready {
                    complementary_filter(self.theta_est, imu.gyro, imu.a_x, imu.a_z, dt, alpha)
                } else {
                    self.estimator_ready = true;
                    accel_tilt(imu.a_x, imu.a_z)
                };
                (est, imu.gyro)
            }
        };
        self.theta_est = theta_hat;

        let angle_ok = self.limiter.update(theta_hat);
        let (delta, raw_slip) = slip_monitor(
            imu.a_x,
            imu.a_z,
            theta_hat,
            enc_acc,
            p.r,
            self.cfg.slip_threshold,
        );
        let slip_detected = self.slip.update(raw_slip, dt);
        let battery_low =
            battery_monitor_with(&self.cells, self.cfg.battery.low_threshold).unwrap_or(true);
        let enabled = angle_ok && !slip_detected;

        let meas = Measurement {
            phi: enc_phi,
            phi_dot: enc_rate,
            theta: theta_hat,
            theta_dot: rate_hat,
        };
        let u = if enabled {
            control_law(
                &self.cfg.controller,
                &self.refs,
                &meas,
                &p,
                self.cfg.theta_ref_offset,
            )
        } else {
            0.0
        };
        if self.cfg.controller.mode != ControlMode::VelocityRef {
            self.refs.p_ref += p.r * self.refs.phi_dot_ref * dt;
        }
        self.u = u;
        self.enabled = enabled;
        let contact = self.contact(&self.x);
        let (_, torque) = self.derivative(&self.x, u, enabled, contact);

        TelemetryFrame {
            t: self.time(),
            state: wheel,
            p: wheel.position(&p),
            u,
            torque,
            theta_est: theta_hat,
            safety: SafetyStatus {
                motors_enabled: enabled,
                angle_ok,
                slip_detected,
                battery_low,
                delta_p_ddot: delta,
            },
        }
    }

    /// Integrates one control period with the last command held.
    pub fn advance(&mut self) -> Result<(), SimError> {
        let h = self.cfg.dt_physics;
        let n = self.cfg.substeps();
        let t0 = self.time();
        for j in 0..n {
            let contact = self.contact(&self.x);
            let x = self.x;
            let f = |y: &Ext| self.derivative(y, self.u, self.enabled, contact);
            let at = |k: &Ext, s: f64| -> Ext { std::array::from_fn(|i| x[i] + s * k[i]) };
            let (k1, torque) = f(&x);
            let (k2, _) = f(&at(&k1, 0.5 * h));
            let (k3, _) = f(&at(&k2, 0.5 * h));
            let (k4, _) = f(&at(&k3, h));
            let mut next: Ext = std::array::from_fn(|i| {
                x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            });
            if contact == Contact::Rigid {
                next[4] = next[0];
                next[5] = next[1];
            } else {
                self.clamp_gap(&mut next);
            }
            let t = t0 + (j + 1) as f64 * h;
            if next
                .iter()
                .chain([&torque])
                .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
            {
                return Err(SimError::Diverged { t });
            }
            self.x = next;
            let drain = self.cfg.battery.drain_per_torque_second * torque.abs() * h;
            for c in &mut self.cells {
                *c -= drain;
            }
        }
        self.step_index += 1;
        Ok(())
    }

    /// Keeps the gear gap inside `±h`; on contact the wheel takes the motor
    /// velocity if the two were closing.
    fn clamp_gap(&self, x: &mut Ext) {
        let h = self.cfg.backlash_halfwidth;
        let gap = x[4] - x[0];
        if gap > h {
            x[0] = x[4] - h;
            if x[5] > x[1] {
                x[1] = x[5];
            }
        } else if gap < -h {
            x[0] = x[4] + h;
            if x[5] < x[1] {
                x[1] = x[5];
            }
        }
    }
}

/// Runs the configured experiment and returns frames at every control step
/// from `t = 0` to `duration`.
pub fn run_experiment(
    cfg: &SimConfig,
    params: &RobotParams,
) -> Result<Vec<TelemetryFrame>, SimError> {
    let mut sim = Simulator::new(cfg.clone(), *params)?;
    let n = cfg.control_steps();
    let mut frames = Vec::with_capacity(n + 1);
    frames.push(sim.control_update());
    for _ in 0..n {
        sim.advance()?;
        frames.push(sim.control_update());
    }
    Ok(frames)
}
