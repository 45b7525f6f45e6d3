//! IMU emulation, complementary filter and the wheel-slip monitor.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::PlantState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuNoise {
    /// Accelerometer σ per axis [m/s²].
    #[serde(default)]
    pub accel_sigma: f64,
    /// Gyro σ [rad/s].
    #[serde(default)]
    pub gyro_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuReading {
    pub a_x: f64,
    pub a_z: f64,
    pub gyro: f64,
}

/// Specific force and pitch rate in the body frame.
///
/// The sensor x axis points forward along the body and z along the body
/// axis away from the wheel, so at a static tilt θ the accelerometer reads
/// `(g·sinθ, g·cosθ)`. The horizontal acceleration `p̈` of the axle is
/// rotated in by θ; the lever-arm contribution of `θ̈` is left out.
pub fn imu_emulate<R: Rng + ?Sized>(
    state: &PlantState,
    p_ddot: f64,
    g: f64,
    noise: &ImuNoise,
    rng: &mut R,
) -> ImuReading {
    let (s, c) = state.theta.sin_cos();
    let mut out = ImuReading {
        a_x: p_ddot * c + g * s,
        a_z: -p_ddot * s + g * c,
        gyro: state.theta_dot,
    };
    if noise.accel_sigma > 0.0 {
        let n = Normal::new(0.0, noise.accel_sigma).expect("finite sigma");
        out.a_x += n.sample(rng);
        out.a_z += n.sample(rng);
    }
    if noise.gyro_sigma > 0.0 {
        let n = Normal::new(0.0, noise.gyro_sigma).expect("finite sigma");
        out.gyro += n.sample(rng);
    }
    out
}

/// Accelerometer tilt `atan2(a_x, a_z)`.
pub fn accel_tilt(a_x: f64, a_z: f64) -> f64 {
    a_x.atan2(a_z)
}

/// `θ̂ = α·(θ̂_prev + gyro·dt) + (1 − α)·atan2(a_x, a_z)`.
pub fn complementary_filter(
    theta_prev: f64,
    gyro: f64,
    a_x: f64,
    a_z: f64,
    dt: f64,
    alpha: f64,
) -> f64 {
    alpha * (theta_prev + gyro * dt) + (1.0 - alpha) * accel_tilt(a_x, a_z)
}

/// Returns `Δp̈ = p̈_IMU − r·φ̈_obs` where `p̈_IMU` is the specific force
/// rotated back into the horizontal by the estimated pitch:
/// `a = √(a_x² + a_z²)`, `β = atan2(a_x, a_z) − θ̂`, `p̈_IMU = a·sinβ`.
pub fn slip_offset(a_x: f64, a_z: f64, theta_est: f64, phi_ddot_obs: f64, r: f64) -> f64 {
    let a_meas = a_x.hypot(a_z);
    let beta = accel_tilt(a_x, a_z) - theta_est;
    beta.sin() * a_meas - r * phi_ddot_obs
}

/// `(Δp̈, |Δp̈| > threshold)`.
pub fn slip_monitor(
    a_x: f64,
    a_z: f64,
    theta_est: f64,
    phi_ddot_obs: f64,
    r: f64,
    threshold: f64,
) -> (f64, bool) {
    let d = slip_offset(a_x, a_z, theta_est, phi_ddot_obs, r);
    (d, d.abs() > threshold)
}
