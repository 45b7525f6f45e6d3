//! Bundled reference data: the measured robot, the published transfer
//! function, gain vectors and the recovery experiment.

use serde::Deserialize;

use crate::identification::TimeSeries;
use crate::model::{RationalTF, RobotParams};
use crate::schema;
use crate::simulation::SimConfig;
use crate::synthesis::{GainVector, LQRWeights};

pub const PARAMS_TXT: &str = include_str!("../fixtures/params.txt");
pub const POSITION_TF_JSON: &str = include_str!("../fixtures/position_tf.json");
pub const REFERENCE_VALUES_JSON: &str = include_str!("../fixtures/reference_values.json");
pub const WEIGHTS_LQR3_JSON: &str = include_str!("../fixtures/weights_lqr3.json");
pub const WEIGHTS_LQR4_JSON: &str = include_str!("../fixtures/weights_lqr4.json");
pub const RECOVERY_JSON: &str = include_str!("../fixtures/recovery.json");
pub const MOTOR_STEP_CSV: &str = include_str!("../fixtures/motor_step.csv");

/// Published reference values.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ReferenceValues {
    pub lqr3_gains: Vec<f64>,
    pub lqr4_gains: Vec<f64>,
    pub kp_pos_stable: f64,
    pub motor_gain: f64,
    pub motor_tau: f64,
    pub pi_settle_time: f64,
    pub pi_max_natural_freq: f64,
    pub t_em: f64,
    pub recovery_initial_deg: [f64; 4],
}

impl ReferenceValues {
    pub fn lqr3_gains(&self) -> GainVector {
        GainVector::new(self.lqr3_gains.clone())
    }

    pub fn lqr4_gains(&self) -> GainVector {
        GainVector::new(self.lqr4_gains.clone())
    }
}

pub fn robot_params() -> RobotParams {
    RobotParams::from_kv_str(PARAMS_TXT).expect("bundled params parse")
}

pub fn position_tf() -> RationalTF {
    schema::from_json(POSITION_TF_JSON).expect("bundled transfer function parses")
}

pub fn reference_values() -> ReferenceValues {
    schema::from_json(REFERENCE_VALUES_JSON).expect("bundled reference values parse")
}

pub fn lqr3_weights() -> LQRWeights {
    schema::from_json(WEIGHTS_LQR3_JSON).expect("bundled weights parse")
}

pub fn lqr4_weights() -> LQRWeights {
    schema::from_json(WEIGHTS_LQR4_JSON).expect("bundled weights parse")
}

pub fn recovery_config() -> SimConfig {
    schema::from_json(RECOVERY_JSON).expect("bundled experiment parses")
}

pub fn motor_step() -> TimeSeries {
    TimeSeries::from_csv_str(MOTOR_STEP_CSV).expect("bundled motor data parses")
}
