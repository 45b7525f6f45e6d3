use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Physical constants of the robot plus the closed velocity-loop lag
/// `φ̈ = (K·φ̇_ref − φ̇)/t_EM`. SI units throughout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    /// Body mass [kg].
    pub m: f64,
    /// Wheel radius [m].
    pub r: f64,
    /// Distance of the body centre of mass above the axle [m].
    pub l: f64,
    /// Gravity [m/s²].
    pub g: f64,
    /// Velocity-loop gain [–].
    #[serde(rename = "K")]
    pub k: f64,
    /// Velocity-loop time constant [s].
    #[serde(rename = "t_EM")]
    pub t_em: f64,
}

const KEYS: [&str; 6] = ["m", "r", "l", "g", "K", "t_EM"];

impl Default for RobotParams {
    /// Measured robot: m = 0.933 kg, r = 0.04 m, l = 0.0857 m, with the
    /// velocity loop closed to K = 1, t_EM = 0.0994 s.
    fn default() -> Self {
        RobotParams {
            m: 0.933,
            r: 0.04,
            l: 0.0857,
            g: 9.81,
            k: 1.0,
            t_em: 0.0994,
        }
    }
}

impl RobotParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in KEYS.iter().zip(self.values()) {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidParams(format!(
                    "{name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    fn values(&self) -> [f64; 6] {
        [self.m, self.r, self.l, self.g, self.k, self.t_em]
    }

    /// `η = 2ml + mr + 2ml²/r`, the effective pitch inertia term after
    /// eliminating the torque from the two equations of motion.
    pub fn eta(&self) -> f64 {
        2.0 * self.m * self.l + self.m * self.r + 2.0 * self.m * self.l * self.l / self.r
    }

    /// Parses the flat `key = value` format. Blank lines and `#` comments
    /// are ignored; every key must appear exactly once.
    pub fn from_kv_str(text: &str) -> Result<Self, ModelError> {
        let mut found: [Option<f64>; 6] = [None; 6];
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(char::is_whitespace))
                .ok_or_else(|| ModelError::Parse {
                    line: line_no,
                    message: format!("expected `key = value`, got `{line}`"),
                })?;
            let key = key.trim();
            let slot = KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| ModelError::Parse {
                    line: line_no,
                    message: format!(
                        "unknown parameter `{key}` (expected one of {})",
                        KEYS.join(", ")
                    ),
                })?;
            let value: f64 = value.trim().parse().map_err(|_| ModelError::Parse {
                line: line_no,
                message: format!("`{}` is not a number", value.trim()),
            })?;
            if found[slot].replace(value).is_some() {
                return Err(ModelError::Parse {
                    line: line_no,
                    message: format!("duplicate parameter `{key}`"),
                });
            }
        }
        let get = |i: usize| {
            found[i].ok_or_else(|| ModelError::Parse {
                line: 0,
                message: format!("missing parameter `{}`", KEYS[i]),
            })
        };
        let p = RobotParams {
            m: get(0)?,
            r: get(1)?,
            l: get(2)?,
            g: get(3)?,
            k: get(4)?,
            t_em: get(5)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_kv_string())
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let p = RobotParams {
            l: 0.1,
            ..RobotParams::default()
        };
        assert_eq!(RobotParams::from_kv_str(&p.to_kv_string()).unwrap(), p);
    }

    #[test]
    fn kv_errors_carry_line_numbers() {
        let text = "m = 0.933\nr = 0.04\n# comment\nl = abc\n";
        match RobotParams::from_kv_str(text) {
            Err(ModelError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let missing = "m=1\nr=1\nl=1\ng=1\nK=1\n";
        assert!(RobotParams::from_kv_str(missing).is_err());
        let dup = "m=1\nm=2\n";
        assert!(matches!(
            RobotParams::from_kv_str(dup),
            Err(ModelError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn nonpositive_params_are_rejected() {
        let p = RobotParams {
            t_em: 0.0,
            ..RobotParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn eta_by_hand() {
        // 2·0.933·0.0857 + 0.933·0.04 + 2·0.933·0.0857²/0.04
        let want = 0.1599162 + 0.03732 + 0.342620457;
        assert!((RobotParams::default().eta() - want).abs() < 1e-6);
        assert!((RobotParams::default().eta() - 0.53986).abs() < 1e-5);
    }
}
