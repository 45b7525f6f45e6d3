//! First-order identification of the motor and velocity loop from step data.
//!
//! The model is the zero-order-hold discretization of `K/(τs + 1)`:
//! `y[k+1] = a·y[k] + b·u[k]` with `a = e^(−Δt/τ)` and `b = K(1 − a)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const MIN_SAMPLES: usize = 8;
pub const UNIFORM_JITTER_TOL: f64 = 1e-9;
/// Instrumental-variable refinement passes applied after the ARX estimate.
pub const IV_PASSES: usize = 5;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum IdentError {
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("input has no step transition; time constant unidentifiable{}", dc_note(.dc_gain))]
    Unidentifiable { dc_gain: Option<f64> },
    #[error("fitted pole a = {a} is outside (0, 1); data is not first-order stable")]
    ModelMismatch { a: f64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

fn dc_note(dc: &Option<f64>) -> String {
    match dc {
        Some(k) => format!(" (steady-state gain y/u = {k})"),
        None => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl TimeSeries {
    pub fn new(t: Vec<f64>, u: Vec<f64>, y: Vec<f64>) -> Result<Self, IdentError> {
        if t.len() != u.len() || t.len() != y.len() {
            return Err(IdentError::InvalidData(format!(
                "length mismatch: t={}, u={}, y={}",
                t.len(),
                u.len(),
                y.len()
            )));
        }
        if t.len() < MIN_SAMPLES {
            return Err(IdentError::InvalidData(format!(
                "need at least {MIN_SAMPLES} samples, got {}",
                t.len()
            )));
        }
        if t.iter().chain(&u).chain(&y).any(|v| !v.is_finite()) {
            return Err(IdentError::InvalidData("non-finite sample".into()));
        }
        if let Some(i) = t.windows(2).position(|w| w[1] <= w[0]) {
            return Err(IdentError::InvalidData(format!(
                "time not strictly increasing at sample {}",
                i + 1
            )));
        }
        Ok(TimeSeries { t, u, y })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Mean sample interval.
    pub fn dt(&self) -> f64 {
        (self.t[self.len() - 1] - self.t[0]) / (self.len() - 1) as f64
    }

    pub fn is_uniform(&self) -> bool {
        let dt = self.dt();
        self.t
            .iter()
            .enumerate()
            .all(|(k, &tk)| (tk - (self.t[0] + k as f64 * dt)).abs() <= UNIFORM_JITTER_TOL)
    }

    /// Linear interpolation onto a uniform grid with the mean interval.
    /// The input is treated as held between samples.
    pub fn resample_uniform(&self) -> TimeSeries {
        let n = self.len();
        let dt = self.dt();
        let t0 = self.t[0];
        let mut t = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut j = 0;
        for k in 0..n {
            let tk = if k == n - 1 {
                self.t[n - 1]
            } else {
                t0 + k as f64 * dt
            };
            while j + 2 < n && self.t[j + 1] <= tk {
                j += 1;
            }
            let (ta, tb) = (self.t[j], self.t[j + 1]);
            let w = ((tk - ta) / (tb - ta)).clamp(0.0, 1.0);
            t.push(tk);
            u.push(if w >= 1.0 { self.u[j + 1] } else { self.u[j] });
            y.push(self.y[j] + w * (self.y[j + 1] - self.y[j]));
        }
        TimeSeries { t, u, y }
    }

    /// Parses CSV with header `t,u,y`.
    pub fn from_csv_str(text: &str) -> Result<Self, IdentError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (hline, header) = lines.next().ok_or(IdentError::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["t", "u", "y"] {
            return Err(IdentError::Parse {
                line: hline + 1,
                message: format!("expected header `t,u,y`, got `{}`", header.trim()),
            });
        }
        let (mut t, mut u, mut y) = (Vec::new(), Vec::new(), Vec::new());
        for (idx, line) in lines {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(IdentError::Parse {
                    line: idx + 1,
                    message: format!("expected 3 fields, got {}", fields.len()),
                });
            }
            let mut vals = [0.0; 3];
            for (v, f) in vals.iter_mut().zip(&fields) {
                *v = f.parse().map_err(|_| IdentError::Parse {
                    line: idx + 1,
                    message: format!("`{f}` is not a number"),
                })?;
            }
            t.push(vals[0]);
            u.push(vals[1]);
            y.push(vals[2]);
        }
        TimeSeries::new(t, u, y)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t,u,y\n");
        for k in 0..self.len() {
            let _ = writeln!(out, "{},{},{}", self.t[k], self.u[k], self.y[k]);
        }
        out
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, IdentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| IdentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }
}

/// `K_m/(τs + 1)` plus the one-step prediction residual of the fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderFit {
    #[serde(rename = "K_m")]
    pub gain: f64,
    pub tau: f64,
    #[serde(default)]
    pub residual_rms: f64,
}

impl FirstOrderFit {
    pub fn new(gain: f64, tau: f64) -> Self {
        FirstOrderFit {
            gain,
            tau,
            residual_rms: 0.0,
        }
    }

    /// Simulated response to the input of `data`, starting from `data.y[0]`.
    pub fn predict(&self, data: &TimeSeries) -> Vec<f64> {
        let mut out = Vec::with_capacity(data.len());
        let mut y = data.y[0];
        out.push(y);
        for k in 0..data.len() - 1 {
            let a = (-(data.t[k + 1] - data.t[k]) / self.tau).exp();
            y = a * y + self.gain * (1.0 - a) * data.u[k];
            out.push(y);
        }
        out
    }
}

/// Fits `K_m` and `τ` to uniformly sampled step data.
///
/// The ARX normal equations give the initial estimate. A few passes of the
/// instrumental-variable form, with the simulated noise-free output as the
/// instrument for `y[k]`, then remove the bias that output noise introduces
/// into the regressor. Noise-free data is reproduced exactly by both.
pub fn fit_first_order(data: &TimeSeries) -> Result<FirstOrderFit, IdentError> {
    let resampled;
    let data = if data.is_uniform() {
        data
    } else {
        resampled = data.resample_uniform();
        &resampled
    };
    let (mut a, mut b) = arx_estimate(data)?;
    for _ in 0..IV_PASSES {
        if !(a > 0.0 && a < 1.0) {
            break;
        }
        match iv_estimate(data, a, b) {
            Some(next) => (a, b) = next,
            None => break,
        }
    }
    finish(data, a, b)
}

/// Plain least-squares ARX fit without the instrumental-variable passes.
pub fn fit_first_order_ls(data: &TimeSeries) -> Result<FirstOrderFit, IdentError> {
    let (a, b) = arx_estimate(data)?;
    finish(data, a, b)
}

fn finish(data: &TimeSeries, a: f64, b: f64) -> Result<FirstOrderFit, IdentError> {
    if !(a > 0.0 && a < 1.0) {
        return Err(IdentError::ModelMismatch { a });
    }
    let dt = data.dt();
    let n = data.len() - 1;
    let sse: f64 = (0..n)
        .map(|k| {
            let e = data.y[k + 1] - a * data.y[k] - b * data.u[k];
            e * e
        })
        .sum();
    Ok(FirstOrderFit {
        gain: b / (1.0 - a),
        tau: -dt / a.ln(),
        residual_rms: (sse / n as f64).sqrt(),
    })
}

fn arx_estimate(data: &TimeSeries) -> Result<(f64, f64), IdentError> {
    let n = data.len() - 1;
    let u = &data.u[..n];
    let max_du = u
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);
    if max_du == 0.0 {
        let last = data.len() - 1;
        let dc_gain = (data.u[last] != 0.0).then(|| data.y[last] / data.u[last]);
        return Err(IdentError::Unidentifiable { dc_gain });
    }
    let (mut syy, mut syu, mut suu, mut sy1y, mut sy1u) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..n {
        let (yk, uk, y1) = (data.y[k], data.u[k], data.y[k + 1]);
        syy += yk * yk;
        syu += yk * uk;
        suu += uk * uk;
        sy1y += y1 * yk;
        sy1u += y1 * uk;
    }
    solve2(syy, syu, syu, suu, sy1y, sy1u).ok_or(IdentError::Unidentifiable { dc_gain: None })
}

fn iv_estimate(data: &TimeSeries, a: f64, b: f64) -> Option<(f64, f64)> {
    let n = data.len() - 1;
    let mut z = data.y[0];
    let (mut m11, mut m12, mut m21, mut m22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 0..n {
        let (yk, uk, y1) = (data.y[k], data.u[k], data.y[k + 1]);
        m11 += z * yk;
        m12 += z * uk;
        m21 += uk * yk;
        m22 += uk * uk;
        r1 += z * y1;
        r2 += uk * y1;
        z = a * z + b * uk;
    }
    solve2(m11, m12, m21, m22, r1, r2)
}

fn solve2(a11: f64, a12: f64, a21: f64, a22: f64, r1: f64, r2: f64) -> Option<(f64, f64)> {
    let det = a11 * a22 - a12 * a21;
    let scale = (a11 * a22).abs().max((a12 * a21).abs());
    if !(det.is_finite() && det.abs() > 1e-14 * scale && scale > 0.0) {
        return None;
    }
    Some(((r1 * a22 - a12 * r2) / det, (a11 * r2 - a21 * r1) / det))
}

/// `±1` square wave at 1 Hz as `(time, level)` switch points over `horizon`.
pub fn default_step_sequence(horizon: f64) -> Vec<(f64, f64)> {
    let mut steps = Vec::new();
    let mut k = 0;
    while (k as f64) * 0.5 < horizon {
        steps.push((k as f64 * 0.5, if k % 2 == 0 { 1.0 } else { -1.0 }));
        k += 1;
    }
    steps
}

/// Synthetic step experiment on `plant`, sampled every `dt` over
/// `[0, horizon]`. The input is zero before the first switch point and is
/// held between samples, so the response at the sample instants is exact.
/// Output noise is additive Gaussian with standard deviation `noise_sigma`.
pub fn generate_step_experiment(
    plant: &FirstOrderFit,
    steps: &[(f64, f64)],
    dt: f64,
    horizon: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<TimeSeries, IdentError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(IdentError::InvalidData(format!("dt must be > 0, got {dt}")));
    }
    if !(plant.tau > 0.0) || !plant.gain.is_finite() {
        return Err(IdentError::InvalidData(
            "plant needs finite gain and tau > 0".into(),
        ));
    }
    if !(noise_sigma >= 0.0) {
        return Err(IdentError::InvalidData("noise_sigma must be ≥ 0".into()));
    }
    let n = (horizon / dt + 1e-9).floor() as usize + 1;
    let a = (-dt / plant.tau).exp();
    let b = plant.gain * (1.0 - a);
    let t: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let u: Vec<f64> = t
        .iter()
        .map(|&tk| {
            steps
                .iter()
                .rev()
                .find(|(ts, _)| *ts <= tk + 1e-9 * dt)
                .map_or(0.0, |(_, level)| *level)
        })
        .collect();
    let mut y = vec![0.0; n];
    for k in 0..n - 1 {
        y[k + 1] = a * y[k] + b * u[k];
    }
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).expect("sigma checked above");
        for v in &mut y {
            *v += normal.sample(&mut rng);
        }
    }
    TimeSeries::new(t, u, y)
}
