//! Classical SISO analysis of the stabilised robot: closed-loop transfer
//! function, root locus, Nyquist margins, critical gain and step response.

use serde::{Deserialize, Serialize};

use crate::model::{ss_to_tf, ModelError, RationalTF, StateSpace};
use crate::numerics::{Complex64, Matrix, NumericsError};
use crate::synthesis::GainVector;

pub const DEFAULT_OMEGA_RANGE: (f64, f64) = (1e-2, 1e3);
pub const DEFAULT_OMEGA_POINTS: usize = 400;
pub const DEFAULT_LOCUS_RANGE: (f64, f64) = (1e-3, 1e2);
pub const DEFAULT_LOCUS_POINTS: usize = 500;
pub const CRITICAL_GAIN_RANGE: (f64, f64) = (1e-6, 1e6);
const CRITICAL_GAIN_SCAN_POINTS: usize = 1200;
const CRITICAL_GAIN_REL_TOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no imaginary-axis crossing for k in [{k_min}, {k_max}]")]
    NotFound { k_min: f64, k_max: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `n` points spaced evenly in log10 between `lo` and `hi`, inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

pub fn default_omega_grid() -> Vec<f64> {
    logspace(
        DEFAULT_OMEGA_RANGE.0,
        DEFAULT_OMEGA_RANGE.1,
        DEFAULT_OMEGA_POINTS,
    )
}

/// `A − B·[0, k₁, k₂, k₃]` for the pitch gains acting on `(φ̇, θ, θ̇)`.
pub fn closed_loop_matrix(sys: &StateSpace, k3: &GainVector) -> Result<Matrix, AnalysisError> {
    if k3.len() != 3 {
        return Err(AnalysisError::InvalidInput(format!(
            "expected 3 pitch gains, got {}",
            k3.len()
        )));
    }
    if sys.order() != 4 || sys.b.cols() != 1 {
        return Err(AnalysisError::InvalidInput(
            "expected the 4-state single-input robot model".into(),
        ));
    }
    let k = Matrix::row(&[0.0, k3.k[0], k3.k[1], k3.k[2]]);
    Ok(&sys.a - &(&sys.b * &k))
}

/// Transfer function from `θ_ref` to the position `p` with the pitch loop
/// `u = −k₁φ̇ − k₂(θ − θ_ref) − k₃θ̇` closed.
pub fn closed_loop_siso(sys: &StateSpace, k3: &GainVector) -> Result<RationalTF, AnalysisError> {
    let a_cl = closed_loop_matrix(sys, k3)?;
    let b_ref = sys.b.scale(k3.k[1]);
    let c = Matrix::row(sys.c.row_slice(0));
    let cl = StateSpace::new(a_cl, b_ref, c)?;
    Ok(ss_to_tf(&cl, 0, 0)?)
}

/// Closed-loop poles of the proportional closure `den + k·num`.
pub fn closure_poles(g: &RationalTF, k: f64) -> Result<Vec<Complex64>, AnalysisError> {
    let poly = g.closure_polynomial(k);
    if poly.degree() == 0 {
        return Ok(Vec::new());
    }
    Ok(poly.roots()?)
}

pub fn max_real_part(poles: &[Complex64]) -> f64 {
    poles.iter().map(|p| p.re).fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_stable_closure(g: &RationalTF, k: f64) -> Result<bool, AnalysisError> {
    Ok(max_real_part(&closure_poles(g, k)?) < 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocusBranch {
    pub gains: Vec<f64>,
    /// `pole_tracks[i][j]` is the position of track `j` at `gains[i]`.
    pub pole_tracks: Vec<Vec<Complex64>>,
    pub open_loop_poles: Vec<Complex64>,
}

impl LocusBranch {
    pub fn branch_count(&self) -> usize {
        self.open_loop_poles.len()
    }
}

/// Closed-loop poles over a log-spaced gain grid. Tracks start at the
/// open-loop poles and are continued by nearest-neighbour matching.
pub fn root_locus(
    g: &RationalTF,
    k_min: f64,
    k_max: f64,
    n_points: usize,
) -> Result<LocusBranch, AnalysisError> {
    if !(k_min > 0.0 && k_max > k_min && n_points >= 2) {
        return Err(AnalysisError::InvalidInput(format!(
            "need 0 < k_min < k_max and n_points ≥ 2, got [{k_min}, {k_max}] × {n_points}"
        )));
    }
    let open = g.poles()?;
    let gains = logspace(k_min, k_max, n_points);
    let mut tracks = Vec::with_capacity(n_points);
    let mut prev = open.clone();
    for &k in &gains {
        let roots = closure_poles(g, k)?;
        let matched = match_nearest(&prev, &roots);
        prev = matched.clone();
        tracks.push(matched);
    }
    Ok(LocusBranch {
        gains,
        pole_tracks: tracks,
        open_loop_poles: open,
    })
}

/// Reorders `next` to follow `prev`, pairing globally closest points first.
fn match_nearest(prev: &[Complex64], next: &[Complex64]) -> Vec<Complex64> {
    if prev.len() != next.len() {
        return next.to_vec();
    }
    let n = prev.len();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n);
    for (i, p) in prev.iter().enumerate() {
        for (j, q) in next.iter().enumerate() {
            pairs.push(((p - q).norm(), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![None; n];
    let mut used = vec![false; n];
    for (_, i, j) in pairs {
        if out[i].is_none() && !used[j] {
            out[i] = Some(next[j]);
            used[j] = true;
        }
    }
    out.into_iter()
        .map(|z| z.expect("complete matching"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    /// Ratio; infinite when the curve never crosses the negative real axis.
    pub gain_margin: f64,
    pub gain_margin_db: f64,
    /// Degrees; infinite when `|G|` never crosses 1.
    pub phase_margin_deg: f64,
    pub phase_crossover: Option<f64>,
    pub gain_crossover: Option<f64>,
}

impl Margins {
    pub fn indicates_stable(&self) -> bool {
        self.gain_margin > 1.0 && self.phase_margin_deg > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyResponse {
    pub omega: Vec<f64>,
    pub value: Vec<Complex64>,
    /// Continuous phase in degrees.
    pub phase_deg: Vec<f64>,
    pub margins: Margins,
}

/// Samples `G(jω)` and derives gain and phase margins by interpolating
/// between grid points in `log ω`.
pub fn nyquist(g: &RationalTF, omega: &[f64]) -> Result<FrequencyResponse, AnalysisError> {
    if omega.len() < 2 || omega[0] <= 0.0 || omega.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::InvalidInput(
            "ω grid must be positive and strictly increasing".into(),
        ));
    }
    let value: Vec<Complex64> = omega.iter().map(|&w| g.freq_response(w)).collect();
    if value
        .iter()
        .any(|z| !(z.re.is_finite() && z.im.is_finite()))
    {
        return Err(AnalysisError::InvalidInput(
            "G(jω) has a pole on the ω grid".into(),
        ));
    }
    let phase_deg = unwrap_degrees(&value);
    let margins = margins(omega, &value, &phase_deg);
    Ok(FrequencyResponse {
        omega: omega.to_vec(),
        value,
        phase_deg,
        margins,
    })
}

fn unwrap_degrees(value: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(value.len());
    let mut prev: Option<f64> = None;
    for z in value {
        let mut ph = z.arg().to_degrees();
        if let Some(p) = prev {
            while ph - p > 180.0 {
                ph -= 360.0;
            }
            while ph - p < -180.0 {
                ph += 360.0;
            }
        }
        out.push(ph);
        prev = Some(ph);
    }
    out
}

fn margins(omega: &[f64], value: &[Complex64], phase: &[f64]) -> Margins {
    let lw: Vec<f64> = omega.iter().map(|w| w.ln()).collect();
    let mut gm = f64::INFINITY;
    let mut w_pc = None;
    for i in 0..omega.len() - 1 {
        // crossings of the −180° (mod 360°) line
        let (p0, p1) = (phase[i], phase[i + 1]);
        let lo = p0.min(p1);
        let hi = p0.max(p1);
        let mut line = ((lo + 180.0) / 360.0).ceil() * 360.0 - 180.0;
        while line <= hi {
            if p1 != p0 {
                let f = (line - p0) / (p1 - p0);
                let l = lerp(lw[i], lw[i + 1], f);
                let mag = lerp(value[i].norm().ln(), value[i + 1].norm().ln(), f).exp();
                let cand = 1.0 / mag;
                if cand < gm {
                    gm = cand;
                    w_pc = Some(l.exp());
                }
            }
            line += 360.0;
        }
    }
    let mut pm = f64::INFINITY;
    let mut w_gc = None;
    for i in 0..omega.len() - 1 {
        let (m0, m1) = (value[i].norm().ln(), value[i + 1].norm().ln());
        if (m0 >= 0.0) != (m1 >= 0.0) {
            let f = -m0 / (m1 - m0);
            let ph = lerp(phase[i], phase[i + 1], f);
            let cand = wrap_deg(ph + 180.0);
            if cand.abs() < pm.abs() || pm.is_infinite() {
                pm = cand;
                w_gc = Some(lerp(lw[i], lw[i + 1], f).exp());
            }
        }
    }
    Margins {
        gain_margin: gm,
        gain_margin_db: 20.0 * gm.log10(),
        phase_margin_deg: pm,
        phase_crossover: w_pc,
        gain_crossover: w_gc,
    }
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + (b - a) * f
}

/// Wraps to `(−180°, 180°]`.
fn wrap_deg(x: f64) -> f64 {
    let mut y = x % 360.0;
    if y > 180.0 {
        y -= 360.0;
    }
    if y <= -180.0 {
        y += 360.0;
    }
    y
}

/// Smallest `k > 0` at which a root of `den + k·num` reaches the imaginary
/// axis, searched over [`CRITICAL_GAIN_RANGE`].
pub fn critical_gain(g: &RationalTF) -> Result<f64, AnalysisError> {
    critical_gain_in(g, CRITICAL_GAIN_RANGE.0, CRITICAL_GAIN_RANGE.1)
}

/// Log-spaced scan for the first sign change of `max Re(root)`, refined by
/// bisection.
pub fn critical_gain_in(g: &RationalTF, k_min: f64, k_max: f64) -> Result<f64, AnalysisError> {
    if !(k_min > 0.0 && k_max > k_min) {
        return Err(AnalysisError::InvalidInput(format!(
            "bad search interval [{k_min}, {k_max}]"
        )));
    }
    let f = |k: f64| -> Result<f64, AnalysisError> { Ok(max_real_part(&closure_poles(g, k)?)) };
    let grid = logspace(k_min, k_max, CRITICAL_GAIN_SCAN_POINTS);
    let mut lo = grid[0];
    let mut f_lo = f(lo)?;
    for &k in &grid[1..] {
        let fk = f(k)?;
        if (fk >= 0.0) != (f_lo >= 0.0) {
            let mut hi = k;
            let stable_low = f_lo < 0.0;
            while (hi - lo) > CRITICAL_GAIN_REL_TOL * hi {
                let mid = 0.5 * (lo + hi);
                if (f(mid)? < 0.0) == stable_low {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Ok(0.5 * (lo + hi));
        }
        lo = k;
        f_lo = fk;
    }
    Err(AnalysisError::NotFound { k_min, k_max })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
}

impl StepResponse {
    pub fn min(&self) -> f64 {
        self.y.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn final_value(&self) -> f64 {
        *self.y.last().expect("non-empty response")
    }
}

/// Unit-step response of a proper `G` from its controllable canonical
/// realisation, integrated with classic RK4.
pub fn step_response(g: &RationalTF, horizon: f64, dt: f64) -> Result<StepResponse, AnalysisError> {
    if !(dt > 0.0 && horizon > dt) {
        return Err(AnalysisError::InvalidInput(format!(
            "need 0 < dt < horizon, got dt={dt}, horizon={horizon}"
        )));
    }
    if !g.is_proper() {
        return Err(AnalysisError::InvalidInput(
            "transfer function is improper".into(),
        ));
    }
    let den = g.den().coeffs();
    let n = g.den().degree();
    let mut num = vec![0.0; n + 1];
    let nc = g.num().coeffs();
    num[n + 1 - nc.len()..].copy_from_slice(nc);
    // G = d + (c·(sI−A)⁻¹·b); companion a-coefficients a_i = den[n−i]
    let d = num[0];
    let c: Vec<f64> = (0..n).map(|i| num[n - i] - d * den[n - i]).collect();
    let deriv = |x: &[f64], u: f64| -> Vec<f64> {
        let mut dx = vec![0.0; n];
        if n > 1 {
            dx[..n - 1].copy_from_slice(&x[1..n]);
        }
        if n > 0 {
            dx[n - 1] = u - (0..n).map(|i| den[n - i] * x[i]).sum::<f64>();
        }
        dx
    };
    let out = |x: &[f64], u: f64| d * u + c.iter().zip(x).map(|(c, x)| c * x).sum::<f64>();
    let steps = (horizon / dt).round() as usize;
    let mut x = vec![0.0; n];
    let mut t = Vec::with_capacity(steps + 1);
    let mut y = Vec::with_capacity(steps + 1);
    t.push(0.0);
    y.push(out(&x, 1.0));
    for k in 1..=steps {
        let k1 = deriv(&x, 1.0);
        let x2: Vec<f64> = x.iter().zip(&k1).map(|(x, k)| x + 0.5 * dt * k).collect();
        let k2 = deriv(&x2, 1.0);
        let x3: Vec<f64> = x.iter().zip(&k2).map(|(x, k)| x + 0.5 * dt * k).collect();
        let k3 = deriv(&x3, 1.0);
        let x4: Vec<f64> = x.iter().zip(&k3).map(|(x, k)| x + dt * k).collect();
        let k4 = deriv(&x4, 1.0);
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t.push(k as f64 * dt);
        y.push(out(&x, 1.0));
    }
    Ok(StepResponse { t, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lag() -> RationalTF {
        RationalTF::from_coeffs(&[1.0], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn first_order_locus_is_a_single_track() {
        let loc = root_locus(&lag(), 0.1, 10.0, 20).unwrap();
        for (k, poles) in loc.gains.iter().zip(&loc.pole_tracks) {
            assert_eq!(poles.len(), 1);
            assert!((poles[0].re + 1.0 + k).abs() < 1e-12);
        }
    }

    #[test]
    fn textbook_critical_gain() {
        // 1/(s(s+1)(s+2)) = 1/(s³ + 3s² + 2s)
        let g = RationalTF::from_coeffs(&[1.0], &[1.0, 3.0, 2.0, 0.0]).unwrap();
        let k = critical_gain(&g).unwrap();
        assert!((k - 6.0).abs() < 6e-9, "{k}");
        assert!(matches!(
            critical_gain(&lag()),
            Err(AnalysisError::NotFound { .. })
        ));
    }

    #[test]
    fn lag_frequency_point_and_margins() {
        let fr = nyquist(&lag(), &[0.5, 1.0, 2.0]).unwrap();
        assert!((fr.value[1].norm() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((fr.phase_deg[1] + 45.0).abs() < 1e-12);
        assert!(fr.margins.gain_margin.is_infinite());
        assert!(fr.margins.phase_margin_deg.is_infinite());
    }

    #[test]
    fn third_order_margins() {
        let g = RationalTF::from_coeffs(&[1.0], &[1.0, 3.0, 2.0, 0.0]).unwrap();
        let fr = nyquist(&g, &logspace(1e-2, 1e2, 4000)).unwrap();
        assert!((fr.margins.gain_margin - 6.0).abs() < 1e-3);
        assert!((fr.margins.phase_crossover.unwrap() - 2f64.sqrt()).abs() < 1e-3);
        assert!(fr.margins.indicates_stable());
        let fr5 = nyquist(&g.scale(10.0), &logspace(1e-2, 1e2, 4000)).unwrap();
        assert!(!fr5.margins.indicates_stable());
    }

    #[test]
    fn lag_step_response() {
        let s = step_response(&lag(), 5.0, 0.01).unwrap();
        for (t, y) in s.t.iter().zip(&s.y) {
            assert!((y - (1.0 - (-t).exp())).abs() < 1e-6);
        }
    }

    #[test]
    fn biproper_step_response_has_feedthrough() {
        // (s + 2)/(s + 1): y(0) = 1, y(∞) = 2
        let g = RationalTF::from_coeffs(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let s = step_response(&g, 20.0, 0.01).unwrap();
        assert!((s.y[0] - 1.0).abs() < 1e-12);
        assert!((s.final_value() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn bad_grids() {
        assert!(nyquist(&lag(), &[1.0, 0.5]).is_err());
        assert!(root_locus(&lag(), 0.0, 1.0, 10).is_err());
        assert!(step_response(&lag(), 0.01, 0.01).is_err());
    }
}
