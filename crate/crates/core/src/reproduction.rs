//! Reproduction battery: recomputes the published gains, transfer function
//! and trajectory from a parameter set and compares them with the bundled
//! reference values.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::{
    closed_loop_matrix, closed_loop_siso, closure_poles, max_real_part, step_response,
};
use crate::fixtures::{self, ReferenceValues};
use crate::identification::{
    default_step_sequence, fit_first_order, generate_step_experiment, FirstOrderFit,
};
use crate::model::{
    actuated_derivative, linearize, mechanical_energy, PlantState, RationalTF, RobotParams,
    PITCH_STATES,
};
use crate::numerics::{eigenvalues, is_hurwitz, Matrix};
use crate::simulation::{
    frames_to_csv, imu_emulate, run_experiment, slip_offset, step_torque, ControllerConfig,
    ImuNoise, SimConfig,
};
use crate::synthesis::{
    controllability, dominant_time_constant, lqr3, lqr4, pi_closed_loop, pi_pole_placement,
    GainVector, LqrDesign,
};

pub const GAIN_REL_TOL: f64 = 0.05;
pub const TF_REL_TOL: f64 = 0.02;
pub const TRACE_ABS_TOL: f64 = 1e-9;
pub const LQR3_RUNTIME_LIMIT_S: f64 = 1.0;
pub const ID_EXACT_REL_TOL: f64 = 1e-6;
pub const ID_NOISY_REL_TOL: f64 = 0.05;
pub const ID_NOISE_TRIALS: u64 = 100;
/// Output noise σ as a fraction of the plant gain.
pub const ID_NOISE_FRACTION: f64 = 0.01;
pub const PI_TAU_REL_TOL: f64 = 0.005;
pub const SETTLED_NORM: f64 = 1e-2;
pub const SETTLED_PITCH_DEG: f64 = 2.0;
pub const SETTLED_PITCH_AFTER_S: f64 = 2.0;
pub const ENERGY_REL_TOL: f64 = 1e-6;
pub const LINEAR_AGREEMENT_TOL: f64 = 1e-4;
pub const JACOBIAN_REL_TOL: f64 = 1e-6;
pub const CARE_REL_TOL: f64 = 1e-8;
pub const SLIP_IDENTITY_TOL: f64 = 0.1;

pub const CRITERIA: [&str; 8] = [
    "lqr3_gains",
    "lqr4_gains",
    "siso_transfer_function",
    "stability_structure",
    "position_loop",
    "motor_identification",
    "recovery_trajectory",
    "property_suites",
];

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub criterion: &'static str,
    pub name: String,
    pub computed: Vec<f64>,
    pub reference: Vec<f64>,
    /// Largest deviation in the unit the tolerance is stated in.
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub params: RobotParams,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn criterion_passed(&self, criterion: &str) -> bool {
        self.checks
            .iter()
            .filter(|c| c.criterion == criterion)
            .all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Fixed-width text table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<24} {:<34} {:>12} {:>12} {:>10} {:>10}  result\n",
            "criterion", "check", "computed", "reference", "deviation", "tolerance"
        );
        for c in &self.checks {
            let rows = c.computed.len().max(c.reference.len()).max(1);
            for i in 0..rows {
                let comp = c.computed.get(i).map_or(String::new(), |v| fmt_num(*v));
                let refv = c.reference.get(i).map_or(String::new(), |v| fmt_num(*v));
                if i == 0 {
                    out.push_str(&format!(
                        "{:<24} {:<34} {:>12} {:>12} {:>10} {:>10}  {}{}\n",
                        c.criterion,
                        c.name,
                        comp,
                        refv,
                        fmt_num(c.deviation),
                        fmt_num(c.tolerance),
                        if c.passed { "PASS" } else { "FAIL" },
                        if c.note.is_empty() {
                            String::new()
                        } else {
                            format!("  ({})", c.note)
                        }
                    ));
                } else {
                    out.push_str(&format!(
                        "{:<24} {:<34} {:>12} {:>12}\n",
                        "", "", comp, refv
                    ));
                }
            }
        }
        out
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 || (1e-3..1e5).contains(&v.abs()) {
        format!("{v:.4}")
    } else {
        format!("{v:.3e}")
    }
}

struct Battery {
    checks: Vec<Check>,
}

impl Battery {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        criterion: &'static str,
        name: &str,
        computed: Vec<f64>,
        reference: Vec<f64>,
        deviation: f64,
        tolerance: f64,
        passed: bool,
        note: impl Into<String>,
    ) {
        self.checks.push(Check {
            criterion,
            name: name.to_string(),
            computed,
            reference,
            deviation,
            tolerance,
            passed,
            note: note.into(),
        });
    }

    fn flag(&mut self, criterion: &'static str, name: &str, ok: bool, note: impl Into<String>) {
        self.push(
            criterion,
            name,
            vec![ok as u8 as f64],
            vec![1.0],
            (!ok) as u8 as f64,
            0.0,
            ok,
            note,
        );
    }

    fn failed(&mut self, criterion: &'static str, name: &str, err: impl std::fmt::Display) {
        self.push(
            criterion,
            name,
            vec![],
            vec![],
            f64::NAN,
            0.0,
            false,
            err.to_string(),
        );
    }
}

/// Elementwise `|a − b|/|b|` maximum; `|a − b|` where `b = 0`.
pub fn max_rel_dev(computed: &[f64], reference: &[f64]) -> f64 {
    if computed.len() != reference.len() {
        return f64::INFINITY;
    }
    computed
        .iter()
        .zip(reference)
        .map(|(c, r)| {
            if *r == 0.0 {
                (c - r).abs()
            } else {
                ((c - r) / r).abs()
            }
        })
        .fold(0.0, f64::max)
}

pub fn run(params: &RobotParams) -> Report {
    let published = fixtures::reference_values();
    let mut b = Battery { checks: Vec::new() };
    let designs = gains_checks(&mut b, params, &published);
    transfer_function_checks(&mut b, params, &published);
    stability_checks(&mut b, params, &published, &designs);
    position_loop_checks(&mut b);
    identification_checks(&mut b, &published);
    trajectory_checks(&mut b, params);
    property_checks(&mut b, params, &designs);
    Report {
        params: *params,
        checks: b.checks,
    }
}

fn gains_checks(
    b: &mut Battery,
    params: &RobotParams,
    published: &ReferenceValues,
) -> (Option<LqrDesign>, Option<LqrDesign>) {
    let start = Instant::now();
    let d3 = lqr3(params, &fixtures::lqr3_weights());
    let elapsed = start.elapsed().as_secs_f64();
    let d3 = match d3 {
        Ok(d) => {
            let dev = max_rel_dev(&d.gains.k, &published.lqr3_gains);
            b.push(
                "lqr3_gains",
                "gains per element",
                d.gains.k.clone(),
                published.lqr3_gains.clone(),
                dev,
                GAIN_REL_TOL,
                dev <= GAIN_REL_TOL,
                "",
            );
            Some(d)
        }
        Err(e) => {
            b.failed("lqr3_gains", "gains per element", e);
            None
        }
    };
    b.push(
        "lqr3_gains",
        "synthesis runtime [s]",
        vec![elapsed],
        vec![LQR3_RUNTIME_LIMIT_S],
        elapsed,
        LQR3_RUNTIME_LIMIT_S,
        elapsed < LQR3_RUNTIME_LIMIT_S,
        "",
    );
    let d4 = match lqr4(params, &fixtures::lqr4_weights()) {
        Ok(d) => {
            let dev = max_rel_dev(&d.gains.k, &published.lqr4_gains);
            b.push(
                "lqr4_gains",
                "gains per element",
                d.gains.k.clone(),
                published.lqr4_gains.clone(),
                dev,
                GAIN_REL_TOL,
                dev <= GAIN_REL_TOL,
                "",
            );
            Some(d)
        }
        Err(e) => {
            b.failed("lqr4_gains", "gains per element", e);
            None
        }
    };
    (d3, d4)
}

fn transfer_function_checks(b: &mut Battery, params: &RobotParams, published: &ReferenceValues) {
    const C: &str = "siso_transfer_function";
    let reference = fixtures::position_tf();
    let sys = match linearize(params) {
        Ok(s) => s,
        Err(e) => return b.failed(C, "closed loop", e),
    };
    let k3 = published.lqr3_gains();
    let tf = match closed_loop_siso(&sys, &k3) {
        Ok(tf) => tf,
        Err(e) => return b.failed(C, "closed loop", e),
    };
    let nonzero = |p: &[f64], r: &[f64]| -> (Vec<f64>, Vec<f64>) {
        p.iter()
            .zip(r)
            .filter(|(_, r)| **r != 0.0)
            .map(|(p, r)| (*p, *r))
            .unzip()
    };
    let pad = |tf_coeffs: &[f64], n: usize| -> Vec<f64> {
        let mut v = vec![0.0; n.saturating_sub(tf_coeffs.len())];
        v.extend_from_slice(tf_coeffs);
        v
    };
    let num = pad(tf.num().coeffs(), reference.num().coeffs().len());
    let den = pad(tf.den().coeffs(), reference.den().coeffs().len());
    let (nc, nr) = nonzero(&num, reference.num().coeffs());
    let dev = max_rel_dev(&nc, &nr);
    b.push(
        C,
        "numerator (nonzero coefficients)",
        nc,
        nr,
        dev,
        TF_REL_TOL,
        dev <= TF_REL_TOL,
        "",
    );
    let (dc, dr) = nonzero(&den, reference.den().coeffs());
    let dev = max_rel_dev(&dc, &dr);
    b.push(
        C,
        "denominator (nonzero coefficients)",
        dc,
        dr,
        dev,
        TF_REL_TOL,
        dev <= TF_REL_TOL,
        "",
    );
    let constant = *tf.den().coeffs().last().unwrap_or(&f64::NAN);
    b.push(
        C,
        "denominator constant term",
        vec![constant],
        vec![0.0],
        constant.abs(),
        0.0,
        constant == 0.0 && tf.den().degree() == 4,
        "",
    );
    if let Ok(a_cl) = closed_loop_matrix(&sys, &k3) {
        let s3 = tf.den().coeff_of_power(3);
        let tr = -a_cl.trace();
        let dev = (s3 - tr).abs();
        b.push(
            C,
            "s^3 coefficient vs -trace(A_cl)",
            vec![s3],
            vec![tr],
            dev,
            TRACE_ABS_TOL,
            dev <= TRACE_ABS_TOL,
            "",
        );
    }
}

fn stability_checks(
    b: &mut Battery,
    params: &RobotParams,
    published: &ReferenceValues,
    designs: &(Option<LqrDesign>, Option<LqrDesign>),
) {
    const C: &str = "stability_structure";
    let sys = match linearize(params) {
        Ok(s) => s,
        Err(e) => return b.failed(C, "open loop", e),
    };
    match eigenvalues(&sys.a) {
        Ok(ev) => {
            let m = max_real_part(&ev);
            b.push(
                C,
                "max Re(eig A) > 0",
                vec![m],
                vec![0.0],
                m,
                0.0,
                m > 0.0,
                "",
            );
        }
        Err(e) => b.failed(C, "max Re(eig A) > 0", e),
    }
    match controllability(&sys) {
        Ok((_, rank)) => b.push(
            C,
            "controllability rank",
            vec![rank as f64],
            vec![4.0],
            (4 - rank as i64).abs() as f64,
            0.0,
            rank == 4,
            "",
        ),
        Err(e) => b.failed(C, "controllability rank", e),
    }
    let pitch = sys.reduce(&PITCH_STATES).expect("valid indices");
    let hurwitz = |a: &Matrix, bm: &Matrix, k: &GainVector| -> Option<f64> {
        let acl = a - &(bm * &k.as_row());
        is_hurwitz(&acl).ok()?;
        Some(max_real_part(&eigenvalues(&acl).ok()?))
    };
    let mut cases: Vec<(&str, &Matrix, &Matrix, GainVector)> = vec![
        (
            "A-Bk Hurwitz, published 3-state gains",
            &pitch.a,
            &pitch.b,
            published.lqr3_gains(),
        ),
        (
            "A-Bk Hurwitz, published 4-state gains",
            &sys.a,
            &sys.b,
            published.lqr4_gains(),
        ),
    ];
    if let Some(d) = &designs.0 {
        cases.push((
            "A-Bk Hurwitz, synthesised 3-state",
            &pitch.a,
            &pitch.b,
            d.gains.clone(),
        ));
    }
    if let Some(d) = &designs.1 {
        cases.push((
            "A-Bk Hurwitz, synthesised 4-state",
            &sys.a,
            &sys.b,
            d.gains.clone(),
        ));
    }
    for (name, a, bm, k) in cases {
        match hurwitz(a, bm, &k) {
            Some(m) => b.push(C, name, vec![m], vec![0.0], m, 0.0, m < 0.0, "max Re"),
            None => b.failed(C, name, "eigenvalue failure"),
        }
    }
}

fn position_loop_checks(b: &mut Battery) {
    const C: &str = "position_loop";
    let g = fixtures::position_tf();
    let kp = fixtures::reference_values().kp_pos_stable;
    match closure_poles(&g, kp) {
        Ok(p) => {
            let m = max_real_part(&p);
            b.push(
                C,
                "closure poles Re < 0 at Kp",
                vec![m],
                vec![0.0],
                m,
                0.0,
                m < 0.0,
                format!("Kp = {kp}"),
            );
        }
        Err(e) => b.failed(C, "closure poles Re < 0 at Kp", e),
    }
    match g
        .feedback(kp)
        .map_err(|e| e.to_string())
        .and_then(|cl| step_response(&cl, 20.0, 1e-3).map_err(|e| e.to_string()))
    {
        Ok(s) => {
            let m = s.min();
            b.push(
                C,
                "step response undershoot (min y)",
                vec![m],
                vec![0.0],
                m,
                0.0,
                m < 0.0,
                "",
            );
        }
        Err(e) => b.failed(C, "step response undershoot (min y)", e),
    }
    let c0 = *g.den().coeffs().last().unwrap_or(&f64::NAN);
    let has_zero_pole = g
        .poles()
        .map(|p| p.iter().any(|z| z.re == 0.0 && z.im == 0.0))
        .unwrap_or(false);
    b.push(
        C,
        "open-loop pole exactly at 0",
        vec![c0],
        vec![0.0],
        c0.abs(),
        0.0,
        has_zero_pole,
        "",
    );
}

fn identification_checks(b: &mut Battery, published: &ReferenceValues) {
    const C: &str = "motor_identification";
    let plant = FirstOrderFit::new(published.motor_gain, published.motor_tau);
    let steps = default_step_sequence(1.0);
    let truth = [published.motor_gain, published.motor_tau];
    match generate_step_experiment(&plant, &steps, 1e-3, 1.0, 0.0, 0)
        .and_then(|d| fit_first_order(&d))
    {
        Ok(fit) => {
            let got = vec![fit.gain, fit.tau];
            let dev = max_rel_dev(&got, &truth);
            b.push(
                C,
                "zero-noise recovery (K_m, tau)",
                got,
                truth.to_vec(),
                dev,
                ID_EXACT_REL_TOL,
                dev <= ID_EXACT_REL_TOL,
                "",
            );
        }
        Err(e) => b.failed(C, "zero-noise recovery (K_m, tau)", e),
    }
    let sigma = ID_NOISE_FRACTION * published.motor_gain;
    let mut worst = 0.0f64;
    let mut failure = None;
    for seed in 0..ID_NOISE_TRIALS {
        match generate_step_experiment(&plant, &steps, 1e-3, 1.0, sigma, seed)
            .and_then(|d| fit_first_order(&d))
        {
            Ok(fit) => worst = worst.max(max_rel_dev(&[fit.gain, fit.tau], &truth)),
            Err(e) => {
                failure = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    match failure {
        None => b.push(
            C,
            "1% noise, worst of 100 trials",
            vec![worst],
            vec![ID_NOISY_REL_TOL],
            worst,
            ID_NOISY_REL_TOL,
            worst <= ID_NOISY_REL_TOL,
            "",
        ),
        Some(e) => b.failed(C, "1% noise, worst of 100 trials", e),
    }
    let pi = pi_pole_placement(
        &plant,
        published.pi_settle_time,
        published.pi_max_natural_freq,
    )
    .and_then(|g| Ok((g, pi_closed_loop(&plant, &g)?)));
    match pi {
        Ok((_, cl)) => {
            match dominant_time_constant(&cl) {
                Ok(tau) => {
                    let dev = ((tau - published.t_em) / published.t_em).abs();
                    b.push(
                        C,
                        "PI dominant time constant [s]",
                        vec![tau],
                        vec![published.t_em],
                        dev,
                        PI_TAU_REL_TOL,
                        dev <= PI_TAU_REL_TOL,
                        "",
                    );
                }
                Err(e) => b.failed(C, "PI dominant time constant [s]", e),
            }
            let dc = cl.dc_gain();
            b.push(
                C,
                "PI closed-loop DC gain",
                vec![dc],
                vec![1.0],
                (dc - 1.0).abs(),
                0.0,
                dc == 1.0,
                "",
            );
        }
        Err(e) => b.failed(C, "PI pole placement", e),
    }
}

fn recovery_frames(params: &RobotParams) -> Result<Vec<crate::simulation::TelemetryFrame>, String> {
    run_experiment(&fixtures::recovery_config(), params).map_err(|e| e.to_string())
}

fn trajectory_checks(b: &mut Battery, params: &RobotParams) {
    const C: &str = "recovery_trajectory";
    let frames = match recovery_frames(params) {
        Ok(f) => f,
        Err(e) => return b.failed(C, "simulation", e),
    };
    let last = frames.last().expect("frames");
    let n = last.state.norm();
    let note = match settle_time(
        &fixtures::recovery_config(),
        params,
        SETTLED_NORM,
        SETTLE_SEARCH_HORIZON_S,
    ) {
        Some(t) => format!("norm first stays below {SETTLED_NORM} at t = {t:.2} s"),
        None => format!("norm not below {SETTLED_NORM} within {SETTLE_SEARCH_HORIZON_S} s"),
    };
    b.push(
        C,
        "||x(5 s)||",
        vec![n],
        vec![SETTLED_NORM],
        n,
        SETTLED_NORM,
        n < SETTLED_NORM,
        note,
    );
    let phi0 = frames[0].state.phi;
    let phi_max = frames
        .iter()
        .map(|f| f.state.phi * phi0.signum())
        .fold(f64::NEG_INFINITY, f64::max);
    let overshoot = -phi_max;
    b.push(
        C,
        "phi overshoots past zero",
        vec![phi_max.abs()],
        vec![0.0],
        overshoot,
        0.0,
        phi_max > 0.0,
        "peak opposite-sign phi [rad]",
    );
    let late = frames
        .iter()
        .filter(|f| f.t > SETTLED_PITCH_AFTER_S)
        .map(|f| f.state.theta.abs().to_degrees())
        .fold(0.0, f64::max);
    b.push(
        C,
        "|theta| after 2 s [deg]",
        vec![late],
        vec![SETTLED_PITCH_DEG],
        late,
        SETTLED_PITCH_DEG,
        late < SETTLED_PITCH_DEG,
        "",
    );
}

/// Horizon searched by [`settle_time`] in the battery's diagnostics.
pub const SETTLE_SEARCH_HORIZON_S: f64 = 120.0;

/// Earliest control instant after which `‖x‖` stays below `threshold` up
/// to `horizon`, running `cfg` for that long.
pub fn settle_time(
    cfg: &SimConfig,
    params: &RobotParams,
    threshold: f64,
    horizon: f64,
) -> Option<f64> {
    let long = SimConfig {
        duration: horizon,
        ..cfg.clone()
    };
    let frames = run_experiment(&long, params).ok()?;
    let last_above = frames.iter().rposition(|f| f.state.norm() >= threshold);
    match last_above {
        None => Some(0.0),
        Some(i) if i + 1 < frames.len() => Some(frames[i + 1].t),
        Some(_) => None,
    }
}

/// Sample states for the deterministic property checks.
fn sample_states() -> Vec<PlantState> {
    vec![
        PlantState::new(0.0, 0.0, 0.3, 0.0),
        PlantState::new(0.5, -2.0, -0.8, 1.0),
        PlantState::new(-1.0, 4.0, 1.0, -0.5),
        PlantState::new(2.0, 0.5, -0.2, 3.0),
    ]
}

fn property_checks(
    b: &mut Battery,
    params: &RobotParams,
    designs: &(Option<LqrDesign>, Option<LqrDesign>),
) {
    const C: &str = "property_suites";
    let mut worst = 0.0f64;
    for s0 in sample_states() {
        worst = worst.max(energy_drift(&s0, params, 1e-3, 2.0));
    }
    b.push(
        C,
        "energy drift, T = 0, 2 s",
        vec![worst],
        vec![0.0],
        worst,
        ENERGY_REL_TOL,
        worst <= ENERGY_REL_TOL,
        "relative",
    );

    match linear_agreement(params, &PlantState::new(1e-3, -2e-3, 1e-3, 1e-3), 1.0) {
        Ok(d) => b.push(
            C,
            "nonlinear vs linear, 1 s",
            vec![d],
            vec![0.0],
            d,
            LINEAR_AGREEMENT_TOL,
            d < LINEAR_AGREEMENT_TOL,
            "max state deviation",
        ),
        Err(e) => b.failed(C, "nonlinear vs linear, 1 s", e),
    }

    match jacobian_deviation(params) {
        Ok(d) => b.push(
            C,
            "finite-difference Jacobian vs (A, B)",
            vec![d],
            vec![0.0],
            d,
            JACOBIAN_REL_TOL,
            d <= JACOBIAN_REL_TOL,
            "relative",
        ),
        Err(e) => b.failed(C, "finite-difference Jacobian vs (A, B)", e),
    }

    for (name, d) in [
        ("CARE residual, 3-state", &designs.0),
        ("CARE residual, 4-state", &designs.1),
    ] {
        match d {
            Some(d) => {
                let rel = d.residual / d.p.frobenius_norm().max(1.0);
                b.push(
                    C,
                    name,
                    vec![rel],
                    vec![0.0],
                    rel,
                    CARE_REL_TOL,
                    rel <= CARE_REL_TOL,
                    "relative",
                );
            }
            None => b.failed(C, name, "no design"),
        }
    }

    let noisy = SimConfig {
        imu_noise: ImuNoise {
            accel_sigma: 0.05,
            gyro_sigma: 0.01,
        },
        duration: 2.0,
        ..fixtures::recovery_config()
    };
    match (
        run_experiment(&noisy, params),
        run_experiment(&noisy, params),
    ) {
        (Ok(a), Ok(c)) => {
            let same = frames_to_csv(&a) == frames_to_csv(&c);
            b.flag(C, "determinism (bit-identical logs)", same, "");
        }
        (Err(e), _) | (_, Err(e)) => b.failed(C, "determinism (bit-identical logs)", e),
    }

    match safety_gating(params) {
        Ok((ok, disabled)) => b.flag(
            C,
            "safety gating (disabled => u = T = 0)",
            ok && disabled > 0,
            format!("{disabled} disabled frames"),
        ),
        Err(e) => b.failed(C, "safety gating (disabled => u = T = 0)", e),
    }

    let d = steady_acceleration_slip(params, 0.1, 1.0);
    b.push(
        C,
        "slip identity on no-slip trajectory",
        vec![d],
        vec![0.0],
        d,
        SLIP_IDENTITY_TOL,
        d < SLIP_IDENTITY_TOL,
        "max |delta p_ddot| [m/s^2]",
    );
}

/// Largest `|E(t) − E(0)|` over a torque-free run, relative to
/// `max(|E(0)|, m·g·l)`.
pub fn energy_drift(s0: &PlantState, params: &RobotParams, dt: f64, horizon: f64) -> f64 {
    let e0 = mechanical_energy(s0, params);
    let scale = e0.abs().max(params.m * params.g * params.l);
    let mut s = *s0;
    let mut worst = 0.0f64;
    for _ in 0..(horizon / dt).round() as usize {
        s = step_torque(&s, 0.0, dt, params);
        worst = worst.max((mechanical_energy(&s, params) - e0).abs() / scale);
    }
    worst
}

/// Maximum per-state gap between the nonlinear simulator under the 4-state
/// design and the exact zero-order-hold solution of the linear model.
pub fn linear_agreement(
    params: &RobotParams,
    x0: &PlantState,
    horizon: f64,
) -> Result<f64, String> {
    let k = fixtures::reference_values().lqr4_gains();
    let cfg = SimConfig {
        initial: *x0,
        duration: horizon,
        controller: ControllerConfig::lqr4(k.clone()),
        ..SimConfig::default()
    };
    let frames = run_experiment(&cfg, params).map_err(|e| e.to_string())?;
    let sys = linearize(params).map_err(|e| e.to_string())?;
    let (phi, gam) = zoh(&sys.a, &sys.b, cfg.dt_control).map_err(|e| e.to_string())?;
    let mut x = x0.to_array().to_vec();
    let mut worst = 0.0f64;
    for f in &frames {
        let s = f.state.to_array();
        for i in 0..4 {
            worst = worst.max((s[i] - x[i]).abs());
        }
        let u = k.control(&x);
        let next = phi.mul_vec(&x);
        x = next
            .iter()
            .zip(gam.col_vec(0))
            .map(|(a, g)| a + g * u)
            .collect();
    }
    Ok(worst)
}

/// `(e^{A·dt}, ∫₀^dt e^{A·s} ds·B)` from the augmented exponential.
pub fn zoh(
    a: &Matrix,
    b: &Matrix,
    dt: f64,
) -> Result<(Matrix, Matrix), crate::numerics::NumericsError> {
    let n = a.rows();
    let m = b.cols();
    let mut aug = Matrix::zeros(n + m, n + m);
    aug.set_block(0, 0, &a.scale(dt));
    aug.set_block(0, n, &b.scale(dt));
    let e = aug.expm()?;
    Ok((e.block(0, 0, n, n), e.block(0, n, n, m)))
}

/// Largest entrywise deviation between the central-difference Jacobian of
/// the actuated dynamics at the origin and `(A, B)`, relative to
/// `max(1, |entry|)`.
pub fn jacobian_deviation(params: &RobotParams) -> Result<f64, String> {
    let sys = linearize(params).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let f = |x: [f64; 4], u: f64| actuated_derivative(&PlantState::from_array(x), u, params).0;
    let mut worst = 0.0f64;
    for j in 0..5 {
        let mut xp = [0.0; 4];
        let mut xm = [0.0; 4];
        let (mut up, mut um) = (0.0, 0.0);
        if j < 4 {
            xp[j] = h;
            xm[j] = -h;
        } else {
            up = h;
            um = -h;
        }
        let (fp, fm) = (f(xp, up), f(xm, um));
        for i in 0..4 {
            let d = (fp[i] - fm[i]) / (2.0 * h);
            let want = if j < 4 { sys.a[(i, j)] } else { sys.b[(i, 0)] };
            worst = worst.max((d - want).abs() / want.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn safety_gating(params: &RobotParams) -> Result<(bool, usize), String> {
    let mut disabled = 0;
    let mut ok = true;
    let runs = [
        SimConfig {
            initial: PlantState::new(0.0, 0.0, 50f64.to_radians(), 0.0),
            duration: 1.0,
            ..SimConfig::default()
        },
        SimConfig {
            initial: PlantState::new(0.0, 0.0, 0.0, 0.0),
            controller: ControllerConfig::velocity_ref(300.0),
            duration: 1.0,
            ..SimConfig::default()
        },
    ];
    for cfg in &runs {
        for f in run_experiment(cfg, params).map_err(|e| e.to_string())? {
            if !f.safety.motors_enabled {
                disabled += 1;
                ok &= f.u == 0.0 && f.torque == 0.0;
            }
        }
    }
    Ok((ok, disabled))
}

/// Holds the body at a constant lean by the torque that produces the
/// matching uniform acceleration `p̈ = g·l·sinθ/(r + l·cosθ)`, and returns
/// the largest slip offset seen by the emulated IMU and wheel encoder.
pub fn steady_acceleration_slip(params: &RobotParams, theta: f64, horizon: f64) -> f64 {
    let (m, r, l, g) = (params.m, params.r, params.l, params.g);
    let p_ddot = g * l * theta.sin() / (r + l * theta.cos());
    let torque = r * m * p_ddot;
    let dt = 1e-3;
    let mut s = PlantState::new(0.0, 0.0, theta, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = 0.0f64;
    for _ in 0..(horizon / dt).round() as usize {
        let d = crate::model::torque_derivative(&s, torque, params);
        let pdd = r * (d[1] + d[3]);
        let imu = imu_emulate(&s, pdd, g, &ImuNoise::default(), &mut rng);
        worst = worst.max(slip_offset(imu.a_x, imu.a_z, s.theta, d[1], r).abs());
        s = step_torque(&s, torque, dt, params);
    }
    worst
}

/// Whether the closed loop of `g` under proportional gain `k` has every
/// pole in the open left half-plane.
pub fn closure_is_stable(g: &RationalTF, k: f64) -> bool {
    closure_poles(g, k)
        .map(|p| max_real_part(&p) < 0.0)
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_deviation() {
        assert_eq!(max_rel_dev(&[1.1, 0.0], &[1.0, 0.0]), 0.10000000000000009);
        assert!(max_rel_dev(&[1.0], &[1.0, 2.0]).is_infinite());
    }

    #[test]
    fn zoh_of_integrator() {
        let (phi, gam) = zoh(&Matrix::zeros(1, 1), &Matrix::identity(1), 0.5).unwrap();
        assert_eq!(phi[(0, 0)], 1.0);
        assert!((gam[(0, 0)] - 0.5).abs() < 1e-15);
    }
}
