//! Reference values computed outside this crate. The LQR gains, the
//! closed-loop transfer function, the critical gain and the step-response
//! extremum were frozen from an independent scipy/numpy run
//! (`solve_continuous_are`, `ss2tf`, `lsim`); the remaining oracles are
//! implemented here from first principles.

use edubal::analysis::{
    closed_loop_matrix, closed_loop_siso, critical_gain, is_stable_closure, step_response,
};
use edubal::fixtures::{lqr3_weights, lqr4_weights, position_tf, reference_values};
use edubal::model::{linearize, mass_matrix_determinant, ss_to_tf, RationalTF, RobotParams};
use edubal::numerics::{eigenvalues, Complex64, Matrix, Polynomial};
use edubal::synthesis::{lqr3, lqr4};

const SCIPY_K3: [f64; 3] = [-2.0, -88.727428498895, -14.721806643604];
const SCIPY_K4: [f64; 4] = [-0.1, -2.043125007589, -90.199655328254, -14.966084685002];
const SCIPY_SISO_NUM: [f64; 3] = [-27.95573813414, 0.0, 1297.283780019];
const SCIPY_SISO_DEN: [f64; 5] = [1.0, 22.132146518648, 157.63974366302, 365.432050709492, 0.0];
const SCIPY_K_CRIT: f64 = 1.3251532512460709;
const SCIPY_STEP_MIN: f64 = -0.05718365061868751;
const SCIPY_STEP_FINAL: f64 = 0.99445;

fn rel(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a.abs()
    } else {
        ((a - b) / b).abs()
    }
}

/// Number of right-half-plane roots from the sign changes in the first
/// column of the Routh array. Leading zeros are replaced by a small epsilon.
fn routh_rhp_count(desc: &[f64]) -> usize {
    let n = desc.len();
    let width = n.div_ceil(2);
    let mut rows: Vec<Vec<f64>> = vec![vec![0.0; width], vec![0.0; width]];
    for (i, c) in desc.iter().enumerate() {
        rows[i % 2][i / 2] = *c;
    }
    for r in 2..n {
        let (a, b) = (&rows[r - 2], &rows[r - 1]);
        let mut pivot = b[0];
        if pivot == 0.0 {
            pivot = 1e-12;
        }
        let mut next = vec![0.0; width];
        for j in 0..width - 1 {
            next[j] = (pivot * a[j + 1] - a[0] * b[j + 1]) / pivot;
        }
        rows.push(next);
    }
    let first: Vec<f64> = rows
        .iter()
        .take(n)
        .map(|r| if r[0] == 0.0 { 1e-12 } else { r[0] })
        .collect();
    first
        .windows(2)
        .filter(|w| w[0].signum() != w[1].signum())
        .count()
}

fn routh_stable(g: &RationalTF, k: f64) -> bool {
    // a closed-loop root at the origin is marginal, not stable
    let mut c = g.closure_polynomial(k).coeffs().to_vec();
    if *c.last().unwrap() == 0.0 {
        return false;
    }
    let lead = c[0].abs();
    c.iter_mut().for_each(|x| *x /= lead);
    routh_rhp_count(&c) == 0
}

/// `C(sI − A)⁻¹B` by complex Gaussian elimination.
#[allow(clippy::needless_range_loop)]
fn resolvent(a: &Matrix, b: &[f64], c: &[f64], s: Complex64) -> Complex64 {
    let n = a.rows();
    let mut m: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            let mut row: Vec<Complex64> = (0..n).map(|j| Complex64::new(-a[(i, j)], 0.0)).collect();
            row[i] += s;
            row.push(Complex64::new(b[i], 0.0));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].norm().total_cmp(&m[y][col].norm()))
            .unwrap();
        m.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col] / m[col][col];
                for k in col..=n {
                    let v = m[col][k];
                    m[r][k] -= f * v;
                }
            }
        }
    }
    (0..n).map(|i| c[i] * (m[i][n] / m[i][i])).sum()
}

#[test]
fn routh_oracle_agrees_on_textbook_cases() {
    // (s+1)(s+2)(s+3)
    assert_eq!(routh_rhp_count(&[1.0, 6.0, 11.0, 6.0]), 0);
    // (s−1)(s+2)(s+3)
    assert_eq!(routh_rhp_count(&[1.0, 4.0, 1.0, -6.0]), 1);
    // s⁴ + s³ + s² + 2s + 1 has two right-half-plane roots
    assert_eq!(routh_rhp_count(&[1.0, 1.0, 1.0, 2.0, 1.0]), 2);
}

#[test]
fn linearized_entries_match_published_values() {
    let p = RobotParams::default();
    assert!(rel(p.eta(), 0.5398566585) < 1e-9);
    let sys = linearize(&p).unwrap();
    assert!(rel(sys.a[(3, 2)], 36.32394584052353) < 1e-12);
    assert!(rel(sys.a[(3, 1)], 2.1855063606033025) < 1e-12);
    assert!(rel(sys.b[(3, 0)], -2.1855063606033025) < 1e-12);
    assert!(rel(sys.b[(1, 0)], 10.060362173038229) < 1e-12);
    assert!(rel(sys.a[(1, 1)], -10.060362173038229) < 1e-12);
    assert_eq!(sys.a[(0, 1)], 1.0);
    assert_eq!(sys.a[(2, 3)], 1.0);

    let mut ev: Vec<f64> = eigenvalues(&sys.a).unwrap().iter().map(|z| z.re).collect();
    ev.sort_by(f64::total_cmp);
    let expected = [-10.060362173038, -6.026935028729, 0.0, 6.026935028729];
    for (a, b) in ev.iter().zip(expected) {
        assert!((a - b).abs() < 1e-9, "{ev:?}");
    }
}

#[test]
fn mass_matrix_is_positive_definite_on_a_grid() {
    for m in [0.1, 0.933, 5.0] {
        for l in [0.01, 0.0857, 0.5] {
            for r in [0.01, 0.04, 0.2] {
                let p = RobotParams {
                    m,
                    l,
                    r,
                    ..RobotParams::default()
                };
                for i in 0..=360 {
                    let theta = (i as f64).to_radians();
                    let det = mass_matrix_determinant(theta, &p);
                    assert!(det >= r * l * l * m * m * (1.0 - 1e-12) && det > 0.0);
                }
            }
        }
    }
}

#[test]
fn lqr_gains_match_scipy() {
    let p = RobotParams::default();
    let k3 = lqr3(&p, &lqr3_weights()).unwrap().gains.k;
    let k4 = lqr4(&p, &lqr4_weights()).unwrap().gains.k;
    for (a, b) in k3.iter().zip(SCIPY_K3) {
        assert!(rel(*a, b) < 1e-9, "{k3:?}");
    }
    for (a, b) in k4.iter().zip(SCIPY_K4) {
        assert!(rel(*a, b) < 1e-9, "{k4:?}");
    }
}

#[test]
fn lqr_gains_match_published_values() {
    let published = reference_values();
    let p = RobotParams::default();
    let k3 = lqr3(&p, &lqr3_weights()).unwrap().gains.k;
    let k4 = lqr4(&p, &lqr4_weights()).unwrap().gains.k;
    for (a, b) in k3.iter().zip(&published.lqr3_gains().k) {
        assert!(rel(*a, *b) < 1e-2, "{k3:?}");
    }
    for (a, b) in k4.iter().zip(&published.lqr4_gains().k) {
        assert!(rel(*a, *b) < 1e-2, "{k4:?}");
    }
}

#[test]
fn closed_loop_transfer_function_matches_scipy() {
    let sys = linearize(&RobotParams::default()).unwrap();
    let k3 = reference_values().lqr3_gains();
    let tf = closed_loop_siso(&sys, &k3).unwrap();
    let lead = tf.den().leading();
    let num = tf.num().scale(1.0 / lead);
    let den = tf.den().monic();
    assert_eq!(den.degree(), 4);
    for (p, want) in SCIPY_SISO_DEN.iter().enumerate() {
        assert!(
            (den.coeff_of_power(4 - p) - want).abs() <= 1e-9 * want.abs().max(1.0),
            "{den:?}"
        );
    }
    for (p, want) in SCIPY_SISO_NUM.iter().enumerate() {
        assert!(
            (num.coeff_of_power(2 - p) - want).abs() <= 1e-9 * want.abs().max(1.0),
            "{num:?}"
        );
    }

    // the published rounding agrees to the printed digits
    let published = position_tf();
    for p in 0..=4 {
        let (a, b) = (den.coeff_of_power(p), published.den().coeff_of_power(p));
        assert!(
            (a - b).abs() <= 2e-3 * b.abs().max(1.0),
            "s^{p}: {a} vs {b}"
        );
    }
}

#[test]
fn transfer_function_agrees_with_direct_resolvent() {
    let sys = linearize(&RobotParams::default()).unwrap();
    let k3 = reference_values().lqr3_gains();
    let a_cl = closed_loop_matrix(&sys, &k3).unwrap();
    let b: Vec<f64> = sys.b.col_vec(0).iter().map(|x| x * k3.k[1]).collect();
    let c = sys.c.row_slice(0).to_vec();
    let tf = closed_loop_siso(&sys, &k3).unwrap();
    let open = ss_to_tf(&sys, 0, 0).unwrap();
    for s in [
        Complex64::new(0.5, 0.0),
        Complex64::new(-1.0, 3.0),
        Complex64::new(2.0, -7.0),
        Complex64::new(0.0, 20.0),
    ] {
        let direct = resolvent(&a_cl, &b, &c, s);
        assert!(
            (tf.eval(s) - direct).norm() <= 1e-9 * direct.norm().max(1.0),
            "at {s}"
        );
        let direct_open = resolvent(&sys.a, &sys.b.col_vec(0), &c, s);
        assert!(
            (open.eval(s) - direct_open).norm() <= 1e-9 * direct_open.norm().max(1.0),
            "open loop at {s}"
        );
    }
}

#[test]
fn characteristic_polynomial_matches_expansion_of_eigenvalues() {
    let sys = linearize(&RobotParams::default()).unwrap();
    let a_cl = closed_loop_matrix(&sys, &reference_values().lqr3_gains()).unwrap();
    let from_eigs = Polynomial::from_roots(&eigenvalues(&a_cl).unwrap());
    for (p, want) in SCIPY_SISO_DEN.iter().enumerate() {
        assert!((from_eigs.coeff_of_power(4 - p) - want).abs() <= 1e-8 * want.abs().max(1.0));
    }
}

#[test]
fn critical_gain_matches_scipy_and_routh() {
    let g = position_tf();
    let kc = critical_gain(&g).unwrap();
    assert!(rel(kc, SCIPY_K_CRIT) < 1e-6, "{kc}");
    assert!(routh_stable(&g, kc * (1.0 - 1e-6)));
    assert!(!routh_stable(&g, kc * (1.0 + 1e-6)));
    assert!(routh_stable(&g, reference_values().kp_pos_stable));
}

#[test]
fn stability_verdicts_match_routh_over_a_gain_sweep() {
    let g = position_tf();
    for i in 1..=300 {
        let k = i as f64 * 0.01;
        if rel(k, SCIPY_K_CRIT) < 1e-3 {
            continue;
        }
        assert_eq!(
            is_stable_closure(&g, k).unwrap(),
            routh_stable(&g, k),
            "k = {k}"
        );
    }
}

#[test]
fn step_response_matches_scipy() {
    let g = position_tf()
        .feedback(reference_values().kp_pos_stable)
        .unwrap();
    let step = step_response(&g, 5.0, 1e-3).unwrap();
    assert!((step.min() - SCIPY_STEP_MIN).abs() < 1e-4, "{}", step.min());
    assert!(
        (step.final_value() - SCIPY_STEP_FINAL).abs() < 1e-4,
        "{}",
        step.final_value()
    );
}
