//! Weighted least-squares state estimation with a damped Gauss-Newton
//! iteration and the exact polar-coordinate measurement Jacobian.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{FlowEnd, Location, MeasurementSet, MeterKind};
use crate::network::{AdmittanceSet, NetworkCase};
use crate::power_flow::{complex_injections, flow_partials, injection_partials, line_flows};

/// Polar state: one angle and one magnitude per bus. The slack angle is the
/// reference and stays at zero in estimator use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateVector {
    pub angles: Vec<f64>,
    pub magnitudes: Vec<f64>,
}

impl StateVector {
    /// Flat state: all magnitudes 1, all angles 0.
    pub fn flat(n: usize) -> Self {
        StateVector { angles: vec![0.0; n], magnitudes: vec![1.0; n] }
    }

    /// Polar decomposition of a voltage profile.
    pub fn from_voltages(v: &[Complex64]) -> Self {
        StateVector {
            angles: v.iter().map(|x| x.arg()).collect(),
            magnitudes: v.iter().map(|x| x.norm()).collect(),
        }
    }

    pub fn voltages(&self) -> Vec<Complex64> {
        self.angles
            .iter()
            .zip(&self.magnitudes)
            .map(|(&a, &m)| Complex64::from_polar(m, a))
            .collect()
    }

    pub fn n(&self) -> usize {
        self.angles.len()
    }

    /// Largest per-bus complex-voltage distance to another state.
    pub fn max_distance(&self, other: &StateVector) -> f64 {
        self.voltages()
            .iter()
            .zip(other.voltages())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Free-variable layout shared by the Jacobian and the solver: angles of all
/// non-slack buses in bus order, then every bus magnitude.
pub fn variable_columns(n: usize, slack: usize) -> Vec<(usize, bool)> {
    let mut cols = Vec::with_capacity(2 * n - 1);
    for i in 0..n {
        if i != slack {
            cols.push((i, true));
        }
    }
    for i in 0..n {
        cols.push((i, false));
    }
    cols
}

/// Predicted meter readings at `state`, in set order.
pub fn evaluate_h(
    state: &StateVector,
    set: &MeasurementSet,
    case: &NetworkCase,
    adm: &AdmittanceSet,
) -> DVector<f64> {
    let v = state.voltages();
    let inj = complex_injections(&adm.y_bus, &v);
    let flows = line_flows(case, adm, &v);
    let mut h = DVector::zeros(set.m());
    for (r, m) in set.measurements.iter().enumerate() {
        h[r] = match (m.kind, m.location) {
            (MeterKind::PInjection, Location::Bus { bus }) => inj[bus].re,
            (MeterKind::QInjection, Location::Bus { bus }) => inj[bus].im,
            (MeterKind::PFlow, Location::Branch { branch, end }) => match end {
                FlowEnd::From => flows.from[branch].re,
                FlowEnd::To => flows.to[branch].re,
            },
            (MeterKind::QFlow, Location::Branch { branch, end }) => match end {
                FlowEnd::From => flows.from[branch].im,
                FlowEnd::To => flows.to[branch].im,
            },
            (MeterKind::VMagnitude, Location::Bus { bus }) => state.magnitudes[bus],
            (MeterKind::VAngle, Location::Bus { bus }) => state.angles[bus],
            _ => unreachable!("validated sets pair kinds with legal locations"),
        };
    }
    h
}

/// Exact measurement Jacobian at `state`: one row per meter, one column per
/// free variable in `variable_columns` order (`2n - 1` columns).
pub fn measurement_jacobian(
    state: &StateVector,
    set: &MeasurementSet,
    case: &NetworkCase,
    adm: &AdmittanceSet,
) -> DMatrix<f64> {
    let n = case.n();
    let v = state.voltages();
    let cols = variable_columns(n, case.slack_index);
    let ip = injection_partials(&adm.y_bus, &v);
    let has_flows = set.measurements.iter().any(|m| m.kind.is_flow());
    let fp = has_flows.then(|| flow_partials(case, adm, &v));

    let mut jac = DMatrix::zeros(set.m(), cols.len());
    for (r, m) in set.measurements.iter().enumerate() {
        for (c, &(k, is_theta)) in cols.iter().enumerate() {
            jac[(r, c)] = match (m.kind, m.location) {
                (MeterKind::PInjection, Location::Bus { bus }) => {
                    if is_theta { ip.d_theta[(bus, k)].re } else { ip.d_vmag[(bus, k)].re }
                }
                (MeterKind::QInjection, Location::Bus { bus }) => {
                    if is_theta { ip.d_theta[(bus, k)].im } else { ip.d_vmag[(bus, k)].im }
                }
                (MeterKind::PFlow | MeterKind::QFlow, Location::Branch { branch, end }) => {
                    let fp = fp.as_ref().unwrap();
                    let d = match (end, is_theta) {
                        (FlowEnd::From, true) => fp.from_theta[(branch, k)],
                        (FlowEnd::From, false) => fp.from_vmag[(branch, k)],
                        (FlowEnd::To, true) => fp.to_theta[(branch, k)],
                        (FlowEnd::To, false) => fp.to_vmag[(branch, k)],
                    };
                    if m.kind == MeterKind::PFlow { d.re } else { d.im }
                }
                (MeterKind::VMagnitude, Location::Bus { bus }) => {
                    f64::from(!is_theta && k == bus)
                }
                (MeterKind::VAngle, Location::Bus { bus }) => {
                    f64::from(is_theta && k == bus)
                }
                _ => unreachable!("validated sets pair kinds with legal locations"),
            };
        }
    }
    jac
}

/// Gauss-Newton controls.
#[derive(Debug, Clone)]
pub struct WlsOptions {
    /// Stop when the accepted step's infinity norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point; flat if absent.
    pub init: Option<StateVector>,
}

impl Default for WlsOptions {
    fn default() -> Self {
        WlsOptions { tol: 1e-10, max_iter: 50, init: None }
    }
}

/// Converged estimate and the quality numbers that justify it.
#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub state: StateVector,
    /// Weighted residual sum over noisy meters only.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the weighted-residual gradient at the final state.
    pub gradient_norm: f64,
}

/// Damped Gauss-Newton weighted least squares.
///
/// Exact angle meters (`sigma == 0`) are honored as hard constraints: their
/// angle variables are pinned to the measured values and leave the free set,
/// so the returned state satisfies them exactly and they carry no cost.
pub fn solve_wls(
    set: &MeasurementSet,
    case: &NetworkCase,
    adm: &AdmittanceSet,
    opts: &WlsOptions,
) -> Result<EstimationResult> {
    set.validate(case)?;
    let n = case.n();
    let slack = case.slack_index;

    let mut state = opts.init.clone().unwrap_or_else(|| StateVector::flat(n));
    if state.n() != n {
        return Err(Error::Config(format!(
            "initial state has {} buses, case has {n}",
            state.n()
        )));
    }
    state.angles[slack] = 0.0;

    // Pin angles measured exactly; everything else stays free.
    let mut pinned = vec![false; n];
    for m in &set.measurements {
        if m.kind == MeterKind::VAngle && m.sigma == 0.0 {
            let bus = m.location.bus().expect("validated angle meter");
            state.angles[bus] = if bus == slack { 0.0 } else { m.value };
            pinned[bus] = true;
        }
    }

    let cols = variable_columns(n, slack);
    let free: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, &(k, is_theta))| !(is_theta && pinned[k]))
        .map(|(c, _)| c)
        .collect();
    let noisy: Vec<usize> = set
        .measurements
        .iter()
        .enumerate()
        .filter(|(_, m)| m.sigma > 0.0)
        .map(|(r, _)| r)
        .collect();
    if noisy.is_empty() {
        return Err(Error::BadMeasurement("no noisy meters to fit".into()));
    }
    let inv_sigma: Vec<f64> = noisy.iter().map(|&r| 1.0 / set.measurements[r].sigma).collect();
    let z: Vec<f64> = noisy.iter().map(|&r| set.measurements[r].value).collect();

    let objective_at = |st: &StateVector| -> f64 {
        let h = evaluate_h(st, set, case, adm);
        noisy
            .iter()
            .zip(&inv_sigma)
            .zip(&z)
            .map(|((&r, &w), &zi)| ((zi - h[r]) * w).powi(2))
            .sum()
    };

    let mut objective = objective_at(&state);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let h = evaluate_h(&state, set, case, adm);
        let jac = measurement_jacobian(&state, set, case, adm);

        // Scaled rows (sqrt-weighted) over noisy meters and free columns.
        let mut js = DMatrix::zeros(noisy.len(), free.len());
        let mut rs = DVector::zeros(noisy.len());
        for (i, (&r, &w)) in noisy.iter().zip(&inv_sigma).enumerate() {
            rs[i] = (z[i] - h[r]) * w;
            for (j, &c) in free.iter().enumerate() {
                js[(i, j)] = jac[(r, c)] * w;
            }
        }
        let gain = js.transpose() * &js;
        let grad = js.transpose() * &rs;

        let delta = solve_spd(gain, &grad)
            .ok_or_else(|| Error::SingularSystem("WLS gain matrix is singular".into()))?;
        if delta.amax() < opts.tol {
            converged = true;
            break;
        }

        // Step halving keeps the objective non-increasing.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=10 {
            let mut trial = state.clone();
            for (j, &c) in free.iter().enumerate() {
                let (k, is_theta) = cols[c];
                if is_theta {
                    trial.angles[k] += alpha * delta[j];
                } else {
                    trial.magnitudes[k] += alpha * delta[j];
                }
            }
            let trial_obj = objective_at(&trial);
            if trial_obj <= objective + 1e-12 * (1.0 + objective) {
                state = trial;
                objective = trial_obj;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break; // stuck: report the best point found
        }
        if alpha * delta.amax() < opts.tol {
            converged = true;
            break;
        }
    }

    // Final first-order diagnostics at the returned state.
    let h = evaluate_h(&state, set, case, adm);
    let jac = measurement_jacobian(&state, set, case, adm);
    let mut gradient_norm = 0.0f64;
    for &c in &free {
        let mut g = 0.0;
        for ((&r, &w), &zi) in noisy.iter().zip(&inv_sigma).zip(&z) {
            g += jac[(r, c)] * w * w * (zi - h[r]);
        }
        gradient_norm = gradient_norm.max(g.abs());
    }

    Ok(EstimationResult { state, objective, iterations, converged, gradient_norm })
}

/// Cholesky solve with a tiny escalating ridge for near-singular systems.
fn solve_spd(mut a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = a.diagonal().amax().max(1e-300);
    for boost in 0..4 {
        if let Some(chol) = a.clone().cholesky() {
            return Some(chol.solve(b));
        }
        let ridge = scale * 1e-10 * 10f64.powi(boost);
        for i in 0..a.nrows() {
            a[(i, i)] += ridge;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{add_noise, generate_true_measurements, SigmaConfig};
    use crate::network::{build_admittance, parse_json_case};
    use crate::power_flow::{rotate_to_slack_reference, solve_newton, NewtonOptions};

    fn ring4() -> NetworkCase {
        parse_json_case(
            r#"{
                "base_mva": 100.0,
                "buses": [
                    {"id": 1, "kind": "slack", "v_mag_setpoint": 1.02},
                    {"id": 2, "kind": "pq", "p_demand": 0.3, "q_demand": 0.1},
                    {"id": 3, "kind": "pq", "p_demand": 0.2, "q_demand": 0.05},
                    {"id": 4, "kind": "pq", "p_demand": 0.25, "q_demand": 0.08}
                ],
                "branches": [
                    {"from": 1, "to": 2, "r": 0.01, "x": 0.08},
                    {"from": 2, "to": 3, "r": 0.015, "x": 0.09},
                    {"from": 3, "to": 4, "r": 0.012, "x": 0.07},
                    {"from": 4, "to": 1, "r": 0.02, "x": 0.1}
                ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let case = ring4();
        let adm = build_admittance(&case).unwrap();
        let sol = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let set = generate_true_measurements(&case, &adm, &sol, &SigmaConfig::default());
        let state = StateVector {
            angles: vec![0.0, -0.03, -0.05, -0.02],
            magnitudes: vec![1.02, 0.99, 0.97, 1.0],
        };
        let jac = measurement_jacobian(&state, &set, &case, &adm);
        let cols = variable_columns(case.n(), case.slack_index);
        let h = 1e-6;
        for (c, &(k, is_theta)) in cols.iter().enumerate() {
            let mut plus = state.clone();
            let mut minus = state.clone();
            if is_theta {
                plus.angles[k] += h;
                minus.angles[k] -= h;
            } else {
                plus.magnitudes[k] += h;
                minus.magnitudes[k] -= h;
            }
            let hp = evaluate_h(&plus, &set, &case, &adm);
            let hm = evaluate_h(&minus, &set, &case, &adm);
            for r in 0..set.m() {
                let fd = (hp[r] - hm[r]) / (2.0 * h);
                let denom = 1.0 + fd.abs();
                assert!(
                    (jac[(r, c)] - fd).abs() / denom < 1e-6,
                    "row {r} col {c}: analytic {} vs fd {fd}",
                    jac[(r, c)]
                );
            }
        }
    }

    #[test]
    fn truth_start_converges_immediately_on_exact_data() {
        let case = ring4();
        let adm = build_admittance(&case).unwrap();
        let sol = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let set = generate_true_measurements(&case, &adm, &sol, &SigmaConfig::default());
        let truth = StateVector::from_voltages(set.truth.as_ref().unwrap());
        let opts = WlsOptions { init: Some(truth.clone()), ..Default::default() };
        let res = solve_wls(&set, &case, &adm, &opts).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert!(res.objective <= 1e-16, "objective {}", res.objective);
        assert!(res.state.max_distance(&truth) < 1e-10);
    }

    #[test]
    fn flat_start_recovers_exact_measurements() {
        let case = ring4();
        let adm = build_admittance(&case).unwrap();
        let sol = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let set = generate_true_measurements(&case, &adm, &sol, &SigmaConfig::default());
        let res = solve_wls(&set, &case, &adm, &WlsOptions::default()).unwrap();
        assert!(res.converged);
        assert!(res.iterations <= 10, "{} iterations", res.iterations);
        let truth = StateVector::from_voltages(set.truth.as_ref().unwrap());
        assert!(res.state.max_distance(&truth) < 1e-6);
        assert!(res.gradient_norm < 1e-6, "gradient {}", res.gradient_norm);
    }

    #[test]
    fn noisy_objective_sits_on_the_chi_squared_scale() {
        let case = ring4();
        let adm = build_admittance(&case).unwrap();
        let sol = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let set = generate_true_measurements(&case, &adm, &sol, &SigmaConfig::default());
        let m = set.m() as f64;
        let mut total = 0.0;
        let seeds = 50;
        for seed in 0..seeds {
            let noisy = add_noise(&set, seed);
            let res = solve_wls(&noisy, &case, &adm, &WlsOptions::default()).unwrap();
            assert!(res.converged);
            total += res.objective;
        }
        let mean = total / seeds as f64;
        // Expected value is m minus the free-variable count; [m/2, 2m] is a
        // loose but discriminating band for the mean over 50 draws.
        assert!(mean > 0.5 * m && mean < 2.0 * m, "mean objective {mean} vs m {m}");
    }

    #[test]
    fn pinned_angle_meters_hold_exactly() {
        let case = ring4();
        let adm = build_admittance(&case).unwrap();
        let sol = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let set = generate_true_measurements(&case, &adm, &sol, &SigmaConfig::default());
        let truth_v = rotate_to_slack_reference(&case, &sol.v);
        let with_pmu = crate::measurement::add_pmu_angles(&set, 0.5, 8).unwrap();
        let noisy = add_noise(&with_pmu, 3);
        let res = solve_wls(&noisy, &case, &adm, &WlsOptions::default()).unwrap();
        assert!(res.converged);
        let mut saw_angle = false;
        for m in &noisy.measurements {
            if m.kind == MeterKind::VAngle {
                saw_angle = true;
                let bus = m.location.bus().unwrap();
                assert_eq!(res.state.angles[bus], m.value);
                assert_eq!(m.value, truth_v[bus].arg());
            }
        }
        assert!(saw_angle);
    }
}
