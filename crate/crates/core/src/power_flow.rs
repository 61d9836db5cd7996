//! Newton-Raphson power flow in polar form, plus the complex injection and
//! branch-flow evaluations (and their voltage partials) shared with the
//! estimators.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::network::{AdmittanceSet, BusKind, NetworkCase};

/// Converged bus voltages of a power-flow run.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub v: Vec<Complex64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute P/Q mismatch at the returned voltages.
    pub max_mismatch: f64,
}

/// Newton iteration controls.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-8, max_iter: 20 }
    }
}

/// Complex net injection at every bus: `s_i = v_i * conj((Y v)_i)`.
pub fn complex_injections(y_bus: &DMatrix<Complex64>, v: &[Complex64]) -> Vec<Complex64> {
    let n = v.len();
    let mut inj = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        let mut yv = Complex64::new(0.0, 0.0);
        for j in 0..n {
            yv += y_bus[(i, j)] * v[j];
        }
        inj[i] = v[i] * yv.conj();
    }
    inj
}

/// Complex power entering each branch at its two ends.
#[derive(Debug, Clone)]
pub struct LineFlows {
    pub from: Vec<Complex64>,
    pub to: Vec<Complex64>,
}

/// Branch-end power flows: `sf_l = v_from(l) * conj((y_from v)_l)` and the
/// analogous to-end expression. Out-of-service branches report zero.
pub fn line_flows(case: &NetworkCase, adm: &AdmittanceSet, v: &[Complex64]) -> LineFlows {
    let l = case.l();
    let n = case.n();
    let mut from = vec![Complex64::new(0.0, 0.0); l];
    let mut to = vec![Complex64::new(0.0, 0.0); l];
    for (idx, br) in case.branches.iter().enumerate() {
        let mut yfv = Complex64::new(0.0, 0.0);
        let mut ytv = Complex64::new(0.0, 0.0);
        for j in 0..n {
            yfv += adm.y_from[(idx, j)] * v[j];
            ytv += adm.y_to[(idx, j)] * v[j];
        }
        from[idx] = v[br.from] * yfv.conj();
        to[idx] = v[br.to] * ytv.conj();
    }
    LineFlows { from, to }
}

/// Partials of the complex injections with respect to bus angles and
/// magnitudes (columns indexed by bus).
pub struct InjectionPartials {
    pub d_theta: DMatrix<Complex64>,
    pub d_vmag: DMatrix<Complex64>,
}

/// Partials of the from-end and to-end branch flows with respect to bus
/// angles and magnitudes.
pub struct FlowPartials {
    pub from_theta: DMatrix<Complex64>,
    pub from_vmag: DMatrix<Complex64>,
    pub to_theta: DMatrix<Complex64>,
    pub to_vmag: DMatrix<Complex64>,
}

/// How `v_k` moves with the polar coordinates at bus `k`.
fn dv_dtheta(vk: Complex64) -> Complex64 {
    Complex64::new(0.0, 1.0) * vk
}
fn dv_dvmag(vk: Complex64) -> Complex64 {
    let m = vk.norm();
    if m == 0.0 {
        Complex64::new(1.0, 0.0)
    } else {
        vk / m
    }
}

/// Exact complex partials of `s = diag(v) conj(Y v)` in polar coordinates.
pub fn injection_partials(y_bus: &DMatrix<Complex64>, v: &[Complex64]) -> InjectionPartials {
    let n = v.len();
    let mut yv = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        for j in 0..n {
            yv[i] += y_bus[(i, j)] * v[j];
        }
    }
    let mut d_theta = DMatrix::zeros(n, n);
    let mut d_vmag = DMatrix::zeros(n, n);
    for k in 0..n {
        for (mat, dv) in [(&mut d_theta, dv_dtheta(v[k])), (&mut d_vmag, dv_dvmag(v[k]))] {
            for i in 0..n {
                let mut ds = v[i] * (y_bus[(i, k)] * dv).conj();
                if i == k {
                    ds += dv * yv[i].conj();
                }
                mat[(i, k)] = ds;
            }
        }
    }
    InjectionPartials { d_theta, d_vmag }
}

/// Exact complex partials of the branch-end flows in polar coordinates.
pub fn flow_partials(case: &NetworkCase, adm: &AdmittanceSet, v: &[Complex64]) -> FlowPartials {
    let n = case.n();
    let l = case.l();
    let mut yfv = vec![Complex64::new(0.0, 0.0); l];
    let mut ytv = vec![Complex64::new(0.0, 0.0); l];
    for idx in 0..l {
        for j in 0..n {
            yfv[idx] += adm.y_from[(idx, j)] * v[j];
            ytv[idx] += adm.y_to[(idx, j)] * v[j];
        }
    }
    let mut out = FlowPartials {
        from_theta: DMatrix::zeros(l, n),
        from_vmag: DMatrix::zeros(l, n),
        to_theta: DMatrix::zeros(l, n),
        to_vmag: DMatrix::zeros(l, n),
    };
    for k in 0..n {
        let dvs = [dv_dtheta(v[k]), dv_dvmag(v[k])];
        for (which, dv) in dvs.into_iter().enumerate() {
            for (idx, br) in case.branches.iter().enumerate() {
                let mut dsf = v[br.from] * (adm.y_from[(idx, k)] * dv).conj();
                if br.from == k {
                    dsf += dv * yfv[idx].conj();
                }
                let mut dst = v[br.to] * (adm.y_to[(idx, k)] * dv).conj();
                if br.to == k {
                    dst += dv * ytv[idx].conj();
                }
                if which == 0 {
                    out.from_theta[(idx, k)] = dsf;
                    out.to_theta[(idx, k)] = dst;
                } else {
                    out.from_vmag[(idx, k)] = dsf;
                    out.to_vmag[(idx, k)] = dst;
                }
            }
        }
    }
    out
}

/// Flat-start voltages: slack at its full setpoint, PV buses at setpoint
/// magnitude and zero angle, PQ buses at 1 p.u. and zero angle.
pub fn flat_voltages(case: &NetworkCase) -> Vec<Complex64> {
    case.buses
        .iter()
        .enumerate()
        .map(|(i, b)| match b.kind {
            BusKind::Slack => Complex64::from_polar(b.v_mag_setpoint, b.v_ang_setpoint),
            BusKind::Pv => Complex64::from_polar(b.v_mag_setpoint, 0.0),
            BusKind::Pq => {
                let _ = i;
                Complex64::new(1.0, 0.0)
            }
        })
        .collect()
}

/// Rotate a voltage profile so the slack-bus angle is exactly zero. All
/// measured quantities except angles are invariant under this rotation; the
/// estimators report angles in this frame.
pub fn rotate_to_slack_reference(case: &NetworkCase, v: &[Complex64]) -> Vec<Complex64> {
    let phase = v[case.slack_index].arg();
    let rot = Complex64::from_polar(1.0, -phase);
    v.iter().map(|&x| x * rot).collect()
}

/// Newton-Raphson power flow from a flat start. PV buses hold their voltage
/// magnitude (reactive limits are not enforced); the slack holds magnitude
/// and angle.
pub fn solve_newton(
    case: &NetworkCase,
    adm: &AdmittanceSet,
    opts: NewtonOptions,
) -> Result<PowerFlowSolution> {
    let n = case.n();
    let p_sched = case.scheduled_p();
    let q_sched = case.scheduled_q();

    // Unknown layout: angles at non-slack buses, then magnitudes at PQ buses.
    let mut ang_col = vec![None; n];
    let mut mag_col = vec![None; n];
    let mut cols = Vec::new();
    for i in 0..n {
        if i != case.slack_index {
            ang_col[i] = Some(cols.len());
            cols.push((i, true));
        }
    }
    for (i, b) in case.buses.iter().enumerate() {
        if b.kind == BusKind::Pq {
            mag_col[i] = Some(cols.len());
            cols.push((i, false));
        }
    }
    let p_rows: Vec<usize> = (0..n).filter(|&i| i != case.slack_index).collect();
    let q_rows: Vec<usize> = (0..n)
        .filter(|&i| case.buses[i].kind == BusKind::Pq)
        .collect();
    let n_rows = p_rows.len() + q_rows.len();

    let mut theta: Vec<f64> = case
        .buses
        .iter()
        .map(|b| if b.kind == BusKind::Slack { b.v_ang_setpoint } else { 0.0 })
        .collect();
    let mut vmag: Vec<f64> = case
        .buses
        .iter()
        .map(|b| match b.kind {
            BusKind::Pq => 1.0,
            _ => b.v_mag_setpoint,
        })
        .collect();

    let voltages = |theta: &[f64], vmag: &[f64]| -> Vec<Complex64> {
        (0..n).map(|i| Complex64::from_polar(vmag[i], theta[i])).collect()
    };

    let mut iterations = 0;
    loop {
        let v = voltages(&theta, &vmag);
        let s = complex_injections(&adm.y_bus, &v);
        let mut mismatch = DVector::zeros(n_rows);
        for (r, &i) in p_rows.iter().enumerate() {
            mismatch[r] = p_sched[i] - s[i].re;
        }
        for (r, &i) in q_rows.iter().enumerate() {
            mismatch[p_rows.len() + r] = q_sched[i] - s[i].im;
        }
        let max_mismatch = mismatch.amax();
        if !max_mismatch.is_finite() {
            return Err(Error::PowerFlowDiverged { iterations, max_mismatch: f64::INFINITY });
        }
        if max_mismatch <= opts.tol {
            return Ok(PowerFlowSolution { v, converged: true, iterations, max_mismatch });
        }
        if iterations >= opts.max_iter {
            return Err(Error::PowerFlowDiverged { iterations, max_mismatch });
        }

        let parts = injection_partials(&adm.y_bus, &v);
        let mut jac = DMatrix::zeros(n_rows, cols.len());
        for (c, &(k, is_theta)) in cols.iter().enumerate() {
            let col = if is_theta { &parts.d_theta } else { &parts.d_vmag };
            for (r, &i) in p_rows.iter().enumerate() {
                jac[(r, c)] = col[(i, k)].re;
            }
            for (r, &i) in q_rows.iter().enumerate() {
                jac[(p_rows.len() + r, c)] = col[(i, k)].im;
            }
        }

        let step = jac
            .lu()
            .solve(&mismatch)
            .ok_or_else(|| Error::SingularSystem("power-flow Jacobian is singular".into()))?;
        for (c, &(k, is_theta)) in cols.iter().enumerate() {
            if is_theta {
                theta[k] += step[c];
            } else {
                vmag[k] += step[c];
            }
        }
        iterations += 1;
    }
}
