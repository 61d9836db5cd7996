//! Eigenstructure diagnostics for solved relaxation matrices.
//!
//! The conic program returns a positive semidefinite matrix `W` that stands
//! in for the outer product `x xᵀ` of the stacked real/imaginary voltage
//! vector. Whether that stand-in is honest is a spectral question: a genuine
//! outer product has exactly one nonzero eigenvalue, and the relaxation is
//! tight precisely when `W` computes back down to that shape. This module
//! measures how close a given `W` comes ([`spectrum`]) and extracts the best
//! rank-one state when it is close enough to be worth extracting
//! ([`recover_rank1`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative eigenvalue threshold for the numerical rank count.
///
/// An eigenvalue counts toward the rank when it exceeds this multiple of the
/// largest one. `1e-5` sits well above the noise floor the interior-point
/// solver leaves on trailing eigenvalues of a tight instance (around `1e-8`
/// of the leading one) and well below the trailing mass of a genuinely
/// higher-rank solution, so the count is stable on both sides.
pub const DEFAULT_RANK_TOL: f64 = 1e-5;

/// Relative asymmetry beyond which an input matrix is rejected rather than
/// silently symmetrized.
const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalue report for a symmetric matrix, ordered largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    /// All eigenvalues in descending order, exactly as computed. Small
    /// negative values (solver round-off) are preserved here; the derived
    /// statistics below treat them as zero.
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues exceeding `rank_tol` times the largest one.
    /// Zero when the largest eigenvalue is not positive.
    pub numerical_rank: usize,
    /// Sum of all eigenvalues after the first, divided by the first, with
    /// negatives clamped to zero. Zero for an exact rank-one matrix; grows
    /// with the mass the relaxation leaves outside its leading direction.
    pub trailing_ratio: f64,
    /// The threshold the rank count was taken at.
    pub rank_tol: f64,
}

/// How a recovered state was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoverySource {
    /// Leading eigenpair of the relaxation matrix, scaled by `√λ₁`.
    Rank1Recovery,
}

/// A complex voltage profile extracted from a relaxation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredState {
    /// Per-bus complex voltages, phase-fixed so the slack entry is real and
    /// nonnegative.
    pub v: Vec<Complex64>,
    pub source: RecoverySource,
    /// `‖W − x xᵀ‖_F / ‖W‖_F` for the extracted vector `x`: the relative
    /// mass of `W` the rank-one reading discards. Near zero when the
    /// relaxation was tight, `1/√2` already for two equal eigenvalues.
    pub residual_norm: f64,
}

/// Checks shape and symmetry, then returns the eigenvalues of `w` sorted in
/// descending order.
fn checked_eigen(w: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if w.nrows() != w.ncols() || w.nrows() == 0 {
        return Err(Error::BadMatrix(format!(
            "expected a nonempty square matrix, got {}x{}",
            w.nrows(),
            w.ncols()
        )));
    }
    let scale = w.amax();
    let mut asym = 0.0f64;
    for j in 0..w.ncols() {
        for i in 0..j {
            asym = asym.max((w[(i, j)] - w[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::BadMatrix(format!(
            "matrix is not symmetric: asymmetry {asym:.3e} against entry scale {scale:.3e}"
        )));
    }
    // Exact symmetry for the decomposition; the check above bounds the
    // perturbation this introduces.
    let sym = (w + w.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym))
}

/// Computes the eigenvalue summary of a symmetric matrix.
///
/// The rank count and trailing ratio clamp negative eigenvalues to zero
/// first, so solver round-off below zero does not produce negative ratios;
/// the raw values stay visible in [`SpectralSummary::eigenvalues`]. Both
/// statistics are invariant under positive scaling of `w`.
///
/// Fails if `w` is not square, is empty, departs from symmetry by more than
/// `1e-10` of its largest entry, or if `rank_tol` is negative or not finite.
pub fn spectrum(w: &DMatrix<f64>, rank_tol: f64) -> Result<SpectralSummary> {
    if !rank_tol.is_finite() || rank_tol < 0.0 {
        return Err(Error::Config(format!(
            "rank tolerance must be finite and nonnegative, got {rank_tol}"
        )));
    }
    let eig = checked_eigen(w)?;
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));

    let lead = eigenvalues[0].max(0.0);
    let (numerical_rank, trailing_ratio) = if lead > 0.0 {
        let rank = eigenvalues.iter().filter(|&&l| l > rank_tol * lead).count();
        let tail: f64 = eigenvalues[1..].iter().map(|l| l.max(0.0)).sum();
        (rank, tail / lead)
    } else {
        (0, 0.0)
    };

    Ok(SpectralSummary {
        eigenvalues,
        numerical_rank,
        trailing_ratio,
        rank_tol,
    })
}

/// Extracts the best rank-one voltage profile from a `2n × 2n` relaxation
/// matrix.
///
/// Takes the leading eigenpair `(λ₁, u₁)`, forms `x = √λ₁ u₁`, reads bus
/// `k`'s voltage as `x[k] + i·x[n+k]`, and rotates the whole profile by a
/// unit phase so the slack entry comes out real and nonnegative — the same
/// normalization the estimator applies to its own states, so the two are
/// directly comparable. When the slack entry is numerically zero the largest
/// entry anchors the rotation instead.
///
/// The reported residual is taken before the phase fix (rotation does not
/// change it). Fails on shape or symmetry violations, on an odd dimension,
/// on a slack index outside `0..n`, and when the largest eigenvalue is not
/// positive (no direction to extract).
pub fn recover_rank1(w: &DMatrix<f64>, slack: usize) -> Result<RecoveredState> {
    let eig = checked_eigen(w)?;
    let dim = w.nrows();
    if dim % 2 != 0 {
        return Err(Error::BadMatrix(format!(
            "expected an even dimension (stacked real/imaginary parts), got {dim}"
        )));
    }
    let n = dim / 2;
    if slack >= n {
        return Err(Error::Config(format!(
            "slack index {slack} outside the {n} buses the matrix covers"
        )));
    }

    let mut lead = 0;
    for j in 1..dim {
        if eig.eigenvalues[j] > eig.eigenvalues[lead] {
            lead = j;
        }
    }
    let lam1 = eig.eigenvalues[lead];
    if lam1 <= 0.0 {
        return Err(Error::BadMatrix(format!(
            "largest eigenvalue {lam1:.3e} is not positive; no rank-one direction to extract"
        )));
    }

    let x: DVector<f64> = eig.eigenvectors.column(lead) * lam1.sqrt();
    let residual_norm = {
        let outer = &x * x.transpose();
        (w - outer).norm() / w.norm()
    };

    let mut v: Vec<Complex64> = (0..n).map(|k| Complex64::new(x[k], x[n + k])).collect();
    let largest = v
        .iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    let anchor = if v[slack].norm() > 1e-12 * largest {
        v[slack]
    } else {
        *v.iter()
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .expect("nonempty profile")
    };
    let rot = anchor.conj() / anchor.norm();
    for c in &mut v {
        *c *= rot;
    }

    Ok(RecoveredState {
        v,
        source: RecoverySource::Rank1Recovery,
        residual_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{add_noise, generate_true_measurements, SigmaConfig};
    use crate::network::{build_admittance, parse_json_case, NetworkCase};
    use crate::power_flow::{solve_newton, NewtonOptions};
    use crate::relaxation::assemble;
    use crate::solver::{solve, SolveStatus, SolverOptions};
    use crate::wls::{solve_wls, StateVector, WlsOptions};

    fn diag(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(values))
    }

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
    fn outer_product_reads_as_rank_one() {
        let x = DVector::from_row_slice(&[1.02, 0.97, -0.04, 0.11, 0.93, -0.08]);
        let w = &x * x.transpose();
        let s = spectrum(&w, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.numerical_rank, 1);
        assert!(s.trailing_ratio.abs() <= 1e-12, "trailing {}", s.trailing_ratio);
        assert!((s.eigenvalues[0] - x.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn rank_and_trailing_ratio_match_hand_counts() {
        let s = spectrum(&diag(&[15.0, 13.0, 0.0, 0.0, 0.0, 0.0]), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.numerical_rank, 2);
        assert!((s.trailing_ratio - 13.0 / 15.0).abs() < 1e-15);
        assert_eq!(format!("{:.4}", s.trailing_ratio), "0.8667");

        let s = spectrum(
            &diag(&[29.0, 2.0, 0.5, 0.1, 0.1, 0.0, 0.0, 0.0]),
            DEFAULT_RANK_TOL,
        )
        .unwrap();
        assert_eq!(s.numerical_rank, 5);
        assert!((s.trailing_ratio - 2.7 / 29.0).abs() < 1e-15);
        assert_eq!(format!("{:.4}", s.trailing_ratio), "0.0931");
    }

    #[test]
    fn eigenvalues_come_back_in_descending_order() {
        // A dense matrix with a known spectrum: rotate a diagonal through two
        // plane rotations so nothing about the storage order is diagonal.
        let d = diag(&[1.0, 5.0, 3.0, 2.0]);
        let mut q = DMatrix::<f64>::identity(4, 4);
        let (c, s) = (0.8, 0.6);
        let mut g1 = DMatrix::<f64>::identity(4, 4);
        g1[(0, 0)] = c;
        g1[(0, 2)] = -s;
        g1[(2, 0)] = s;
        g1[(2, 2)] = c;
        let mut g2 = DMatrix::<f64>::identity(4, 4);
        g2[(1, 1)] = c;
        g2[(1, 3)] = s;
        g2[(3, 1)] = -s;
        g2[(3, 3)] = c;
        q = q * g1 * g2;
        let w = &q * d * q.transpose();
        let s = spectrum(&w, DEFAULT_RANK_TOL).unwrap();
        let expect = [5.0, 3.0, 2.0, 1.0];
        for (got, want) in s.eigenvalues.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(s.numerical_rank, 4);
    }

    #[test]
    fn negative_eigenvalues_are_reported_raw_but_clamped_in_ratios() {
        let s = spectrum(&diag(&[10.0, -3.0, 1.0]), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.eigenvalues, vec![10.0, 1.0, -3.0]);
        assert_eq!(s.numerical_rank, 2);
        assert!((s.trailing_ratio - 0.1).abs() < 1e-15);
    }

    #[test]
    fn statistics_are_invariant_under_positive_scaling() {
        let x = DVector::from_row_slice(&[0.9, 1.1, 0.2, -0.3]);
        let mut w = &x * x.transpose();
        w[(1, 1)] += 0.05;
        w[(2, 2)] += 1e-7;
        let a = spectrum(&w, DEFAULT_RANK_TOL).unwrap();
        let b = spectrum(&(w * 350.0), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(a.numerical_rank, b.numerical_rank);
        assert!((a.trailing_ratio - b.trailing_ratio).abs() < 1e-12);
    }

    #[test]
    fn trailing_ratio_is_zero_exactly_for_rank_one() {
        let s = spectrum(&diag(&[2.0, 0.0, 0.0]), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.numerical_rank, 1);
        assert_eq!(s.trailing_ratio, 0.0);

        let s = spectrum(&diag(&[2.0, 1e-3]), DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.numerical_rank, 2);
        assert!(s.trailing_ratio > 0.0);
    }

    #[test]
    fn nonpositive_spectra_report_rank_zero() {
        for w in [diag(&[0.0, 0.0]), diag(&[-1.0, -2.0])] {
            let s = spectrum(&w, DEFAULT_RANK_TOL).unwrap();
            assert_eq!(s.numerical_rank, 0);
            assert_eq!(s.trailing_ratio, 0.0);
        }
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let mut w = diag(&[1.0, 1.0]);
        w[(0, 1)] = 1e-3;
        let err = spectrum(&w, DEFAULT_RANK_TOL).unwrap_err();
        assert!(matches!(err, Error::BadMatrix(_)), "got {err}");

        // Round-off-level asymmetry passes.
        w[(1, 0)] = 1e-3 + 1e-14;
        assert!(spectrum(&w, DEFAULT_RANK_TOL).is_ok());
    }

    #[test]
    fn recovery_round_trips_an_exact_outer_product() {
        let case = ring4();
        let adm = build_admittance(&case).unwrap();
        let sol = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let truth = crate::power_flow::rotate_to_slack_reference(&case, &sol.v);
        let n = truth.len();
        let mut x = DVector::zeros(2 * n);
        for k in 0..n {
            x[k] = truth[k].re;
            x[n + k] = truth[k].im;
        }
        let w = &x * x.transpose();

        let rec = recover_rank1(&w, case.slack_index).unwrap();
        assert_eq!(rec.source, RecoverySource::Rank1Recovery);
        assert!(rec.residual_norm <= 1e-10, "residual {}", rec.residual_norm);
        for (got, want) in rec.v.iter().zip(&truth) {
            assert!((got - want).norm() <= 1e-10, "{got} vs {want}");
        }
        assert!(rec.v[case.slack_index].im.abs() <= 1e-12);
        assert!(rec.v[case.slack_index].re > 0.0);
    }

    #[test]
    fn recovery_cancels_an_arbitrary_global_phase() {
        let case = ring4();
        let adm = build_admittance(&case).unwrap();
        let sol = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let truth = crate::power_flow::rotate_to_slack_reference(&case, &sol.v);
        let n = truth.len();
        let spin = Complex64::from_polar(1.0, 0.83);
        let mut x = DVector::zeros(2 * n);
        for k in 0..n {
            let vk = truth[k] * spin;
            x[k] = vk.re;
            x[n + k] = vk.im;
        }
        let w = &x * x.transpose();

        // Same matrix semantics, different representative: the recovery must
        // land on the slack-referenced profile regardless of the phase the
        // outer product was built from.
        let rec = recover_rank1(&w, case.slack_index).unwrap();
        for (got, want) in rec.v.iter().zip(&truth) {
            assert!((got - want).norm() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn two_equal_eigenvalues_leave_the_closed_form_residual() {
        let w = DMatrix::<f64>::identity(2, 2);
        let rec = recover_rank1(&w, 0).unwrap();
        assert!(
            (rec.residual_norm - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12,
            "residual {}",
            rec.residual_norm
        );
        assert!((rec.v[0].norm() - 1.0).abs() <= 1e-12);
        assert!(rec.v[0].re > 0.0 && rec.v[0].im.abs() <= 1e-12);
    }

    #[test]
    fn recovery_requires_a_positive_leading_eigenvalue() {
        let err = recover_rank1(&(-DMatrix::<f64>::identity(4, 4)), 0).unwrap_err();
        assert!(matches!(err, Error::BadMatrix(_)), "got {err}");
        let err = recover_rank1(&DMatrix::<f64>::identity(3, 3), 0).unwrap_err();
        assert!(matches!(err, Error::BadMatrix(_)), "got {err}");
        let err = recover_rank1(&DMatrix::<f64>::identity(4, 4), 5).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn summaries_and_states_survive_serde() {
        let s = spectrum(&diag(&[15.0, 13.0, 0.0]), DEFAULT_RANK_TOL).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: SpectralSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(s, back);

        let rec = recover_rank1(&DMatrix::<f64>::identity(2, 2), 0).unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"rank1_recovery\""), "json {json}");
        let back: RecoveredState = serde_json::from_str(&json).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn recovered_state_warm_starts_the_estimator() {
        let case = ring4();
        let adm = build_admittance(&case).unwrap();
        let pf = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let full = generate_true_measurements(&case, &adm, &pf, &SigmaConfig::default());
        let noisy = add_noise(&full, 61);

        let problem = assemble(&noisy, &case, &adm).unwrap();
        let sdp = solve(&problem, &SolverOptions::default());
        assert_eq!(sdp.status, SolveStatus::Optimal);
        let rec = recover_rank1(&sdp.w, case.slack_index).unwrap();
        assert!(rec.residual_norm < 0.1, "residual {}", rec.residual_norm);

        let flat = solve_wls(&noisy, &case, &adm, &WlsOptions::default()).unwrap();
        let warm = solve_wls(
            &noisy,
            &case,
            &adm,
            &WlsOptions {
                init: Some(StateVector::from_voltages(&rec.v)),
                ..WlsOptions::default()
            },
        )
        .unwrap();
        assert!(flat.converged && warm.converged);
        assert!(
            warm.objective <= flat.objective + 1e-9,
            "warm {} vs flat {}",
            warm.objective,
            flat.objective
        );
        assert!(warm.iterations <= flat.iterations);
    }
}
