//! Constraint matrices for the rank-relaxed estimation problem.
//!
//! Every meter reading is a quadratic form of the stacked state
//! `X = [Re v; Im v]`: this module builds the sparse symmetric matrix `H`
//! with `tr(H·XXᵀ)` equal to that reading, plus the angle-reference matrix
//! and the exact-angle constraint matrices, and bundles them into an
//! [`SdpProblem`] ready for the conic solver.

use std::f64::consts::FRAC_PI_2;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{check_observability, FlowEnd, Location, MeasurementSet, MeterKind};
use crate::network::{AdmittanceSet, NetworkCase};

/// Symmetric real matrix stored as upper-triangle `(row, col, value)`
/// triplets with `row ≤ col`, sorted, merged, and free of explicit zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseSym {
    dim: usize,
    entries: Vec<(u32, u32, f64)>,
}

impl SparseSym {
    /// Build from arbitrary triplets; `(i, j)` and `(j, i)` address the same
    /// cell, duplicates accumulate, zeros are dropped.
    pub fn from_triplets(dim: usize, triplets: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut entries: Vec<(u32, u32, f64)> = triplets
            .into_iter()
            .map(|(i, j, v)| {
                assert!(i < dim && j < dim, "entry ({i}, {j}) outside dim {dim}");
                (i.min(j) as u32, i.max(j) as u32, v)
            })
            .collect();
        entries.sort_unstable_by_key(|&(i, j, _)| (i, j));
        let mut merged: Vec<(u32, u32, f64)> = Vec::with_capacity(entries.len());
        for (i, j, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i && last.1 == j => last.2 += v,
                _ => merged.push((i, j, v)),
            }
        }
        merged.retain(|&(_, _, v)| v != 0.0);
        SparseSym { dim, entries: merged }
    }

    pub fn zeros(dim: usize) -> Self {
        SparseSym { dim, entries: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Stored upper-triangle triplets.
    pub fn entries(&self) -> &[(u32, u32, f64)] {
        &self.entries
    }

    /// `tr(A · W)` for symmetric `W`.
    pub fn tr_product(&self, w: &DMatrix<f64>) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| {
                let w_ij = w[(i as usize, j as usize)];
                if i == j { v * w_ij } else { 2.0 * v * w_ij }
            })
            .sum()
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| {
                let p = x[i as usize] * x[j as usize];
                if i == j { v * p } else { 2.0 * v * p }
            })
            .sum()
    }

    /// `target += s · A` (both triangles).
    pub fn add_scaled_to(&self, target: &mut DMatrix<f64>, s: f64) {
        for &(i, j, v) in &self.entries {
            let (i, j) = (i as usize, j as usize);
            target[(i, j)] += s * v;
            if i != j {
                target[(j, i)] += s * v;
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        self.add_scaled_to(&mut m, 1.0);
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(i, j, v)| if i == j { v * v } else { 2.0 * v * v })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        SparseSym {
            dim: self.dim,
            entries: self.entries.iter().map(|&(i, j, v)| (i, j, s * v)).collect(),
        }
    }

    /// The matrix with row and column `k` deleted and later indices shifted
    /// down by one. Dropped entries are those touching `k`.
    pub fn without_index(&self, k: usize) -> Self {
        let shift = |i: u32| if (i as usize) > k { i - 1 } else { i };
        SparseSym {
            dim: self.dim - 1,
            entries: self
                .entries
                .iter()
                .filter(|&&(i, j, _)| i as usize != k && j as usize != k)
                .map(|&(i, j, v)| (shift(i), shift(j), v))
                .collect(),
        }
    }
}

/// What a constraint matrix stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HKind {
    PInjection,
    QInjection,
    PFlow,
    QFlow,
    VMagnitude,
    Reference,
    AnglePmu,
}

/// A constraint matrix together with its role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HMatrix {
    pub kind: HKind,
    pub mat: SparseSym,
}

/// One meter's contribution to the relaxed objective: the datum `z`, its
/// standard deviation `sigma`, and the matrix whose trace product predicts
/// `z`. For magnitude meters `z` and `sigma` are already in squared units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementTerm {
    pub h: HMatrix,
    pub z: f64,
    pub sigma: f64,
}

/// An exact-angle equality `tr(H·W) = 0` contributed by a PMU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleConstraint {
    pub h: HMatrix,
    pub bus: usize,
    /// Measured angle in radians.
    pub delta: f64,
}

/// The assembled relaxation: minimize the weighted squared residuals of
/// `h_list` over `W ⪰ 0` subject to `tr(m0·W) = 0` and every angle equality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub n: usize,
    pub slack: usize,
    pub h_list: Vec<MeasurementTerm>,
    pub m0: HMatrix,
    pub angle_constraints: Vec<AngleConstraint>,
}

impl SdpProblem {
    /// Side length of `W`.
    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Number of residual terms.
    pub fn m(&self) -> usize {
        self.h_list.len()
    }

    /// Scores a complex voltage profile by the exact functional this problem
    /// minimizes: `Σ ((z_i − tr(H_i·xxᵀ))/σ_i)²` over the assembled terms,
    /// squared-unit magnitude recast included.
    ///
    /// Any state's score upper-bounds the relaxed optimum (its outer product
    /// is a feasible `W`), which makes this the right yardstick when
    /// comparing a pointwise estimate against the relaxation — the plain
    /// estimator's own objective differs on magnitude terms by the recast's
    /// higher-order error and is not bounded by it.
    pub fn objective_of_state(&self, v: &[Complex64]) -> f64 {
        let mut x = vec![0.0; 2 * self.n];
        for (k, vk) in v.iter().enumerate() {
            x[k] = vk.re;
            x[self.n + k] = vk.im;
        }
        self.h_list
            .iter()
            .map(|t| ((t.z - t.h.mat.quadratic_form(&x)) / t.sigma).powi(2))
            .sum()
    }
}

/// The matrix pair for a reading of the form `v_a · conj(row · v)`: the
/// first maps `XXᵀ` to its real part, the second to its imaginary part.
///
/// Injections use the anchor's row of the bus admittance matrix; branch
/// flows use the metered end's row of the corresponding branch-end
/// admittance. Both triangles of the quadratic form collapse into
/// upper-triplet storage.
fn h_pair_from_row(anchor: usize, row: &[Complex64]) -> (SparseSym, SparseSym) {
    let n = row.len();
    let dim = 2 * n;
    let a = anchor;
    let mut real_entries = Vec::with_capacity(4 * n);
    let mut imag_entries = Vec::with_capacity(4 * n);
    for (j, c) in row.iter().enumerate() {
        let (g, b) = (c.re, c.im);
        if j == a {
            real_entries.push((a, a, g));
            real_entries.push((n + a, n + a, g));
            imag_entries.push((a, a, -b));
            imag_entries.push((n + a, n + a, -b));
        } else {
            let (lo, hi) = (a.min(j), a.max(j));
            real_entries.push((lo, hi, g / 2.0));
            real_entries.push((n + lo, n + hi, g / 2.0));
            real_entries.push((a, n + j, -b / 2.0));
            real_entries.push((j, n + a, b / 2.0));
            imag_entries.push((lo, hi, -b / 2.0));
            imag_entries.push((n + lo, n + hi, -b / 2.0));
            imag_entries.push((a, n + j, -g / 2.0));
            imag_entries.push((j, n + a, g / 2.0));
        }
    }
    (SparseSym::from_triplets(dim, real_entries), SparseSym::from_triplets(dim, imag_entries))
}

/// Matrices whose traces against `XXᵀ` give the P and Q injections at `bus`.
pub fn build_injection_matrices(bus: usize, adm: &AdmittanceSet) -> (HMatrix, HMatrix) {
    let row: Vec<Complex64> = adm.y_bus.row(bus).iter().copied().collect();
    let (hr, hq) = h_pair_from_row(bus, &row);
    (
        HMatrix { kind: HKind::PInjection, mat: hr },
        HMatrix { kind: HKind::QInjection, mat: hq },
    )
}

/// Matrices whose traces against `XXᵀ` give the P and Q flow into `branch`
/// at `end`.
pub fn build_flow_matrices(
    case: &NetworkCase,
    adm: &AdmittanceSet,
    branch: usize,
    end: FlowEnd,
) -> (HMatrix, HMatrix) {
    let br = &case.branches[branch];
    let (anchor, rows) = match end {
        FlowEnd::From => (br.from, &adm.y_from),
        FlowEnd::To => (br.to, &adm.y_to),
    };
    let row: Vec<Complex64> = rows.row(branch).iter().copied().collect();
    let (hp, hq) = h_pair_from_row(anchor, &row);
    (
        HMatrix { kind: HKind::PFlow, mat: hp },
        HMatrix { kind: HKind::QFlow, mat: hq },
    )
}

/// Matrix whose trace against `XXᵀ` is the squared voltage magnitude at
/// `bus`.
pub fn build_vmag_matrix(bus: usize, n: usize) -> HMatrix {
    HMatrix {
        kind: HKind::VMagnitude,
        mat: SparseSym::from_triplets(2 * n, [(bus, bus, 1.0), (n + bus, n + bus, 1.0)]),
    }
}

/// Matrix encoding the exact-angle condition `arg v_bus = delta` as
/// `tr(H·XXᵀ) = Re(v)²·tan δ − Re(v)·Im(v) = 0`.
///
/// The tangent parameterization needs `|delta| < π/2`; angles within 1e-3
/// radians of that are rejected.
pub fn build_angle_matrix(bus: usize, delta: f64, n: usize) -> Result<HMatrix> {
    if !delta.is_finite() || delta.abs() >= FRAC_PI_2 - 1e-3 {
        return Err(Error::AngleRange { bus, angle: delta });
    }
    Ok(HMatrix {
        kind: HKind::AnglePmu,
        mat: SparseSym::from_triplets(2 * n, [(bus, bus, delta.tan()), (bus, n + bus, -0.5)]),
    })
}

/// The angle-reference matrix: a single unit diagonal entry at the slack
/// bus's imaginary coordinate, so `tr(M₀·XXᵀ) = Im(v_slack)²`.
pub fn reference_matrix(slack: usize, n: usize) -> HMatrix {
    HMatrix {
        kind: HKind::Reference,
        mat: SparseSym::from_triplets(2 * n, [(n + slack, n + slack, 1.0)]),
    }
}

/// Build the full relaxation for a measurement set: one weighted residual
/// term per noisy meter (in set order), the angle-reference equality, and
/// one angle equality per exact PMU meter.
///
/// Magnitude meters are recast in squared units — `tr(H·W)` predicts `V²`,
/// so the datum becomes `z²` with standard deviation `2·z·σ` (the
/// first-order noise scale of the square), keeping the weights equivalent
/// to the plain estimator's near the truth.
pub fn assemble(
    set: &MeasurementSet,
    case: &NetworkCase,
    adm: &AdmittanceSet,
) -> Result<SdpProblem> {
    let n = case.n();
    let observable = match set.observable {
        Some(flag) => flag,
        None => check_observability(set, case, adm),
    };
    if !observable {
        return Err(Error::Unobservable {
            attempts: 0,
            detail: "the measurement set does not determine the state".into(),
        });
    }

    let mut h_list = Vec::new();
    let mut angle_constraints = Vec::new();
    for meas in &set.measurements {
        if meas.kind == MeterKind::VAngle {
            if meas.sigma != 0.0 {
                return Err(Error::BadMeasurement(
                    "angle meters are exact; sigma must be 0".into(),
                ));
            }
            let bus = meas.location.bus().ok_or_else(|| {
                Error::BadMeasurement("angle meter without a bus location".into())
            })?;
            angle_constraints.push(AngleConstraint {
                h: build_angle_matrix(bus, meas.value, n)?,
                bus,
                delta: meas.value,
            });
            continue;
        }
        if meas.sigma <= 0.0 {
            return Err(Error::BadMeasurement(format!(
                "{:?} meter needs a positive sigma in the relaxation, got {}",
                meas.kind, meas.sigma
            )));
        }
        let (h, z, sigma) = match (meas.kind, meas.location) {
            (MeterKind::PInjection, Location::Bus { bus }) => {
                (build_injection_matrices(bus, adm).0, meas.value, meas.sigma)
            }
            (MeterKind::QInjection, Location::Bus { bus }) => {
                (build_injection_matrices(bus, adm).1, meas.value, meas.sigma)
            }
            (MeterKind::PFlow, Location::Branch { branch, end }) => {
                (build_flow_matrices(case, adm, branch, end).0, meas.value, meas.sigma)
            }
            (MeterKind::QFlow, Location::Branch { branch, end }) => {
                (build_flow_matrices(case, adm, branch, end).1, meas.value, meas.sigma)
            }
            (MeterKind::VMagnitude, Location::Bus { bus }) => {
                if meas.value <= 0.0 {
                    return Err(Error::BadMeasurement(format!(
                        "magnitude meter at bus {bus} reads {}; squared recast needs z > 0",
                        meas.value
                    )));
                }
                (
                    build_vmag_matrix(bus, n),
                    meas.value * meas.value,
                    2.0 * meas.value * meas.sigma,
                )
            }
            (kind, loc) => {
                return Err(Error::BadMeasurement(format!(
                    "{kind:?} at {loc:?} is not a valid location"
                )))
            }
        };
        h_list.push(MeasurementTerm { h, z, sigma });
    }

    Ok(SdpProblem {
        n,
        slack: case.slack_index,
        h_list,
        m0: reference_matrix(case.slack_index, n),
        angle_constraints,
    })
}
