//! Primal-dual interior-point solver for the assembled relaxation.
//!
//! The problem is posed over a block-diagonal cone: one `(2n-1)`-dimensional
//! block for the reduced `W` (the slack bus's imaginary coordinate is
//! eliminated — the reference equality plus positive semidefiniteness force
//! that whole row and column to zero, and removing it restores a strictly
//! feasible interior), and one 2×2 block per meter,
//! `B_i = [[α_i, r_i], [r_i, 1]]`, which is semidefinite exactly when
//! `α_i ≥ r_i²`. Two equality rows tie each block to `W` — the off-diagonal
//! must equal the weighted residual `(z_i − tr(H_iW))/σ_i` and the corner is
//! pinned to one — so minimizing `Σ α_i` presses every `α_i` onto its
//! squared residual. This parametrization keeps all iterates near unit
//! scale; the equivalent form carrying `z_i²/σ_i²` inside the blocks drowns
//! the duality gap in rounding error long before tight tolerances.
//!
//! Directions are the predictor-corrector kind in the Nesterov-Todd
//! scaling, whose geometric-mean scaling point keeps the linear systems
//! conditioned like the square root of the complementarity spectrum — the
//! plain `Z⁻¹`-scaled variant loses the primal step to rounding well before
//! tight tolerances on rank-deficient optima, and rank-deficient optima are
//! the whole point here. The Schur complement is formed from constraint
//! sparsity and factored once per iteration. Everything is dense `f64`
//! linear algebra, single-threaded, and deterministic.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::relaxation::{SdpProblem, SparseSym};

/// Solver controls. Tolerances are relative: the duality gap is measured
/// against `1 + |primal| + |dual|`, feasibility against the data norms.
/// The default gap tolerance of `3e-7` sits just above the double-precision
/// floor of a dense interior-point method on these cone sizes (the floor is
/// an absolute duality gap of a few times `1e-6`, so its relative position
/// depends on the objective's magnitude); feasibility converges much
/// further and gets the tighter `1e-8`.
///
/// `trace_reg` adds `trace_reg · tr(W)` to the internal objective. Sparse
/// meter placements can leave positive-semidefinite directions entirely
/// unobserved, making the set of optimal `W` unbounded; the trace term pins
/// the iterates to its minimum-trace element. The reported objective stays
/// the pure weighted residual sum, so the bias visible to callers is zero —
/// only `W` itself is selected by the regularization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverOptions {
    pub gap_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
    pub trace_reg: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { gap_tol: 3e-7, feas_tol: 1e-8, max_iter: 200, trace_reg: 1e-9 }
    }
}

/// How a solve ended. The problem class is always strictly feasible (any
/// positive multiple of the identity, with the auxiliary blocks widened to
/// cover the residuals, is an interior point), so the non-optimal endings
/// are resource and conditioning limits, never infeasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    NumericalFailure,
}

/// Residuals at the returned iterate. The gap is in physical units; the two
/// feasibility measures are relative to the scaled data norms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveResiduals {
    /// Relative equality-constraint violation.
    pub primal: f64,
    /// Relative dual-constraint violation.
    pub dual: f64,
    /// Absolute complementarity `⟨X, Z⟩`.
    pub gap: f64,
    /// `gap / (1 + |primal obj| + |dual obj|)`.
    pub relative_gap: f64,
}

/// Solved relaxation: the full-size `W` (the eliminated slack-imaginary row
/// and column reinserted as zeros), the per-meter auxiliaries, and the
/// diagnostics the certificate checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConicSolution {
    pub w: DMatrix<f64>,
    pub alphas: Vec<f64>,
    /// `Σ α_i`.
    pub objective: f64,
    pub dual_objective: f64,
    pub status: SolveStatus,
    pub residuals: SolveResiduals,
    pub iterations: usize,
}

/// One equality row `⟨A_k, X⟩ = b_k` over the block variable, stored
/// normalized to unit Frobenius norm.
struct Row {
    /// Upper-triangle entries of the W-block part (reduced indices, scaled).
    w_upper: Vec<(u32, u32, f64)>,
    /// Both-triangle expansion of the same entries, for Schur products.
    w_full: Vec<(u32, u32, f64)>,
    /// 2×2 part on one auxiliary block, if any.
    block: Option<(usize, DMatrix<f64>)>,
    b: f64,
}

impl Row {
    fn new(
        w_part: Option<&SparseSym>,
        w_scale: f64,
        block: Option<(usize, DMatrix<f64>)>,
        b: f64,
    ) -> Row {
        let mut norm_sq = 0.0;
        let mut upper = Vec::new();
        if let Some(s) = w_part {
            for &(i, j, v) in s.entries() {
                let v = v * w_scale;
                norm_sq += if i == j { v * v } else { 2.0 * v * v };
                upper.push((i, j, v));
            }
        }
        if let Some((_, p)) = &block {
            norm_sq += p.norm_squared();
        }
        let scale = 1.0 / norm_sq.sqrt();
        let w_upper: Vec<(u32, u32, f64)> =
            upper.into_iter().map(|(i, j, v)| (i, j, v * scale)).collect();
        let mut w_full = Vec::with_capacity(2 * w_upper.len());
        for &(i, j, v) in &w_upper {
            w_full.push((i, j, v));
            if i != j {
                w_full.push((j, i, v));
            }
        }
        Row {
            w_upper,
            w_full,
            block: block.map(|(idx, p)| (idx, p * scale)),
            b: b * scale,
        }
    }

    /// `tr(A_k · U)` for a possibly unsymmetric `U`, W-part only.
    fn w_dot(&self, u: &DMatrix<f64>) -> f64 {
        self.w_upper
            .iter()
            .map(|&(i, j, v)| {
                let (i, j) = (i as usize, j as usize);
                if i == j { v * u[(i, i)] } else { v * (u[(i, j)] + u[(j, i)]) }
            })
            .sum()
    }

    /// `⟨A_k, U⟩` over all blocks.
    fn dot(&self, u: &Blocks) -> f64 {
        let mut acc = self.w_dot(&u.mats[0]);
        if let Some((idx, p)) = &self.block {
            acc += p.dot(&u.mats[idx + 1]);
        }
        acc
    }

    /// `target += s · A_k`.
    fn add_scaled_to(&self, target: &mut Blocks, s: f64) {
        for &(i, j, v) in &self.w_upper {
            let (i, j) = (i as usize, j as usize);
            target.mats[0][(i, j)] += s * v;
            if i != j {
                target.mats[0][(j, i)] += s * v;
            }
        }
        if let Some((idx, p)) = &self.block {
            let t = &mut target.mats[idx + 1];
            *t += &(p * s);
        }
    }
}

/// Block-diagonal symmetric matrix: `mats[0]` is the reduced-W block, the
/// rest are the 2×2 auxiliary blocks in meter order.
#[derive(Clone)]
struct Blocks {
    mats: Vec<DMatrix<f64>>,
}

impl Blocks {
    fn zeros(d: usize, m: usize) -> Blocks {
        let mut mats = Vec::with_capacity(m + 1);
        mats.push(DMatrix::zeros(d, d));
        for _ in 0..m {
            mats.push(DMatrix::zeros(2, 2));
        }
        Blocks { mats }
    }

    fn dot(&self, other: &Blocks) -> f64 {
        self.mats.iter().zip(&other.mats).map(|(a, b)| a.dot(b)).sum()
    }

    fn axpy(&mut self, a: f64, other: &Blocks) {
        for (t, s) in self.mats.iter_mut().zip(&other.mats) {
            *t += &(s * a);
        }
    }

    fn scale(&mut self, a: f64) {
        for m in &mut self.mats {
            *m *= a;
        }
    }

    fn norm(&self) -> f64 {
        self.mats.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
    }

    fn is_finite(&self) -> bool {
        self.mats.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    fn symmetrize(&mut self) {
        for m in &mut self.mats {
            let t = m.transpose();
            *m += t;
            *m *= 0.5;
        }
    }

    /// Blockwise product `self · other` (not symmetric in general).
    fn mul(&self, other: &Blocks) -> Blocks {
        Blocks {
            mats: self.mats.iter().zip(&other.mats).map(|(a, b)| a * b).collect(),
        }
    }

    /// Blockwise inverse via Cholesky; `None` if any block is not positive
    /// definite.
    fn psd_inverse(&self) -> Option<Blocks> {
        let mut mats = Vec::with_capacity(self.mats.len());
        for m in &self.mats {
            mats.push(Cholesky::new(m.clone())?.inverse());
        }
        Some(Blocks { mats })
    }

    /// Nesterov-Todd scaling for the pair `(self, z)`, blockwise.
    fn nt_scaling(&self, z: &Blocks) -> Option<Scaling> {
        let mut w = Vec::with_capacity(self.mats.len());
        let mut t = Vec::with_capacity(self.mats.len());
        let mut t_inv = Vec::with_capacity(self.mats.len());
        let mut v = Vec::with_capacity(self.mats.len());
        for (x, zb) in self.mats.iter().zip(&z.mats) {
            let block = nt_block(x, zb)?;
            w.push(block.0);
            t.push(block.1);
            t_inv.push(block.2);
            v.push(block.3);
        }
        Some(Scaling { w: Blocks { mats: w }, t, t_inv, v })
    }

    /// Largest `α` with `self + α·dir ⪰ 0`, via the factorized whitening of
    /// each block; `None` if the current point is not positive definite.
    fn step_to_boundary(&self, dir: &Blocks) -> Option<f64> {
        let mut alpha = f64::INFINITY;
        for (s, d) in self.mats.iter().zip(&dir.mats) {
            let chol = Cholesky::new(s.clone())?;
            let l = chol.l();
            let half = l.solve_lower_triangular(d)?;
            let white = l.solve_lower_triangular(&half.transpose())?;
            let sym = (&white + white.transpose()) * 0.5;
            let lambda_min = SymmetricEigen::new(sym).eigenvalues.min();
            if lambda_min < 0.0 {
                alpha = alpha.min(-1.0 / lambda_min);
            }
        }
        Some(alpha)
    }
}

/// Nesterov-Todd scaling for the iterate pair: the scaling point `W` per
/// block (the unique positive definite solution of `W·Z·W = X`) together
/// with a congruence factor `T` satisfying `W = T·Tᵀ` that carries both
/// iterates onto the same diagonal: `T⁻¹·X·T⁻ᵀ = Tᵀ·Z·T = diag(v)`.  The
/// shared diagonal makes the second-order correction a cheap elementwise
/// operation.
struct Scaling {
    w: Blocks,
    t: Vec<DMatrix<f64>>,
    t_inv: Vec<DMatrix<f64>>,
    v: Vec<DVector<f64>>,
}

impl Scaling {
    /// Second-order term of the scaled complementarity equation: carries the
    /// affine direction pair into scaled coordinates, forms the symmetrized
    /// product, divides entry `(i,j)` by the mean of `v[i]` and `v[j]`, and
    /// maps the result back.
    fn second_order(&self, dx_aff: &Blocks, dz_aff: &Blocks) -> Blocks {
        let mut mats = Vec::with_capacity(self.t.len());
        for (i, (t, t_inv)) in self.t.iter().zip(&self.t_inv).enumerate() {
            let dxa = t_inv * &dx_aff.mats[i] * t_inv.transpose();
            let dza = t.transpose() * &dz_aff.mats[i] * t;
            let prod = &dxa * &dza;
            let mut cross = (&prod + prod.transpose()) * 0.5;
            let v = &self.v[i];
            for r in 0..cross.nrows() {
                for c in 0..cross.ncols() {
                    cross[(r, c)] *= 2.0 / (v[r] + v[c]);
                }
            }
            mats.push(t * cross * t.transpose());
        }
        Blocks { mats }
    }
}

/// One block of the Nesterov-Todd scaling, from a Cholesky factor of `z` and
/// an eigendecomposition `Lᵀ·x·L = U·Λ·Uᵀ` of the whitened `x`: the factor is
/// `T = L⁻ᵀ·U·Λ^¼`, the scaling point `W = T·Tᵀ`, and the shared diagonal is
/// `v = Λ^½`.
fn nt_block(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let l = Cholesky::new(z.clone())?.l();
    let mid = l.transpose() * x * &l;
    let sym = (&mid + mid.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() <= 0.0 {
        return None;
    }
    let quarter = eig.eigenvalues.map(|lam| lam.powf(0.25));
    let mut t = l.tr_solve_lower_triangular(&eig.eigenvectors)?;
    for (col, q) in quarter.iter().enumerate() {
        let mut c = t.column_mut(col);
        c *= *q;
    }
    let mut t_inv = eig.eigenvectors.transpose() * l.transpose();
    for (row, q) in quarter.iter().enumerate() {
        let mut r = t_inv.row_mut(row);
        r *= q.recip();
    }
    let w = &t * t.transpose();
    let v = eig.eigenvalues.map(|lam| lam.sqrt());
    Some((w, t, t_inv, v))
}

/// Index in the reduced W coordinates, or `None` for the eliminated one.
fn reduce_idx(full: usize, removed: usize) -> Option<usize> {
    match full.cmp(&removed) {
        std::cmp::Ordering::Less => Some(full),
        std::cmp::Ordering::Equal => None,
        std::cmp::Ordering::Greater => Some(full - 1),
    }
}

struct Assembly {
    rows: Vec<Row>,
    /// Scaled objective blocks.
    c: Blocks,
    /// `1 / s_obj`: multiply scaled dual quantities by this to get physical.
    obj_scale_inv: f64,
    /// Reduced (unscaled) measurement matrices, for traces and the objective.
    h_reduced: Vec<SparseSym>,
    b_vec: DVector<f64>,
    d: usize,
    m: usize,
    /// Angle equalities kept (bus, reduced off-diagonal column, tan δ).
    angle_starts: Vec<(usize, Option<usize>, f64)>,
}

fn build_assembly(problem: &SdpProblem, trace_reg: f64) -> Assembly {
    let n = problem.n;
    let removed = n + problem.slack;
    let d = 2 * n - 1;
    let m = problem.m();

    let offdiag_part = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]);
    let corner_part = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);

    let h_reduced: Vec<SparseSym> =
        problem.h_list.iter().map(|t| t.h.mat.without_index(removed)).collect();

    let mut rows = Vec::with_capacity(2 * m + problem.angle_constraints.len());
    // Residual rows: tr(H_i W)/σ_i + B_i[0,1] = z_i/σ_i.
    for (i, term) in problem.h_list.iter().enumerate() {
        rows.push(Row::new(
            Some(&h_reduced[i]),
            1.0 / term.sigma,
            Some((i, offdiag_part.clone())),
            term.z / term.sigma,
        ));
    }
    // Pin rows: B_i[1,1] = 1.
    for i in 0..m {
        rows.push(Row::new(None, 1.0, Some((i, corner_part.clone())), 1.0));
    }
    // Exact-angle rows: tr(H_a W) = 0. A PMU at the slack bus reduces to an
    // empty matrix (its angle is the eliminated reference itself) and is
    // dropped rather than left to make the normal matrix singular.
    let mut angle_starts = Vec::new();
    for ac in &problem.angle_constraints {
        let reduced = ac.h.mat.without_index(removed);
        if reduced.nnz() == 0 {
            continue;
        }
        angle_starts.push((ac.bus, reduce_idx(n + ac.bus, removed), ac.delta.tan()));
        rows.push(Row::new(Some(&reduced), 1.0, None, 0.0));
    }

    // Objective: Σ α_i read straight off the block corners, plus the small
    // trace term on W that keeps the optimal set bounded.
    let mut c = Blocks::zeros(d, m);
    c.mats[0].fill_diagonal(trace_reg);
    for i in 0..m {
        c.mats[i + 1][(0, 0)] = 1.0;
    }
    let s_obj = 1.0 / c.norm().max(1.0);
    c.scale(s_obj);

    let b_vec = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.b));

    Assembly {
        rows,
        c,
        obj_scale_inv: 1.0 / s_obj,
        h_reduced,
        b_vec,
        d,
        m,
        angle_starts,
    }
}

/// Primal and dual objective values in physical units.
fn objectives(asm: &Assembly, x: &Blocks, y: &DVector<f64>) -> (f64, f64) {
    let pobj: f64 = (1..=asm.m).map(|i| x.mats[i][(0, 0)]).sum();
    let dobj = asm.b_vec.dot(y) * asm.obj_scale_inv;
    (pobj, dobj)
}

/// Solve the assembled relaxation.
///
/// Deterministic: identical problems and options produce identical output.
pub fn solve(problem: &SdpProblem, opts: &SolverOptions) -> ConicSolution {
    let asm = build_assembly(problem, opts.trace_reg);
    let (d, m) = (asm.d, asm.m);
    let p = asm.rows.len();
    let nu = (d + 2 * m) as f64;

    // Primal start: a well-interior multiple of the identity on W (plus the
    // off-diagonal pairs that satisfy the angle equalities outright, when
    // that stays safely positive definite — those rows are homogeneous, so
    // the common factor preserves them), α's given room above their optima,
    // corners started on their pins.
    let xi = 10.0;
    let mut x = Blocks::zeros(d, m);
    x.mats[0].fill_diagonal(xi);
    if asm.angle_starts.iter().all(|&(_, _, t)| t.abs() < 0.9) {
        for &(bus, off, t) in &asm.angle_starts {
            if let Some(col) = off {
                x.mats[0][(bus, col)] = xi * t;
                x.mats[0][(col, bus)] = xi * t;
            }
        }
    }
    for i in 0..m {
        x.mats[i + 1][(0, 0)] = xi;
        x.mats[i + 1][(1, 1)] = 1.0;
    }

    let mut y = DVector::<f64>::zeros(p);
    let mut z = Blocks::zeros(d, m);
    z.mats[0].fill_diagonal(1.0);
    for i in 0..m {
        z.mats[i + 1][(0, 0)] = 1.0;
        z.mats[i + 1][(1, 1)] = 1.0;
    }

    let b_norm = asm.b_vec.norm();
    let c_norm = asm.c.norm();
    let tau = 0.98;

    let mut iterations = 0;
    let mut stalls = 0;

    let (status, residuals) = loop {
        // Residuals at the current iterate, in the scaled geometry.
        let r_p = DVector::from_iterator(
            p,
            asm.rows.iter().enumerate().map(|(k, row)| asm.b_vec[k] - row.dot(&x)),
        );
        let mut r_d = asm.c.clone();
        for (k, row) in asm.rows.iter().enumerate() {
            row.add_scaled_to(&mut r_d, -y[k]);
        }
        r_d.axpy(-1.0, &z);

        let gap_phys = x.dot(&z) * asm.obj_scale_inv;
        let (pobj, dobj) = objectives(&asm, &x, &y);
        let rel_gap = gap_phys / (1.0 + pobj.abs() + dobj.abs());
        let pinf = r_p.norm() / (1.0 + b_norm);
        let dinf = r_d.norm() / (1.0 + c_norm);
        let residuals =
            SolveResiduals { primal: pinf, dual: dinf, gap: gap_phys, relative_gap: rel_gap };

        if std::env::var("SOLVER_TRACE").is_ok() {
            eprintln!(
                "it {iterations:3}  pobj {pobj:+.6e}  dobj {dobj:+.6e}  gap {gap_phys:.3e}  rel {rel_gap:.3e}  pinf {pinf:.3e}  dinf {dinf:.3e}"
            );
        }

        if !(pinf.is_finite() && dinf.is_finite() && gap_phys.is_finite()) {
            break (SolveStatus::NumericalFailure, residuals);
        }
        // The complementarity gap alone can flatter the iterate: equality
        // residuals seen through large multipliers shift the two objectives
        // apart without showing up in x·z, and on heavily weighted meter
        // sets that term floors near 10·gap_tol in relative terms. Optimality
        // additionally demands the objectives agree to the same window the
        // solution certificate checks, so an Optimal status always survives
        // verification.
        let obj_gap_ok =
            (pobj - dobj).abs() <= 30.0 * opts.gap_tol * (1.0 + pobj.abs() + dobj.abs());
        if rel_gap <= opts.gap_tol && pinf <= opts.feas_tol && dinf <= opts.feas_tol && obj_gap_ok
        {
            break (SolveStatus::Optimal, residuals);
        }
        if iterations >= opts.max_iter {
            break (SolveStatus::MaxIter, residuals);
        }

        let mu = x.dot(&z) / nu;
        let Some(z_inv) = z.psd_inverse() else {
            break (SolveStatus::NumericalFailure, residuals);
        };
        // Scaling point W with W·Z·W = X; its symmetric metric keeps the
        // direction solves well conditioned even when the iterates approach
        // a low-rank optimum.
        let Some(sc) = x.nt_scaling(&z) else {
            break (SolveStatus::NumericalFailure, residuals);
        };

        // Schur complement M[k][l] = ⟨A_k, W·A_l·W⟩, factored once and
        // reused by both direction solves.
        let schur = build_schur(&asm.rows, &sc.w);
        let Some(chol) = factor_with_jitter(schur.clone()) else {
            break (SolveStatus::NumericalFailure, residuals);
        };

        // Predictor aims at zero complementarity: R_c = −X.
        let mut minus_x = x.clone();
        minus_x.scale(-1.0);
        let Some((dx_aff, _, dz_aff)) =
            direction(&asm, &sc.w, &schur, &chol, &r_p, &r_d, &minus_x)
        else {
            break (SolveStatus::NumericalFailure, residuals);
        };

        let (Some(ap_aff), Some(ad_aff)) =
            (x.step_to_boundary(&dx_aff), z.step_to_boundary(&dz_aff))
        else {
            break (SolveStatus::NumericalFailure, residuals);
        };
        let mut x_aff = x.clone();
        x_aff.axpy(ap_aff.min(1.0), &dx_aff);
        let mut z_aff = z.clone();
        z_aff.axpy(ad_aff.min(1.0), &dz_aff);
        let mu_aff = x_aff.dot(&z_aff) / nu;
        // After a stalled iteration, spend one step purely recentering at
        // the current barrier level; that backs the iterate away from the
        // cone boundary so the next predictor can move again.
        let sigma =
            if stalls > 0 { 1.0 } else { (mu_aff / mu).powi(3).clamp(1e-8, 1.0) };

        // Corrected direction recenters to σμ and subtracts the exact
        // second-order term of the scaled complementarity equation.
        let mut r_c = z_inv.clone();
        r_c.scale(sigma * mu);
        r_c.axpy(-1.0, &x);
        if stalls == 0 {
            r_c.axpy(-1.0, &sc.second_order(&dx_aff, &dz_aff));
        }

        let Some((dx, dy, dz)) =
            direction(&asm, &sc.w, &schur, &chol, &r_p, &r_d, &r_c)
        else {
            break (SolveStatus::NumericalFailure, residuals);
        };

        let (Some(ap), Some(ad)) = (x.step_to_boundary(&dx), z.step_to_boundary(&dz)) else {
            break (SolveStatus::NumericalFailure, residuals);
        };
        let ap = (tau * ap).min(1.0);
        let ad = (tau * ad).min(1.0);

        if std::env::var("SOLVER_TRACE").is_ok() {
            eprintln!("        ap {ap:.3e}  ad {ad:.3e}  sigma {sigma:.3e}  mu {mu:.3e}");
        }

        x.axpy(ap, &dx);
        y.axpy(ad, &dy, 1.0);
        z.axpy(ad, &dz);

        if !(x.is_finite() && z.is_finite()) {
            break (SolveStatus::NumericalFailure, residuals);
        }
        if ap < 1e-8 && ad < 1e-8 {
            stalls += 1;
            if stalls >= 3 {
                break (SolveStatus::NumericalFailure, residuals);
            }
        } else {
            stalls = 0;
        }
        iterations += 1;
    };

    let dual_objective = objectives(&asm, &x, &y).1;
    finalize(problem, &asm, &x, status, residuals, iterations, dual_objective)
}

/// Schur complement `M[k][l] = ⟨A_k, W·A_l·W⟩` in the scaling metric,
/// assembled from row sparsity.
fn build_schur(rows: &[Row], w: &Blocks) -> DMatrix<f64> {
    let p = rows.len();
    let ww = &w.mats[0];
    let mut m = DMatrix::zeros(p, p);
    for l in 0..p {
        for k in l..p {
            let mut acc = 0.0;
            let (rk, rl) = (&rows[k], &rows[l]);
            if !rk.w_full.is_empty() && !rl.w_full.is_empty() {
                for &(i, j, a) in &rk.w_full {
                    let (i, j) = (i as usize, j as usize);
                    for &(r, s, c) in &rl.w_full {
                        let (r, s) = (r as usize, s as usize);
                        acc += a * c * ww[(i, r)] * ww[(s, j)];
                    }
                }
            }
            if let (Some((bi, pk)), Some((bj, pl))) = (&rk.block, &rl.block) {
                if bi == bj {
                    let wb = &w.mats[bi + 1];
                    acc += (pk * wb * pl * wb).trace();
                }
            }
            m[(k, l)] = acc;
            m[(l, k)] = acc;
        }
    }
    m
}

fn factor_with_jitter(mut m: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let scale = m.diagonal().amax().max(1e-300);
    for boost in 0..4 {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Some(c);
        }
        let ridge = scale * 1e-13 * 100f64.powi(boost);
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
    }
    None
}

/// Solve one direction system `ΔX + W·ΔZ·W = R_c`, `A(ΔX) = R_p`,
/// `Aᵀ(Δy) + ΔZ = R_d`, for a given complementarity target `R_c`.
fn direction(
    asm: &Assembly,
    w: &Blocks,
    schur: &DMatrix<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    r_p: &DVector<f64>,
    r_d: &Blocks,
    r_c: &Blocks,
) -> Option<(Blocks, DVector<f64>, Blocks)> {
    let p = asm.rows.len();
    // M·Δy = R_p − A(R_c) + A(W·R_d·W)
    let wrw = w.mul(r_d).mul(w);
    let rhs = DVector::from_iterator(
        p,
        asm.rows
            .iter()
            .enumerate()
            .map(|(k, row)| r_p[k] - row.dot(r_c) + row.dot(&wrw)),
    );
    // Iterative refinement against the unfactored matrix buys back the
    // accuracy the factorization loses once the barrier parameter gets
    // small and the normal matrix goes near-singular.
    let mut dy = chol.solve(&rhs);
    let rhs_norm = rhs.norm();
    for _ in 0..4 {
        let resid = &rhs - schur * &dy;
        if resid.norm() <= 1e-14 * rhs_norm {
            break;
        }
        dy += chol.solve(&resid);
    }

    // ΔZ = R_d − Aᵀ(Δy)
    let mut dz = r_d.clone();
    for (k, row) in asm.rows.iter().enumerate() {
        row.add_scaled_to(&mut dz, -dy[k]);
    }

    // ΔX = R_c − W·ΔZ·W
    let mut dx = r_c.clone();
    dx.axpy(-1.0, &w.mul(&dz).mul(w));
    dx.symmetrize();

    // The matrix products above round; whatever error they leave in the
    // constraint image of ΔX would become a primal-feasibility floor.
    // Measure it and push it back through the same factorization, adjusting
    // Δy and ΔZ together so the dual equation stays exact.
    let err = DVector::from_iterator(
        p,
        asm.rows.iter().enumerate().map(|(k, row)| row.dot(&dx) - r_p[k]),
    );
    if err.norm() > 1e-15 * (1.0 + r_p.norm()) {
        let dy2 = chol.solve(&err);
        let mut dz2 = Blocks::zeros(asm.d, asm.m);
        for (k, row) in asm.rows.iter().enumerate() {
            row.add_scaled_to(&mut dz2, -dy2[k]);
        }
        let mut fix = w.mul(&dz2).mul(w);
        fix.symmetrize();
        dx.axpy(1.0, &fix);
        dz.axpy(1.0, &dz2);
        dy += dy2;
    }

    if dx.is_finite() && dz.is_finite() && dy.iter().all(|v| v.is_finite()) {
        Some((dx, dy, dz))
    } else {
        None
    }
}

fn finalize(
    problem: &SdpProblem,
    asm: &Assembly,
    x: &Blocks,
    status: SolveStatus,
    residuals: SolveResiduals,
    iterations: usize,
    dual_objective: f64,
) -> ConicSolution {
    let n = problem.n;
    let removed = n + problem.slack;

    // Reinsert the eliminated zero row and column.
    let wr = &x.mats[0];
    let mut w = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..2 * n {
        let Some(ri) = reduce_idx(i, removed) else { continue };
        for j in 0..2 * n {
            let Some(rj) = reduce_idx(j, removed) else { continue };
            w[(i, j)] = wr[(ri, rj)];
        }
    }

    // α_i is reported as the squared residual recomputed from the returned
    // W, plus the block's own slack above its residual. The recomputation
    // pins α to the W actually handed back, so the certificate's rebuilt
    // block is semidefinite by construction.
    let mut alphas = Vec::with_capacity(asm.m);
    for (i, term) in problem.h_list.iter().enumerate() {
        let t_i = asm.h_reduced[i].tr_product(wr);
        let r_i = (term.z - t_i) / term.sigma;
        let b = &x.mats[i + 1];
        let slack = if b[(1, 1)] > 0.0 {
            (b[(0, 0)] - b[(0, 1)] * b[(0, 1)] / b[(1, 1)]).max(0.0)
        } else {
            0.0
        };
        alphas.push(r_i * r_i + slack);
    }
    let objective = alphas.iter().sum();

    ConicSolution { w, alphas, objective, dual_objective, status, residuals, iterations }
}

/// Independent feasibility and optimality audit of a solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    /// Smallest eigenvalue of `W`.
    pub w_min_eigenvalue: f64,
    /// `|tr(M₀ W)|`.
    pub reference_residual: f64,
    /// Smallest eigenvalue over all rebuilt 2×2 residual blocks.
    pub block_min_eigenvalue: f64,
    /// Range of `α_i − (z_i − tr(H_iW))²/σ_i²` over meters.
    pub schur_tightness_min: f64,
    pub schur_tightness_max: f64,
    /// Largest `|tr(H_a W)|` over exact-angle constraints.
    pub angle_residual_max: f64,
    /// `|Σα − dual objective|`.
    pub objective_gap: f64,
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Recompute every quantity the solution claims, from the problem data and
/// the returned `W` and α's alone.
///
/// Tolerances: eigenvalues and the reference equality use `feas_tol`;
/// exact-angle equalities use `10·feas_tol` (their rows are near unit scale,
/// so that is the physical resolution of the solve); the slack of each α over
/// its squared residual must sit in `[−feas_tol·(1+|obj|), 10·gap_tol·(1+|obj|)]`;
/// the primal-dual objective gap gets `30·gap_tol·(1+|pobj|+|dobj|)` — wider
/// than the complementarity tolerance because equality residuals at the
/// `feas_tol` level, seen through the large multipliers heavily weighted
/// meters induce, shift the two objectives apart by several multiples of
/// `gap_tol` without any corresponding complementarity error. The solver
/// enforces the same window before reporting `Optimal`.
pub fn verify_certificate(
    problem: &SdpProblem,
    sol: &ConicSolution,
    opts: &SolverOptions,
) -> CertificateReport {
    let mut failures = Vec::new();
    if sol.status != SolveStatus::Optimal {
        failures.push(format!("status is {:?}, not optimal", sol.status));
    }

    let w_sym = (&sol.w + sol.w.transpose()) * 0.5;
    let w_min_eigenvalue = SymmetricEigen::new(w_sym).eigenvalues.min();
    if w_min_eigenvalue < -opts.feas_tol {
        failures.push(format!("W has eigenvalue {w_min_eigenvalue:.3e}"));
    }

    let reference_residual = problem.m0.mat.tr_product(&sol.w).abs();
    if reference_residual > opts.feas_tol {
        failures.push(format!("reference equality violated by {reference_residual:.3e}"));
    }

    let obj_scale = 1.0 + sol.objective.abs();
    let mut block_min_eigenvalue = f64::INFINITY;
    let mut schur_tightness_min = f64::INFINITY;
    let mut schur_tightness_max = f64::NEG_INFINITY;
    for (i, term) in problem.h_list.iter().enumerate() {
        let t_i = term.h.mat.tr_product(&sol.w);
        let alpha = sol.alphas[i];
        let r_i = (term.z - t_i) / term.sigma;
        // λ_min of the rebuilt block [[α, r], [r, 1]].
        let tr_half = (alpha + 1.0) / 2.0;
        let det = alpha - r_i * r_i;
        let lambda_min = tr_half - (tr_half * tr_half - det).max(0.0).sqrt();
        if lambda_min < block_min_eigenvalue {
            block_min_eigenvalue = lambda_min;
        }
        if lambda_min < -opts.feas_tol {
            failures.push(format!("{:?} block {i} has eigenvalue {lambda_min:.3e}", term.h.kind));
        }
        let slack = alpha - ((term.z - t_i) / term.sigma).powi(2);
        schur_tightness_min = schur_tightness_min.min(slack);
        schur_tightness_max = schur_tightness_max.max(slack);
    }
    if schur_tightness_min < -opts.feas_tol * obj_scale {
        failures.push(format!("α undercuts a squared residual by {:.3e}", -schur_tightness_min));
    }
    if schur_tightness_max > 10.0 * opts.gap_tol * obj_scale {
        failures.push(format!("α exceeds its squared residual by {schur_tightness_max:.3e}"));
    }

    let mut angle_residual_max = 0.0f64;
    for ac in &problem.angle_constraints {
        angle_residual_max = angle_residual_max.max(ac.h.mat.tr_product(&sol.w).abs());
    }
    if angle_residual_max > 10.0 * opts.feas_tol {
        failures.push(format!("angle equality violated by {angle_residual_max:.3e}"));
    }

    let objective_gap = (sol.objective - sol.dual_objective).abs();
    let pd_scale = 1.0 + sol.objective.abs() + sol.dual_objective.abs();
    if objective_gap > 30.0 * opts.gap_tol * pd_scale {
        failures.push(format!("primal-dual objective gap {objective_gap:.3e}"));
    }

    let passed = failures.is_empty();
    CertificateReport {
        w_min_eigenvalue,
        reference_residual,
        block_min_eigenvalue,
        schur_tightness_min,
        schur_tightness_max,
        angle_residual_max,
        objective_gap,
        passed,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measurement::{
        add_noise, add_pmu_angles, generate_true_measurements, sample_placement, Fractions,
        Location, Measurement, MeasurementSet, MeterKind, SigmaConfig,
    };
    use crate::network::{build_admittance, parse_json_case, AdmittanceSet, NetworkCase};
    use crate::power_flow::{solve_newton, NewtonOptions};
    use crate::relaxation::assemble;
    use crate::wls::{solve_wls, WlsOptions};

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

    fn solved_full_set(case: &NetworkCase) -> (AdmittanceSet, MeasurementSet) {
        let adm = build_admittance(case).unwrap();
        let sol = solve_newton(case, &adm, NewtonOptions::default()).unwrap();
        let set = generate_true_measurements(case, &adm, &sol, &SigmaConfig::default());
        (adm, set)
    }

    #[test]
    fn lone_magnitude_meter_solves_analytically() {
        let case = parse_json_case(
            r#"{"base_mva": 100.0, "buses": [{"id": 1, "kind": "slack"}], "branches": []}"#,
        )
        .unwrap();
        let adm = build_admittance(&case).unwrap();
        let set = MeasurementSet {
            measurements: vec![Measurement {
                kind: MeterKind::VMagnitude,
                location: Location::Bus { bus: 0 },
                value: 1.0,
                sigma: 0.004,
            }],
            ..Default::default()
        };
        let problem = assemble(&set, &case, &adm).unwrap();
        let sol = solve(&problem, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.objective <= 1e-6, "objective {}", sol.objective);
        assert!(sol.alphas[0] <= 1e-6);
        assert!((sol.w[(0, 0)] - 1.0).abs() < 1e-5, "W00 {}", sol.w[(0, 0)]);
        // The eliminated reference coordinate comes back as exact zeros.
        assert_eq!(sol.w[(1, 1)], 0.0);
        assert_eq!(sol.w[(0, 1)], 0.0);
        assert!((problem.h_list[0].h.mat.tr_product(&sol.w) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn noise_free_full_set_recovers_the_truth_matrix() {
        let case = ring4();
        let (adm, set) = solved_full_set(&case);
        let problem = assemble(&set, &case, &adm).unwrap();
        let sol = solve(&problem, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!(sol.objective <= 1e-6, "objective {}", sol.objective);

        let truth = set.truth.as_ref().unwrap();
        let n = case.n();
        for i in 0..n {
            for j in 0..n {
                let expect = truth[i].re * truth[j].re;
                assert!(
                    (sol.w[(i, j)] - expect).abs() < 1e-4,
                    "W({i},{j}) = {} vs {}",
                    sol.w[(i, j)],
                    expect
                );
            }
        }
        assert!(sol.iterations < 60, "{} iterations", sol.iterations);
    }

    #[test]
    fn repeated_solves_are_bitwise_identical() {
        let case = ring4();
        let (adm, set) = solved_full_set(&case);
        let noisy = add_noise(&set, 5);
        let problem = assemble(&noisy, &case, &adm).unwrap();
        let a = solve(&problem, &SolverOptions::default());
        let b = solve(&problem, &SolverOptions::default());
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.w, b.w);
    }

    #[test]
    fn objective_scales_inversely_with_squared_sigma() {
        let case = ring4();
        let (adm, set) = solved_full_set(&case);
        let noisy = add_noise(&set, 9);
        let mut doubled = noisy.clone();
        for m in &mut doubled.measurements {
            m.sigma *= 2.0;
        }
        let p1 = assemble(&noisy, &case, &adm).unwrap();
        let p2 = assemble(&doubled, &case, &adm).unwrap();
        let s1 = solve(&p1, &SolverOptions::default());
        let s2 = solve(&p2, &SolverOptions::default());
        assert_eq!(s1.status, SolveStatus::Optimal);
        assert_eq!(s2.status, SolveStatus::Optimal);
        assert!(
            (s1.objective - 4.0 * s2.objective).abs() <= 1e-4 * (1.0 + s1.objective),
            "J(σ) = {}, 4·J(2σ) = {}",
            s1.objective,
            4.0 * s2.objective
        );
        // The fitted values tr(H·W) are pinned by strict convexity in the
        // residuals; W itself may drift slightly along flat directions of
        // the optimal face, so it gets a looser bound.
        for (t1, t2) in p1.h_list.iter().zip(&p2.h_list) {
            let f1 = t1.h.mat.tr_product(&s1.w);
            let f2 = t2.h.mat.tr_product(&s2.w);
            assert!((f1 - f2).abs() < 1e-4, "fitted values differ: {f1} vs {f2}");
        }
        let drift = (&s1.w - &s2.w).abs().max();
        assert!(drift < 1e-3, "W drift between scaled problems: {drift:.3e}");
    }

    #[test]
    fn relaxation_objective_lower_bounds_weighted_least_squares() {
        let case = ring4();
        let (adm, set) = solved_full_set(&case);
        for seed in [1, 2, 3, 4, 5] {
            let sub = sample_placement(&set, &case, &adm, &Fractions::uniform(0.7), seed).unwrap();
            let noisy = add_noise(&sub, seed + 100);
            let problem = assemble(&noisy, &case, &adm).unwrap();
            let sdp = solve(&problem, &SolverOptions::default());
            let wls = solve_wls(&noisy, &case, &adm, &WlsOptions::default()).unwrap();
            assert_eq!(sdp.status, SolveStatus::Optimal, "seed {seed}");
            assert!(wls.converged);
            assert!(
                sdp.objective <= wls.objective + 1e-6,
                "seed {seed}: SDP {} vs WLS {}",
                sdp.objective,
                wls.objective
            );
        }
    }

    #[test]
    fn exact_angle_rows_hold_at_the_optimum() {
        let case = ring4();
        let (adm, set) = solved_full_set(&case);
        let with_pmu = add_pmu_angles(&set, 0.5, 3).unwrap();
        let noisy = add_noise(&with_pmu, 17);
        let problem = assemble(&noisy, &case, &adm).unwrap();
        assert!(!problem.angle_constraints.is_empty());
        let sol = solve(&problem, &SolverOptions::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        for ac in &problem.angle_constraints {
            let r = ac.h.mat.tr_product(&sol.w).abs();
            assert!(r <= 1e-7, "bus {} angle residual {r}", ac.bus);
        }
    }

    #[test]
    fn certificate_accepts_optimal_solves_and_rejects_tampering() {
        let case = ring4();
        let (adm, set) = solved_full_set(&case);
        let noisy = add_noise(&set, 23);
        let problem = assemble(&noisy, &case, &adm).unwrap();
        let opts = SolverOptions::default();
        let sol = solve(&problem, &opts);
        assert_eq!(sol.status, SolveStatus::Optimal);

        let report = verify_certificate(&problem, &sol, &opts);
        assert!(report.passed, "failures: {:?}", report.failures);
        assert!(report.angle_residual_max == 0.0);
        assert!(report.schur_tightness_min >= -opts.feas_tol);

        // Zeroing W leaves every nonzero reading unexplained: the rebuilt
        // blocks go indefinite, magnitude blocks among them.
        let mut zeroed = sol.clone();
        zeroed.w.fill(0.0);
        let bad = verify_certificate(&problem, &zeroed, &opts);
        assert!(!bad.passed);
        assert!(bad.block_min_eigenvalue < -opts.feas_tol);
        assert!(bad.failures.iter().any(|f| f.contains("VMagnitude")));

        // A surgical bump on the reference coordinate is reported exactly.
        let mut bumped = sol.clone();
        let r = case.n() + case.slack_index;
        bumped.w[(r, r)] += 1e-3;
        let bad = verify_certificate(&problem, &bumped, &opts);
        assert!(!bad.passed);
        assert!((bad.reference_residual - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn iteration_cap_is_honored() {
        let case = ring4();
        let (adm, set) = solved_full_set(&case);
        let noisy = add_noise(&set, 31);
        let problem = assemble(&noisy, &case, &adm).unwrap();
        let sol = solve(&problem, &SolverOptions { max_iter: 1, ..Default::default() });
        assert_ne!(sol.status, SolveStatus::Optimal);
        assert!(sol.iterations <= 1);
        assert!(sol.residuals.relative_gap.is_finite());
    }

    #[test]
    fn solutions_serialize_with_full_matrix_content() {
        let case = ring4();
        let (adm, set) = solved_full_set(&case);
        let problem = assemble(&set, &case, &adm).unwrap();
        let sol = solve(&problem, &SolverOptions::default());
        let text = serde_json::to_string(&sol).unwrap();
        let back: ConicSolution = serde_json::from_str(&text).unwrap();
        assert_eq!(back.w, sol.w);
        assert_eq!(back.alphas, sol.alphas);
        assert!(matches!(back.status, SolveStatus::Optimal));
    }

    #[test]
    #[ignore = "diagnostic sweep, run by hand"]
    fn floor_study() {
        let path = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR"))
            .join("../../cases/ieee14.m");
        let case = crate::network::parse_case_file(&path).unwrap();
        let adm = build_admittance(&case).unwrap();
        let pf = solve_newton(&case, &adm, NewtonOptions::default()).unwrap();
        let full = generate_true_measurements(&case, &adm, &pf, &SigmaConfig::default());
        let mut worst_rel = 0.0f64;
        let mut worst_margin = f64::NEG_INFINITY;
        let mut failures = 0;
        let only: Option<u64> =
            std::env::var("FLOOR_SEED").ok().and_then(|s| s.parse().ok());
        let pmu = std::env::var("FLOOR_PMU").is_ok();
        for seed in 0..50u64 {
            if only.is_some_and(|o| o != seed) {
                continue;
            }
            let frac = if pmu { 0.5 } else { 0.7 };
            let sub =
                sample_placement(&full, &case, &adm, &Fractions::uniform(frac), seed).unwrap();
            let mut noisy = add_noise(&sub, seed ^ 0xabcd);
            if pmu {
                noisy = add_pmu_angles(&noisy, 0.5, seed ^ 0x77).unwrap();
            }
            let problem = assemble(&noisy, &case, &adm).unwrap();
            let sol = solve(&problem, &SolverOptions::default());
            let wls = solve_wls(&noisy, &case, &adm, &WlsOptions::default()).unwrap();
            let margin = sol.objective - wls.objective;
            let angle_max = problem
                .angle_constraints
                .iter()
                .map(|ac| ac.h.mat.tr_product(&sol.w).abs())
                .fold(0.0f64, f64::max);
            println!(
                "seed {seed:2}  {:?}  it {:3}  rel {:.3e}  pinf {:.3e}  angle {:.3e}  pobj {:.6}  wls {:.6}  pobj-wls {:+.3e}",
                sol.status,
                sol.iterations,
                sol.residuals.relative_gap,
                sol.residuals.primal,
                angle_max,
                sol.objective,
                wls.objective,
                margin
            );
            if sol.status != SolveStatus::Optimal {
                failures += 1;
                let eig = SymmetricEigen::new(sol.w.clone());
                let mut lams: Vec<f64> = eig.eigenvalues.iter().copied().collect();
                lams.sort_by(|a, b| b.partial_cmp(a).unwrap());
                println!(
                    "  stall diag: tr(W) {:.3e}  top λ {:?}",
                    sol.w.trace(),
                    &lams[..4.min(lams.len())]
                );
            }
            worst_rel = worst_rel.max(sol.residuals.relative_gap);
            worst_margin = worst_margin.max(margin);
            let _ = sol;
        }
        println!("non-optimal {failures}/50  worst rel {worst_rel:.3e}  worst pobj-wls {worst_margin:+.3e}");
    }
}
