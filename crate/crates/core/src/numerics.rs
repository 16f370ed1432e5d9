//! Dense numerical kernels: convex QP/LP, discrete Lyapunov and Riccati
//! solvers, eigenvalue and rank helpers.
//!
//! The quadratic-program solver is an operator-splitting (ADMM) loop over the
//! stacked constraint form `l <= Mx <= u`, followed by an active-set KKT
//! polish that refines the splitting iterate to machine precision whenever
//! the guessed active set verifies. Linear programs reuse the same core with
//! a zero quadratic term and a large bounding box on the variables so that
//! unboundedness surfaces as a certificate instead of a drift to infinity.
//!
//! Everything here is dense and double precision; problem sizes in this crate
//! stay in the tens of variables, so factorizations are refreshed per solve
//! and reused across ADMM iterations.

use nalgebra::{DMatrix, DVector};

/// Dense real matrix used across the crate.
pub type Matrix = DMatrix<f64>;
/// Dense real column vector used across the crate.
pub type Vector = DVector<f64>;

/// Shared tolerances for the solvers in this module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericsConfig {
    /// Primal feasibility tolerance on constraint violations.
    pub tol_feas: f64,
    /// Stationarity / complementarity tolerance for accepted KKT points.
    pub tol_kkt: f64,
    /// Iteration cap for the splitting loop before giving up.
    pub max_iterations: usize,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        NumericsConfig { tol_feas: 1e-8, tol_kkt: 1e-6, max_iterations: 200_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// The constraints admit no point (primal infeasibility certificate).
    Infeasible,
    /// The objective decreases without bound (dual infeasibility certificate).
    Unbounded,
    /// The iteration cap was reached without a certified solution.
    MaxIterations,
    /// A Lyapunov equation was posed with a non-Schur-stable matrix.
    UnstableMatrix,
    /// The Riccati iteration found no stabilizing solution.
    NotStabilizable,
    /// Operands disagree on dimensions.
    DimensionMismatch(String),
}

impl core::fmt::Display for NumericsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            NumericsError::Infeasible => write!(f, "problem is infeasible"),
            NumericsError::Unbounded => write!(f, "problem is unbounded below"),
            NumericsError::MaxIterations => write!(f, "iteration limit reached"),
            NumericsError::UnstableMatrix => write!(f, "matrix is not Schur stable"),
            NumericsError::NotStabilizable => write!(f, "no stabilizing solution"),
            NumericsError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
        }
    }
}

impl std::error::Error for NumericsError {}

/// Solution of a QP or LP, with multipliers for both constraint blocks.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vector,
    /// Multipliers of the equality rows.
    pub eq_duals: Vector,
    /// Multipliers of the inequality rows (nonnegative at a KKT point).
    pub ineq_duals: Vector,
    pub objective: f64,
    pub iterations: usize,
    /// Stationarity residual of the returned point.
    pub kkt_residual: f64,
    /// Whether the active-set polish verified (machine-precision solution).
    pub polished: bool,
}

const ADMM_SIGMA: f64 = 1e-6;
const ADMM_RHO_INEQ: f64 = 1.0;
const ADMM_RHO_EQ: f64 = 1e3;
const ADMM_CHECK_EVERY: usize = 25;
/// Refactorize with a rebalanced penalty when the scaled primal and dual
/// residuals drift apart by more than this factor.
const ADMM_RHO_TRIGGER: f64 = 5.0;
const ADMM_ADAPT_EVERY: usize = 100;
/// A verified polish attempt runs at this cadence even before the loose
/// residual gate: stalls happen on nearly parallel active rows, where the
/// exact reduced solve succeeds long before the splitting converges.
const ADMM_POLISH_EVERY: usize = 1_000;
const LP_BOX: f64 = 1e8;

fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_finite(name: &str, data: &[f64]) -> Result<(), NumericsError> {
    if data.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::DimensionMismatch(format!("{name} contains non-finite entries")));
    }
    Ok(())
}

/// Minimizes `0.5 x'Px + q'x` subject to `A x = b` and `G x <= h`.
///
/// `p` must be symmetric positive semidefinite. Either constraint block may
/// be empty (zero rows). Returns a certified KKT point, or an infeasibility /
/// unboundedness certificate mapped onto the corresponding error.
pub fn solve_qp(
    p: &Matrix,
    q: &Vector,
    a_eq: &Matrix,
    b_eq: &Vector,
    g: &Matrix,
    h: &Vector,
    cfg: &NumericsConfig,
) -> Result<QpSolution, NumericsError> {
    solve_qp_warm(p, q, a_eq, b_eq, g, h, cfg, None)
}

/// [`solve_qp`] with an optional primal warm start.
#[allow(clippy::too_many_arguments)]
pub fn solve_qp_warm(
    p: &Matrix,
    q: &Vector,
    a_eq: &Matrix,
    b_eq: &Vector,
    g: &Matrix,
    h: &Vector,
    cfg: &NumericsConfig,
    warm: Option<&Vector>,
) -> Result<QpSolution, NumericsError> {
    solve_core(p, q, a_eq, b_eq, g, h, cfg, warm, 0)
}

/// Shared ADMM core. The last `artificial_rows` inequality rows (a bounding
/// box appended by [`solve_lp`]) are excluded from the unboundedness
/// certificate so that a genuine recession direction is still reported.
#[allow(clippy::too_many_arguments)]
fn solve_core(
    p: &Matrix,
    q: &Vector,
    a_eq: &Matrix,
    b_eq: &Vector,
    g: &Matrix,
    h: &Vector,
    cfg: &NumericsConfig,
    warm: Option<&Vector>,
    artificial_rows: usize,
) -> Result<QpSolution, NumericsError> {
    let n = q.len();
    if p.nrows() != n || p.ncols() != n {
        return Err(NumericsError::DimensionMismatch(format!(
            "P is {}x{}, expected {n}x{n}",
            p.nrows(),
            p.ncols()
        )));
    }
    if a_eq.nrows() != b_eq.len() || (a_eq.nrows() > 0 && a_eq.ncols() != n) {
        return Err(NumericsError::DimensionMismatch("equality block".into()));
    }
    if g.nrows() != h.len() || (g.nrows() > 0 && g.ncols() != n) {
        return Err(NumericsError::DimensionMismatch("inequality block".into()));
    }
    check_finite("P", p.as_slice())?;
    check_finite("q", q.as_slice())?;
    check_finite("A", a_eq.as_slice())?;
    check_finite("b", b_eq.as_slice())?;
    check_finite("G", g.as_slice())?;
    check_finite("h", h.as_slice())?;

    let me = a_eq.nrows();
    let mi = g.nrows();
    let m = me + mi;

    // Stack both blocks as l <= Mx <= u with unit-norm rows; row scales are
    // undone on the duals before returning.
    let mut mat = Matrix::zeros(m, n);
    let mut lo = Vector::from_element(m, f64::NEG_INFINITY);
    let mut up = Vector::zeros(m);
    let mut row_scale = Vector::from_element(m, 1.0);
    for i in 0..me {
        let nrm = a_eq.row(i).norm().max(1e-12);
        row_scale[i] = nrm;
        for j in 0..n {
            mat[(i, j)] = a_eq[(i, j)] / nrm;
        }
        lo[i] = b_eq[i] / nrm;
        up[i] = b_eq[i] / nrm;
    }
    for i in 0..mi {
        let nrm = g.row(i).norm().max(1e-12);
        row_scale[me + i] = nrm;
        for j in 0..n {
            mat[(me + i, j)] = g[(i, j)] / nrm;
        }
        up[me + i] = h[i] / nrm;
    }
    let mut rho =
        Vector::from_fn(m, |i, _| if i < me { ADMM_RHO_EQ } else { ADMM_RHO_INEQ });
    let mut chol = factorize_admm(p, &mat, &rho)?;

    let mut x = warm.cloned().unwrap_or_else(|| Vector::zeros(n));
    if x.len() != n {
        return Err(NumericsError::DimensionMismatch("warm start length".into()));
    }
    let mut z = Vector::zeros(m);
    let mut y = Vector::zeros(m);
    let mut v = Vector::zeros(m);
    v.gemv(1.0, &mat, &x, 0.0);
    for i in 0..m {
        z[i] = v[i].clamp(lo[i], up[i]);
    }

    let mut rhs = Vector::zeros(n);
    let mut x_prev = x.clone();
    let mut y_prev = y.clone();
    let scale_q = inf_norm(q).max(1.0);

    let mut iterations = 0;
    let mut last_adapt = 0usize;
    let mut last_polish = 0usize;
    let mut best_unpolished: Option<(Vector, Vector, f64, f64)> = None;
    while iterations < cfg.max_iterations {
        for _ in 0..ADMM_CHECK_EVERY {
            iterations += 1;
            // x-update: (P + sigma I + M' diag(rho) M) x = sigma x - q + M'(rho z - y)
            for i in 0..n {
                rhs[i] = ADMM_SIGMA * x[i] - q[i];
            }
            for r in 0..m {
                let w = rho[r] * z[r] - y[r];
                if w == 0.0 {
                    continue;
                }
                for i in 0..n {
                    rhs[i] += mat[(r, i)] * w;
                }
            }
            chol.solve_mut(&mut rhs);
            core::mem::swap(&mut x, &mut rhs);
            // z- and y-updates with projection onto [lo, up].
            v.gemv(1.0, &mat, &x, 0.0);
            for i in 0..m {
                let zi = (v[i] + y[i] / rho[i]).clamp(lo[i], up[i]);
                y[i] += rho[i] * (v[i] - zi);
                z[i] = zi;
            }
        }

        // Residuals in the original (unscaled) row geometry are bounded by the
        // scaled ones times the row norms; both are checked in scaled form.
        let mut r_prim: f64 = 0.0;
        for i in 0..m {
            r_prim = r_prim.max((v[i] - z[i]).abs());
        }
        let mut dual = q.clone();
        dual.gemv(1.0, p, &x, 1.0);
        dual.gemv_tr(1.0, &mat, &y, 1.0);
        let r_dual = inf_norm(&dual);

        let loose = r_prim <= 1e-4 && r_dual <= 1e-4 * scale_q;
        if loose || iterations - last_polish >= ADMM_POLISH_EVERY {
            last_polish = iterations;
            if let Some(sol) =
                try_polish(p, q, a_eq, b_eq, g, h, &x, &y, &row_scale, me, cfg, iterations)
            {
                return Ok(sol);
            }
        }
        if loose {
            if r_prim <= cfg.tol_feas && r_dual <= cfg.tol_kkt * scale_q {
                let (eq_duals, ineq_duals) = split_duals(&y, &row_scale, me, mi);
                best_unpolished = Some((x.clone(), dual.clone(), r_prim, r_dual));
                let (x_fin, _, _, _) = best_unpolished.unwrap();
                let objective = 0.5 * (p * &x_fin).dot(&x_fin) + q.dot(&x_fin);
                return Ok(QpSolution {
                    x: x_fin,
                    eq_duals,
                    ineq_duals,
                    objective,
                    iterations,
                    kkt_residual: r_dual,
                    polished: false,
                });
            }
        }

        // Infeasibility / unboundedness certificates from the iterate drift.
        let dy = &y - &y_prev;
        let dy_norm = inf_norm(&dy);
        if dy_norm > 1e-12 {
            let mut mt_dy = Vector::zeros(n);
            mt_dy.gemv_tr(1.0, &mat, &dy, 0.0);
            let mut support = 0.0;
            let mut lower_ok = true;
            for i in 0..m {
                if dy[i] > 0.0 {
                    support += up[i] * dy[i];
                } else if dy[i] < 0.0 {
                    if lo[i].is_finite() {
                        support += lo[i] * dy[i];
                    } else if dy[i] < -1e-8 * dy_norm {
                        lower_ok = false;
                    }
                }
            }
            if lower_ok
                && inf_norm(&mt_dy) <= 1e-7 * dy_norm
                && support <= -1e-7 * dy_norm
            {
                return Err(NumericsError::Infeasible);
            }
        }
        let dx = &x - &x_prev;
        let dx_norm = inf_norm(&dx);
        if dx_norm > 1e-12 {
            let mut p_dx = Vector::zeros(n);
            p_dx.gemv(1.0, p, &dx, 0.0);
            let mut m_dx = Vector::zeros(m);
            m_dx.gemv(1.0, &mat, &dx, 0.0);
            let mut dir_ok = true;
            for i in 0..m.saturating_sub(artificial_rows) {
                let bound = 1e-7 * dx_norm;
                if i < me {
                    if m_dx[i].abs() > bound {
                        dir_ok = false;
                    }
                } else if m_dx[i] > bound {
                    dir_ok = false;
                }
            }
            if dir_ok && inf_norm(&p_dx) <= 1e-7 * dx_norm && q.dot(&dx) <= -1e-7 * dx_norm * scale_q
            {
                return Err(NumericsError::Unbounded);
            }
        }
        // Residual balancing: when the scaled primal and dual residuals pull
        // apart, rescale the penalty toward their geometric mean and
        // refactorize. Fixed-penalty ADMM can stall on badly scaled data.
        if iterations - last_adapt >= ADMM_ADAPT_EVERY {
            last_adapt = iterations;
            let prim_ref = inf_norm(&v).max(inf_norm(&z)).max(1e-6);
            let mut px = Vector::zeros(n);
            px.gemv(1.0, p, &x, 0.0);
            let mut mty = Vector::zeros(n);
            mty.gemv_tr(1.0, &mat, &y, 0.0);
            let dual_ref = inf_norm(&px).max(inf_norm(&mty)).max(inf_norm(q)).max(1e-6);
            let ratio =
                ((r_prim / prim_ref) / (r_dual / dual_ref).max(1e-14)).sqrt();
            if ratio > ADMM_RHO_TRIGGER || ratio < 1.0 / ADMM_RHO_TRIGGER {
                for i in 0..m {
                    rho[i] = (rho[i] * ratio).clamp(1e-6, 1e9);
                }
                chol = factorize_admm(p, &mat, &rho)?;
            }
        }

        x_prev.copy_from(&x);
        y_prev.copy_from(&y);
    }

    if let Some(sol) = try_polish(p, q, a_eq, b_eq, g, h, &x, &y, &row_scale, me, cfg, iterations) {
        return Ok(sol);
    }
    let _ = best_unpolished;
    Err(NumericsError::MaxIterations)
}

/// Factorization of the x-update system `P + sigma I + M' diag(rho) M`.
fn factorize_admm(
    p: &Matrix,
    mat: &Matrix,
    rho: &Vector,
) -> Result<nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>, NumericsError> {
    let n = p.nrows();
    let m = mat.nrows();
    let mut kkt = p.clone();
    for i in 0..n {
        kkt[(i, i)] += ADMM_SIGMA;
    }
    for r in 0..m {
        let w = rho[r];
        for i in 0..n {
            let mri = mat[(r, i)];
            if mri == 0.0 {
                continue;
            }
            for j in 0..n {
                kkt[(i, j)] += w * mri * mat[(r, j)];
            }
        }
    }
    nalgebra::linalg::Cholesky::new(kkt)
        .ok_or_else(|| NumericsError::DimensionMismatch("QP Hessian is not PSD".into()))
}

fn split_duals(y: &Vector, row_scale: &Vector, me: usize, mi: usize) -> (Vector, Vector) {
    let eq = Vector::from_fn(me, |i, _| y[i] / row_scale[i]);
    let ineq = Vector::from_fn(mi, |i, _| (y[me + i] / row_scale[me + i]).max(0.0));
    (eq, ineq)
}

/// Active-set refinement: guesses the active inequality rows from the ADMM
/// iterate, solves the reduced KKT equalities through a regularized
/// quasi-definite factorization, and accepts the result only if primal
/// feasibility, stationarity, complementarity and dual signs all verify.
#[allow(clippy::too_many_arguments)]
fn try_polish(
    p: &Matrix,
    q: &Vector,
    a_eq: &Matrix,
    b_eq: &Vector,
    g: &Matrix,
    h: &Vector,
    x_admm: &Vector,
    y_admm: &Vector,
    row_scale: &Vector,
    me: usize,
    cfg: &NumericsConfig,
    iterations: usize,
) -> Option<QpSolution> {
    let n = q.len();
    let mi = g.nrows();
    let mut active: Vec<usize> = Vec::new();
    for i in 0..mi {
        let slack = h[i] - g.row(i).dot(&x_admm.transpose());
        let dual = y_admm[me + i] / row_scale[me + i];
        if dual > 1e-10 || slack < 1e-6 * (1.0 + h[i].abs()) {
            active.push(i);
        }
    }

    let max_rounds = 3 * (n + me + mi) + 10;
    for _round in 0..max_rounds {
        let na = active.len();
        let dim = n + me + na;
        let mut kkt = Matrix::zeros(dim, dim);
        let mut rhs = Vector::zeros(dim);
        for i in 0..n {
            for j in 0..n {
                kkt[(i, j)] = p[(i, j)];
            }
            kkt[(i, i)] += 1e-10;
            rhs[i] = -q[i];
        }
        for r in 0..me {
            for j in 0..n {
                kkt[(n + r, j)] = a_eq[(r, j)];
                kkt[(j, n + r)] = a_eq[(r, j)];
            }
            kkt[(n + r, n + r)] = -1e-10;
            rhs[n + r] = b_eq[r];
        }
        for (k, &r) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + me + k, j)] = g[(r, j)];
                kkt[(j, n + me + k)] = g[(r, j)];
            }
            kkt[(n + me + k, n + me + k)] = -1e-10;
            rhs[n + me + k] = h[r];
        }
        let lu = kkt.clone().lu();
        let mut sol = lu.solve(&rhs)?;
        // Refine against the KKT system without the proximal shifts, keeping
        // the shifted factorization as the preconditioner. Near-parallel
        // active rows carry huge multipliers, and even a 1e-10 shift then
        // biases the active slacks past the feasibility tolerance.
        for _ in 0..3 {
            let mut resid = rhs.clone();
            resid.gemv(-1.0, &kkt, &sol, 1.0);
            for i in 0..dim {
                resid[i] += if i < n { 1e-10 } else { -1e-10 } * sol[i];
            }
            match lu.solve(&resid) {
                Some(corr) => sol += corr,
                None => break,
            }
        }

        let x = Vector::from_fn(n, |i, _| sol[i]);
        let eq_duals = Vector::from_fn(me, |i, _| sol[n + i]);
        let mut ineq_duals = Vector::zeros(mi);
        let mut most_negative: Option<(usize, f64)> = None;
        for (k, &r) in active.iter().enumerate() {
            let lam = sol[n + me + k];
            if lam < -1e-9 {
                if most_negative.map_or(true, |(_, worst)| lam < worst) {
                    most_negative = Some((k, lam));
                }
            } else {
                ineq_duals[r] = lam.max(0.0);
            }
        }
        let mut worst_violated: Option<(usize, f64)> = None;
        for i in 0..mi {
            if active.contains(&i) {
                continue;
            }
            let slack = h[i] - g.row(i).dot(&x.transpose());
            let excess = -slack / g.row(i).norm().max(1e-12);
            if slack < -cfg.tol_feas && worst_violated.map_or(true, |(_, w)| excess > w) {
                worst_violated = Some((i, excess));
            }
        }
        if most_negative.is_none() && worst_violated.is_none() {
            // Verify the full KKT conditions before accepting.
            let mut stat = q.clone();
            stat.gemv(1.0, p, &x, 1.0);
            stat.gemv_tr(1.0, a_eq, &eq_duals, 1.0);
            stat.gemv_tr(1.0, g, &ineq_duals, 1.0);
            let ok_stat = inf_norm(&stat) <= cfg.tol_kkt * (1.0 + inf_norm(q));
            let mut ok_feas = true;
            for r in 0..me {
                if (a_eq.row(r).dot(&x.transpose()) - b_eq[r]).abs()
                    > cfg.tol_feas * (1.0 + b_eq[r].abs())
                {
                    ok_feas = false;
                }
            }
            let mut ok_comp = true;
            for i in 0..mi {
                let slack = h[i] - g.row(i).dot(&x.transpose());
                if slack < -cfg.tol_feas * (1.0 + h[i].abs()) {
                    ok_feas = false;
                }
                if ineq_duals[i] * slack.max(0.0) > cfg.tol_kkt * (1.0 + h[i].abs()) {
                    ok_comp = false;
                }
            }
            if ok_stat && ok_feas && ok_comp {
                let objective = 0.5 * (p * &x).dot(&x) + q.dot(&x);
                return Some(QpSolution {
                    kkt_residual: inf_norm(&stat),
                    x,
                    eq_duals,
                    ineq_duals,
                    objective,
                    iterations,
                    polished: true,
                });
            }
            return None;
        }
        // One exchange per round: pin the worst violated row first; only
        // when primal-feasible drop the most negative multiplier. Dropping
        // several rows at once can unpin the iterate entirely (the objective
        // alone bounds nothing in an LP) and cycle.
        if let Some((row, _)) = worst_violated {
            active.push(row);
            active.sort_unstable();
        } else if let Some((k, _)) = most_negative {
            active.remove(k);
        }
    }
    None
}

/// Minimizes `c'x` subject to `A x = b`, `G x <= h`.
///
/// Runs as a QP with zero quadratic term plus a large variable box; a
/// solution pinned to that artificial box is reported as unbounded.
pub fn solve_lp(
    c: &Vector,
    a_eq: &Matrix,
    b_eq: &Vector,
    g: &Matrix,
    h: &Vector,
    cfg: &NumericsConfig,
) -> Result<QpSolution, NumericsError> {
    let n = c.len();
    let mi = g.nrows();
    let mut g_box = Matrix::zeros(mi + 2 * n, n);
    let mut h_box = Vector::zeros(mi + 2 * n);
    for i in 0..mi {
        for j in 0..n {
            g_box[(i, j)] = g[(i, j)];
        }
        h_box[i] = h[i];
    }
    for j in 0..n {
        g_box[(mi + 2 * j, j)] = 1.0;
        h_box[mi + 2 * j] = LP_BOX;
        g_box[(mi + 2 * j + 1, j)] = -1.0;
        h_box[mi + 2 * j + 1] = LP_BOX;
    }
    let p = Matrix::zeros(n, n);
    let mut sol = solve_core(&p, c, a_eq, b_eq, &g_box, &h_box, cfg, None, 2 * n)?;
    if sol.x.iter().any(|v| v.abs() >= 0.99 * LP_BOX) {
        return Err(NumericsError::Unbounded);
    }
    sol.ineq_duals = Vector::from_fn(mi, |i, _| sol.ineq_duals[i]);
    Ok(sol)
}

/// Solves `M' S M - S = -W` for symmetric `S` by squared-power accumulation.
///
/// Requires the spectral radius of `M` to be strictly inside the unit circle;
/// the accumulation `S = sum_j (M^j)' W M^j` then converges quadratically
/// because the powers of `M` are squared at every step.
pub fn solve_discrete_lyapunov(m: &Matrix, w: &Matrix) -> Result<Matrix, NumericsError> {
    let n = m.nrows();
    if m.ncols() != n || w.nrows() != n || w.ncols() != n {
        return Err(NumericsError::DimensionMismatch("Lyapunov operands".into()));
    }
    if spectral_radius(m) >= 1.0 - 1e-12 {
        return Err(NumericsError::UnstableMatrix);
    }
    let mut s = w.clone();
    let mut mk = m.clone();
    for _ in 0..128 {
        let incr = mk.transpose() * &s * &mk;
        let delta = incr.amax();
        s += incr;
        if delta <= 1e-300 || delta <= 1e-16 * s.amax() {
            break;
        }
        mk = &mk * &mk;
    }
    // Symmetrize to scrub accumulation round-off.
    let s = (&s + s.transpose()) * 0.5;
    Ok(s)
}

fn spectral_radius(m: &Matrix) -> f64 {
    m.complex_eigenvalues().iter().fold(0.0, |acc, c| acc.max(c.norm()))
}

/// Infinite-horizon LQR gain for `x+ = Ax + Bu` with stage weights `Q`, `R`.
///
/// Fixed-point Riccati iteration, stopped when successive cost matrices agree
/// to `1e-10` in the max norm. Returns `(K, P)` with `u = Kx` stabilizing.
pub fn lqr_gain(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
) -> Result<(Matrix, Matrix), NumericsError> {
    let n = a.nrows();
    let nu = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n {
        return Err(NumericsError::DimensionMismatch("Riccati operands".into()));
    }
    if r.nrows() != nu || r.ncols() != nu {
        return Err(NumericsError::DimensionMismatch("Riccati input weight".into()));
    }
    let mut p = q.clone();
    let mut converged = false;
    for _ in 0..500_000 {
        let btpa = b.transpose() * &p * a;
        let gram = r + b.transpose() * &p * b;
        let inv = gram
            .clone()
            .try_inverse()
            .ok_or(NumericsError::NotStabilizable)?;
        let next = q + a.transpose() * &p * a - btpa.transpose() * &inv * &btpa;
        let diff = (&next - &p).amax();
        p = next;
        if !p.iter().all(|v| v.is_finite()) || p.amax() > 1e14 {
            return Err(NumericsError::NotStabilizable);
        }
        if diff <= 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::NotStabilizable);
    }
    let gram = r + b.transpose() * &p * b;
    let inv = gram.try_inverse().ok_or(NumericsError::NotStabilizable)?;
    let k = -(&inv * b.transpose() * &p * a);
    if spectral_radius(&(a + b * &k)) >= 1.0 {
        return Err(NumericsError::NotStabilizable);
    }
    Ok((k, p))
}

/// Smallest eigenvalue of a symmetric matrix (symmetrized defensively).
pub fn min_eigenvalue(m: &Matrix) -> Result<f64, NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::DimensionMismatch("eigenvalue operand".into()));
    }
    if m.nrows() == 0 {
        return Err(NumericsError::DimensionMismatch("empty matrix".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::linalg::SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b)))
}

/// Numerical rank via singular values above `max(nrows, ncols) * eps * s_max`.
pub fn rank(m: &Matrix) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    if smax == 0.0 {
        return 0;
    }
    let tol = (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * smax;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_eq(n: usize) -> (Matrix, Vector) {
        (Matrix::zeros(0, n), Vector::zeros(0))
    }

    /// Brute-force QP oracle: enumerates every active-set candidate, solves
    /// the induced equality system and keeps the best KKT-consistent point.
    fn oracle_qp(
        p: &Matrix,
        q: &Vector,
        a_eq: &Matrix,
        b_eq: &Vector,
        g: &Matrix,
        h: &Vector,
    ) -> Option<(Vector, f64)> {
        let n = q.len();
        let mi = g.nrows();
        let me = a_eq.nrows();
        let mut best: Option<(Vector, f64)> = None;
        for mask in 0..(1usize << mi) {
            let active: Vec<usize> = (0..mi).filter(|i| mask & (1 << i) != 0).collect();
            let na = active.len();
            let dim = n + me + na;
            let mut kkt = Matrix::zeros(dim, dim);
            let mut rhs = Vector::zeros(dim);
            for i in 0..n {
                for j in 0..n {
                    kkt[(i, j)] = p[(i, j)];
                }
                rhs[i] = -q[i];
            }
            for r in 0..me {
                for j in 0..n {
                    kkt[(n + r, j)] = a_eq[(r, j)];
                    kkt[(j, n + r)] = a_eq[(r, j)];
                }
                rhs[n + r] = b_eq[r];
            }
            for (k, &r) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + me + k, j)] = g[(r, j)];
                    kkt[(j, n + me + k)] = g[(r, j)];
                }
                rhs[n + me + k] = h[r];
            }
            let Some(sol) = kkt.full_piv_lu().solve(&rhs) else { continue };
            let x = Vector::from_fn(n, |i, _| sol[i]);
            if !x.iter().all(|v| v.is_finite()) {
                continue;
            }
            let feasible = (0..mi).all(|i| g.row(i).dot(&x.transpose()) <= h[i] + 1e-7)
                && (0..me).all(|r| (a_eq.row(r).dot(&x.transpose()) - b_eq[r]).abs() <= 1e-7);
            let duals_ok = (0..na).all(|k| sol[n + me + k] >= -1e-7);
            if !feasible || !duals_ok {
                continue;
            }
            let obj = 0.5 * (p * &x).dot(&x) + q.dot(&x);
            if best.as_ref().map_or(true, |(_, b)| obj < b - 1e-12) {
                best = Some((x, obj));
            }
        }
        best
    }

    #[test]
    fn qp_projection_onto_halfplane() {
        // min ||x - (2, 0)||^2 with x1 <= 1: solution (1, 0).
        let p = Matrix::identity(2, 2) * 2.0;
        let q = Vector::from_vec(vec![-4.0, 0.0]);
        let (ae, be) = empty_eq(2);
        let g = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let h = Vector::from_vec(vec![1.0]);
        let sol = solve_qp(&p, &q, &ae, &be, &g, &h, &NumericsConfig::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-7, "x0 = {}", sol.x[0]);
        assert!(sol.x[1].abs() < 1e-7);
        assert!(sol.polished);
        assert!((sol.ineq_duals[0] - 2.0).abs() < 1e-6, "multiplier {}", sol.ineq_duals[0]);
    }

    #[test]
    fn qp_equality_constrained() {
        // min x1^2 + x2^2 with x1 + x2 = 2: solution (1, 1).
        let p = Matrix::identity(2, 2) * 2.0;
        let q = Vector::zeros(2);
        let ae = Matrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let be = Vector::from_vec(vec![2.0]);
        let g = Matrix::zeros(0, 2);
        let h = Vector::zeros(0);
        let sol = solve_qp(&p, &q, &ae, &be, &g, &h, &NumericsConfig::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-8);
        assert!((sol.x[1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn qp_detects_infeasible() {
        let p = Matrix::identity(1, 1);
        let q = Vector::zeros(1);
        let (ae, be) = empty_eq(1);
        let g = Matrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = Vector::from_vec(vec![-1.0, -1.0]); // x <= -1 and x >= 1
        let err = solve_qp(&p, &q, &ae, &be, &g, &h, &NumericsConfig::default()).unwrap_err();
        assert_eq!(err, NumericsError::Infeasible);
    }

    #[test]
    fn lp_matches_vertex_and_detects_unbounded() {
        // min -x1 - x2 over the triangle x >= 0, x1 + x2 <= 2.
        let c = Vector::from_vec(vec![-1.0, -1.0]);
        let (ae, be) = empty_eq(2);
        let g = Matrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let h = Vector::from_vec(vec![0.0, 0.0, 2.0]);
        let sol = solve_lp(&c, &ae, &be, &g, &h, &NumericsConfig::default()).unwrap();
        assert!((sol.objective + 2.0).abs() < 1e-6, "objective {}", sol.objective);

        let g_open = Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let h_open = Vector::from_vec(vec![0.0, 0.0]);
        let err = solve_lp(&c, &ae, &be, &g_open, &h_open, &NumericsConfig::default()).unwrap_err();
        assert_eq!(err, NumericsError::Unbounded);
    }

    #[test]
    fn qp_agrees_with_active_set_oracle_on_fixed_instances() {
        // A batch of deterministic instances with varying active sets.
        let cases: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = vec![
            (
                vec![2.0, 0.5, 0.5, 1.0],
                vec![-1.0, -2.0],
                vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0, 1.0, 2.0],
                vec![0.5, 10.0, 0.0, 3.0],
            ),
            (
                vec![4.0, 1.0, 1.0, 3.0],
                vec![3.0, -4.0],
                vec![1.0, 1.0, -1.0, 2.0, 2.0, -1.0, 0.0, -1.0],
                vec![1.0, 2.0, 4.0, 0.0],
            ),
            (
                vec![1.0, 0.0, 0.0, 1.0],
                vec![0.0, 0.0],
                vec![-1.0, 0.0, 0.0, -1.0, 1.0, 1.0, -1.0, -2.0],
                vec![-1.0, -1.0, 5.0, -2.5],
            ),
        ];
        for (pd, qd, gd, hd) in cases {
            let p = Matrix::from_row_slice(2, 2, &pd);
            let q = Vector::from_vec(qd);
            let g = Matrix::from_row_slice(4, 2, &gd);
            let h = Vector::from_vec(hd);
            let (ae, be) = empty_eq(2);
            let oracle = oracle_qp(&p, &q, &ae, &be, &g, &h).expect("oracle found optimum");
            let sol = solve_qp(&p, &q, &ae, &be, &g, &h, &NumericsConfig::default()).unwrap();
            assert!(
                (sol.objective - oracle.1).abs() <= 1e-6 * (1.0 + oracle.1.abs()),
                "objective {} vs oracle {}",
                sol.objective,
                oracle.1
            );
            assert!((&sol.x - &oracle.0).amax() <= 1e-5, "x {:?} vs {:?}", sol.x, oracle.0);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]
        #[test]
        fn qp_never_beats_oracle_and_stays_feasible(
            l11 in 0.5f64..2.0, l21 in -1.0f64..1.0, l22 in 0.5f64..2.0,
            q1 in -3.0f64..3.0, q2 in -3.0f64..3.0,
            h1 in 0.2f64..3.0, h2 in 0.2f64..3.0, h3 in 0.2f64..3.0,
        ) {
            // P = L L' is PD by construction; box plus diagonal cut.
            let l = Matrix::from_row_slice(2, 2, &[l11, 0.0, l21, l22]);
            let p = &l * l.transpose();
            let q = Vector::from_vec(vec![q1, q2]);
            let g = Matrix::from_row_slice(5, 2, &[
                1.0, 0.0,
                -1.0, 0.0,
                0.0, 1.0,
                0.0, -1.0,
                1.0, 1.0,
            ]);
            let h = Vector::from_vec(vec![h1, h1, h2, h2, h3]);
            let (ae, be) = empty_eq(2);
            let oracle = oracle_qp(&p, &q, &ae, &be, &g, &h).expect("bounded instance");
            let sol = solve_qp(&p, &q, &ae, &be, &g, &h, &NumericsConfig::default()).unwrap();
            for i in 0..g.nrows() {
                proptest::prop_assert!(g.row(i).dot(&sol.x.transpose()) <= h[i] + 1e-6);
            }
            proptest::prop_assert!((sol.objective - oracle.1).abs() <= 1e-5 * (1.0 + oracle.1.abs()));
        }
    }

    #[test]
    fn lyapunov_scalar_geometric_series() {
        // m = 0.5, w = 1: s = 1 / (1 - 0.25) = 4/3.
        let m = Matrix::from_row_slice(1, 1, &[0.5]);
        let w = Matrix::identity(1, 1);
        let s = solve_discrete_lyapunov(&m, &w).unwrap();
        assert!((s[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn lyapunov_residual_below_tolerance() {
        let m = Matrix::from_row_slice(3, 3, &[0.4, 0.2, 0.0, -0.1, 0.5, 0.1, 0.0, 0.3, -0.6]);
        let w0 = Matrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 3.0]);
        let s = solve_discrete_lyapunov(&m, &w0).unwrap();
        let resid = (m.transpose() * &s * &m - &s + &w0).amax();
        assert!(resid <= 1e-8, "residual {resid}");
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let m = Matrix::from_row_slice(1, 1, &[1.0]);
        let w = Matrix::identity(1, 1);
        assert_eq!(solve_discrete_lyapunov(&m, &w).unwrap_err(), NumericsError::UnstableMatrix);
    }

    #[test]
    fn lqr_scalar_golden_ratio() {
        // a = b = q = r = 1: p solves p^2 - p - 1 = 0, k = -p / (1 + p).
        let one = Matrix::identity(1, 1);
        let (k, p) = lqr_gain(&one, &one, &one, &one).unwrap();
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        assert!((p[(0, 0)] - phi).abs() < 1e-9);
        assert!((k[(0, 0)] + phi / (1.0 + phi)).abs() < 1e-9);
    }

    #[test]
    fn lqr_stabilizes_benchmark_plant() {
        let a = Matrix::from_row_slice(2, 2, &[1.1, 2.0, 0.0, 0.95]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 0.079]);
        let q = Matrix::identity(2, 2);
        let r = Matrix::identity(1, 1);
        let (k, p) = lqr_gain(&a, &b, &q, &r).unwrap();
        let acl = &a + &b * &k;
        assert!(spectral_radius(&acl) < 1.0);
        // Riccati residual of the returned pair.
        let btpa = b.transpose() * &p * &a;
        let gram = &r + b.transpose() * &p * &b;
        let resid = (&q + a.transpose() * &p * &a
            - btpa.transpose() * gram.try_inverse().unwrap() * &btpa
            - &p)
            .amax();
        assert!(resid < 1e-8, "residual {resid}");
    }

    #[test]
    fn lqr_rejects_uncontrollable_unstable_mode() {
        let a = Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let b = Matrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = Matrix::identity(2, 2);
        let r = Matrix::identity(1, 1);
        assert!(lqr_gain(&a, &b, &q, &r).is_err());
    }

    /// Characteristic-polynomial oracle: coefficients via Faddeev-LeVerrier,
    /// then bisection on sign changes over the Gershgorin interval.
    fn oracle_min_eig(m: &Matrix) -> f64 {
        let n = m.nrows();
        let mut coeffs = vec![1.0f64]; // leading coefficient of lambda^n
        let mut mk = m.clone();
        let mut c = Vec::new();
        for k in 1..=n {
            let ck = -mk.trace() / k as f64;
            c.push(ck);
            if k < n {
                mk = m * (&mk + Matrix::identity(n, n) * ck);
            }
        }
        coeffs.extend(c);
        let eval = |x: f64| coeffs.iter().fold(0.0, |acc, &co| acc * x + co);
        let bound = (0..n)
            .map(|i| (0..n).map(|j| m[(i, j)].abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let (mut lo, mut hi) = (-bound - 1.0, bound + 1.0);
        // March up from the lower bound to the first sign change.
        let steps = 40_000;
        let dx = (hi - lo) / steps as f64;
        let mut prev = eval(lo);
        let mut found = None;
        for i in 1..=steps {
            let x = lo + dx * i as f64;
            let v = eval(x);
            if prev == 0.0 {
                found = Some((lo + dx * (i - 1) as f64, lo + dx * (i - 1) as f64));
                break;
            }
            if prev.signum() != v.signum() {
                found = Some((x - dx, x));
                break;
            }
            prev = v;
        }
        let (mut a, mut b) = found.expect("eigenvalue bracket");
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if eval(a).signum() == eval(mid).signum() {
                a = mid;
            } else {
                b = mid;
            }
        }
        let _ = &mut lo;
        let _ = &mut hi;
        0.5 * (a + b)
    }

    #[test]
    fn min_eigenvalue_matches_characteristic_polynomial_oracle() {
        let m = Matrix::from_row_slice(
            4,
            4,
            &[
                4.0, 1.0, 0.5, 0.0, 1.0, 3.0, 0.2, 0.1, 0.5, 0.2, 2.0, 0.3, 0.0, 0.1, 0.3, 1.0,
            ],
        );
        let got = min_eigenvalue(&m).unwrap();
        let want = oracle_min_eig(&m);
        assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    }

    #[test]
    fn min_eigenvalue_diagonal_and_indefinite() {
        let d = Matrix::from_row_slice(3, 3, &[5.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((min_eigenvalue(&d).unwrap() + 2.0).abs() < 1e-12);
        let r1 = Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(min_eigenvalue(&r1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rank_of_steady_state_block() {
        // Benchmark plant: [[A - I, B], [C, 0]] has full rank 3.
        let block = Matrix::from_row_slice(
            3,
            3,
            &[0.1, 2.0, 0.0, 0.0, -0.05, 0.079, 0.0, 1.0, 0.0],
        );
        assert_eq!(rank(&block), 3);
        let defective = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(rank(&defective), 1);
    }
}
