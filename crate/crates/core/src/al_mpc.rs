//! Exploring receding-horizon controller. Wraps the plain tracking solve
//! with a measurement-prediction layer: every candidate input sequence is
//! scored by its tracking cost plus the steady-state covariance that would
//! remain after the noise-free virtual measurements along its predicted
//! trajectory cut the parameter set. A derivative-free poll around the plain
//! solution trades the two, and can only improve on its warm start.

use crate::environment::RegressorSpec;
use crate::eo_mpc::{
    self, interval_of, rollout, ALPHA_PIN, ControlError, ControlSolution, ControllerConfig,
};
use crate::estimator::{Estimator, ParamEstimate};
use crate::excitation;
use crate::numerics::{self, Matrix, NumericsConfig, Vector};
use crate::plant::{ConstraintSets, LiftedPlant};
use crate::polytope::HPolytope;
use crate::terminal::{self, TerminalDesign};
use rand::Rng;

/// Stages with fewer surviving samples than this carry the previous stage's
/// moments instead of their own noisy ones.
const RELIABLE_SURVIVORS: usize = 50;
/// Poll step below which the refinement stops (input units).
const POLL_STEP_TOL: f64 = 1e-3;

/// One predicted stage: the parameter set remaining after the virtual
/// measurements up to this stage, and the moments of the best-equilibrium
/// map over it.
#[derive(Debug, Clone)]
pub struct PredictedStage {
    pub set: HPolytope,
    /// Noise-free virtual measurement generated by the mean parameter.
    pub z_bar: f64,
    pub r_bar: f64,
    pub p_r: f64,
    pub xs_bar: Vector,
    pub us_bar: f64,
    pub p_x: Matrix,
    pub p_u: f64,
    /// Samples of the shared set still inside this stage's cuts.
    pub survivors: usize,
}

/// Per-stage predicted parameter sets and moments along one candidate input
/// sequence. Stage 0 is the current estimate; stage i has absorbed the
/// virtual measurements at predicted outputs y_1 .. y_i.
#[derive(Debug, Clone)]
pub struct PredictedSetChain {
    pub stages: Vec<PredictedStage>,
}

/// Moments of the predicted chain without the set geometry; enough to score
/// a candidate.
struct ChainMoments {
    r_bar: Vec<f64>,
    p_r: Vec<f64>,
    survivors: Vec<usize>,
}

fn output_of(plant: &LiftedPlant, x: &Vector) -> f64 {
    let c = plant.c();
    let mut y = 0.0;
    for j in 0..x.len() {
        y += c[(0, j)] * x[j];
    }
    y
}

/// Walks the sample prefix through the virtual-measurement cuts one stage at
/// a time. A sample survives stage i when the mean-generated measurement at
/// y_i cannot falsify it: phi(y_i)'(theta_bar - theta) inside the noise
/// interval. Moments are over the survivors (shared across candidates), with
/// thin stages clamped to the previous stage's values.
fn chain_moments(
    states: &[Vector],
    reg: &RegressorSpec,
    deltas: &[Vector],
    r_prefix: &[f64],
    noise: (f64, f64),
    plant: &LiftedPlant,
) -> ChainMoments {
    let stages = states.len();
    let m = deltas.len();
    let mut alive = vec![true; m];
    let mut r_bar = Vec::with_capacity(stages);
    let mut p_r = Vec::with_capacity(stages);
    let mut survivors = Vec::with_capacity(stages);

    let moments_of = |alive: &[bool]| -> (usize, f64, f64) {
        let mut count = 0usize;
        let mut sum = 0.0;
        for (j, &ok) in alive.iter().enumerate() {
            if ok {
                count += 1;
                sum += r_prefix[j];
            }
        }
        if count == 0 {
            return (0, 0.0, 0.0);
        }
        let mean = sum / count as f64;
        let mut ss = 0.0;
        for (j, &ok) in alive.iter().enumerate() {
            if ok {
                ss += (r_prefix[j] - mean).powi(2);
            }
        }
        let var = if count > 1 { ss / (count - 1) as f64 } else { 0.0 };
        (count, mean, var)
    };

    let (count0, mean0, var0) = moments_of(&alive);
    r_bar.push(mean0);
    p_r.push(var0);
    survivors.push(count0);

    for x in states.iter().skip(1) {
        let y = output_of(plant, x);
        let phi = reg.phi(y);
        for (j, delta) in deltas.iter().enumerate() {
            if !alive[j] {
                continue;
            }
            let t = phi.dot(delta);
            if t < noise.0 || t > noise.1 {
                alive[j] = false;
            }
        }
        let (count, mean, var) = moments_of(&alive);
        survivors.push(count);
        if count < RELIABLE_SURVIVORS {
            r_bar.push(*r_bar.last().unwrap());
            p_r.push(*p_r.last().unwrap());
        } else {
            r_bar.push(mean);
            p_r.push(var);
        }
    }
    ChainMoments { r_bar, p_r, survivors }
}

/// Predicts the parameter-set chain along `u_seq` from the current state:
/// noise-free virtual measurements at the predicted outputs, one
/// two-row cut per stage accumulated onto the current set, and survivor
/// moments over a fixed sample prefix (common random numbers across
/// candidate sequences).
pub fn predict_sets(
    u_seq: &[f64],
    x0: &Vector,
    estimator: &Estimator,
    estimate: &ParamEstimate,
    plant: &LiftedPlant,
    config: &ControllerConfig,
) -> Result<PredictedSetChain, ControlError> {
    let states = rollout(plant, x0, u_seq);
    let reg = estimator.spec();
    let m = config.chain_samples.min(estimate.samples.len());
    let noise = interval_of(estimator.noise_set());
    let (m_x, m_u) = plant.steady_state_maps()?;

    let moments = if m >= 2 {
        let deltas: Vec<Vector> =
            estimate.samples[..m].iter().map(|t| &estimate.theta_bar - t).collect();
        chain_moments(&states, reg, &deltas, &estimate.r_samples[..m], noise, plant)
    } else {
        ChainMoments {
            r_bar: vec![estimate.r_bar; states.len()],
            p_r: vec![estimate.p_r; states.len()],
            survivors: vec![m; states.len()],
        }
    };

    let p = reg.dim();
    let mut stages = Vec::with_capacity(states.len());
    let mut set = estimator.theta_set().clone();
    for (i, x) in states.iter().enumerate() {
        let y = output_of(plant, x);
        let phi = reg.phi(y);
        let z_bar = reg.offset_at(y) + phi.dot(&estimate.theta_bar);
        if i > 0 {
            // phi'(theta_bar - theta) must stay inside [lo, hi]:
            //   phi' theta <= phi' theta_bar - lo
            //  -phi' theta <= hi - phi' theta_bar
            let mut rows = Matrix::zeros(2, p);
            let mut rhs = Vector::zeros(2);
            let level = phi.dot(&estimate.theta_bar);
            for j in 0..p {
                rows[(0, j)] = phi[j];
                rows[(1, j)] = -phi[j];
            }
            rhs[0] = level - noise.0;
            rhs[1] = noise.1 - level;
            let cut = HPolytope::new(rows, rhs)?;
            set = set.intersect(&cut)?;
        }
        let r_bar = moments.r_bar[i];
        let p_r = moments.p_r[i];
        stages.push(PredictedStage {
            set: set.clone(),
            z_bar,
            r_bar,
            p_r,
            xs_bar: &m_x * r_bar,
            us_bar: m_u * r_bar,
            p_x: &m_x * m_x.transpose() * p_r,
            p_u: m_u * m_u * p_r,
            survivors: moments.survivors[i],
        });
    }
    Ok(PredictedSetChain { stages })
}

/// Exploration value of a predicted chain: the stage covariances priced by
/// the tracking weights plus the terminal covariance priced by `s`.
pub fn exploration_cost(chain: &PredictedSetChain, config: &ControllerConfig, s: &Matrix) -> f64 {
    let nn = config.horizon.min(chain.stages.len().saturating_sub(1));
    let mut total = 0.0;
    for stage in chain.stages.iter().take(nn) {
        total += (&config.q * &stage.p_x).trace() + config.r * stage.p_u;
    }
    let last = &chain.stages[nn];
    total += (s * &last.p_x).trace();
    total
}

/// Equality-chain variable layout: reference states, reference inputs, and
/// the terminal-set scaling.
struct RefLayout {
    n: usize,
    horizon: usize,
}

impl RefLayout {
    fn xs(&self, i: usize) -> usize {
        i * self.n
    }
    fn us(&self, i: usize) -> usize {
        (self.horizon + 1) * self.n + i
    }
    fn alpha(&self) -> usize {
        (self.horizon + 1) * (self.n + 1)
    }
    fn len(&self) -> usize {
        self.alpha() + 1
    }
}

/// The reference chain chosen for one candidate sequence: a trajectory of
/// equilibrium references ending at a fixed point, its terminal scaling, and
/// the costs it realizes.
struct RefsChain {
    xs: Vec<Vector>,
    us: Vec<f64>,
    alpha: f64,
    j_et: f64,
    offset: f64,
}

/// Solves the inner reference-chain problem with the input sequence held
/// fixed. The Hessian and equality rows never change across candidates, so
/// the equality-constrained optimum is one pre-factorized back-solve; the
/// inequality rows are checked afterwards and only violations pay for a full
/// constrained solve.
struct RefsSolver {
    layout: RefLayout,
    p2: Matrix,
    a_eq: Matrix,
    lu: nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    g: Matrix,
    h_base: Vector,
    terminal_row0: usize,
    /// Binding rows of the previous candidate's solve; neighboring poll
    /// points usually share them, making one refactorization sufficient.
    active_hint: std::cell::RefCell<Vec<usize>>,
    q: Matrix,
    s: Matrix,
    r: f64,
    d: f64,
    c_row: Vector,
}

impl RefsSolver {
    fn new(
        plant: &LiftedPlant,
        constraints: &ConstraintSets,
        design: &TerminalDesign,
        config: &ControllerConfig,
        cfg: &NumericsConfig,
    ) -> Result<Self, ControlError> {
        let n = plant.state_dim();
        let nn = config.horizon;
        let layout = RefLayout { n, horizon: nn };
        let nv = layout.len();
        let a = plant.a();
        let b = plant.b();
        let c = plant.c();
        let s = design.weight();
        let c_row = Vector::from_fn(n, |j, _| c[(0, j)]);

        let mut hess = Matrix::zeros(nv, nv);
        for i in 0..nn {
            for idx in 0..n {
                for jdx in 0..n {
                    hess[(layout.xs(i) + idx, layout.xs(i) + jdx)] += config.q[(idx, jdx)];
                }
            }
            hess[(layout.us(i), layout.us(i))] += config.r;
        }
        for idx in 0..n {
            for jdx in 0..n {
                hess[(layout.xs(nn) + idx, layout.xs(nn) + jdx)] += s[(idx, jdx)];
            }
        }
        for i in 1..=nn {
            for idx in 0..n {
                for jdx in 0..n {
                    hess[(layout.xs(i) + idx, layout.xs(i) + jdx)] +=
                        config.d * c_row[idx] * c_row[jdx];
                }
            }
        }
        hess[(layout.alpha(), layout.alpha())] += ALPHA_PIN;
        let p2 = 2.0 * hess;

        let ne = (nn + 1) * n;
        let mut a_eq = Matrix::zeros(ne, nv);
        for i in 0..nn {
            let row0 = i * n;
            for idx in 0..n {
                a_eq[(row0 + idx, layout.xs(i + 1) + idx)] = 1.0;
                a_eq[(row0 + idx, layout.us(i))] = -b[(idx, 0)];
                for jdx in 0..n {
                    a_eq[(row0 + idx, layout.xs(i) + jdx)] -= a[(idx, jdx)];
                }
            }
        }
        let row0 = nn * n;
        for idx in 0..n {
            for jdx in 0..n {
                a_eq[(row0 + idx, layout.xs(nn) + jdx)] =
                    a[(idx, jdx)] - if idx == jdx { 1.0 } else { 0.0 };
            }
            a_eq[(row0 + idx, layout.us(nn))] = b[(idx, 0)];
        }

        // Quasi-definite saddle system for the equality-only optimum.
        let dim = nv + ne;
        let mut kkt = Matrix::zeros(dim, dim);
        for i in 0..nv {
            for j in 0..nv {
                kkt[(i, j)] = p2[(i, j)];
            }
            kkt[(i, i)] += 1e-10;
        }
        for r in 0..ne {
            for j in 0..nv {
                kkt[(nv + r, j)] = a_eq[(r, j)];
                kkt[(j, nv + r)] = a_eq[(r, j)];
            }
            kkt[(nv + r, nv + r)] = -1e-10;
        }
        let lu = nalgebra::linalg::LU::new(kkt);

        // Inequalities: terminal rows (per-candidate right side), scaled-set
        // admissibility and input membership for every chain stage, and the
        // scaling interval.
        let hu = constraints.u.facet_normals();
        let bu = constraints.u.facet_offsets();
        let mu = constraints.u.num_facets();
        let hf = design.terminal_set().facet_normals();
        let bf = design.terminal_set().facet_offsets();
        let mf = design.terminal_set().num_facets();
        let (alpha_rows, alpha_rhs) = terminal::admissible_alpha_rows(design, constraints, cfg)?;
        let ma = alpha_rows.nrows();

        let ni = mf + (nn + 1) * ma + (nn + 1) * mu + 2;
        let mut g = Matrix::zeros(ni, nv);
        let mut h = Vector::zeros(ni);
        let terminal_row0 = 0;
        let mut row = 0;
        for j in 0..mf {
            for jdx in 0..n {
                g[(row, layout.xs(nn) + jdx)] = -hf[(j, jdx)];
            }
            g[(row, layout.alpha())] = -bf[j];
            h[row] = 0.0; // filled with -(H_f x_N)_j per candidate
            row += 1;
        }
        for i in 0..=nn {
            for j in 0..ma {
                g[(row, layout.alpha())] = alpha_rows[(j, 0)];
                for jdx in 0..n {
                    g[(row, layout.xs(i) + jdx)] = alpha_rows[(j, 1 + jdx)];
                }
                h[row] = alpha_rhs[j];
                row += 1;
            }
        }
        for i in 0..=nn {
            for j in 0..mu {
                g[(row, layout.us(i))] = hu[(j, 0)];
                h[row] = bu[j];
                row += 1;
            }
        }
        g[(row, layout.alpha())] = 1.0;
        h[row] = 1.0;
        row += 1;
        g[(row, layout.alpha())] = -1.0;
        h[row] = -design.alpha_min();
        row += 1;
        debug_assert_eq!(row, ni);

        Ok(RefsSolver {
            layout,
            p2,
            a_eq,
            lu,
            g,
            h_base: h,
            terminal_row0,
            active_hint: std::cell::RefCell::new(Vec::new()),
            q: config.q.clone(),
            s: s.clone(),
            r: config.r,
            d: config.d,
            c_row,
        })
    }

    fn feasible_at(&self, w: &Vector, h: &Vector) -> bool {
        for row in 0..self.g.nrows() {
            let val = (self.g.row(row) * w)[(0, 0)];
            if val > h[row] + 1e-7 * (1.0 + h[row].abs()) {
                return false;
            }
        }
        true
    }

    /// Dense active-set loop on the quasi-definite saddle system: add the
    /// worst violated row as an equality, drop active rows whose multiplier
    /// turns negative, refactorize each round (the system is small enough
    /// that a fresh LU costs microseconds). Starts from the previous
    /// candidate's binding set.
    fn active_set_solve(&self, lin: &Vector, h: &Vector) -> Option<Vector> {
        let nv = self.layout.len();
        let ne = self.a_eq.nrows();
        let mi = self.g.nrows();
        let mut active: Vec<usize> = self.active_hint.borrow().clone();
        active.retain(|&r| r < mi);
        for _round in 0..40 {
            let na = active.len();
            let dim = nv + ne + na;
            let mut kkt = Matrix::zeros(dim, dim);
            let mut rhs = Vector::zeros(dim);
            for i in 0..nv {
                for j in 0..nv {
                    kkt[(i, j)] = self.p2[(i, j)];
                }
                kkt[(i, i)] += 1e-10;
                rhs[i] = -lin[i];
            }
            for r in 0..ne {
                for j in 0..nv {
                    kkt[(nv + r, j)] = self.a_eq[(r, j)];
                    kkt[(j, nv + r)] = self.a_eq[(r, j)];
                }
                kkt[(nv + r, nv + r)] = -1e-10;
            }
            for (k, &row) in active.iter().enumerate() {
                for j in 0..nv {
                    kkt[(nv + ne + k, j)] = self.g[(row, j)];
                    kkt[(j, nv + ne + k)] = self.g[(row, j)];
                }
                kkt[(nv + ne + k, nv + ne + k)] = -1e-10;
                rhs[nv + ne + k] = h[row];
            }
            let sol = nalgebra::linalg::LU::new(kkt).solve(&rhs)?;
            let w = Vector::from_fn(nv, |i, _| sol[i]);

            let mut drop_k: Option<usize> = None;
            let mut most_negative = -1e-9;
            for k in 0..na {
                let mu = sol[nv + ne + k];
                if mu < most_negative {
                    most_negative = mu;
                    drop_k = Some(k);
                }
            }
            let mut add_row: Option<usize> = None;
            let mut worst = 1e-9;
            for row in 0..mi {
                if active.contains(&row) {
                    continue;
                }
                let val = (self.g.row(row) * &w)[(0, 0)];
                let excess = (val - h[row]) / (1.0 + h[row].abs());
                if excess > worst {
                    worst = excess;
                    add_row = Some(row);
                }
            }
            match (add_row, drop_k) {
                (None, None) => {
                    *self.active_hint.borrow_mut() = active;
                    return Some(w);
                }
                (Some(row), _) => active.push(row),
                (None, Some(k)) => {
                    active.remove(k);
                }
            }
        }
        None
    }

    fn solve(
        &self,
        states: &[Vector],
        u_seq: &[f64],
        targets: &[f64],
        design: &TerminalDesign,
        cfg: &NumericsConfig,
    ) -> Option<RefsChain> {
        let n = self.layout.n;
        let nn = self.layout.horizon;
        let nv = self.layout.len();
        let ne = self.a_eq.nrows();

        let mut lin = Vector::zeros(nv);
        for i in 0..nn {
            for idx in 0..n {
                let pull = (self.q.row(idx) * &states[i])[(0, 0)];
                lin[self.layout.xs(i) + idx] -= 2.0 * pull;
            }
            lin[self.layout.us(i)] -= 2.0 * self.r * u_seq[i];
        }
        for idx in 0..n {
            let pull = (self.s.row(idx) * &states[nn])[(0, 0)];
            lin[self.layout.xs(nn) + idx] -= 2.0 * pull;
        }
        for i in 1..=nn {
            for idx in 0..n {
                lin[self.layout.xs(i) + idx] -= 2.0 * self.d * targets[i] * self.c_row[idx];
            }
        }
        lin[self.layout.alpha()] -= 2.0 * ALPHA_PIN;

        let mut rhs = Vector::zeros(nv + ne);
        for i in 0..nv {
            rhs[i] = -lin[i];
        }
        let sol = self.lu.solve(&rhs)?;
        let mut w = Vector::from_fn(nv, |i, _| sol[i]);

        let mut h = self.h_base.clone();
        let hf = design.terminal_set().facet_normals();
        let mf = design.terminal_set().num_facets();
        for j in 0..mf {
            let mut lhs = 0.0;
            for jdx in 0..n {
                lhs += hf[(j, jdx)] * states[nn][jdx];
            }
            h[self.terminal_row0 + j] = -lhs;
        }

        if !self.feasible_at(&w, &h) {
            w = self.active_set_solve(&lin, &h).or_else(|| {
                let b_eq = Vector::zeros(ne);
                numerics::solve_qp_warm(
                    &self.p2, &lin, &self.a_eq, &b_eq, &self.g, &h, cfg, Some(&w),
                )
                .ok()
                .map(|qp| qp.x)
            })?;
        }

        let xs: Vec<Vector> =
            (0..=nn).map(|i| Vector::from_fn(n, |idx, _| w[self.layout.xs(i) + idx])).collect();
        let us: Vec<f64> = (0..=nn).map(|i| w[self.layout.us(i)]).collect();
        let alpha = w[self.layout.alpha()];

        let mut j_et = 0.0;
        for i in 0..nn {
            let dx = &states[i] - &xs[i];
            j_et += (dx.transpose() * &self.q * &dx)[(0, 0)];
            let du = u_seq[i] - us[i];
            j_et += self.r * du * du;
        }
        let dx = &states[nn] - &xs[nn];
        j_et += (dx.transpose() * &self.s * &dx)[(0, 0)];
        let mut offset = 0.0;
        for i in 1..=nn {
            let rs = self.c_row.dot(&xs[i]);
            offset += self.d * (rs - targets[i]).powi(2);
        }
        Some(RefsChain { xs, us, alpha, j_et, offset })
    }
}

/// Shared read-only context for scoring candidate input sequences.
struct EvalCtx<'a> {
    plant: &'a LiftedPlant,
    constraints: &'a ConstraintSets,
    reg: &'a RegressorSpec,
    deltas: Vec<Vector>,
    r_prefix: &'a [f64],
    noise: (f64, f64),
    weight_stage: f64,
    weight_terminal: f64,
    scale: f64,
    solver: RefsSolver,
    design: &'a TerminalDesign,
    cfg: &'a NumericsConfig,
}

struct Candidate {
    u: Vec<f64>,
    states: Vec<Vector>,
    refs: RefsChain,
    j_er: f64,
    score: f64,
}

impl EvalCtx<'_> {
    fn exploration_value(&self, moments: &ChainMoments) -> f64 {
        let nn = self.solver.layout.horizon;
        let mut j_er = 0.0;
        for i in 0..nn {
            j_er += moments.p_r[i] * self.weight_stage;
        }
        j_er + moments.p_r[nn] * self.weight_terminal
    }

    fn evaluate(&self, u: Vec<f64>, x0: &Vector) -> Option<Candidate> {
        let states = rollout(self.plant, x0, &u);
        for x in states.iter().take(u.len()).skip(1) {
            if !self.constraints.x.contains(x, 1e-9) {
                return None;
            }
        }
        let moments =
            chain_moments(&states, self.reg, &self.deltas, self.r_prefix, self.noise, self.plant);
        let refs = self.solver.solve(&states, &u, &moments.r_bar, self.design, self.cfg)?;
        let j_er = self.exploration_value(&moments);
        let score = refs.j_et + refs.offset + self.scale * j_er;
        Some(Candidate { u, states, refs, j_er, score })
    }
}

/// Builds the evaluation context, or `None` when there is nothing to
/// explore: a degenerate sample prefix or (numerically) zero reference
/// variance, in which case the plain controller already solves the problem.
#[allow(clippy::too_many_arguments)]
fn build_ctx<'a>(
    estimator: &'a Estimator,
    estimate: &'a ParamEstimate,
    plant: &'a LiftedPlant,
    constraints: &'a ConstraintSets,
    design: &'a TerminalDesign,
    config: &'a ControllerConfig,
    cfg: &'a NumericsConfig,
) -> Result<Option<EvalCtx<'a>>, ControlError> {
    let m = config.chain_samples.min(estimate.samples.len());
    if m < 2 {
        return Ok(None);
    }
    let r_prefix = &estimate.r_samples[..m];
    let mean = r_prefix.iter().sum::<f64>() / m as f64;
    let var = r_prefix.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    if var <= 1e-12 {
        return Ok(None);
    }
    let deltas: Vec<Vector> =
        estimate.samples[..m].iter().map(|t| &estimate.theta_bar - t).collect();
    let (m_x, m_u) = plant.steady_state_maps()?;
    let weight_stage = (m_x.transpose() * &config.q * &m_x)[(0, 0)] + config.r * m_u * m_u;
    let weight_terminal = (m_x.transpose() * design.weight() * &m_x)[(0, 0)];
    let solver = RefsSolver::new(plant, constraints, design, config, cfg)?;
    Ok(Some(EvalCtx {
        plant,
        constraints,
        reg: estimator.spec(),
        deltas,
        r_prefix,
        noise: interval_of(estimator.noise_set()),
        weight_stage,
        weight_terminal,
        scale: config.exploration_scale,
        solver,
        design,
        cfg,
    }))
}

/// Scores one input sequence exactly as the exploring solve does: clipped
/// into the input set, rolled forward, references from the inner chain
/// problem, exploration value on the shared sample prefix. Returns
/// `Ok(None)` when the sequence is inadmissible or the uncertainty is
/// degenerate. The triple is (tracking cost, exploration value, offset).
#[allow(clippy::too_many_arguments)]
pub fn score_sequence(
    u_seq: &[f64],
    x0: &Vector,
    estimator: &Estimator,
    estimate: &ParamEstimate,
    plant: &LiftedPlant,
    constraints: &ConstraintSets,
    design: &TerminalDesign,
    config: &ControllerConfig,
    cfg: &NumericsConfig,
) -> Result<Option<(f64, f64, f64)>, ControlError> {
    let ctx = match build_ctx(estimator, estimate, plant, constraints, design, config, cfg)? {
        Some(ctx) => ctx,
        None => return Ok(None),
    };
    let (lo, hi) = interval_of(&constraints.u);
    let u: Vec<f64> = u_seq.iter().map(|v| v.clamp(lo, hi)).collect();
    Ok(ctx.evaluate(u, x0).map(|c| (c.refs.j_et, c.j_er, c.refs.offset)))
}

/// Exploring solve: plain tracking warm start, then a coordinate poll over
/// the input sequence scored by tracking cost plus predicted-shrinkage value
/// on common random numbers. The returned plan never scores worse than the
/// warm start; the excitation check runs on the winner exactly as in the
/// plain controller.
#[allow(clippy::too_many_arguments)]
pub fn solve_al<R: Rng>(
    x0: &Vector,
    estimator: &Estimator,
    estimate: &ParamEstimate,
    plant: &LiftedPlant,
    constraints: &ConstraintSets,
    design: &TerminalDesign,
    config: &ControllerConfig,
    prev: Option<&ControlSolution>,
    rng: &mut R,
    cfg: &NumericsConfig,
) -> Result<ControlSolution, ControlError> {
    let eo_sol = eo_mpc::solve_eo(
        x0,
        estimate,
        estimator.spec(),
        plant,
        constraints,
        design,
        config,
        prev,
        rng,
        cfg,
    )?;
    if config.exploration_scale == 0.0 {
        return Ok(eo_sol);
    }
    let ctx = match build_ctx(estimator, estimate, plant, constraints, design, config, cfg)? {
        Some(ctx) => ctx,
        None => return Ok(eo_sol),
    };

    let (lo, hi) = interval_of(&constraints.u);
    let mut evals = 1usize;
    let mut incumbent = match ctx.evaluate(eo_sol.u_seq.clone(), x0) {
        Some(c) => c,
        // The warm start cannot be scored (inner chain solve failed); keep
        // the plain solution rather than search blind.
        None => return Ok(eo_sol),
    };

    let mut step = 0.25 * (hi - lo);
    while evals < config.search_budget && step > POLL_STEP_TOL {
        let mut improved = false;
        'poll: for i in 0..config.horizon {
            for sgn in [1.0_f64, -1.0] {
                if evals >= config.search_budget {
                    break 'poll;
                }
                let mut u = incumbent.u.clone();
                let moved = (u[i] + sgn * step).clamp(lo, hi);
                if (moved - u[i]).abs() <= 1e-12 {
                    continue;
                }
                u[i] = moved;
                evals += 1;
                if let Some(c) = ctx.evaluate(u, x0) {
                    if c.score < incumbent.score - 1e-12 {
                        incumbent = c;
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }

    let xs_s = incumbent.refs.xs.last().unwrap().clone();
    let us_s = *incumbent.refs.us.last().unwrap();
    let sig = design.signal();
    let fallback = excitation::fallback_sequence(
        prev.map(|p| p.u_seq.as_slice()),
        plant,
        design.gain(),
        &xs_s,
        us_s,
        sig,
        (lo, hi),
        x0,
        config.horizon,
        rng,
    );
    let (kept, pe) = excitation::pe_check(
        &incumbent.u,
        &fallback,
        plant,
        estimator.spec(),
        sig,
        x0,
        design.gain(),
        &xs_s,
        us_s,
        config.pe_window,
    )?;

    let nn = config.horizon;
    let (states, j_et, offset, j_er) = if pe.fallback_used {
        // The excitation fallback replaced the plan: re-roll and re-score it
        // against the incumbent's reference chain.
        let states = rollout(plant, x0, &kept);
        let moments =
            chain_moments(&states, ctx.reg, &ctx.deltas, ctx.r_prefix, ctx.noise, plant);
        let refs = &incumbent.refs;
        let mut j_et = 0.0;
        for i in 0..nn {
            let dx = &states[i] - &refs.xs[i];
            j_et += (dx.transpose() * &config.q * &dx)[(0, 0)];
            let du = kept[i] - refs.us[i];
            j_et += config.r * du * du;
        }
        let dx = &states[nn] - &refs.xs[nn];
        j_et += (dx.transpose() * design.weight() * &dx)[(0, 0)];
        let mut offset = 0.0;
        for i in 1..=nn {
            let rs = ctx.solver.c_row.dot(&refs.xs[i]);
            offset += config.d * (rs - moments.r_bar[i]).powi(2);
        }
        let j_er = ctx.exploration_value(&moments);
        (states, j_et, offset, j_er)
    } else {
        (
            core::mem::take(&mut incumbent.states),
            incumbent.refs.j_et,
            incumbent.refs.offset,
            incumbent.j_er,
        )
    };

    let r_s = ctx.solver.c_row.dot(&xs_s);
    Ok(ControlSolution {
        u_seq: kept,
        states,
        alpha: incumbent.refs.alpha,
        r_s,
        xs_s,
        us_s,
        j_et,
        j_er,
        offset_cost: offset,
        trace_constant: eo_mpc::reported_trace_constant(estimate, config, design.weight()),
        evals,
        feasible: true,
        fallback: pe.fallback_used,
        pe,
    })
}
