//! Persistent-excitation safeguard: a small zero-mean virtual signal rides on
//! the terminal control law, and its moments make the accumulated regressor
//! outer-product matrix provably positive definite. This module builds those
//! expectation matrices, assembles the windowed excitation matrix for a
//! candidate input sequence, checks its minimum eigenvalue, and constructs
//! the fallback sequence used when a candidate carries no information.

use crate::environment::RegressorSpec;
use crate::numerics::{self, Matrix, Vector};
use crate::plant::LiftedPlant;
use crate::polytope::{gauss, HPolytope, PolytopeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum ExcitationError {
    /// Closed-form moment matrices exist only for quadratic and cubic
    /// monomial bases; higher orders need the sampling path.
    UnsupportedOrder(u32),
    HorizonMismatch { horizon: usize, extended: usize },
    DimensionMismatch(String),
    Set(String),
}

impl core::fmt::Display for ExcitationError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ExcitationError::UnsupportedOrder(n) => {
                write!(f, "no closed-form moment matrix for order {n}")
            }
            ExcitationError::HorizonMismatch { horizon, extended } => {
                write!(f, "extended horizon {extended} shorter than horizon {horizon}")
            }
            ExcitationError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            ExcitationError::Set(what) => write!(f, "set operation failed: {what}"),
        }
    }
}

impl std::error::Error for ExcitationError {}

impl From<PolytopeError> for ExcitationError {
    fn from(e: PolytopeError) -> Self {
        ExcitationError::Set(e.to_string())
    }
}

/// Sampling law for the filtered virtual signal inside the Monte-Carlo
/// expectation. The closed forms use Gaussian even moments; the uniform law
/// is what the signal actually follows, and its fourth moment differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalLaw {
    Uniform,
    /// Gaussian truncated at six standard deviations; reproduces the
    /// closed-form moments to sampling accuracy.
    GaussianTrunc6,
}

/// The virtual excitation signal: an interval set, its variance, and the
/// variance of its one-step effect on the measured output.
#[derive(Debug, Clone)]
pub struct VirtualSignalSpec {
    s_set: HPolytope,
    s_max: f64,
    eps_s: f64,
    eps_stilde: f64,
    law: SignalLaw,
}

impl VirtualSignalSpec {
    /// Uniform-law signal on `[-s_max, s_max]`. The output-side variance is
    /// the input variance scaled by the squared input-to-output taps: the sum
    /// of squared numerator coefficients for lifted ARX plants, or the
    /// squared one-step gain `CB` for plants given as explicit matrices.
    pub fn new(s_max: f64, plant: &LiftedPlant) -> Result<Self, ExcitationError> {
        if s_max <= 0.0 {
            return Err(ExcitationError::DimensionMismatch("s_max must be positive".into()));
        }
        let eps_s = s_max * s_max / 3.0;
        let gain_sq = match plant.arx_origin() {
            Some((_, b_taps)) => b_taps.iter().map(|b| b * b).sum::<f64>(),
            None => {
                let cb = (plant.c() * plant.b())[(0, 0)];
                cb * cb
            }
        };
        Ok(VirtualSignalSpec {
            s_set: HPolytope::symmetric_interval(s_max)?,
            s_max,
            eps_s,
            eps_stilde: gain_sq * eps_s,
            law: SignalLaw::Uniform,
        })
    }

    pub fn with_law(mut self, law: SignalLaw) -> Self {
        self.law = law;
        self
    }

    pub fn s_set(&self) -> &HPolytope {
        &self.s_set
    }

    pub fn s_max(&self) -> f64 {
        self.s_max
    }

    pub fn eps_s(&self) -> f64 {
        self.eps_s
    }

    pub fn eps_stilde(&self) -> f64 {
        self.eps_stilde
    }

    pub fn law(&self) -> SignalLaw {
        self.law
    }

    /// One uniform draw from the signal interval.
    pub fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        self.s_max * (2.0 * rng.gen::<f64>() - 1.0)
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// `E[(y + w)^r]` for zero-mean `w` with Gaussian even moments
/// `E[w^(2j)] = (2j-1)!! eps^j`.
fn gaussian_power_moment(y: f64, eps: f64, r: u32) -> f64 {
    let mut acc = 0.0;
    let mut double_fact = 1.0;
    let mut j = 0;
    while 2 * j <= r {
        if j > 0 {
            double_fact *= (2 * j - 1) as f64;
        }
        acc += binomial(r, 2 * j) * y.powi((r - 2 * j) as i32) * eps.powi(j as i32) * double_fact;
        j += 1;
    }
    acc
}

/// Closed-form `E[phi(y + w) phi(y + w)']` for an arbitrary monomial basis
/// under the Gaussian-moment model.
pub fn moment_matrix(y: f64, eps: f64, powers: &[u32]) -> Matrix {
    let p = powers.len();
    Matrix::from_fn(p, p, |i, j| gaussian_power_moment(y, eps, powers[i] + powers[j]))
}

/// The quadratic- or cubic-basis expectation matrix in closed form:
/// `phi = (y, ..., y^n)` with `n` in `{2, 3}`.
pub fn expectation_matrix(y: f64, eps: f64, n: u32) -> Result<Matrix, ExcitationError> {
    if !(2..=3).contains(&n) {
        return Err(ExcitationError::UnsupportedOrder(n));
    }
    let powers: Vec<u32> = (1..=n).collect();
    Ok(moment_matrix(y, eps, &powers))
}

/// Sample average of `phi(y + w) phi(y + w)'` with `w` drawn by `law` at
/// variance `eps`. Deterministic for a given seed.
pub fn monte_carlo_expectation(
    y: f64,
    eps: f64,
    law: SignalLaw,
    powers: &[u32],
    samples: usize,
    seed: u64,
) -> Matrix {
    let p = powers.len();
    let mut acc = Matrix::zeros(p, p);
    let mut phi = Vector::zeros(p);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = eps.sqrt();
    let half_width = (3.0 * eps).sqrt();
    for _ in 0..samples {
        let w = match law {
            SignalLaw::Uniform => half_width * (2.0 * rng.gen::<f64>() - 1.0),
            SignalLaw::GaussianTrunc6 => loop {
                let g = sigma * gauss(&mut rng);
                if g.abs() <= 6.0 * sigma {
                    break g;
                }
            },
        };
        let yh = y + w;
        for (i, &pw) in powers.iter().enumerate() {
            phi[i] = yh.powi(pw as i32);
        }
        for i in 0..p {
            for j in 0..=i {
                acc[(i, j)] += phi[i] * phi[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..=i {
            let v = acc[(i, j)] / samples as f64;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
    acc
}

const PE_MC_SAMPLES: usize = 10_000;
const PE_MC_SEED: u64 = 0x5e_c0_ff_ee;

/// One expectation summand at mean output `y`: closed form when every basis
/// power stays within the cubic range, Monte Carlo under the signal's own
/// law otherwise.
fn excitation_summand(y: f64, reg: &RegressorSpec, sig: &VirtualSignalSpec, stage: u64) -> Matrix {
    let max_power = reg.powers().iter().copied().max().unwrap_or(0);
    if max_power <= 3 {
        moment_matrix(y, sig.eps_stilde, reg.powers())
    } else {
        monte_carlo_expectation(
            y,
            sig.eps_stilde,
            sig.law,
            reg.powers(),
            PE_MC_SAMPLES,
            PE_MC_SEED.wrapping_add(stage),
        )
    }
}

/// Accumulated excitation matrix for the window starting at the current
/// state: exact regressor outer products along the candidate inputs for the
/// first `u_seq.len()` stages, then expectation matrices under the perturbed
/// terminal law `u = K(x - xs) + us + s` up to stage `extended - 1`.
#[allow(clippy::too_many_arguments)]
pub fn pe_matrix(
    plant: &LiftedPlant,
    reg: &RegressorSpec,
    sig: &VirtualSignalSpec,
    x0: &Vector,
    u_seq: &[f64],
    gain: &Matrix,
    xs_bar: &Vector,
    us_bar: f64,
    extended: usize,
) -> Result<Matrix, ExcitationError> {
    let horizon = u_seq.len();
    if extended < horizon {
        return Err(ExcitationError::HorizonMismatch { horizon, extended });
    }
    let nx = plant.state_dim();
    if x0.len() != nx || xs_bar.len() != nx || gain.ncols() != nx || gain.nrows() != 1 {
        return Err(ExcitationError::DimensionMismatch("state or gain size".into()));
    }
    let p = reg.dim();
    let mut acc = Matrix::zeros(p, p);
    let mut x = x0.clone();
    for &u in u_seq {
        let y = (plant.c() * &x)[(0, 0)];
        let phi = reg.phi(y);
        acc += &phi * phi.transpose();
        x = plant.a() * &x;
        for i in 0..nx {
            x[i] += plant.b()[(i, 0)] * u;
        }
    }
    for j in horizon..extended {
        let y = (plant.c() * &x)[(0, 0)];
        acc += excitation_summand(y, reg, sig, j as u64);
        let u = (gain * (&x - xs_bar))[(0, 0)] + us_bar;
        x = plant.a() * &x;
        for i in 0..nx {
            x[i] += plant.b()[(i, 0)] * u;
        }
    }
    Ok(acc)
}

/// Outcome of the sample-based excitation check for one solve.
#[derive(Debug, Clone)]
pub struct PEReport {
    /// Minimum eigenvalue of the candidate's excitation matrix.
    pub beta: f64,
    /// Same quantity for the fallback, when it had to be evaluated.
    pub beta_fallback: Option<f64>,
    pub pass: bool,
    pub fallback_used: bool,
}

/// Checks the candidate sequence's excitation and swaps in the fallback when
/// the minimum eigenvalue is not strictly positive.
#[allow(clippy::too_many_arguments)]
pub fn pe_check(
    u_star: &[f64],
    fallback: &[f64],
    plant: &LiftedPlant,
    reg: &RegressorSpec,
    sig: &VirtualSignalSpec,
    x0: &Vector,
    gain: &Matrix,
    xs_bar: &Vector,
    us_bar: f64,
    extended: usize,
) -> Result<(Vec<f64>, PEReport), ExcitationError> {
    let min_eig = |m: &Matrix| {
        numerics::min_eigenvalue(m).map_err(|e| ExcitationError::DimensionMismatch(e.to_string()))
    };
    let m = pe_matrix(plant, reg, sig, x0, u_star, gain, xs_bar, us_bar, extended)?;
    let beta = min_eig(&m)?;
    if beta > 0.0 {
        return Ok((
            u_star.to_vec(),
            PEReport { beta, beta_fallback: None, pass: true, fallback_used: false },
        ));
    }
    let mf = pe_matrix(plant, reg, sig, x0, fallback, gain, xs_bar, us_bar, extended)?;
    let beta_fallback = min_eig(&mf)?;
    Ok((
        fallback.to_vec(),
        PEReport { beta, beta_fallback: Some(beta_fallback), pass: false, fallback_used: true },
    ))
}

/// Fallback input sequence: the previous optimizer shifted one stage, closed
/// with the perturbed terminal law; or a pure terminal-law rollout when no
/// previous solution exists. Every entry is clipped into the input interval.
#[allow(clippy::too_many_arguments)]
pub fn fallback_sequence<R: Rng>(
    prev: Option<&[f64]>,
    plant: &LiftedPlant,
    gain: &Matrix,
    xs_bar: &Vector,
    us_bar: f64,
    sig: &VirtualSignalSpec,
    u_bounds: (f64, f64),
    x0: &Vector,
    horizon: usize,
    rng: &mut R,
) -> Vec<f64> {
    let (u_lo, u_hi) = u_bounds;
    let nx = plant.state_dim();
    let mut out = Vec::with_capacity(horizon);
    let mut x = x0.clone();
    let step = |x: &mut Vector, u: f64| {
        let next = plant.a() * &*x;
        for i in 0..nx {
            x[i] = next[i] + plant.b()[(i, 0)] * u;
        }
    };
    match prev {
        Some(seq) if seq.len() == horizon && horizon > 0 => {
            for i in 0..horizon - 1 {
                let u = seq[i + 1].clamp(u_lo, u_hi);
                out.push(u);
                step(&mut x, u);
            }
            let u = (gain * (&x - xs_bar))[(0, 0)] + us_bar + sig.draw(rng);
            out.push(u.clamp(u_lo, u_hi));
        }
        _ => {
            for _ in 0..horizon {
                let u = (gain * (&x - xs_bar))[(0, 0)] + us_bar + sig.draw(rng);
                let u = u.clamp(u_lo, u_hi);
                out.push(u);
                step(&mut x, u);
            }
        }
    }
    out
}
