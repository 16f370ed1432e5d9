//! The unknown environment: polynomial regressors, noisy linear-in-parameter
//! measurements, the setpoint map from parameters to the best output, and
//! the bundled scenario families.
//!
//! Measurements follow `z = g(y) + phi(y)' theta* + v` where `phi` stacks
//! monomials of the output, `g` is a known offset polynomial, `theta*` is the
//! unknown environment parameter, and `v` is bounded noise. The controllers
//! steer the plant toward `argmax_y g(y) + phi(y)' theta` for their current
//! parameter estimate.

use crate::numerics::{Matrix, Vector};
use crate::plant::{ConstraintSets, LiftedPlant, PlantError};
use crate::polytope::{HPolytope, PolytopeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum EnvError {
    /// The response polynomial has no unique interior maximum.
    NoUniqueExtremum,
    UnknownScenario(String),
    DimensionMismatch(String),
    Fit(String),
    Plant(String),
    Set(String),
}

impl core::fmt::Display for EnvError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EnvError::NoUniqueExtremum => write!(f, "response has no unique interior extremum"),
            EnvError::UnknownScenario(name) => write!(f, "unknown scenario `{name}`"),
            EnvError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            EnvError::Fit(what) => write!(f, "least-squares fit failed: {what}"),
            EnvError::Plant(what) => write!(f, "scenario plant: {what}"),
            EnvError::Set(what) => write!(f, "scenario set: {what}"),
        }
    }
}

impl std::error::Error for EnvError {}

impl From<PlantError> for EnvError {
    fn from(e: PlantError) -> Self {
        EnvError::Plant(e.to_string())
    }
}

impl From<PolytopeError> for EnvError {
    fn from(e: PolytopeError) -> Self {
        EnvError::Set(e.to_string())
    }
}

/// Monomial feature stack `phi(y) = [y^p for p in powers]` plus a known
/// polynomial offset `g(y)` whose coefficients are listed from the constant
/// term upward.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorSpec {
    powers: Vec<u32>,
    offset: Vec<f64>,
}

impl RegressorSpec {
    pub fn new(powers: Vec<u32>, offset: Vec<f64>) -> Result<Self, EnvError> {
        if powers.is_empty() {
            return Err(EnvError::DimensionMismatch("empty regressor basis".into()));
        }
        let mut seen = powers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != powers.len() {
            return Err(EnvError::DimensionMismatch("duplicate regressor power".into()));
        }
        Ok(RegressorSpec { powers, offset })
    }

    /// Basis `(1, y, ..., y^n)`.
    pub fn with_constant(n: u32) -> Self {
        RegressorSpec { powers: (0..=n).collect(), offset: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.powers.len()
    }

    pub fn powers(&self) -> &[u32] {
        &self.powers
    }

    pub fn phi(&self, y: f64) -> Vector {
        Vector::from_fn(self.powers.len(), |i, _| y.powi(self.powers[i] as i32))
    }

    pub fn offset_at(&self, y: f64) -> f64 {
        poly_eval(&self.offset, y)
    }

    /// Noise-free model value `g(y) + phi(y)' theta`.
    pub fn response(&self, theta: &Vector, y: f64) -> f64 {
        let mut acc = self.offset_at(y);
        for (i, &p) in self.powers.iter().enumerate() {
            acc += theta[i] * y.powi(p as i32);
        }
        acc
    }

    /// Dense ascending coefficients of `g(y) + phi(y)' theta`.
    fn response_coeffs(&self, theta: &Vector) -> Vec<f64> {
        let max_pow = self.powers.iter().copied().max().unwrap_or(0) as usize;
        let len = (max_pow + 1).max(self.offset.len());
        let mut coeffs = vec![0.0; len.max(1)];
        for (i, &c) in self.offset.iter().enumerate() {
            coeffs[i] = c;
        }
        for (i, &p) in self.powers.iter().enumerate() {
            coeffs[p as usize] += theta[i];
        }
        coeffs
    }
}

fn poly_eval(coeffs: &[f64], y: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * y + c)
}

fn poly_derivative(coeffs: &[f64]) -> Vec<f64> {
    if coeffs.len() <= 1 {
        return vec![0.0];
    }
    coeffs.iter().enumerate().skip(1).map(|(i, &c)| c * i as f64).collect()
}

const OPTIMUM_GRID: usize = 512;
const OPTIMUM_ROOT_TOL: f64 = 1e-10;
const OPTIMUM_TIE_TOL: f64 = 1e-8;

/// Stationary points of the response on `[lo, hi]`, found by sign changes of
/// the derivative on a 512-cell grid and bisection to 1e-10.
fn stationary_points(deriv: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut roots = Vec::new();
    let mut prev_y = lo;
    let mut prev_d = poly_eval(deriv, lo);
    for i in 1..=OPTIMUM_GRID {
        let y = lo + (hi - lo) * i as f64 / OPTIMUM_GRID as f64;
        let d = poly_eval(deriv, y);
        if prev_d == 0.0 {
            roots.push(prev_y);
        } else if prev_d * d < 0.0 {
            let (mut a, mut b) = (prev_y, y);
            let mut da = prev_d;
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                let dm = poly_eval(deriv, m);
                if da * dm <= 0.0 {
                    b = m;
                } else {
                    a = m;
                    da = dm;
                }
                if b - a < OPTIMUM_ROOT_TOL {
                    break;
                }
            }
            roots.push(0.5 * (a + b));
        }
        prev_y = y;
        prev_d = d;
    }
    if poly_eval(deriv, hi) == 0.0 {
        roots.push(hi);
    }
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-7);
    roots
}

/// Output value maximizing the response over `[lo, hi]`.
///
/// Fails when the response is flat, when two separated candidates tie within
/// 1e-8, or when the maximum sits on the boundary with a nonvanishing
/// derivative (no interior extremum exists).
pub fn optimum_map(spec: &RegressorSpec, theta: &Vector, lo: f64, hi: f64) -> Result<f64, EnvError> {
    if theta.len() != spec.dim() {
        return Err(EnvError::DimensionMismatch("theta vs regressor basis".into()));
    }
    let coeffs = spec.response_coeffs(theta);
    let deriv = poly_derivative(&coeffs);
    let scale = deriv.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale * (hi - lo).max(1.0) < 1e-12 {
        return Err(EnvError::NoUniqueExtremum);
    }
    let mut candidates = stationary_points(&deriv, lo, hi);
    candidates.push(lo);
    candidates.push(hi);
    let mut scored: Vec<(f64, f64)> =
        candidates.iter().map(|&y| (y, poly_eval(&coeffs, y))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let (best_y, best_v) = scored[0];
    for &(y, v) in &scored[1..] {
        if best_v - v < OPTIMUM_TIE_TOL && (y - best_y).abs() > 1e-6 {
            return Err(EnvError::NoUniqueExtremum);
        }
    }
    let at_boundary = (best_y - lo).abs() < 1e-9 || (best_y - hi).abs() < 1e-9;
    if at_boundary && poly_eval(&deriv, best_y).abs() > OPTIMUM_TIE_TOL {
        return Err(EnvError::NoUniqueExtremum);
    }
    Ok(best_y)
}

/// Total variant of [`optimum_map`] for sampled parameters: returns the
/// maximizer over the closed interval, allowing boundary points and breaking
/// ties toward the smaller output.
pub fn optimum_map_clipped(spec: &RegressorSpec, theta: &Vector, lo: f64, hi: f64) -> f64 {
    let coeffs = spec.response_coeffs(theta);
    let deriv = poly_derivative(&coeffs);
    let mut candidates = stationary_points(&deriv, lo, hi);
    candidates.push(lo);
    candidates.push(hi);
    let mut best = (lo, f64::NEG_INFINITY);
    for &y in &candidates {
        let v = poly_eval(&coeffs, y);
        if v > best.1 + 1e-15 || (v >= best.1 - 1e-15 && y < best.0) {
            best = (y, v.max(best.1));
        }
    }
    best.0.clamp(lo, hi)
}

/// Parameter switches applied at given simulation steps.
pub type Schedule = Vec<(usize, Vector)>;

/// Measurement source with bounded noise and an optional parameter schedule.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: RegressorSpec,
    theta_base: Vector,
    theta_now: Vector,
    noise: HPolytope,
    noise_lo: f64,
    noise_hi: f64,
    schedule: Schedule,
    rng: ChaCha8Rng,
}

impl Environment {
    pub fn new(
        spec: RegressorSpec,
        theta_star: Vector,
        noise: HPolytope,
        schedule: Schedule,
    ) -> Result<Self, EnvError> {
        if theta_star.len() != spec.dim() {
            return Err(EnvError::DimensionMismatch("theta* vs regressor basis".into()));
        }
        if noise.dim() != 1 {
            return Err(EnvError::DimensionMismatch("noise set must be scalar".into()));
        }
        for (step, theta) in &schedule {
            if theta.len() != spec.dim() {
                return Err(EnvError::DimensionMismatch(format!(
                    "schedule entry at step {step} vs regressor basis"
                )));
            }
        }
        let mut sorted = schedule;
        sorted.sort_by_key(|(step, _)| *step);
        let (lo_box, hi_box) = noise.bounding_box(&crate::numerics::NumericsConfig::default())?;
        Ok(Environment {
            theta_now: theta_star.clone(),
            theta_base: theta_star,
            spec,
            noise,
            noise_lo: lo_box[0],
            noise_hi: hi_box[0],
            schedule: sorted,
            rng: ChaCha8Rng::seed_from_u64(0),
        })
    }

    /// Restarts the noise stream; runs derive one seed per environment.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn spec(&self) -> &RegressorSpec {
        &self.spec
    }

    pub fn theta_current(&self) -> &Vector {
        &self.theta_now
    }

    pub fn noise_set(&self) -> &HPolytope {
        &self.noise
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Applies every schedule switch due at or before step `k`.
    pub fn advance_to(&mut self, k: usize) {
        let mut theta = &self.theta_base;
        for (step, candidate) in &self.schedule {
            if *step <= k {
                theta = candidate;
            }
        }
        self.theta_now = theta.clone();
    }

    /// Noise-free model value at the current parameter.
    pub fn response(&self, y: f64) -> f64 {
        self.spec.response(&self.theta_now, y)
    }

    /// Noisy measurement `z = g(y) + phi(y)' theta* + v`, `v` uniform in the
    /// noise interval.
    pub fn measure(&mut self, y: f64) -> f64 {
        let u: f64 = self.rng.gen();
        let v = self.noise_lo + (self.noise_hi - self.noise_lo) * u;
        self.response(y) + v
    }

    /// Best achievable output under the current parameter.
    pub fn optimal_setpoint(&self, lo: f64, hi: f64) -> Result<f64, EnvError> {
        optimum_map(&self.spec, &self.theta_now, lo, hi)
    }
}

/// Least-squares coefficients of `sum_j c_j x^powers[j]` fitted to samples.
pub(crate) fn polyfit(xs: &[f64], ys: &[f64], powers: &[u32]) -> Result<Vector, EnvError> {
    if xs.len() != ys.len() {
        return Err(EnvError::DimensionMismatch("sample lengths".into()));
    }
    if xs.len() < powers.len() {
        return Err(EnvError::Fit("fewer samples than coefficients".into()));
    }
    let mut a = Matrix::zeros(xs.len(), powers.len());
    for (i, &x) in xs.iter().enumerate() {
        for (j, &p) in powers.iter().enumerate() {
            a[(i, j)] = x.powi(p as i32);
        }
    }
    let svd = a.svd(true, true);
    svd.solve(&Vector::from_column_slice(ys), 1e-12)
        .map(|sol| Vector::from_fn(powers.len(), |i, _| sol[(i, 0)]))
        .map_err(|e| EnvError::Fit(e.to_string()))
}

/// One independent control loop of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioLoop {
    /// Distinguishes loops in multi-loop scenarios; empty for single loops.
    pub label: String,
    pub plant: LiftedPlant,
    pub constraints: ConstraintSets,
    pub env: Environment,
    pub theta0: HPolytope,
    pub x0: Vector,
}

/// A named bundle of loops plus the step budget its figures use.
#[derive(Debug, Clone)]
pub struct ScenarioBundle {
    pub name: String,
    pub loops: Vec<ScenarioLoop>,
    pub default_steps: usize,
}

/// Optional replacements for scenario defaults.
#[derive(Debug, Clone, Default)]
pub struct ScenarioOverrides {
    pub theta_star: Option<Vec<f64>>,
    pub noise_bound: Option<f64>,
    /// `(step, theta)` switches; replaces the scenario's own schedule.
    pub schedule: Option<Vec<(usize, Vec<f64>)>>,
    /// MPPT only: `(step, irradiance)` pairs converted to parameter switches.
    pub irradiance: Option<Vec<(usize, f64)>>,
}

const MPPT_SHORT_CIRCUIT_CURRENT: f64 = 1.0;
const MPPT_DIODE_SATURATION: f64 = 1e-7;
const MPPT_THERMAL_VOLTAGE: f64 = 0.0625;
const MPPT_ORDER: u32 = 10;

/// Normalized single-diode output power at voltage `v` under irradiance `g`.
fn diode_power(v: f64, g: f64) -> f64 {
    v * (g * MPPT_SHORT_CIRCUIT_CURRENT
        - MPPT_DIODE_SATURATION * ((v / MPPT_THERMAL_VOLTAGE).exp() - 1.0))
}

/// Polynomial coefficients reproducing the diode curve at irradiance `g`.
/// The curve is affine in `g`, so the fit splits into a scaled part and a
/// fixed part.
fn mppt_theta(g: f64) -> Result<Vector, EnvError> {
    let (theta_scaled, theta_fixed) = mppt_theta_parts()?;
    Ok(theta_scaled * g + theta_fixed)
}

fn mppt_theta_parts() -> Result<(Vector, Vector), EnvError> {
    let powers: Vec<u32> = (0..=MPPT_ORDER).collect();
    let n = 401;
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let scaled: Vec<f64> = xs.iter().map(|&v| v * MPPT_SHORT_CIRCUIT_CURRENT).collect();
    let fixed: Vec<f64> = xs.iter().map(|&v| diode_power(v, 0.0)).collect();
    Ok((polyfit(&xs, &scaled, &powers)?, polyfit(&xs, &fixed, &powers)?))
}

const DRONE_SOURCE_X: (f64, f64) = (0.6, -0.8);
const DRONE_SOURCE_Y: (f64, f64) = (-0.4, 0.7);
const DRONE_MOVE_STEP: usize = 60;

/// Light intensity along one axis with the other axis at its own source:
/// inverse-square law with unit regularization and unit peak.
fn light_intensity(p: f64, source: f64) -> f64 {
    1.0 / ((p - source).powi(2) + 1.0)
}

/// Quadratic surrogate of the axis intensity fitted symmetrically around the
/// source, so its maximizer equals the source position.
fn drone_theta(source: f64) -> Result<Vector, EnvError> {
    let n = 201;
    let xs: Vec<f64> = (0..n).map(|i| source - 1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&p| light_intensity(p, source)).collect();
    polyfit(&xs, &ys, &[0, 1, 2])
}

/// Componentwise interval hull of the given parameter vectors, padded by a
/// quarter of the per-coordinate range.
fn box_hull(thetas: &[Vector]) -> Result<HPolytope, EnvError> {
    let dim = thetas[0].len();
    let mut lo = Vector::from_element(dim, f64::INFINITY);
    let mut hi = Vector::from_element(dim, f64::NEG_INFINITY);
    for theta in thetas {
        for i in 0..dim {
            lo[i] = lo[i].min(theta[i]);
            hi[i] = hi[i].max(theta[i]);
        }
    }
    for i in 0..dim {
        let pad = 0.25 * (hi[i] - lo[i]) + 1e-3;
        lo[i] -= pad;
        hi[i] += pad;
    }
    Ok(HPolytope::from_box(&lo, &hi)?)
}

fn integrator_plant() -> Result<LiftedPlant, EnvError> {
    Ok(LiftedPlant::from_matrices(
        Matrix::from_element(1, 1, 1.0),
        Matrix::from_element(1, 1, 1.0),
        Matrix::from_element(1, 1, 1.0),
    )?)
}

/// Builds one of the bundled scenario families: `numerical`, `mppt`, or
/// `drone`.
pub fn scenario(name: &str, ov: &ScenarioOverrides) -> Result<ScenarioBundle, EnvError> {
    match name {
        "numerical" => scenario_numerical(ov),
        "mppt" => scenario_mppt(ov),
        "drone" => scenario_drone(ov),
        other => Err(EnvError::UnknownScenario(other.into())),
    }
}

fn override_schedule(
    ov: &ScenarioOverrides,
    default: Schedule,
    dim: usize,
) -> Result<Schedule, EnvError> {
    match &ov.schedule {
        None => Ok(default),
        Some(entries) => entries
            .iter()
            .map(|(step, theta)| {
                if theta.len() != dim {
                    return Err(EnvError::DimensionMismatch(format!(
                        "schedule entry at step {step}"
                    )));
                }
                Ok((*step, Vector::from_column_slice(theta)))
            })
            .collect(),
    }
}

fn scenario_numerical(ov: &ScenarioOverrides) -> Result<ScenarioBundle, EnvError> {
    let plant = LiftedPlant::from_matrices(
        Matrix::from_row_slice(2, 2, &[1.1, 2.0, 0.0, 0.95]),
        Matrix::from_row_slice(2, 1, &[0.0, 0.079]),
        Matrix::from_row_slice(1, 2, &[0.0, 1.0]),
    )?;
    let constraints = ConstraintSets::new(
        HPolytope::from_box(
            &Vector::from_vec(vec![-25.0, -25.0]),
            &Vector::from_vec(vec![25.0, 25.0]),
        )?,
        HPolytope::symmetric_interval(5.0)?,
    );
    let spec = RegressorSpec::new(vec![0, 1], vec![0.0, 0.0, -1.0])?;
    let theta_star = match &ov.theta_star {
        Some(t) => Vector::from_column_slice(t),
        None => Vector::from_vec(vec![-1.0, 2.0]),
    };
    let noise = HPolytope::symmetric_interval(ov.noise_bound.unwrap_or(1.0))?;
    let schedule = override_schedule(ov, Vec::new(), spec.dim())?;
    let env = Environment::new(spec, theta_star, noise, schedule)?;
    let theta0 = HPolytope::outer_ngon(3.0, 8)?;
    Ok(ScenarioBundle {
        name: "numerical".into(),
        loops: vec![ScenarioLoop {
            label: String::new(),
            plant,
            constraints,
            env,
            theta0,
            x0: Vector::zeros(2),
        }],
        default_steps: 100,
    })
}

fn scenario_mppt(ov: &ScenarioOverrides) -> Result<ScenarioBundle, EnvError> {
    let plant = integrator_plant()?;
    let constraints = ConstraintSets::new(
        HPolytope::from_box(&Vector::from_vec(vec![0.0]), &Vector::from_vec(vec![1.0]))?,
        HPolytope::symmetric_interval(0.1)?,
    );
    let spec = RegressorSpec::with_constant(MPPT_ORDER);
    let profile: Vec<(usize, f64)> = match &ov.irradiance {
        Some(p) => p.clone(),
        None => vec![(0, 1.0), (100, 0.6), (200, 0.8)],
    };
    if profile.is_empty() {
        return Err(EnvError::DimensionMismatch("empty irradiance profile".into()));
    }
    let theta_star = match &ov.theta_star {
        Some(t) => Vector::from_column_slice(t),
        None => mppt_theta(profile[0].1)?,
    };
    let mut default_schedule = Schedule::new();
    for &(step, g) in &profile {
        default_schedule.push((step, mppt_theta(g)?));
    }
    let schedule = override_schedule(ov, default_schedule, spec.dim())?;
    let noise = HPolytope::symmetric_interval(ov.noise_bound.unwrap_or(0.02))?;
    let env = Environment::new(spec, theta_star, noise, schedule)?;
    let theta0 = box_hull(&[mppt_theta(0.2)?, mppt_theta(1.2)?])?;
    Ok(ScenarioBundle {
        name: "mppt".into(),
        loops: vec![ScenarioLoop {
            label: String::new(),
            plant,
            constraints,
            env,
            theta0,
            x0: Vector::from_vec(vec![0.1]),
        }],
        default_steps: 300,
    })
}

fn scenario_drone(ov: &ScenarioOverrides) -> Result<ScenarioBundle, EnvError> {
    let mut loops = Vec::new();
    for (label, (start, moved)) in [("x", DRONE_SOURCE_X), ("y", DRONE_SOURCE_Y)] {
        let plant = integrator_plant()?;
        let constraints = ConstraintSets::new(
            HPolytope::from_box(&Vector::from_vec(vec![-2.0]), &Vector::from_vec(vec![2.0]))?,
            HPolytope::symmetric_interval(0.25)?,
        );
        let spec = RegressorSpec::new(vec![0, 1, 2], Vec::new())?;
        let theta_star = match &ov.theta_star {
            Some(t) => Vector::from_column_slice(t),
            None => drone_theta(start)?,
        };
        let default_schedule = vec![(DRONE_MOVE_STEP, drone_theta(moved)?)];
        let schedule = override_schedule(ov, default_schedule, spec.dim())?;
        let noise = HPolytope::symmetric_interval(ov.noise_bound.unwrap_or(0.02))?;
        let env = Environment::new(spec, theta_star, noise, schedule)?;
        let fits: Vec<Vector> = (0..9)
            .map(|i| drone_theta(-1.0 + 0.25 * i as f64))
            .collect::<Result<_, _>>()?;
        let theta0 = box_hull(&fits)?;
        loops.push(ScenarioLoop {
            label: label.into(),
            plant,
            constraints,
            env,
            theta0,
            x0: Vector::zeros(1),
        });
    }
    Ok(ScenarioBundle { name: "drone".into(), loops, default_steps: 120 })
}
