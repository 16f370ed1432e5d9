//! Set-membership parameter estimation: every measurement carves a
//! non-falsified slab out of the parameter set, and uniform samples over the
//! surviving set provide the moments the stochastic controllers consume.

use crate::environment::{optimum_map_clipped, RegressorSpec};
use crate::numerics::{Matrix, NumericsConfig, Vector};
use crate::plant::{LiftedPlant, PlantError};
use crate::polytope::{HPolytope, PolytopeError};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum EstimatorError {
    EmptySet,
    Set(String),
    Plant(String),
}

impl core::fmt::Display for EstimatorError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            EstimatorError::EmptySet => write!(f, "parameter set is empty"),
            EstimatorError::Set(what) => write!(f, "set operation failed: {what}"),
            EstimatorError::Plant(what) => write!(f, "steady-state map failed: {what}"),
        }
    }
}

impl std::error::Error for EstimatorError {}

impl From<PolytopeError> for EstimatorError {
    fn from(e: PolytopeError) -> Self {
        EstimatorError::Set(e.to_string())
    }
}

impl From<PlantError> for EstimatorError {
    fn from(e: PlantError) -> Self {
        EstimatorError::Plant(e.to_string())
    }
}

/// Append-only log of measurement/input pairs gathered since the run began.
#[derive(Debug, Clone, Default)]
pub struct InfoState {
    entries: Vec<(f64, f64)>,
}

impl InfoState {
    pub fn push(&mut self, z: f64, u: f64) {
        self.entries.push((z, u));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }
}

/// Moment summary of the current parameter set: sampled parameter mean, mean
/// and variance of the implied best output, and the induced steady-state
/// moments. The sample caches let downstream consumers reuse the exact draws.
#[derive(Debug, Clone)]
pub struct ParamEstimate {
    pub theta_bar: Vector,
    pub r_bar: f64,
    pub p_r: f64,
    pub xs_bar: Vector,
    pub us_bar: f64,
    pub p_x: Matrix,
    pub p_u: f64,
    pub samples: Vec<Vector>,
    pub r_samples: Vec<f64>,
}

/// Slab of parameters consistent with one measurement: all `theta` for which
/// `z - g(y) - phi(y)' theta` lies in the noise set.
pub fn nonfalsified_set(
    spec: &RegressorSpec,
    noise: &HPolytope,
    y: f64,
    z: f64,
) -> Result<HPolytope, EstimatorError> {
    let phi = spec.phi(y);
    let p = phi.len();
    let rows = noise.num_facets();
    let mut a = Matrix::zeros(rows, p);
    let mut b = Vector::zeros(rows);
    let innovation = z - spec.offset_at(y);
    for i in 0..rows {
        let hv = noise.facet_normals()[(i, 0)];
        for j in 0..p {
            a[(i, j)] = -hv * phi[j];
        }
        b[i] = noise.facet_offsets()[i] - hv * innovation;
    }
    Ok(HPolytope::new(a, b)?)
}

/// Sequential set-membership estimator with reset-on-falsification.
#[derive(Debug, Clone)]
pub struct Estimator {
    spec: RegressorSpec,
    noise: HPolytope,
    theta0: HPolytope,
    theta: HPolytope,
    info: InfoState,
    cfg: NumericsConfig,
}

impl Estimator {
    pub fn new(spec: RegressorSpec, noise: HPolytope, theta0: HPolytope) -> Self {
        Estimator {
            spec,
            noise,
            theta: theta0.clone(),
            theta0,
            info: InfoState::default(),
            cfg: NumericsConfig::default(),
        }
    }

    pub fn spec(&self) -> &RegressorSpec {
        &self.spec
    }

    pub fn theta_set(&self) -> &HPolytope {
        &self.theta
    }

    pub fn noise_set(&self) -> &HPolytope {
        &self.noise
    }

    pub fn info(&self) -> &InfoState {
        &self.info
    }

    pub fn record_input(&mut self, u: f64) {
        if let Some(last) = self.info.entries.last_mut() {
            last.1 = u;
        }
    }

    /// Intersects the parameter set with the measurement's non-falsified
    /// slab, pruning redundant facets. An empty intersection restores the
    /// initial set and reports `true`: the environment must have changed.
    pub fn update(&mut self, y: f64, z: f64) -> Result<bool, EstimatorError> {
        self.info.push(z, f64::NAN);
        let delta = nonfalsified_set(&self.spec, &self.noise, y, z)?;
        let cut = self.theta.intersect(&delta)?;
        if cut.is_empty(&self.cfg)? {
            self.theta = self.theta0.clone();
            return Ok(true);
        }
        self.theta = cut.remove_redundancy(&self.cfg)?;
        Ok(false)
    }

    /// Uniform-sample moments of the parameter set and of the best-output
    /// map over it, with steady-state covariances propagated through the
    /// linear equilibrium map.
    pub fn moments<R: Rng>(
        &self,
        plant: &LiftedPlant,
        y_range: (f64, f64),
        sample_count: usize,
        rng: &mut R,
    ) -> Result<ParamEstimate, EstimatorError> {
        if self.theta.is_empty(&self.cfg)? {
            return Err(EstimatorError::EmptySet);
        }
        let samples = self.theta.sample_uniform(sample_count, rng, &self.cfg)?;
        let p = self.theta.dim();
        let mut theta_bar = Vector::zeros(p);
        for s in &samples {
            theta_bar += s;
        }
        theta_bar /= samples.len() as f64;
        let (lo, hi) = y_range;
        let r_samples: Vec<f64> = samples
            .iter()
            .map(|theta| optimum_map_clipped(&self.spec, theta, lo, hi))
            .collect();
        let r_bar = r_samples.iter().sum::<f64>() / r_samples.len() as f64;
        let p_r = if r_samples.len() > 1 {
            r_samples.iter().map(|r| (r - r_bar).powi(2)).sum::<f64>()
                / (r_samples.len() - 1) as f64
        } else {
            0.0
        };
        let (mx, mu) = plant.steady_state_maps()?;
        let xs_bar = &mx * r_bar;
        let us_bar = mu * r_bar;
        let p_x = &mx * mx.transpose() * p_r;
        let p_u = mu * mu * p_r;
        Ok(ParamEstimate { theta_bar, r_bar, p_r, xs_bar, us_bar, p_x, p_u, samples, r_samples })
    }
}
