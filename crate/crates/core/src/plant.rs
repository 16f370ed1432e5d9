//! Linear plant in lifted state-space form, with steady-state maps and the
//! constraint sets the controllers enforce.
//!
//! A SISO ARX model `y_k = -a_1 y_{k-1} - ... - a_n y_{k-n} + b_1 u_{k-1} +
//! ... + b_m u_{k-m}` lifts into `x_{k+1} = A x_k + B u_k`, `y_k = C x_k`
//! with the state holding the output and input histories. Plants may also be
//! constructed from explicit `(A, B, C)` matrices, as the bundled scenarios
//! do.

use crate::numerics::{self, Matrix, NumericsConfig, Vector};
use crate::polytope::{HPolytope, PolytopeError};

#[derive(Debug, Clone, PartialEq)]
pub enum PlantError {
    NotObservable,
    NotControllable,
    /// The equilibrium system has no unique solution for the requested output.
    RankDeficient,
    DimensionMismatch(String),
    Set(PolytopeError),
}

impl core::fmt::Display for PlantError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PlantError::NotObservable => write!(f, "(A, C) is not observable"),
            PlantError::NotControllable => write!(f, "(A, B) is not stabilizable"),
            PlantError::RankDeficient => write!(f, "equilibrium system is rank deficient"),
            PlantError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            PlantError::Set(e) => write!(f, "constraint set: {e}"),
        }
    }
}

impl std::error::Error for PlantError {}

impl From<PolytopeError> for PlantError {
    fn from(e: PolytopeError) -> Self {
        PlantError::Set(e)
    }
}

/// State and input constraint polytopes; the stage constraint is their
/// Cartesian product.
#[derive(Debug, Clone)]
pub struct ConstraintSets {
    pub x: HPolytope,
    pub u: HPolytope,
}

impl ConstraintSets {
    pub fn new(x: HPolytope, u: HPolytope) -> Self {
        ConstraintSets { x, u }
    }
}

/// Linear SISO plant `x+ = Ax + Bu`, `y = Cx`.
#[derive(Debug, Clone)]
pub struct LiftedPlant {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    arx: Option<(Vec<f64>, Vec<f64>)>,
}

/// Resultant-based coprimality of `z^n + a_1 z^(n-1) + ... + a_n` and
/// `b_1 z^(m-1) + ... + b_m`: full Sylvester rank means no shared root.
fn arx_coprime(a_coeffs: &[f64], b_coeffs: &[f64]) -> bool {
    let Some(lead) = b_coeffs.iter().position(|v| v.abs() > 1e-12) else {
        // Zero input polynomial: the controllability test reports it.
        return true;
    };
    let b = &b_coeffs[lead..];
    let db = b.len() - 1;
    if db == 0 {
        return true;
    }
    let da = a_coeffs.len();
    let size = da + db;
    let mut syl = Matrix::zeros(size, size);
    for i in 0..db {
        syl[(i, i)] = 1.0;
        for (j, &c) in a_coeffs.iter().enumerate() {
            syl[(i, i + 1 + j)] = c;
        }
    }
    for i in 0..da {
        for (j, &c) in b.iter().enumerate() {
            syl[(db + i, i + j)] = c;
        }
    }
    numerics::rank(&syl) == size
}

impl LiftedPlant {
    /// Builds a plant from explicit matrices. Requires `(A, B)` controllable
    /// and the equilibrium block `[[A - I, B], [C, 0]]` full rank so every
    /// output value has a unique steady state. Observability of `(A, C)` is
    /// not demanded here: the state is measured directly (no observer runs),
    /// and benchmark plants pick C to read a single physical channel.
    pub fn from_matrices(a: Matrix, b: Matrix, c: Matrix) -> Result<Self, PlantError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(PlantError::DimensionMismatch("A must be square".into()));
        }
        if b.nrows() != n || b.ncols() != 1 {
            return Err(PlantError::DimensionMismatch("B must be n x 1".into()));
        }
        if c.nrows() != 1 || c.ncols() != n {
            return Err(PlantError::DimensionMismatch("C must be 1 x n".into()));
        }
        let mut ctrb = Matrix::zeros(n, n);
        let mut col = b.clone();
        for j in 0..n {
            for i in 0..n {
                ctrb[(i, j)] = col[(i, 0)];
            }
            col = &a * &col;
        }
        if numerics::rank(&ctrb) < n {
            return Err(PlantError::NotControllable);
        }
        let plant = LiftedPlant { a, b, c, arx: None };
        if numerics::rank(&plant.equilibrium_block()) < n + 1 {
            return Err(PlantError::RankDeficient);
        }
        Ok(plant)
    }

    /// Lifts ARX coefficient vectors into state-space form. The state stacks
    /// the last `n` outputs and last `m` inputs.
    pub fn lift_arx(a_coeffs: &[f64], b_coeffs: &[f64]) -> Result<Self, PlantError> {
        let n = a_coeffs.len();
        let m = b_coeffs.len();
        if n == 0 || m == 0 {
            return Err(PlantError::DimensionMismatch("ARX orders must be positive".into()));
        }
        let nx = n + m;
        let mut a = Matrix::zeros(nx, nx);
        let mut b = Matrix::zeros(nx, 1);
        let mut c = Matrix::zeros(1, nx);
        for j in 0..n {
            a[(0, j)] = -a_coeffs[j];
        }
        for j in 0..m {
            a[(0, n + j)] = b_coeffs[j];
        }
        for i in 1..n {
            a[(i, i - 1)] = 1.0;
        }
        b[(n, 0)] = 1.0;
        for i in 1..m {
            a[(n + i, n + i - 1)] = 1.0;
        }
        c[(0, 0)] = 1.0;
        // A common factor between the output and input polynomials creates a
        // hidden mode the measurements can never reveal. The Sylvester rank
        // test rejects such non-minimal ARX descriptions.
        if !arx_coprime(a_coeffs, b_coeffs) {
            return Err(PlantError::NotObservable);
        }
        let mut plant = LiftedPlant::from_matrices(a, b, c)?;
        plant.arx = Some((a_coeffs.to_vec(), b_coeffs.to_vec()));
        Ok(plant)
    }

    /// The ARX coefficient vectors this plant was lifted from, when built by
    /// [`LiftedPlant::lift_arx`].
    pub fn arx_origin(&self) -> Option<(&[f64], &[f64])> {
        self.arx.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()))
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn step(&self, x: &Vector, u: f64) -> Result<Vector, PlantError> {
        if x.len() != self.state_dim() {
            return Err(PlantError::DimensionMismatch("state length".into()));
        }
        let mut next = &self.a * x;
        for i in 0..next.len() {
            next[i] += self.b[(i, 0)] * u;
        }
        Ok(next)
    }

    pub fn output(&self, x: &Vector) -> Result<f64, PlantError> {
        if x.len() != self.state_dim() {
            return Err(PlantError::DimensionMismatch("state length".into()));
        }
        Ok(self.c.row(0).dot(&x.transpose()))
    }

    /// Equilibrium `(x_s, u_s)` holding the output at `r`: the unique
    /// solution of the square block system stacking `(A - I) x + B u = 0`
    /// over `C x = r`.
    pub fn steady_state_from_output(&self, r: f64) -> Result<(Vector, f64), PlantError> {
        let (mx, mu) = self.steady_state_maps()?;
        Ok((mx * r, mu * r))
    }

    fn equilibrium_block(&self) -> Matrix {
        let n = self.state_dim();
        let mut block = Matrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..n {
                block[(i, j)] = self.a[(i, j)] - if i == j { 1.0 } else { 0.0 };
            }
            block[(i, n)] = self.b[(i, 0)];
        }
        for j in 0..n {
            block[(n, j)] = self.c[(0, j)];
        }
        block
    }

    /// Linear maps `r -> x_s`, `r -> u_s`; the equilibrium family is linear
    /// in the commanded output.
    pub fn steady_state_maps(&self) -> Result<(Vector, f64), PlantError> {
        let n = self.state_dim();
        let block = self.equilibrium_block();
        if numerics::rank(&block) < n + 1 {
            return Err(PlantError::RankDeficient);
        }
        let mut rhs = Vector::zeros(n + 1);
        rhs[n] = 1.0;
        let sol = block.clone().lu().solve(&rhs).ok_or(PlantError::RankDeficient)?;
        let resid = (&block * &sol - &rhs).amax();
        if resid > 1e-10 {
            return Err(PlantError::RankDeficient);
        }
        Ok((Vector::from_fn(n, |i, _| sol[i]), sol[n]))
    }

    /// Polytope of constraint-admissible equilibria in `(x, u)` coordinates.
    /// The equilibrium equality is encoded as an opposing pair of halfspaces.
    pub fn steady_state_set(&self, constraints: &ConstraintSets) -> Result<HPolytope, PlantError> {
        let n = self.state_dim();
        if constraints.x.dim() != n || constraints.u.dim() != 1 {
            return Err(PlantError::DimensionMismatch("constraint sets vs plant".into()));
        }
        let mx = constraints.x.num_facets();
        let mu = constraints.u.num_facets();
        let rows = mx + mu + 2 * n;
        let mut g = Matrix::zeros(rows, n + 1);
        let mut h = Vector::zeros(rows);
        for i in 0..mx {
            for j in 0..n {
                g[(i, j)] = constraints.x.facet_normals()[(i, j)];
            }
            h[i] = constraints.x.facet_offsets()[i];
        }
        for i in 0..mu {
            g[(mx + i, n)] = constraints.u.facet_normals()[(i, 0)];
            h[mx + i] = constraints.u.facet_offsets()[i];
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.a[(i, j)] - if i == j { 1.0 } else { 0.0 };
                g[(mx + mu + 2 * i, j)] = v;
                g[(mx + mu + 2 * i + 1, j)] = -v;
            }
            g[(mx + mu + 2 * i, n)] = self.b[(i, 0)];
            g[(mx + mu + 2 * i + 1, n)] = -self.b[(i, 0)];
        }
        Ok(HPolytope::new(g, h)?)
    }

    /// Interval of output setpoints reachable by an admissible equilibrium.
    pub fn output_range(
        &self,
        constraints: &ConstraintSets,
        cfg: &NumericsConfig,
    ) -> Result<(f64, f64), PlantError> {
        let set = self.steady_state_set(constraints)?;
        let n = self.state_dim();
        let mut d = Vector::zeros(n + 1);
        for j in 0..n {
            d[j] = self.c[(0, j)];
        }
        let hi = set.support(&d, cfg)?;
        let lo = -set.support(&(-d), cfg)?;
        Ok((lo, hi))
    }
}
