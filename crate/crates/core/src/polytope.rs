//! Halfspace polytopes `P = {x : Ax <= b}` and the calculus built on top of
//! the LP core: intersection, emptiness, redundancy removal, Chebyshev
//! centering, support functions, uniform sampling and volume.
//!
//! Sets are kept in halfspace form throughout because the estimator only ever
//! adds cuts; vertices are enumerated just for two-dimensional area and
//! plotting. Sampling is hit-and-run seeded at the Chebyshev center, which
//! stays well defined on the thin, elongated sets the estimator produces.

use crate::numerics::{self, Matrix, NumericsConfig, NumericsError, Vector};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum PolytopeError {
    EmptySet,
    UnboundedSet,
    NonPositiveScale,
    DimensionMismatch(String),
    Numerics(NumericsError),
}

impl core::fmt::Display for PolytopeError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            PolytopeError::EmptySet => write!(f, "polytope is empty"),
            PolytopeError::UnboundedSet => write!(f, "polytope is unbounded"),
            PolytopeError::NonPositiveScale => write!(f, "scale factor must be positive"),
            PolytopeError::DimensionMismatch(what) => write!(f, "dimension mismatch: {what}"),
            PolytopeError::Numerics(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl std::error::Error for PolytopeError {}

impl From<NumericsError> for PolytopeError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Infeasible => PolytopeError::EmptySet,
            NumericsError::Unbounded => PolytopeError::UnboundedSet,
            other => PolytopeError::Numerics(other),
        }
    }
}

/// Halfspace polytope `{x : a x <= b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    a: Matrix,
    b: Vector,
}

const HIT_AND_RUN_BURN_IN: usize = 100;
const HIT_AND_RUN_THINNING: usize = 5;
const VOLUME_MC_SAMPLES: usize = 100_000;
const VOLUME_MC_SEED: u64 = 0x71f0_3c2a_9b4d_5e66;

impl HPolytope {
    pub fn new(a: Matrix, b: Vector) -> Result<Self, PolytopeError> {
        if a.nrows() != b.len() {
            return Err(PolytopeError::DimensionMismatch(format!(
                "{} facet rows but {} offsets",
                a.nrows(),
                b.len()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
            return Err(PolytopeError::DimensionMismatch("non-finite facet data".into()));
        }
        Ok(HPolytope { a, b })
    }

    /// Axis-aligned box `lo <= x <= hi`.
    pub fn from_box(lo: &Vector, hi: &Vector) -> Result<Self, PolytopeError> {
        if lo.len() != hi.len() {
            return Err(PolytopeError::DimensionMismatch("box corners".into()));
        }
        let n = lo.len();
        let mut a = Matrix::zeros(2 * n, n);
        let mut b = Vector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = hi[i];
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lo[i];
        }
        HPolytope::new(a, b)
    }

    /// Symmetric interval `|x| <= bound` in one dimension.
    pub fn symmetric_interval(bound: f64) -> Result<Self, PolytopeError> {
        let lo = Vector::from_vec(vec![-bound]);
        let hi = Vector::from_vec(vec![bound]);
        HPolytope::from_box(&lo, &hi)
    }

    /// Regular polygon whose facets are tangent to the circle of the given
    /// radius, i.e. an outer approximation of the disk.
    pub fn outer_ngon(radius: f64, sides: usize) -> Result<Self, PolytopeError> {
        if sides < 3 {
            return Err(PolytopeError::DimensionMismatch("polygon needs >= 3 sides".into()));
        }
        let mut a = Matrix::zeros(sides, 2);
        let b = Vector::from_element(sides, radius);
        for k in 0..sides {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / sides as f64;
            a[(k, 0)] = ang.cos();
            a[(k, 1)] = ang.sin();
        }
        HPolytope::new(a, b)
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_facets(&self) -> usize {
        self.a.nrows()
    }

    pub fn facet_normals(&self) -> &Matrix {
        &self.a
    }

    pub fn facet_offsets(&self) -> &Vector {
        &self.b
    }

    pub fn contains(&self, x: &Vector, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        for i in 0..self.a.nrows() {
            if self.a.row(i).dot(&x.transpose()) > self.b[i] + tol {
                return false;
            }
        }
        true
    }

    /// Stacks the facets of both operands; the represented set is the
    /// intersection.
    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope, PolytopeError> {
        if self.dim() != other.dim() {
            return Err(PolytopeError::DimensionMismatch(format!(
                "intersecting dim {} with dim {}",
                self.dim(),
                other.dim()
            )));
        }
        let rows = self.a.nrows() + other.a.nrows();
        let mut a = Matrix::zeros(rows, self.dim());
        let mut b = Vector::zeros(rows);
        for i in 0..self.a.nrows() {
            for j in 0..self.dim() {
                a[(i, j)] = self.a[(i, j)];
            }
            b[i] = self.b[i];
        }
        for i in 0..other.a.nrows() {
            for j in 0..self.dim() {
                a[(self.a.nrows() + i, j)] = other.a[(i, j)];
            }
            b[self.a.nrows() + i] = other.b[i];
        }
        HPolytope::new(a, b)
    }

    /// Largest inscribed ball: returns its center and radius.
    ///
    /// The radius is negative for empty sets (depth of the least-violated
    /// point), which is what [`HPolytope::is_empty`] keys on.
    pub fn chebyshev_center(&self, cfg: &NumericsConfig) -> Result<(Vector, f64), PolytopeError> {
        let n = self.dim();
        let m = self.a.nrows();
        // Variables (x, r), maximizing r.
        let mut g = Matrix::zeros(m, n + 1);
        let mut h = Vector::zeros(m);
        for i in 0..m {
            let norm = self.a.row(i).norm();
            for j in 0..n {
                g[(i, j)] = self.a[(i, j)];
            }
            g[(i, n)] = norm;
            h[i] = self.b[i];
        }
        let mut c = Vector::zeros(n + 1);
        c[n] = -1.0;
        let eq = Matrix::zeros(0, n + 1);
        let beq = Vector::zeros(0);
        let sol = numerics::solve_lp(&c, &eq, &beq, &g, &h, cfg)?;
        let center = Vector::from_fn(n, |i, _| sol.x[i]);
        Ok((center, sol.x[n]))
    }

    pub fn is_empty(&self, cfg: &NumericsConfig) -> Result<bool, PolytopeError> {
        match self.chebyshev_center(cfg) {
            Ok((_, radius)) => Ok(radius < -cfg.tol_feas),
            Err(PolytopeError::UnboundedSet) => Ok(false),
            Err(PolytopeError::EmptySet) => Ok(true),
            Err(e) => Err(e),
        }
    }

    /// Support function `max { d'x : x in P }`.
    pub fn support(&self, d: &Vector, cfg: &NumericsConfig) -> Result<f64, PolytopeError> {
        if d.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch("support direction".into()));
        }
        let c = -d;
        let eq = Matrix::zeros(0, self.dim());
        let beq = Vector::zeros(0);
        let sol = numerics::solve_lp(&c, &eq, &beq, &self.a, &self.b, cfg)?;
        Ok(-sol.objective)
    }

    /// Drops facets that do not change the set. The survivors are returned in
    /// their original order; duplicates keep their first occurrence.
    pub fn remove_redundancy(&self, cfg: &NumericsConfig) -> Result<HPolytope, PolytopeError> {
        if self.is_empty(cfg)? {
            return Err(PolytopeError::EmptySet);
        }
        let n = self.dim();
        let m = self.a.nrows();
        // Cheap pass first: exact duplicates after row normalization.
        let mut keep: Vec<usize> = Vec::with_capacity(m);
        for i in 0..m {
            let ni = self.a.row(i).norm();
            if ni <= 1e-14 {
                // 0'x <= b is vacuous for nonempty sets.
                continue;
            }
            let dup = keep.iter().any(|&k| {
                let nk = self.a.row(k).norm();
                let mut same = (self.b[k] / nk - self.b[i] / ni).abs() <= 1e-12;
                for j in 0..n {
                    same &= (self.a[(k, j)] / nk - self.a[(i, j)] / ni).abs() <= 1e-12;
                }
                same
            });
            if !dup {
                keep.push(i);
            }
        }
        // LP pass: a facet is redundant if relaxing it by one unit does not
        // let its own direction exceed the original bound. Keeping the
        // relaxed row in the program bounds every LP by construction.
        let mut active = keep.clone();
        let mut idx = 0;
        while idx < active.len() {
            let row = active[idx];
            let mut g = Matrix::zeros(active.len(), n);
            let mut h = Vector::zeros(active.len());
            for (r, &other) in active.iter().enumerate() {
                for j in 0..n {
                    g[(r, j)] = self.a[(other, j)];
                }
                h[r] = self.b[other];
            }
            h[idx] += 1.0 + self.b[row].abs();
            let d = Vector::from_fn(n, |j, _| self.a[(row, j)]);
            let eq = Matrix::zeros(0, n);
            let beq = Vector::zeros(0);
            let sol = numerics::solve_lp(&(-&d), &eq, &beq, &g, &h, cfg)?;
            let redundant =
                -sol.objective <= self.b[row] + cfg.tol_feas * (1.0 + self.b[row].abs());
            if redundant && active.len() > 1 {
                active.remove(idx);
            } else {
                idx += 1;
            }
        }
        let mut a = Matrix::zeros(active.len(), n);
        let mut b = Vector::zeros(active.len());
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                a[(r, j)] = self.a[(i, j)];
            }
            b[r] = self.b[i];
        }
        HPolytope::new(a, b)
    }

    /// Componentwise bounds of the set via support calls.
    pub fn bounding_box(&self, cfg: &NumericsConfig) -> Result<(Vector, Vector), PolytopeError> {
        let n = self.dim();
        let mut lo = Vector::zeros(n);
        let mut hi = Vector::zeros(n);
        for j in 0..n {
            let mut d = Vector::zeros(n);
            d[j] = 1.0;
            hi[j] = self.support(&d, cfg)?;
            d[j] = -1.0;
            lo[j] = -self.support(&d, cfg)?;
        }
        Ok((lo, hi))
    }

    /// Hit-and-run samples, approximately uniform over a bounded nonempty set.
    ///
    /// The chain starts at the Chebyshev center, discards a fixed burn-in and
    /// keeps every fifth state. On sets with empty interior the chords
    /// degenerate and the walk stays on the flat, which is the intended
    /// behavior for singleton parameter sets.
    pub fn sample_uniform<R: Rng>(
        &self,
        count: usize,
        rng: &mut R,
        cfg: &NumericsConfig,
    ) -> Result<Vec<Vector>, PolytopeError> {
        let (center, radius) = match self.chebyshev_center(cfg) {
            Err(PolytopeError::UnboundedSet) => return Err(PolytopeError::UnboundedSet),
            other => other?,
        };
        if radius < -cfg.tol_feas {
            return Err(PolytopeError::EmptySet);
        }
        self.bounding_box(cfg)?; // rejects unbounded sets up front
        let n = self.dim();
        let m = self.a.nrows();
        let mut x = center;
        let mut ax = &self.a * &x;
        let mut dir = Vector::zeros(n);
        let mut adir = Vector::zeros(m);
        let mut out = Vec::with_capacity(count);
        let total = HIT_AND_RUN_BURN_IN + count * HIT_AND_RUN_THINNING;
        for step in 0..total {
            // Isotropic direction via Box-Muller.
            loop {
                for j in 0..n {
                    dir[j] = gauss(rng);
                }
                let nrm = dir.norm();
                if nrm > 1e-12 {
                    dir /= nrm;
                    break;
                }
            }
            adir.gemv(1.0, &self.a, &dir, 0.0);
            let mut t_lo = f64::NEG_INFINITY;
            let mut t_hi = f64::INFINITY;
            for i in 0..m {
                let slack = self.b[i] - ax[i];
                let ad = adir[i];
                if ad > 1e-14 {
                    t_hi = t_hi.min(slack / ad);
                } else if ad < -1e-14 {
                    t_lo = t_lo.max(slack / ad);
                }
            }
            if t_hi.is_finite() && t_lo.is_finite() && t_hi > t_lo {
                let t = rng.gen_range(t_lo..=t_hi);
                for j in 0..n {
                    x[j] += t * dir[j];
                }
                for i in 0..m {
                    ax[i] += t * adir[i];
                }
            }
            if step >= HIT_AND_RUN_BURN_IN
                && (step - HIT_AND_RUN_BURN_IN) % HIT_AND_RUN_THINNING == 0
                && out.len() < count
            {
                out.push(x.clone());
            }
        }
        Ok(out)
    }

    /// Vertices of a two-dimensional polytope in counterclockwise order.
    pub fn vertices_2d(&self, cfg: &NumericsConfig) -> Result<Vec<Vector>, PolytopeError> {
        if self.dim() != 2 {
            return Err(PolytopeError::DimensionMismatch("vertex enumeration needs dim 2".into()));
        }
        let m = self.a.nrows();
        let scale = self.b.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        let mut verts: Vec<Vector> = Vec::new();
        for i in 0..m {
            for k in (i + 1)..m {
                let det = self.a[(i, 0)] * self.a[(k, 1)] - self.a[(i, 1)] * self.a[(k, 0)];
                if det.abs() <= 1e-12 {
                    continue;
                }
                let x0 = (self.b[i] * self.a[(k, 1)] - self.a[(i, 1)] * self.b[k]) / det;
                let x1 = (self.a[(i, 0)] * self.b[k] - self.b[i] * self.a[(k, 0)]) / det;
                let v = Vector::from_vec(vec![x0, x1]);
                if self.contains(&v, 1e-7 * scale.max(1.0))
                    && !verts.iter().any(|w| (w - &v).norm() <= 1e-7 * scale.max(1.0))
                {
                    verts.push(v);
                }
            }
        }
        if verts.len() >= 3 {
            let cx = verts.iter().map(|v| v[0]).sum::<f64>() / verts.len() as f64;
            let cy = verts.iter().map(|v| v[1]).sum::<f64>() / verts.len() as f64;
            verts.sort_by(|p, q| {
                let ap = (p[1] - cy).atan2(p[0] - cx);
                let aq = (q[1] - cy).atan2(q[0] - cx);
                ap.partial_cmp(&aq).unwrap()
            });
        }
        let _ = cfg;
        Ok(verts)
    }

    /// Volume: exact for dimensions one and two, Monte-Carlo over the
    /// bounding box above that (fixed internal seed, so repeated calls agree).
    pub fn volume(&self, cfg: &NumericsConfig) -> Result<f64, PolytopeError> {
        match self.dim() {
            0 => Err(PolytopeError::DimensionMismatch("zero-dimensional set".into())),
            1 => {
                let (lo, hi) = self.bounding_box(cfg)?;
                Ok((hi[0] - lo[0]).max(0.0))
            }
            2 => {
                let verts = self.vertices_2d(cfg)?;
                if verts.len() < 3 {
                    return Ok(0.0);
                }
                let mut area = 0.0;
                for i in 0..verts.len() {
                    let p = &verts[i];
                    let q = &verts[(i + 1) % verts.len()];
                    area += p[0] * q[1] - q[0] * p[1];
                }
                Ok(0.5 * area.abs())
            }
            n => {
                let (lo, hi) = self.bounding_box(cfg)?;
                let mut box_vol = 1.0;
                for j in 0..n {
                    box_vol *= (hi[j] - lo[j]).max(0.0);
                }
                if box_vol == 0.0 {
                    return Ok(0.0);
                }
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(VOLUME_MC_SEED);
                let mut hits = 0usize;
                let mut x = Vector::zeros(n);
                for _ in 0..VOLUME_MC_SAMPLES {
                    for j in 0..n {
                        x[j] = rng.gen_range(lo[j]..=hi[j]);
                    }
                    if self.contains(&x, 0.0) {
                        hits += 1;
                    }
                }
                Ok(box_vol * hits as f64 / VOLUME_MC_SAMPLES as f64)
            }
        }
    }

    /// Dilation of the set about a center: `{c + alpha (x - c) : x in P}`.
    pub fn scale_about(&self, alpha: f64, center: &Vector) -> Result<HPolytope, PolytopeError> {
        if alpha <= 0.0 {
            return Err(PolytopeError::NonPositiveScale);
        }
        if center.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch("scale center".into()));
        }
        let ac = &self.a * center;
        let b = Vector::from_fn(self.b.len(), |i, _| alpha * self.b[i] + (1.0 - alpha) * ac[i]);
        HPolytope::new(self.a.clone(), b)
    }

    /// Translation `{x + t : x in P}`.
    pub fn translate(&self, t: &Vector) -> Result<HPolytope, PolytopeError> {
        if t.len() != self.dim() {
            return Err(PolytopeError::DimensionMismatch("translation vector".into()));
        }
        let at = &self.a * t;
        let b = Vector::from_fn(self.b.len(), |i, _| self.b[i] + at[i]);
        HPolytope::new(self.a.clone(), b)
    }
}

/// Standard normal draw via Box-Muller on the half-open unit square.
pub(crate) fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
