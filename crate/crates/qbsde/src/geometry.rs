//! Closed convex constraint sets and cones with projections, squared
//! distances, support functions, and barrier-cone membership.
//!
//! Strategy constraints live in R^d; the volatility transpose maps them
//! into R^m, where the BSDE drivers measure distances. [`ImageSet`] wraps
//! that mapped set and re-solves the small projection QP at every
//! evaluation point, since the map can change with (t, state).

use nalgebra::{DMatrix, DVector};

use crate::error::{QbsdeError, Result};

/// KKT residual tolerance for the active-set QP solvers.
pub const QP_KKT_TOL: f64 = 1e-10;
/// Membership tolerance, relative to the vector scale.
pub const MEMBERSHIP_TOL: f64 = 1e-8;
/// Below this scale a direction counts as the zero vector.
const ZERO_DIR_TOL: f64 = 1e-12;

const MAX_QP_ITER: usize = 200;

/// A closed convex set in R^d containing the origin.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    /// All of R^d: unconstrained trading.
    FullSpace { dim: usize },
    /// The origin only: no trading allowed.
    ZeroSet { dim: usize },
    /// A linear subspace spanned by an orthonormal basis.
    Subspace { dim: usize, basis: Vec<DVector<f64>> },
    /// Conic hull of finitely many generators.
    PolyhedralCone { dim: usize, generators: Vec<DVector<f64>> },
    /// Coordinate box with lower <= 0 <= upper.
    Box { lower: DVector<f64>, upper: DVector<f64> },
}

impl ConstraintSet {
    pub fn full_space(dim: usize) -> Self {
        ConstraintSet::FullSpace { dim }
    }

    pub fn zero_set(dim: usize) -> Self {
        ConstraintSet::ZeroSet { dim }
    }

    /// Subspace spanned by `vectors`; the basis is orthonormalized.
    pub fn subspace(dim: usize, vectors: Vec<DVector<f64>>) -> Result<Self> {
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for v in vectors {
            if v.len() != dim {
                return Err(QbsdeError::dim(dim, v.len(), "subspace basis vector"));
            }
            let mut w = v.clone();
            for u in &basis {
                let c = u.dot(&w);
                w -= u * c;
            }
            let n = w.norm();
            if n > 1e-10 * (1.0 + v.norm()) {
                basis.push(w / n);
            }
        }
        Ok(ConstraintSet::Subspace { dim, basis })
    }

    pub fn polyhedral_cone(dim: usize, generators: Vec<DVector<f64>>) -> Result<Self> {
        if generators.is_empty() {
            return Err(QbsdeError::Config("cone needs at least one generator".into()));
        }
        for g in &generators {
            if g.len() != dim {
                return Err(QbsdeError::dim(dim, g.len(), "cone generator"));
            }
            if g.norm() <= ZERO_DIR_TOL {
                return Err(QbsdeError::Config("cone generator must be nonzero".into()));
            }
        }
        Ok(ConstraintSet::PolyhedralCone { dim, generators })
    }

    pub fn interval_box(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(QbsdeError::dim(lower.len(), upper.len(), "box bounds"));
        }
        for i in 0..lower.len() {
            if !(lower[i] <= 0.0 && 0.0 <= upper[i]) {
                return Err(QbsdeError::Config(format!(
                    "box must contain the origin: coordinate {i} has [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        Ok(ConstraintSet::Box { lower, upper })
    }

    pub fn dim(&self) -> usize {
        match self {
            ConstraintSet::FullSpace { dim }
            | ConstraintSet::ZeroSet { dim }
            | ConstraintSet::Subspace { dim, .. }
            | ConstraintSet::PolyhedralCone { dim, .. } => *dim,
            ConstraintSet::Box { lower, .. } => lower.len(),
        }
    }

    /// Cones are closed under nonnegative scaling; the box generally is not.
    pub fn is_cone(&self) -> bool {
        !matches!(self, ConstraintSet::Box { .. })
    }

    pub fn is_subspace_like(&self) -> bool {
        matches!(
            self,
            ConstraintSet::FullSpace { .. }
                | ConstraintSet::ZeroSet { .. }
                | ConstraintSet::Subspace { .. }
        )
    }

    fn check_dim(&self, x: &DVector<f64>, what: &str) -> Result<()> {
        if x.len() != self.dim() {
            return Err(QbsdeError::dim(self.dim(), x.len(), what));
        }
        Ok(())
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x, "project input")?;
        match self {
            ConstraintSet::FullSpace { .. } => Ok(x.clone()),
            ConstraintSet::ZeroSet { dim } => Ok(DVector::zeros(*dim)),
            ConstraintSet::Subspace { dim, basis } => {
                let mut p = DVector::zeros(*dim);
                for u in basis {
                    p += u * u.dot(x);
                }
                Ok(p)
            }
            ConstraintSet::PolyhedralCone { dim, generators } => {
                let mat = generator_matrix(*dim, generators);
                let (coeffs, _) = nnls(&mat, x)?;
                Ok(&mat * coeffs)
            }
            ConstraintSet::Box { lower, upper } => {
                Ok(DVector::from_fn(lower.len(), |i, _| x[i].clamp(lower[i], upper[i])))
            }
        }
    }

    /// Squared distance |x - Proj(x)|^2.
    pub fn dist2(&self, x: &DVector<f64>) -> Result<f64> {
        let p = self.project(x)?;
        Ok((x - p).norm_squared())
    }

    /// Gradient of `dist2`: 2 (x - Proj(x)). The squared distance to a
    /// closed convex set is C^1, so this holds everywhere.
    pub fn dist2_grad(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let p = self.project(x)?;
        Ok((x - p) * 2.0)
    }

    /// Membership test at solver tolerance.
    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        self.check_dim(x, "membership input")?;
        let tol = MEMBERSHIP_TOL * (1.0 + x.norm());
        match self {
            ConstraintSet::FullSpace { .. } => Ok(true),
            ConstraintSet::ZeroSet { .. } => Ok(x.norm() <= tol),
            ConstraintSet::Box { lower, upper } => Ok((0..lower.len())
                .all(|i| x[i] >= lower[i] - tol && x[i] <= upper[i] + tol)),
            _ => Ok(self.dist2(x)?.sqrt() <= tol),
        }
    }

    /// Support function sup_{z in C} z^T v, valued in R or +inf.
    pub fn support(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_dim(v, "support direction")?;
        match self {
            ConstraintSet::FullSpace { .. } => {
                Ok(if v.norm() <= ZERO_DIR_TOL { 0.0 } else { f64::INFINITY })
            }
            ConstraintSet::ZeroSet { .. } => Ok(0.0),
            ConstraintSet::Subspace { basis, .. } => {
                let mut in_span = 0.0;
                for u in basis {
                    let c = u.dot(v);
                    in_span += c * c;
                }
                if in_span.sqrt() <= ZERO_DIR_TOL.max(1e-10 * v.norm()) {
                    Ok(0.0)
                } else {
                    Ok(f64::INFINITY)
                }
            }
            ConstraintSet::PolyhedralCone { generators, .. } => {
                let tol = 1e-10 * (1.0 + v.norm());
                let inside = generators.iter().all(|g| g.dot(v) <= tol * g.norm().max(1.0));
                Ok(if inside { 0.0 } else { f64::INFINITY })
            }
            ConstraintSet::Box { lower, upper } => {
                let mut s = 0.0;
                for i in 0..lower.len() {
                    s += if v[i] >= 0.0 { upper[i] * v[i] } else { lower[i] * v[i] };
                }
                Ok(s)
            }
        }
    }

    /// True iff the support function is finite at `v`. Only defined for
    /// cone variants, where the barrier cone is the polar region.
    pub fn in_barrier_cone(&self, v: &DVector<f64>) -> Result<bool> {
        if !self.is_cone() {
            return Err(QbsdeError::NotACone(
                "barrier cone queries require a cone variant".into(),
            ));
        }
        Ok(self.support(v)?.is_finite())
    }
}

fn generator_matrix(dim: usize, generators: &[DVector<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(dim, generators.len(), |i, j| generators[j][i])
}

/// Allocation-free projection for one-dimensional sets; used on the hot
/// path of the stochastic-factor solvers. `set.dim()` must be 1.
pub fn project_scalar(set: &ConstraintSet, x: f64) -> f64 {
    debug_assert_eq!(set.dim(), 1);
    match set {
        ConstraintSet::FullSpace { .. } => x,
        ConstraintSet::ZeroSet { .. } => 0.0,
        ConstraintSet::Subspace { basis, .. } => {
            if basis.is_empty() {
                0.0
            } else {
                x
            }
        }
        ConstraintSet::PolyhedralCone { generators, .. } => {
            let pos = generators.iter().any(|g| g[0] > 0.0);
            let neg = generators.iter().any(|g| g[0] < 0.0);
            match (pos, neg) {
                (true, true) => x,
                (true, false) => x.max(0.0),
                (false, true) => x.min(0.0),
                (false, false) => 0.0,
            }
        }
        ConstraintSet::Box { lower, upper } => x.clamp(lower[0], upper[0]),
    }
}

/// Lawson-Hanson nonnegative least squares: minimize |A x - b| over x >= 0.
///
/// Returns the coefficients and the KKT residual max_j (A^T (b - A x))_j
/// over the zero set. Passive-set solves use an SVD pseudo-inverse so
/// linearly dependent generators are handled.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, QpStats)> {
    let n = a.ncols();
    let scale = 1.0 + b.norm();
    let tol = QP_KKT_TOL * scale;
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;

    loop {
        iterations += 1;
        if iterations > MAX_QP_ITER {
            let w = a.tr_mul(&(b - a * &x));
            let kkt = w.iter().cloned().fold(0.0f64, f64::max);
            return Err(QbsdeError::QpNonConvergence { iterations, kkt_residual: kkt });
        }
        let residual = b - a * &x;
        let w = a.tr_mul(&residual);
        let mut best = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol {
                match best {
                    Some((_, wv)) if wv >= w[j] => {}
                    _ => best = Some((j, w[j])),
                }
            }
        }
        let Some((j_new, _)) = best else {
            let kkt = (0..n)
                .filter(|&j| !passive[j])
                .map(|j| w[j])
                .fold(0.0f64, f64::max);
            return Ok((x, QpStats { iterations, kkt_residual: kkt.max(0.0) }));
        };
        passive[j_new] = true;

        loop {
            let z = passive_ls(a, b, &passive);
            let mut min_ratio: Option<f64> = None;
            for j in 0..n {
                if passive[j] && z[j] <= 0.0 {
                    let denom = x[j] - z[j];
                    if denom > 0.0 {
                        let r = x[j] / denom;
                        min_ratio = Some(min_ratio.map_or(r, |m: f64| m.min(r)));
                    } else {
                        min_ratio = Some(0.0);
                    }
                }
            }
            match min_ratio {
                None => {
                    x = z;
                    break;
                }
                Some(alpha) => {
                    x = &x + (&z - &x) * alpha;
                    for j in 0..n {
                        if passive[j] && x[j] <= tol.max(1e-14) {
                            x[j] = 0.0;
                            passive[j] = false;
                        }
                    }
                    iterations += 1;
                    if iterations > MAX_QP_ITER {
                        return Err(QbsdeError::QpNonConvergence {
                            iterations,
                            kkt_residual: f64::NAN,
                        });
                    }
                }
            }
        }
    }
}

fn passive_ls(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&j| passive[j]).collect();
    let mut z = DVector::zeros(a.ncols());
    if cols.is_empty() {
        return z;
    }
    let sub = DMatrix::from_fn(a.nrows(), cols.len(), |i, j| a[(i, cols[j])]);
    let svd = sub.svd(true, true);
    let sol = svd
        .solve(b, 1e-12)
        .expect("svd solve cannot fail with both factors computed");
    for (k, &j) in cols.iter().enumerate() {
        z[j] = sol[k];
    }
    z
}

/// Iteration diagnostics of the small QP solvers.
#[derive(Debug, Clone, Copy, Default)]
pub struct QpStats {
    pub iterations: usize,
    pub kkt_residual: f64,
}

/// Result of projecting onto an image set sigma^T C.
#[derive(Debug, Clone)]
pub struct ImageProjection {
    /// The projected point sigma^T pi* in R^m.
    pub point: DVector<f64>,
    /// A strategy pi* in C attaining it.
    pub strategy: DVector<f64>,
    pub stats: QpStats,
}

/// The set sigma^T C in R^m, for C in R^d and sigma^T of size m x d.
#[derive(Debug, Clone)]
pub struct ImageSet<'a> {
    base: &'a ConstraintSet,
    sigma_t: DMatrix<f64>,
}

impl<'a> ImageSet<'a> {
    pub fn new(base: &'a ConstraintSet, sigma_t: DMatrix<f64>) -> Result<Self> {
        if sigma_t.ncols() != base.dim() {
            return Err(QbsdeError::dim(base.dim(), sigma_t.ncols(), "sigma^T columns"));
        }
        Ok(ImageSet { base, sigma_t })
    }

    pub fn base(&self) -> &ConstraintSet {
        self.base
    }

    pub fn sigma_t(&self) -> &DMatrix<f64> {
        &self.sigma_t
    }

    pub fn ambient_dim(&self) -> usize {
        self.sigma_t.nrows()
    }

    pub fn is_cone(&self) -> bool {
        self.base.is_cone()
    }

    fn check_dim(&self, x: &DVector<f64>, what: &str) -> Result<()> {
        if x.len() != self.ambient_dim() {
            return Err(QbsdeError::dim(self.ambient_dim(), x.len(), what));
        }
        Ok(())
    }

    /// min over pi in C of |sigma^T pi - x|^2, with the attaining strategy.
    pub fn project(&self, x: &DVector<f64>) -> Result<ImageProjection> {
        self.check_dim(x, "image projection input")?;
        let a = &self.sigma_t;
        match self.base {
            ConstraintSet::ZeroSet { dim } => Ok(ImageProjection {
                point: DVector::zeros(self.ambient_dim()),
                strategy: DVector::zeros(*dim),
                stats: QpStats::default(),
            }),
            ConstraintSet::FullSpace { .. } => {
                let svd = a.clone().svd(true, true);
                let pi = svd.solve(x, 1e-12).expect("svd solve");
                Ok(ImageProjection { point: a * &pi, strategy: pi, stats: QpStats::default() })
            }
            ConstraintSet::Subspace { dim, basis } => {
                if basis.is_empty() {
                    return Ok(ImageProjection {
                        point: DVector::zeros(self.ambient_dim()),
                        strategy: DVector::zeros(*dim),
                        stats: QpStats::default(),
                    });
                }
                let cols = DMatrix::from_fn(self.ambient_dim(), basis.len(), |i, j| {
                    (a * &basis[j])[i]
                });
                let svd = cols.clone().svd(true, true);
                let c = svd.solve(x, 1e-12).expect("svd solve");
                let mut pi = DVector::zeros(*dim);
                for (k, u) in basis.iter().enumerate() {
                    pi += u * c[k];
                }
                Ok(ImageProjection { point: &cols * c, strategy: pi, stats: QpStats::default() })
            }
            ConstraintSet::PolyhedralCone { dim, generators } => {
                let cols = DMatrix::from_fn(self.ambient_dim(), generators.len(), |i, j| {
                    (a * &generators[j])[i]
                });
                let (lambda, stats) = nnls(&cols, x)?;
                let mut pi = DVector::zeros(*dim);
                for (k, g) in generators.iter().enumerate() {
                    pi += g * lambda[k];
                }
                Ok(ImageProjection { point: &cols * lambda, strategy: pi, stats })
            }
            ConstraintSet::Box { lower, upper } => {
                let (pi, stats) = box_ls(a, x, lower, upper)?;
                Ok(ImageProjection { point: a * &pi, strategy: pi, stats })
            }
        }
    }

    pub fn dist2(&self, x: &DVector<f64>) -> Result<f64> {
        let p = self.project(x)?;
        Ok((x - p.point).norm_squared())
    }

    /// Support function of sigma^T C at v equals the base support at sigma v.
    pub fn support(&self, v: &DVector<f64>) -> Result<f64> {
        self.check_dim(v, "image support direction")?;
        self.base.support(&self.sigma_t.tr_mul(v))
    }

    pub fn in_barrier_cone(&self, v: &DVector<f64>) -> Result<bool> {
        if !self.is_cone() {
            return Err(QbsdeError::NotACone(
                "barrier cone queries require a cone variant".into(),
            ));
        }
        Ok(self.support(v)?.is_finite())
    }
}

/// Coordinate-descent solve of min |A pi - x|^2 over lower <= pi <= upper.
fn box_ls(
    a: &DMatrix<f64>,
    x: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
) -> Result<(DVector<f64>, QpStats)> {
    let d = a.ncols();
    let mut pi = DVector::zeros(d);
    let diag: Vec<f64> = (0..d).map(|j| a.column(j).norm_squared()).collect();
    let scale = 1.0 + x.norm();
    let mut residual = x - a * &pi;
    let max_sweeps = 500;
    for sweep in 0..max_sweeps {
        let mut kkt: f64 = 0.0;
        for j in 0..d {
            if diag[j] <= 1e-300 {
                continue;
            }
            let grad_j = -a.column(j).dot(&residual);
            let target = (pi[j] - grad_j / diag[j]).clamp(lower[j], upper[j]);
            let delta = target - pi[j];
            if delta != 0.0 {
                residual -= a.column(j) * delta;
                pi[j] = target;
            }
            // Projected-gradient KKT measure at the new point.
            let g = -a.column(j).dot(&residual);
            let viol = if pi[j] <= lower[j] {
                (-g).max(0.0)
            } else if pi[j] >= upper[j] {
                g.max(0.0)
            } else {
                g.abs()
            };
            kkt = kkt.max(viol);
        }
        if kkt <= QP_KKT_TOL * scale {
            return Ok((pi, QpStats { iterations: sweep + 1, kkt_residual: kkt }));
        }
    }
    let kkt = {
        let g = a.tr_mul(&(a * &pi - x));
        g.amax()
    };
    Err(QbsdeError::QpNonConvergence { iterations: max_sweeps, kkt_residual: kkt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn zero_set_projects_to_origin() {
        let c = ConstraintSet::zero_set(2);
        let p = c.project(&v2(3.0, 4.0)).unwrap();
        assert_eq!(p, v2(0.0, 0.0));
        assert_relative_eq!(c.dist2(&v2(3.0, 4.0)).unwrap(), 25.0);
    }

    #[test]
    fn subspace_projection_is_orthogonal() {
        let c = ConstraintSet::subspace(2, vec![v2(1.0, 0.0)]).unwrap();
        let p = c.project(&v2(2.0, 5.0)).unwrap();
        assert_relative_eq!(p[0], 2.0);
        assert_relative_eq!(p[1], 0.0);
    }

    /// Brute-force oracle: scan nonnegative generator combinations on a
    /// fine grid and return the closest point found.
    fn cone_projection_oracle(gens: &[DVector<f64>], x: &DVector<f64>) -> DVector<f64> {
        let steps = 600;
        let max_coef = 3.0;
        let mut best = DVector::zeros(x.len());
        let mut best_d = x.norm_squared();
        let mut lam = vec![0usize; gens.len()];
        loop {
            let mut p = DVector::zeros(x.len());
            for (k, g) in gens.iter().enumerate() {
                p += g * (lam[k] as f64 * max_coef / steps as f64);
            }
            let d = (x - &p).norm_squared();
            if d < best_d {
                best_d = d;
                best = p;
            }
            let mut k = 0;
            loop {
                if k == gens.len() {
                    return best;
                }
                lam[k] += 1;
                if lam[k] <= steps {
                    break;
                }
                lam[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn cone_projection_matches_bruteforce() {
        let gens = vec![v2(1.0, 1.0), v2(1.0, 0.0)];
        let c = ConstraintSet::polyhedral_cone(2, gens.clone()).unwrap();
        let x = v2(0.0, 2.0);
        let oracle = cone_projection_oracle(&gens, &x);
        // Frozen expected value, confirmed by the oracle.
        assert_relative_eq!(oracle[0], 1.0, epsilon = 5e-3);
        assert_relative_eq!(oracle[1], 1.0, epsilon = 5e-3);
        let p = c.project(&x).unwrap();
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(p[1], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn halfline_distance() {
        let c = ConstraintSet::polyhedral_cone(1, vec![DVector::from_vec(vec![1.0])]).unwrap();
        let x = DVector::from_vec(vec![-2.0]);
        assert_relative_eq!(c.dist2(&x).unwrap(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(ConstraintSet::full_space(2).dist2(&v2(9.0, -3.0)).unwrap(), 0.0);
    }

    #[test]
    fn support_function_cases() {
        let sub = ConstraintSet::subspace(2, vec![v2(1.0, 0.0)]).unwrap();
        assert_eq!(sub.support(&v2(0.0, 3.0)).unwrap(), 0.0);
        assert!(sub.support(&v2(0.5, 3.0)).unwrap().is_infinite());

        let cone = ConstraintSet::polyhedral_cone(2, vec![v2(1.0, 0.0)]).unwrap();
        assert!(cone.support(&v2(1.0, 0.0)).unwrap().is_infinite());
        // Generator sweep: v.g <= 0 for the single generator e1.
        assert_eq!(cone.support(&v2(-1.0, 5.0)).unwrap(), 0.0);

        let b = ConstraintSet::interval_box(v2(-1.0, -2.0), v2(3.0, 0.5)).unwrap();
        assert_relative_eq!(b.support(&v2(1.0, 1.0)).unwrap(), 3.5);
        assert_relative_eq!(b.support(&v2(-1.0, -1.0)).unwrap(), 3.0);
    }

    #[test]
    fn barrier_cone_membership() {
        let cone = ConstraintSet::polyhedral_cone(2, vec![v2(1.0, 0.0)]).unwrap();
        assert!(cone.in_barrier_cone(&v2(-1.0, 0.0)).unwrap());
        assert!(!cone.in_barrier_cone(&v2(1e-6, 0.0)).unwrap());
        let sub = ConstraintSet::subspace(2, vec![v2(1.0, 0.0)]).unwrap();
        assert!(sub.in_barrier_cone(&v2(0.0, 1.0)).unwrap());
        let b = ConstraintSet::interval_box(v2(-1.0, -1.0), v2(1.0, 1.0)).unwrap();
        assert!(b.in_barrier_cone(&v2(1.0, 0.0)).is_err());
    }

    #[test]
    fn image_projection_examples() {
        // Square invertible sigma, full space: identity.
        let full = ConstraintSet::full_space(2);
        let img = ImageSet::new(&full, DMatrix::identity(2, 2)).unwrap();
        let pr = img.project(&v2(1.5, -2.0)).unwrap();
        assert_relative_eq!((pr.point - v2(1.5, -2.0)).norm(), 0.0, epsilon = 1e-12);

        // Zero set maps to the origin.
        let zero = ConstraintSet::zero_set(2);
        let img = ImageSet::new(&zero, DMatrix::identity(2, 2)).unwrap();
        assert_eq!(img.project(&v2(1.0, 1.0)).unwrap().point, v2(0.0, 0.0));

        // Stochastic-factor shape: sigma^T pi = (sigma pi, 0), C = R.
        let line = ConstraintSet::full_space(1);
        let sigma_t = DMatrix::from_vec(2, 1, vec![0.7, 0.0]);
        let img = ImageSet::new(&line, sigma_t).unwrap();
        let pr = img.project(&v2(0.3, 0.9)).unwrap();
        assert_relative_eq!(pr.point[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(pr.point[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(pr.strategy[0], 0.3 / 0.7, epsilon = 1e-12);
    }

    #[test]
    fn image_box_coordinate_descent() {
        let b = ConstraintSet::interval_box(v2(-1.0, -1.0), v2(1.0, 1.0)).unwrap();
        let sigma_t = DMatrix::from_vec(2, 2, vec![1.0, 0.3, 0.0, 1.0]);
        let img = ImageSet::new(&b, sigma_t.clone()).unwrap();
        let x = v2(4.0, 4.0);
        let pr = img.project(&x).unwrap();
        assert!(b.contains(&pr.strategy).unwrap());
        // Variational inequality against the corners of the image.
        for pi in [v2(1.0, 1.0), v2(-1.0, 1.0), v2(1.0, -1.0), v2(-1.0, -1.0)] {
            let y = &sigma_t * pi;
            let lhs = (&pr.point - &x).dot(&(&pr.point - y));
            assert!(lhs <= 1e-8, "variational inequality violated: {lhs}");
        }
    }

    fn arb_point() -> impl Strategy<Value = (f64, f64)> {
        (-10.0f64..10.0, -10.0f64..10.0)
    }

    fn sample_sets() -> Vec<ConstraintSet> {
        vec![
            ConstraintSet::full_space(2),
            ConstraintSet::zero_set(2),
            ConstraintSet::subspace(2, vec![v2(1.0, 1.0)]).unwrap(),
            ConstraintSet::polyhedral_cone(2, vec![v2(1.0, 0.2), v2(0.1, 1.0)]).unwrap(),
            ConstraintSet::polyhedral_cone(2, vec![v2(1.0, 1.0), v2(1.0, 0.0)]).unwrap(),
            ConstraintSet::interval_box(v2(-0.5, -2.0), v2(1.0, 0.3)).unwrap(),
        ]
    }

    proptest! {
        #[test]
        fn projection_invariants((xa, xb) in arb_point(), (ya, yb) in arb_point()) {
            let x = v2(xa, xb);
            let y = v2(ya, yb);
            for set in sample_sets() {
                let px = set.project(&x).unwrap();
                let py = set.project(&y).unwrap();
                // Idempotence.
                let ppx = set.project(&px).unwrap();
                prop_assert!((&ppx - &px).norm() <= 1e-8 * (1.0 + px.norm()));
                // Membership of the projection.
                prop_assert!(set.contains(&px).unwrap());
                // Nonexpansiveness.
                prop_assert!((&px - &py).norm() <= (&x - &y).norm() + 1e-9);
                // Variational inequality with y = 0 (0 is in every set).
                prop_assert!((&px - &x).dot(&px) <= 1e-8 * (1.0 + x.norm_squared()));
                // Convexity of dist2 along the segment.
                let lambda = 0.37;
                let mid = &x * lambda + &y * (1.0 - lambda);
                let d_mid = set.dist2(&mid).unwrap();
                let bound = lambda * set.dist2(&x).unwrap() + (1.0 - lambda) * set.dist2(&y).unwrap();
                prop_assert!(d_mid <= bound + 1e-8 * (1.0 + bound));
            }
        }

        #[test]
        fn cone_scaling_closure((xa, xb) in arb_point(), lam in 0.0f64..5.0) {
            let x = v2(xa, xb);
            for set in sample_sets() {
                if !set.is_cone() { continue; }
                let p = set.project(&x).unwrap();
                prop_assert!(set.contains(&(&p * lam)).unwrap());
            }
        }

        #[test]
        fn dist2_gradient_matches_finite_differences((xa, xb) in arb_point()) {
            let x = v2(xa, xb);
            for set in sample_sets() {
                // Stay away from the boundary kink region.
                if set.dist2(&x).unwrap() < 1e-2 { continue; }
                let g = set.dist2_grad(&x).unwrap();
                let h = 1e-5;
                for k in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (set.dist2(&xp).unwrap() - set.dist2(&xm).unwrap()) / (2.0 * h);
                    prop_assert!((fd - g[k]).abs() <= 1e-5 * (1.0 + g[k].abs()),
                        "fd {} vs grad {}", fd, g[k]);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let c = ConstraintSet::zero_set(2);
        let bad = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            c.project(&bad),
            Err(QbsdeError::DimensionMismatch { expected: 2, got: 3, .. })
        ));
    }
}
