//! The BSDE generator family: the primal quadratic driver, the price
//! generator for cone constraints, the convex dual, the optimal dual
//! density, and the cone scaling identity.
//!
//! Everything is a pure function of an immutable [`DriverContext`], which
//! pins the risk aversion, the risk premium, and the image set sigma^T C
//! at one (t, state) evaluation point.

use nalgebra::{DMatrix, DVector};

use crate::error::{QbsdeError, Result};
use crate::geometry::{ConstraintSet, ImageSet};
use crate::model::{MarketModel, MarketState};

/// Tolerance of the Fenchel-equality self check in [`DriverContext::optimal_density`].
pub const FENCHEL_TOL: f64 = 1e-8;

const MAX_NEWTON_ITER: usize = 200;

/// Evaluation context for the driver family at one point.
pub struct DriverContext<'a> {
    alpha: f64,
    theta: DVector<f64>,
    image: ImageSet<'a>,
}

impl<'a> DriverContext<'a> {
    pub fn new(
        alpha: f64,
        theta: DVector<f64>,
        constraint: &'a ConstraintSet,
        sigma_t: DMatrix<f64>,
    ) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(QbsdeError::Config("alpha must be positive".into()));
        }
        if sigma_t.nrows() != theta.len() {
            return Err(QbsdeError::dim(theta.len(), sigma_t.nrows(), "sigma^T rows"));
        }
        let image = ImageSet::new(constraint, sigma_t)?;
        Ok(DriverContext { alpha, theta, image })
    }

    /// Context at (t, state) of a model.
    pub fn at(
        model: &MarketModel,
        constraint: &'a ConstraintSet,
        alpha: f64,
        t: f64,
        state: &MarketState,
    ) -> Result<Self> {
        let theta = model.theta(t, state)?;
        let sigma_t = (model.vol)(t, state).transpose();
        DriverContext::new(alpha, theta, constraint, sigma_t)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn image(&self) -> &ImageSet<'a> {
        &self.image
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Same point, different risk aversion.
    pub fn with_alpha(&self, alpha: f64) -> DriverContext<'a> {
        DriverContext { alpha, theta: self.theta.clone(), image: self.image.clone() }
    }

    fn check_dim(&self, z: &DVector<f64>, what: &str) -> Result<()> {
        if z.len() != self.dim() {
            return Err(QbsdeError::dim(self.dim(), z.len(), what));
        }
        Ok(())
    }

    /// f(t, z) = (alpha/2) dist^2_{sigma^T C}(z + theta/alpha)
    ///           - z' theta - |theta|^2 / (2 alpha).
    pub fn primal_driver(&self, z: &DVector<f64>) -> Result<f64> {
        self.check_dim(z, "driver argument")?;
        let w = z + &self.theta / self.alpha;
        let d2 = self.image.dist2(&w)?;
        Ok(0.5 * self.alpha * d2 - z.dot(&self.theta) - self.theta.norm_squared() / (2.0 * self.alpha))
    }

    /// Explicit driver bounds: -z'theta - |theta|^2/(2 alpha) <= f <= (alpha/2)|z|^2.
    pub fn driver_bounds(&self, z: &DVector<f64>) -> (f64, f64) {
        let lower = -z.dot(&self.theta) - self.theta.norm_squared() / (2.0 * self.alpha);
        let upper = 0.5 * self.alpha * z.norm_squared();
        (lower, upper)
    }

    /// The indifference-price generator for cone constraints,
    /// g^alpha(h, z_ref) = [dist^2(alpha h + z_ref + theta) - dist^2(z_ref + theta)] / (2 alpha).
    pub fn price_generator(&self, h: &DVector<f64>, z_ref: &DVector<f64>) -> Result<f64> {
        if !self.image.is_cone() {
            return Err(QbsdeError::NotACone("price generator needs a cone constraint".into()));
        }
        self.check_dim(h, "price generator h")?;
        self.check_dim(z_ref, "price generator z_ref")?;
        let x = z_ref + &self.theta;
        let shifted = h * self.alpha + &x;
        let a = self.image.dist2(&shifted)?;
        let b = self.image.dist2(&x)?;
        Ok((a - b) / (2.0 * self.alpha))
    }

    /// Linear lower bound of g^alpha, which is also its alpha -> 0 limit:
    /// h' (x - Proj(x)) with x = z_ref + theta.
    pub fn price_generator_lower(&self, h: &DVector<f64>, z_ref: &DVector<f64>) -> Result<f64> {
        let x = z_ref + &self.theta;
        let proj = self.image.project(&x)?;
        Ok(h.dot(&(&x - proj.point)))
    }

    /// Convex dual f*(q) = sup_z (z'q - f(z)), valued in R or +inf.
    ///
    /// Substituting w = z + theta/alpha collapses the conjugate to
    /// |q|^2/(2 alpha) + alpha * support_{sigma^T C}((q + theta)/alpha),
    /// which is the closed form used for the full-space, zero, subspace
    /// and box variants. Polyhedral cones go through a damped-Newton
    /// concave maximization with analytic gradient q - grad f(z),
    /// initialized at z = q/alpha, after an exact generator sweep decides
    /// finiteness.
    pub fn dual_driver(&self, q: &DVector<f64>) -> Result<f64> {
        self.check_dim(q, "dual argument")?;
        let v = (q + &self.theta) / self.alpha;
        let support = self.image.support(&v)?;
        if support.is_infinite() {
            return Ok(f64::INFINITY);
        }
        match self.image.base() {
            ConstraintSet::PolyhedralCone { .. } => self.dual_by_maximization(q),
            _ => Ok(q.norm_squared() / (2.0 * self.alpha) + self.alpha * support),
        }
    }

    fn dual_by_maximization(&self, q: &DVector<f64>) -> Result<f64> {
        let mut z = q / self.alpha;
        let mut value = z.dot(q) - self.primal_driver(&z)?;
        let tol = 1e-10 * (1.0 + q.norm());
        for _ in 0..MAX_NEWTON_ITER {
            let grad = q - self.driver_gradient(&z)?;
            if grad.norm() <= tol {
                return Ok(value);
            }
            // Newton step for the generic Hessian alpha * I, damped by
            // backtracking on the concave objective.
            let mut step = 1.0 / self.alpha;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &z + &grad * step;
                let cand_value = cand.dot(q) - self.primal_driver(&cand)?;
                if cand_value >= value {
                    z = cand;
                    value = cand_value;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                let grad_norm = grad.norm();
                if grad_norm <= 1e-7 * (1.0 + q.norm()) {
                    return Ok(value);
                }
                return Err(QbsdeError::MaximizationNonConvergence {
                    iterations: MAX_NEWTON_ITER,
                    gradient_norm: grad_norm,
                });
            }
        }
        let grad = q - self.driver_gradient(&z)?;
        Err(QbsdeError::MaximizationNonConvergence {
            iterations: MAX_NEWTON_ITER,
            gradient_norm: grad.norm(),
        })
    }

    /// grad_z f(z) = alpha (w - Proj(w)) - theta with w = z + theta/alpha.
    pub fn driver_gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let w = z + &self.theta / self.alpha;
        let proj = self.image.project(&w)?;
        Ok((w - proj.point) * self.alpha - &self.theta)
    }

    /// The optimal dual density q* = grad_z f(z), with a Fenchel-equality
    /// self check and a boundary-proximity flag.
    pub fn optimal_density(&self, z: &DVector<f64>) -> Result<OptimalDensity> {
        self.check_dim(z, "optimal density argument")?;
        let w = z + &self.theta / self.alpha;
        let proj = self.image.project(&w)?;
        let residual = &w - &proj.point;
        let q = &residual * self.alpha - &self.theta;
        let dist = residual.norm();
        let near_boundary = dist > 0.0 && dist <= 1e-6 * (1.0 + w.norm());

        let f = self.primal_driver(z)?;
        let f_star = self.dual_driver(&q)?;
        let fenchel_residual = (f - z.dot(&q) + f_star).abs();
        if !f_star.is_finite() || fenchel_residual > FENCHEL_TOL * (1.0 + f.abs()) {
            return Err(QbsdeError::Solver(format!(
                "Fenchel equality violated at the gradient density: residual {fenchel_residual:.3e}"
            )));
        }
        Ok(OptimalDensity { q, fenchel_residual, near_boundary })
    }

    /// Cone scaling identity alpha f^alpha(z) = f^1(alpha z); returns the
    /// absolute residual.
    pub fn scaling_check(&self, z: &DVector<f64>) -> Result<f64> {
        if !self.image.is_cone() {
            return Err(QbsdeError::NotACone("scaling identity needs a cone constraint".into()));
        }
        let lhs = self.alpha * self.primal_driver(z)?;
        let unit = self.with_alpha(1.0);
        let rhs = unit.primal_driver(&(z * self.alpha))?;
        Ok((lhs - rhs).abs())
    }
}

/// Output of [`DriverContext::optimal_density`].
#[derive(Debug, Clone)]
pub struct OptimalDensity {
    pub q: DVector<f64>,
    pub fenchel_residual: f64,
    /// The pre-projection point sits within ~1e-6 of the set boundary;
    /// the gradient formula still applies since dist^2 is C^1.
    pub near_boundary: bool,
}

/// Driver evaluation across the whole (t, state) field.
///
/// The solvers call the driver once per path per step, so this wraps
/// [`DriverContext`] with allocation-light fast paths: a precomputed
/// image operator when the coefficients are state-independent, and a
/// scalar route for the stochastic-factor family. The generic fallback
/// builds a fresh context per point.
pub struct DriverField<'a> {
    model: &'a MarketModel,
    constraint: &'a ConstraintSet,
    alpha: f64,
    kind: FieldKind,
}

enum FieldKind {
    /// Coefficients do not vary with (t, state).
    Constant { theta: DVector<f64>, sigma_t: DMatrix<f64>, ops: ImageOps },
    /// Factor model: theta = (theta(v), 0), sigma^T = column (sigma(v), 0).
    Factor {
        theta_fn: crate::model::ScalarOfFactor,
        sigma_fn: crate::model::ScalarOfFactor,
    },
    General,
}

/// Precomputed projection machinery for a fixed image set.
enum ImageOps {
    /// Projection is a linear map (full space, zero set, subspace images).
    Linear(DMatrix<f64>),
    /// NNLS over the mapped generators.
    Cone { cols: DMatrix<f64> },
    /// Box-constrained least squares in strategy space.
    BoxLs,
}

impl<'a> DriverField<'a> {
    pub fn new(
        model: &'a MarketModel,
        constraint: &'a ConstraintSet,
        alpha: f64,
    ) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(QbsdeError::Config("alpha must be positive".into()));
        }
        if constraint.dim() != model.d {
            return Err(QbsdeError::dim(model.d, constraint.dim(), "constraint dimension"));
        }
        if model.m > 8 {
            return Err(QbsdeError::Config(
                "driver field supports Brownian dimension up to 8".into(),
            ));
        }
        let kind = if let Some((theta_fn, sigma_fn)) = model.factor_coefficients() {
            FieldKind::Factor { theta_fn, sigma_fn }
        } else if let Some((theta, sigma_t)) = probe_constant_coefficients(model)? {
            let ops = build_image_ops(constraint, &sigma_t)?;
            FieldKind::Constant { theta, sigma_t, ops }
        } else {
            FieldKind::General
        };
        Ok(DriverField { model, constraint, alpha, kind })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn brownian_dim(&self) -> usize {
        self.model.m
    }

    pub fn constraint(&self) -> &'a ConstraintSet {
        self.constraint
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<DriverField<'a>> {
        DriverField::new(self.model, self.constraint, alpha)
    }

    /// A full-precision point context (allocating route).
    pub fn context(&self, t: f64, state: &MarketState) -> Result<DriverContext<'a>> {
        DriverContext::at(self.model, self.constraint, self.alpha, t, state)
    }

    /// Risk premium at the point, written into `out`.
    pub fn theta_into(&self, t: f64, state: &MarketState, out: &mut [f64]) -> Result<()> {
        match &self.kind {
            FieldKind::Constant { theta, .. } => {
                out.copy_from_slice(theta.as_slice());
                Ok(())
            }
            FieldKind::Factor { theta_fn, .. } => {
                out[0] = theta_fn(state.v);
                out[1] = 0.0;
                Ok(())
            }
            FieldKind::General => {
                let theta = self.model.theta(t, state)?;
                out.copy_from_slice(theta.as_slice());
                Ok(())
            }
        }
    }

    /// dist^2_{sigma^T C}(w) at the point.
    fn image_dist2(&self, t: f64, state: &MarketState, w: &[f64]) -> Result<f64> {
        match &self.kind {
            FieldKind::Constant { ops, sigma_t, .. } => match ops {
                ImageOps::Linear(p) => {
                    let m = w.len();
                    let mut d2 = 0.0;
                    for i in 0..m {
                        let mut pi_w = 0.0;
                        for j in 0..m {
                            pi_w += p[(i, j)] * w[j];
                        }
                        let r = w[i] - pi_w;
                        d2 += r * r;
                    }
                    Ok(d2)
                }
                ImageOps::Cone { cols } => {
                    let wv = DVector::from_column_slice(w);
                    let (lambda, _) = crate::geometry::nnls(cols, &wv)?;
                    Ok((wv - cols * lambda).norm_squared())
                }
                ImageOps::BoxLs => {
                    let img = ImageSet::new(self.constraint, sigma_t.clone())?;
                    img.dist2(&DVector::from_column_slice(w))
                }
            },
            FieldKind::Factor { sigma_fn, .. } => {
                let sigma = sigma_fn(state.v);
                let scaled = crate::geometry::project_scalar(self.constraint, w[0] / sigma);
                let r0 = w[0] - sigma * scaled;
                Ok(r0 * r0 + w[1] * w[1])
            }
            FieldKind::General => {
                let ctx = self.context(t, state)?;
                ctx.image.dist2(&DVector::from_column_slice(w))
            }
        }
    }

    /// Primal driver f(t, z) at the point, slice-based.
    pub fn primal(&self, t: f64, state: &MarketState, z: &[f64]) -> Result<f64> {
        let m = self.brownian_dim();
        let mut theta = [0.0f64; 8];
        let theta = &mut theta[..m];
        self.theta_into(t, state, theta)?;
        let mut w = [0.0f64; 8];
        let w = &mut w[..m];
        let mut zt = 0.0;
        let mut th2 = 0.0;
        for j in 0..m {
            w[j] = z[j] + theta[j] / self.alpha;
            zt += z[j] * theta[j];
            th2 += theta[j] * theta[j];
        }
        let d2 = self.image_dist2(t, state, w)?;
        Ok(0.5 * self.alpha * d2 - zt - th2 / (2.0 * self.alpha))
    }

    /// Optimal dual density q* = alpha (w - Proj(w)) - theta at the point.
    pub fn optimal_q_into(
        &self,
        t: f64,
        state: &MarketState,
        z: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let m = self.brownian_dim();
        let mut theta = [0.0f64; 8];
        let theta = &mut theta[..m];
        self.theta_into(t, state, theta)?;
        let mut w = [0.0f64; 8];
        let w = &mut w[..m];
        for j in 0..m {
            w[j] = z[j] + theta[j] / self.alpha;
        }
        match &self.kind {
            FieldKind::Factor { sigma_fn, .. } => {
                let sigma = sigma_fn(state.v);
                let p0 = sigma * crate::geometry::project_scalar(self.constraint, w[0] / sigma);
                out[0] = self.alpha * (w[0] - p0) - theta[0];
                out[1] = self.alpha * w[1] - theta[1];
                Ok(())
            }
            _ => {
                let point = self.project_point(t, state, w)?;
                for j in 0..m {
                    out[j] = self.alpha * (w[j] - point[j]) - theta[j];
                }
                Ok(())
            }
        }
    }

    fn project_point(&self, t: f64, state: &MarketState, w: &[f64]) -> Result<DVector<f64>> {
        match &self.kind {
            FieldKind::Constant { ops, sigma_t, .. } => match ops {
                ImageOps::Linear(p) => Ok(p * DVector::from_column_slice(w)),
                ImageOps::Cone { cols } => {
                    let wv = DVector::from_column_slice(w);
                    let (lambda, _) = crate::geometry::nnls(cols, &wv)?;
                    Ok(cols * lambda)
                }
                ImageOps::BoxLs => {
                    let img = ImageSet::new(self.constraint, sigma_t.clone())?;
                    Ok(img.project(&DVector::from_column_slice(w))?.point)
                }
            },
            FieldKind::Factor { sigma_fn, .. } => {
                let sigma = sigma_fn(state.v);
                let p0 = sigma * crate::geometry::project_scalar(self.constraint, w[0] / sigma);
                let mut out = DVector::zeros(w.len());
                out[0] = p0;
                Ok(out)
            }
            FieldKind::General => {
                let ctx = self.context(t, state)?;
                Ok(ctx.image.project(&DVector::from_column_slice(w))?.point)
            }
        }
    }

    /// Projection of `x` onto sigma^T C returning the mapped point and a
    /// strategy attaining it.
    pub fn project_strategy(
        &self,
        t: f64,
        state: &MarketState,
        x: &[f64],
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        match &self.kind {
            FieldKind::Factor { sigma_fn, .. } => {
                let sigma = sigma_fn(state.v);
                let pi = crate::geometry::project_scalar(self.constraint, x[0] / sigma);
                let mut point = DVector::zeros(x.len());
                point[0] = sigma * pi;
                Ok((point, DVector::from_vec(vec![pi])))
            }
            _ => {
                let ctx = self.context(t, state)?;
                let pr = ctx.image.project(&DVector::from_column_slice(x))?;
                Ok((pr.point, pr.strategy))
            }
        }
    }

    /// Convex dual f*(t, q) at the point.
    pub fn dual(&self, t: f64, state: &MarketState, q: &[f64]) -> Result<f64> {
        match &self.kind {
            FieldKind::Factor { theta_fn, .. } => {
                // Finite iff q1 = -theta(v); the image support is the
                // span of e1, whose barrier region is {v1 = 0}.
                let theta0 = theta_fn(state.v);
                let subspace_like = self.constraint.is_subspace_like();
                let q2 = q[0] * q[0] + q[1] * q[1];
                if subspace_like {
                    let tol = 1e-9 * (1.0 + q[0].abs() + theta0.abs());
                    let aligned = match self.constraint {
                        ConstraintSet::ZeroSet { .. } => true,
                        ConstraintSet::Subspace { basis, .. } if basis.is_empty() => true,
                        _ => (q[0] + theta0).abs() <= tol,
                    };
                    if aligned {
                        Ok(q2 / (2.0 * self.alpha))
                    } else {
                        Ok(f64::INFINITY)
                    }
                } else {
                    let ctx = self.context(t, state)?;
                    ctx.dual_driver(&DVector::from_column_slice(q))
                }
            }
            _ => {
                let ctx = self.context(t, state)?;
                ctx.dual_driver(&DVector::from_column_slice(q))
            }
        }
    }
}

/// Probe a handful of quasi-random (t, state) points; constant
/// coefficients unlock the precomputed projection operator.
fn probe_constant_coefficients(
    model: &MarketModel,
) -> Result<Option<(DVector<f64>, DMatrix<f64>)>> {
    let state0 = model.state0();
    let theta0 = model.theta(0.0, &state0)?;
    let sigma0 = (model.vol)(0.0, &state0);
    let b = &model.bounds;
    let mut point = [0.0f64; 3];
    for i in 0..16 {
        crate::util::kronecker_point(i, 3, &mut point);
        let t = point[0] * model.horizon;
        let s = DVector::from_fn(model.d, |k, _| {
            model.s0[k] * (b.s_lo + (b.s_hi - b.s_lo) * point[1])
        });
        let v = b.v_lo + (b.v_hi - b.v_lo) * point[2];
        let state = MarketState { s, v };
        let sigma = (model.vol)(t, &state);
        let drift = (model.drift)(t, &state);
        let drift0 = (model.drift)(0.0, &state0);
        if (&sigma - &sigma0).amax() > 1e-13 || (&drift - &drift0).amax() > 1e-13 {
            return Ok(None);
        }
    }
    Ok(Some((theta0, sigma0.transpose())))
}

fn build_image_ops(constraint: &ConstraintSet, sigma_t: &DMatrix<f64>) -> Result<ImageOps> {
    let m = sigma_t.nrows();
    match constraint {
        ConstraintSet::ZeroSet { .. } => Ok(ImageOps::Linear(DMatrix::zeros(m, m))),
        ConstraintSet::FullSpace { .. } => Ok(ImageOps::Linear(range_projector(sigma_t))),
        ConstraintSet::Subspace { basis, .. } => {
            if basis.is_empty() {
                return Ok(ImageOps::Linear(DMatrix::zeros(m, m)));
            }
            let cols = DMatrix::from_fn(m, basis.len(), |i, j| (sigma_t * &basis[j])[i]);
            Ok(ImageOps::Linear(range_projector(&cols)))
        }
        ConstraintSet::PolyhedralCone { generators, .. } => {
            let cols = DMatrix::from_fn(m, generators.len(), |i, j| (sigma_t * &generators[j])[i]);
            Ok(ImageOps::Cone { cols })
        }
        ConstraintSet::Box { .. } => Ok(ImageOps::BoxLs),
    }
}

/// Orthogonal projector onto the column range of `a`.
fn range_projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let smax = svd.singular_values.max();
    let mut p = DMatrix::zeros(a.nrows(), a.nrows());
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > 1e-12 * smax.max(1.0) {
            let col = u.column(k);
            for i in 0..a.nrows() {
                for j in 0..a.nrows() {
                    p[(i, j)] += col[i] * col[j];
                }
            }
        }
    }
    p
}
