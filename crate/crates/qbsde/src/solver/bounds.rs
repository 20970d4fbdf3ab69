//! Explicit a-priori bounds on the BSDE value: the linear lower bound
//! under the minimal martingale measure and the entropic upper bound.

use crate::drivers::DriverField;
use crate::error::Result;
use crate::paths::{MeasureChange, PathEnsemble};
use crate::util::mean_se;

use super::{payoff_values, BsdeSpec};

/// lower = -E^{Q_theta}[ F^- + int |theta|^2/(2 alpha) dt ],
/// upper = (1/alpha) ln E[ e^{alpha F^+} ], each with standard errors.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct BoundsReport {
    pub lower: f64,
    pub lower_se: f64,
    pub upper: f64,
    pub upper_se: f64,
    /// The upper estimator keeps growing as the sample doubles.
    pub upper_divergence: bool,
}

pub fn bounds(spec: &BsdeSpec<'_>, ensemble: &PathEnsemble) -> Result<BoundsReport> {
    let n = ensemble.n_paths();
    let alpha = spec.alpha;
    let m = ensemble.brownian_dim();
    let field = DriverField::new(spec.model, spec.constraint, alpha)?;
    let f_vals = payoff_values(&spec.payoff, ensemble);

    // Minimal-martingale-measure reweighting for the lower bound.
    let mc = MeasureChange::from_fn(ensemble, |_p, _step, t, state, out| {
        let mut th = [0.0f64; 8];
        let th = &mut th[..m];
        match field.theta_into(t, state, th) {
            Ok(()) => {
                for j in 0..m {
                    out[j] = -th[j];
                }
            }
            Err(_) => out.fill(f64::NAN),
        }
    })?;
    let (neg_lower, lower_se) = mean_se(n, |p| {
        // half_quadratic is int 1/2 |theta|^2 dt, so the theta integral in
        // the bound is half_quadratic / alpha.
        mc.weight(p) * ((-f_vals[p]).max(0.0) + mc.half_quadratic(p) / alpha)
    });

    // Entropic upper bound with a delta-method standard error.
    let exp_pos = |p: usize| (alpha * f_vals[p].max(0.0)).exp();
    let (mean_full, se_full) = mean_se(n, exp_pos);
    let half = (n / 2).max(2);
    let (mean_half, se_half) = mean_se(half, exp_pos);
    let upper = mean_full.ln() / alpha;
    let upper_se = se_full / (mean_full * alpha);
    let upper_divergence = !mean_full.is_finite()
        || (mean_full > 1.5 * mean_half && (mean_full - mean_half) > 3.0 * (se_full + se_half));

    Ok(BoundsReport {
        lower: -neg_lower,
        lower_se,
        upper,
        upper_se,
        upper_divergence,
    })
}
