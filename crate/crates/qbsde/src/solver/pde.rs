//! Explicit finite-difference solver for the stochastic-factor family.
//!
//! For models built by `MarketModel::stochastic_factor` and payoffs
//! depending on the terminal factor only, Y_t = u(t, V_t) with
//!
//! ```text
//! u_t + eta(v) u_v + 1/2 u_vv + f(t, v, (kappa1 u_v, kappa2 u_v)) = 0,
//! u(T, .) = F,  Z = (kappa1 u_v, kappa2 u_v).
//! ```
//!
//! The time stepping is explicit with CFL-driven sub-stepping; the factor
//! domain is truncated at a configurable number of terminal standard
//! deviations with linear (Neumann-type) extrapolation at the edges.

use crate::error::{QbsdeError, Result};
use crate::geometry::{project_scalar, ConstraintSet};
use crate::model::{MarketModel, Payoff};
use crate::paths::TimeGrid;

#[derive(Debug, Clone, Copy)]
pub struct PdeParams {
    /// Factor-grid nodes (forced odd so v0 is a node).
    pub v_nodes: usize,
    /// Domain halfwidth in units of sqrt(T).
    pub halfwidth_sds: f64,
    /// CFL safety factor in (0, 1).
    pub cfl_safety: f64,
    /// Re-solve on a coarser grid for a Richardson error estimate.
    pub richardson: bool,
}

impl Default for PdeParams {
    fn default() -> Self {
        PdeParams { v_nodes: 401, halfwidth_sds: 8.0, cfl_safety: 0.4, richardson: true }
    }
}

#[derive(Debug, Clone)]
pub struct PdeSolution {
    pub y0: f64,
    /// |y0(fine) - y0(coarse)|; zero when the coarse solve is disabled.
    pub richardson_error: f64,
    pub v_grid: Vec<f64>,
    /// u(0, .) on the grid.
    pub u0: Vec<f64>,
    /// Z at (0, v0): (kappa1 u_v, kappa2 u_v).
    pub z0: [f64; 2],
    /// Largest number of CFL sub-steps taken within one base step.
    pub max_substeps: usize,
}

/// Solve the factor-model BSDE as a 1-D semilinear PDE.
pub fn solve_pde_1d(
    model: &MarketModel,
    constraint: &ConstraintSet,
    alpha: f64,
    payoff: &Payoff,
    grid: TimeGrid,
    params: &PdeParams,
) -> Result<PdeSolution> {
    let Some((theta_fn, sigma_fn)) = model.factor_coefficients() else {
        return Err(QbsdeError::Config(
            "the PDE solver requires a stochastic-factor model".into(),
        ));
    };
    let Some(factor) = &model.factor else {
        return Err(QbsdeError::Config("model has no factor block".into()));
    };
    let Some(payoff_v) = payoff.factor_fn() else {
        return Err(QbsdeError::Config(
            "the PDE solver requires a payoff on the terminal factor".into(),
        ));
    };
    if constraint.dim() != 1 {
        return Err(QbsdeError::dim(1, constraint.dim(), "factor-model constraint"));
    }
    if alpha <= 0.0 {
        return Err(QbsdeError::Config("alpha must be positive".into()));
    }

    let mut nodes = params.v_nodes.max(5);
    if nodes % 2 == 0 {
        nodes += 1;
    }
    // Ensure the coarse grid (every second node) is available.
    if (nodes - 1) % 4 != 0 {
        nodes += 4 - (nodes - 1) % 4;
        if nodes % 2 == 0 {
            nodes += 1;
        }
    }

    // Domain: v0 plus drift swing plus the diffusion halfwidth.
    let sqrt_t = grid.horizon.sqrt();
    let eta = &factor.eta;
    let mut eta_max = 0.0f64;
    for i in 0..=64 {
        let v = model.v0 - 8.0 * sqrt_t + 16.0 * sqrt_t * i as f64 / 64.0;
        eta_max = eta_max.max(eta(v).abs());
    }
    let halfwidth = params.halfwidth_sds * sqrt_t + eta_max * grid.horizon;
    let v_lo = model.v0 - halfwidth;
    let v_hi = model.v0 + halfwidth;

    let fine = pde_once(
        &theta_fn, &sigma_fn, eta, factor.kappa, constraint, alpha, &payoff_v, grid, v_lo, v_hi,
        nodes, params.cfl_safety,
    )?;
    let richardson_error = if params.richardson {
        let coarse_nodes = (nodes - 1) / 2 + 1;
        let coarse = pde_once(
            &theta_fn, &sigma_fn, eta, factor.kappa, constraint, alpha, &payoff_v, grid, v_lo,
            v_hi, coarse_nodes, params.cfl_safety,
        )?;
        (fine.y0 - coarse.y0).abs()
    } else {
        0.0
    };

    Ok(PdeSolution { richardson_error, ..fine })
}

#[allow(clippy::too_many_arguments)]
fn pde_once(
    theta_fn: &crate::model::ScalarOfFactor,
    sigma_fn: &crate::model::ScalarOfFactor,
    eta: &crate::model::ScalarOfFactor,
    kappa: [f64; 2],
    constraint: &ConstraintSet,
    alpha: f64,
    payoff_v: &crate::model::ScalarOfFactor,
    grid: TimeGrid,
    v_lo: f64,
    v_hi: f64,
    nodes: usize,
    cfl_safety: f64,
) -> Result<PdeSolution> {
    let dv = (v_hi - v_lo) / (nodes - 1) as f64;
    let v_grid: Vec<f64> = (0..nodes).map(|j| v_lo + dv * j as f64).collect();
    let mut u: Vec<f64> = v_grid.iter().map(|&v| payoff_v(v)).collect();
    if u.iter().any(|x| !x.is_finite()) {
        return Err(QbsdeError::Solver("payoff non-finite on the PDE grid".into()));
    }
    let mut u_new = u.clone();
    let mut max_substeps = 0usize;

    let theta_cap = v_grid.iter().map(|&v| theta_fn(v).abs()).fold(0.0f64, f64::max);
    let eta_cap = v_grid.iter().map(|&v| eta(v).abs()).fold(0.0f64, f64::max);

    for step in (0..grid.steps).rev() {
        let dt_base = grid.dt();
        let t_right = grid.node(step + 1);

        // CFL: the quadratic driver acts as advection with speed up to
        // alpha |u_v| + 2 theta; auto-refine the sub-step from the current
        // gradient.
        let mut grad_max = 0.0f64;
        for j in 1..nodes - 1 {
            grad_max = grad_max.max(((u[j + 1] - u[j - 1]) / (2.0 * dv)).abs());
        }
        let speed = eta_cap + alpha * grad_max + 2.0 * theta_cap;
        let dt_cap = cfl_safety / (1.0 / (dv * dv) + speed / dv);
        let n_sub = ((dt_base / dt_cap).ceil() as usize).max(1);
        if n_sub > 200_000 {
            return Err(QbsdeError::Solver(format!(
                "CFL sub-stepping exploded at step {step}: {n_sub} sub-steps"
            )));
        }
        max_substeps = max_substeps.max(n_sub);
        let dt = dt_base / n_sub as f64;

        for sub in 0..n_sub {
            let t = t_right - dt * (sub + 1) as f64;
            for j in 0..nodes {
                let (u_v, u_vv) = if j == 0 {
                    ((u[1] - u[0]) / dv, 0.0)
                } else if j == nodes - 1 {
                    ((u[j] - u[j - 1]) / dv, 0.0)
                } else {
                    (
                        (u[j + 1] - u[j - 1]) / (2.0 * dv),
                        (u[j + 1] - 2.0 * u[j] + u[j - 1]) / (dv * dv),
                    )
                };
                let v = v_grid[j];
                let z1 = kappa[0] * u_v;
                let z2 = kappa[1] * u_v;
                let f = factor_driver(theta_fn, sigma_fn, constraint, alpha, v, z1, z2);
                u_new[j] = u[j] + dt * (eta(v) * u_v + 0.5 * u_vv + f);
                if !u_new[j].is_finite() {
                    return Err(QbsdeError::Solver(format!(
                        "PDE solution diverged at t={t:.4}, v={v:.4}"
                    )));
                }
            }
            std::mem::swap(&mut u, &mut u_new);
        }
    }

    let mid = (nodes - 1) / 2;
    let u_v0 = (u[mid + 1] - u[mid - 1]) / (2.0 * dv);
    Ok(PdeSolution {
        y0: u[mid],
        richardson_error: 0.0,
        v_grid,
        u0: u,
        z0: [kappa[0] * u_v0, kappa[1] * u_v0],
        max_substeps,
    })
}

/// The primal driver in factor coordinates: theta = (theta(v), 0) and the
/// image set is sigma(v) C alongside the first axis.
pub(crate) fn factor_driver(
    theta_fn: &crate::model::ScalarOfFactor,
    sigma_fn: &crate::model::ScalarOfFactor,
    constraint: &ConstraintSet,
    alpha: f64,
    v: f64,
    z1: f64,
    z2: f64,
) -> f64 {
    let theta = theta_fn(v);
    let sigma = sigma_fn(v);
    let w1 = z1 + theta / alpha;
    let proj = sigma * project_scalar(constraint, w1 / sigma);
    let r1 = w1 - proj;
    0.5 * alpha * (r1 * r1 + z2 * z2) - z1 * theta - theta * theta / (2.0 * alpha)
}
