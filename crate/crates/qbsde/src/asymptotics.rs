//! Risk-aversion asymptotics for cone constraints: the vanishing-alpha
//! linear-BSDE price under the induced measure change, the large-alpha
//! superreplication value via the barrier-cone control problem, monotone
//! alpha sweeps, and the price-generator audit.

use nalgebra::{DMatrix, DVector};

use crate::drivers::{DriverContext, DriverField};
use crate::error::{QbsdeError, Result};
use crate::geometry::{project_scalar, ConstraintSet};
use crate::model::{MarketModel, Payoff, RiskParams};
use crate::paths::{reweighted_expectation, MeasureChange, PathEnsemble};
use crate::pricing::{indifference_price, paired_block_se};
use crate::solver::{solve_lsmc, BsdeSpec, LsmcOptions, RegressionBasis};

fn require_cone(constraint: &ConstraintSet) -> Result<()> {
    if !constraint.is_cone() {
        return Err(QbsdeError::NotACone(
            "risk-aversion asymptotics need a cone constraint".into(),
        ));
    }
    Ok(())
}

/// The alpha -> 0 price: E[F] under the measure whose density integrand
/// is Z1(0) - Proj(Z1(0) + theta).
#[derive(Debug, Clone, serde::Serialize)]
pub struct SmallAlphaReport {
    pub value: f64,
    pub se: f64,
    pub ess: f64,
    pub ess_warning: bool,
    /// Sample mean and SE of the terminal density (a martingale check).
    pub density_mean: f64,
    pub density_mean_se: f64,
}

/// Solve BSDE(0, f^1), build the induced density, and reweight F.
pub fn small_alpha_price(
    model: &MarketModel,
    constraint: &ConstraintSet,
    payoff: &Payoff,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
    options: &LsmcOptions,
) -> Result<SmallAlphaReport> {
    require_cone(constraint)?;
    let spec = BsdeSpec::new(model, constraint, 1.0, Payoff::constant(0.0))?;
    let solution = solve_lsmc(&spec, ensemble, basis, options)?;
    let field = DriverField::new(model, constraint, 1.0)?;

    // At alpha = 1 the gradient density is exactly
    // z - Proj(z + theta), the integrand of the limit measure.
    let mc = MeasureChange::from_fn(ensemble, |path, step, t, state, out| {
        let z = solution.z(path, step);
        if field.optimal_q_into(t, state, z, out).is_err() {
            out.fill(f64::NAN);
        }
    })?;
    let est = reweighted_expectation(&mc, |p| payoff.eval(&ensemble.path_view(p)));
    let (density_mean, density_mean_se) = mc.weight_mean();
    Ok(SmallAlphaReport {
        value: est.value,
        se: est.se,
        ess: est.ess,
        ess_warning: est.ess_warning,
        density_mean,
        density_mean_se,
    })
}

/// Parameters of the large-alpha control problem.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HjbParams {
    /// Control-bound ladder; the reported value sits at the largest entry.
    pub control_bounds: Vec<f64>,
    pub v_nodes: usize,
    pub cfl_safety: f64,
    /// Payoffs whose grid values exceed this cap are rejected as
    /// unbounded.
    pub payoff_cap: f64,
    /// Domain halfwidth in units of sqrt(T).
    pub halfwidth_sds: f64,
}

impl Default for HjbParams {
    fn default() -> Self {
        HjbParams {
            control_bounds: vec![1.0, 2.0, 4.0, 8.0, 16.0],
            v_nodes: 401,
            cfl_safety: 0.4,
            payoff_cap: 1e6,
            halfwidth_sds: 8.0,
        }
    }
}

/// Superreplication value from the barrier-cone control problem.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SuperreplicationSolution {
    /// Value at the largest control bound.
    pub value: f64,
    /// (control bound m, value) ladder.
    pub ladder: Vec<(f64, f64)>,
    pub monotone_in_m: bool,
    /// The last ladder increment fell below tolerance.
    pub saturated: bool,
    pub v_grid: Vec<f64>,
    pub u0: Vec<f64>,
    pub max_substeps: usize,
}

/// Large-alpha limit for stochastic-factor models: a monotone upwind
/// finite-difference solve of
///
/// ```text
/// u_t + (eta - kappa1 theta) u_v
///     + m (g+ max(D+u, 0) + g- max(-D-u, 0)) + 1/2 u_vv = 0,
/// ```
///
/// where g+- is the distance of +-kappa to the image cone: the maximal
/// factor drift attainable by barrier-cone controls of unit size.
pub fn large_alpha_price(
    model: &MarketModel,
    constraint: &ConstraintSet,
    payoff: &Payoff,
    grid: crate::paths::TimeGrid,
    params: &HjbParams,
) -> Result<SuperreplicationSolution> {
    require_cone(constraint)?;
    let Some((theta_fn, sigma_fn)) = model.factor_coefficients() else {
        return Err(QbsdeError::Config(
            "the HJB route requires a stochastic-factor model; use the control lattice for generic models".into(),
        ));
    };
    let Some(factor) = &model.factor else {
        return Err(QbsdeError::Config("model has no factor block".into()));
    };
    let Some(payoff_v) = payoff.factor_fn() else {
        return Err(QbsdeError::Config(
            "the HJB route requires a payoff on the terminal factor".into(),
        ));
    };
    if params.control_bounds.is_empty() {
        return Err(QbsdeError::Config("control ladder must not be empty".into()));
    }

    let kappa = factor.kappa;
    let eta = &factor.eta;
    let sqrt_t = grid.horizon.sqrt();
    let mut nodes = params.v_nodes.max(5);
    if nodes % 2 == 0 {
        nodes += 1;
    }
    let mut drift_cap = 0.0f64;
    for i in 0..=64 {
        let v = model.v0 - 8.0 * sqrt_t + 16.0 * sqrt_t * i as f64 / 64.0;
        drift_cap = drift_cap.max((eta(v) - kappa[0] * theta_fn(v)).abs());
    }
    let m_max = params.control_bounds.iter().cloned().fold(0.0f64, f64::max);
    let halfwidth = params.halfwidth_sds * sqrt_t + (drift_cap + m_max) * grid.horizon;
    let dv = 2.0 * halfwidth / (nodes - 1) as f64;
    let v_grid: Vec<f64> = (0..nodes).map(|j| model.v0 - halfwidth + dv * j as f64).collect();

    let terminal: Vec<f64> = v_grid.iter().map(|&v| payoff_v(v)).collect();
    if terminal.iter().any(|x| !x.is_finite() || x.abs() > params.payoff_cap) {
        return Err(QbsdeError::UnboundedPayoff(format!(
            "payoff exceeds the cap {} on the control grid",
            params.payoff_cap
        )));
    }

    // Unit-control drift gains g+- per node.
    let gains: Vec<[f64; 2]> = v_grid
        .iter()
        .map(|&v| {
            let sigma = sigma_fn(v);
            let g = |s: f64| {
                let w1 = s * kappa[0];
                let p1 = sigma * project_scalar(constraint, w1 / sigma);
                ((w1 - p1).powi(2) + kappa[1] * kappa[1]).sqrt()
            };
            [g(1.0), g(-1.0)]
        })
        .collect();

    let mut ladder = Vec::with_capacity(params.control_bounds.len());
    let mut last_u = Vec::new();
    let mut max_substeps = 0usize;
    for &m_bound in &params.control_bounds {
        let (u, subs) = hjb_once(
            &v_grid,
            &terminal,
            &gains,
            eta,
            &theta_fn,
            kappa,
            m_bound,
            grid,
            params.cfl_safety,
        )?;
        max_substeps = max_substeps.max(subs);
        let mid = (nodes - 1) / 2;
        ladder.push((m_bound, u[mid]));
        last_u = u;
    }

    let monotone_in_m = ladder.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-9);
    let saturated = if ladder.len() >= 2 {
        let last = ladder[ladder.len() - 1].1 - ladder[ladder.len() - 2].1;
        last.abs() <= 1e-3 * (1.0 + ladder[ladder.len() - 1].1.abs())
    } else {
        false
    };

    Ok(SuperreplicationSolution {
        value: ladder.last().unwrap().1,
        ladder,
        monotone_in_m,
        saturated,
        v_grid,
        u0: last_u,
        max_substeps,
    })
}

#[allow(clippy::too_many_arguments)]
fn hjb_once(
    v_grid: &[f64],
    terminal: &[f64],
    gains: &[[f64; 2]],
    eta: &crate::model::ScalarOfFactor,
    theta_fn: &crate::model::ScalarOfFactor,
    kappa: [f64; 2],
    m_bound: f64,
    grid: crate::paths::TimeGrid,
    cfl_safety: f64,
) -> Result<(Vec<f64>, usize)> {
    let nodes = v_grid.len();
    let dv = v_grid[1] - v_grid[0];
    let mut u = terminal.to_vec();
    let mut u_new = u.clone();
    let mut max_substeps = 0usize;

    let mut speed_cap = 0.0f64;
    for (j, &v) in v_grid.iter().enumerate() {
        let c = (eta(v) - kappa[0] * theta_fn(v)).abs();
        speed_cap = speed_cap.max(c + m_bound * gains[j][0].max(gains[j][1]));
    }
    let dt_cap = cfl_safety / (1.0 / (dv * dv) + speed_cap / dv);
    let n_sub = ((grid.dt() / dt_cap).ceil() as usize).max(1);
    if n_sub > 500_000 {
        return Err(QbsdeError::Solver(format!(
            "HJB CFL sub-stepping exploded: {n_sub} sub-steps per base step"
        )));
    }
    max_substeps = max_substeps.max(n_sub);
    let dt = grid.dt() / n_sub as f64;

    for _step in 0..grid.steps {
        for _sub in 0..n_sub {
            for j in 0..nodes {
                let v = v_grid[j];
                let d_plus = if j + 1 < nodes { (u[j + 1] - u[j]) / dv } else { 0.0 };
                let d_minus = if j > 0 { (u[j] - u[j - 1]) / dv } else { 0.0 };
                let u_vv = if j > 0 && j + 1 < nodes {
                    (u[j + 1] - 2.0 * u[j] + u[j - 1]) / (dv * dv)
                } else {
                    0.0
                };
                let c = eta(v) - kappa[0] * theta_fn(v);
                let drift = c.max(0.0) * d_plus - (-c).max(0.0) * d_minus;
                let control = m_bound
                    * (gains[j][0] * d_plus.max(0.0) + gains[j][1] * (-d_minus).max(0.0));
                u_new[j] = u[j] + dt * (drift + control + 0.5 * u_vv);
                if !u_new[j].is_finite() {
                    return Err(QbsdeError::Solver(format!(
                        "HJB solution diverged at v={v:.4}"
                    )));
                }
            }
            std::mem::swap(&mut u, &mut u_new);
        }
    }
    Ok((u, max_substeps))
}

/// Sampled barrier-cone controls evaluated by reweighting; a lower-bound
/// estimate of the superreplication value for generic models.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ControlLatticeReport {
    /// Best sampled value: a LOWER bound of the superreplication price.
    pub value: f64,
    pub se: f64,
    /// (direction scale factors, estimate, se) per sampled control.
    pub table: Vec<(Vec<f64>, f64, f64)>,
}

pub fn control_lattice_lower_bound(
    model: &MarketModel,
    constraint: &ConstraintSet,
    payoff: &Payoff,
    ensemble: &PathEnsemble,
    control_bound: f64,
    directions: usize,
) -> Result<ControlLatticeReport> {
    require_cone(constraint)?;
    let m = ensemble.brownian_dim();
    let field = DriverField::new(model, constraint, 1.0)?;
    let state0 = model.state0();
    let sigma_t0 = (model.vol)(0.0, &state0).transpose();
    let image = crate::geometry::ImageSet::new(constraint, sigma_t0)?;

    // Candidate constant controls: +-axes and planar rays for m = 2.
    let mut candidates: Vec<DVector<f64>> = vec![DVector::zeros(m)];
    if m == 2 {
        for k in 0..directions.max(4) {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / directions.max(4) as f64;
            candidates
                .push(DVector::from_vec(vec![angle.cos(), angle.sin()]) * control_bound);
        }
    } else {
        for j in 0..m {
            for sign in [-1.0, 1.0] {
                let mut v = DVector::zeros(m);
                v[j] = sign * control_bound;
                candidates.push(v);
            }
        }
    }

    let mut table = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut best_se = 0.0;
    for v in candidates {
        if v.norm() > 0.0 && !image.in_barrier_cone(&v)? {
            continue;
        }
        let mc = MeasureChange::from_fn(ensemble, |_p, _k, t, state, out| {
            let mut theta = [0.0f64; 8];
            let theta = &mut theta[..m];
            match field.theta_into(t, state, theta) {
                Ok(()) => {
                    for j in 0..m {
                        out[j] = v[j] - theta[j];
                    }
                }
                Err(_) => out.fill(f64::NAN),
            }
        })?;
        let est = reweighted_expectation(&mc, |p| payoff.eval(&ensemble.path_view(p)));
        if est.value > best {
            best = est.value;
            best_se = est.se;
        }
        table.push((v.iter().cloned().collect(), est.value, est.se));
    }
    Ok(ControlLatticeReport { value: best, se: best_se, table })
}

/// One sweep point: the price at one risk aversion on the shared
/// ensemble.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub price: f64,
    pub se: f64,
    /// Per-block price estimates, for paired comparisons across alphas.
    pub block_prices: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Nondecreasing within 3 paired standard errors.
    pub monotone_ok: bool,
    pub small_alpha_ref: Option<f64>,
    pub small_alpha_se: Option<f64>,
    pub large_alpha_ref: Option<f64>,
}

/// Prices across an alpha grid on one common ensemble (paired seeds).
pub fn alpha_sweep(
    model: &MarketModel,
    constraint: &ConstraintSet,
    payoff: &Payoff,
    alphas: &[f64],
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
    options: &LsmcOptions,
) -> Result<SweepReport> {
    require_cone(constraint)?;
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(QbsdeError::Config("alpha grid must be strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let params = RiskParams::new(alpha, 2, 1.0)?;
        let run = indifference_price(
            model,
            constraint,
            &params,
            payoff.clone(),
            ensemble,
            basis,
            options,
        )?;
        let blocks_with = run.with_payoff.block_y0();
        let blocks_without = run.without_payoff.block_y0();
        let block_prices: Vec<f64> = blocks_with
            .iter()
            .zip(blocks_without.iter())
            .map(|(a, b)| a - b)
            .collect();
        points.push(SweepPoint {
            alpha,
            price: run.report.price,
            se: run.report.price_se,
            block_prices,
        });
    }
    let monotone_ok = points.windows(2).all(|w| {
        let paired = paired_block_se(&w[1].block_prices, &w[0].block_prices);
        w[1].price >= w[0].price - 3.0 * paired - 1e-9
    });
    Ok(SweepReport {
        points,
        monotone_ok,
        small_alpha_ref: None,
        small_alpha_se: None,
        large_alpha_ref: None,
    })
}

/// Audit of the price generator g^alpha over random inputs: two-sided
/// bounds for alpha <= 1, monotonicity along an alpha ladder, the O(alpha)
/// approach to the linear limit, and nonpositivity for in-cone h.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct GeneratorAuditReport {
    pub samples: usize,
    pub bound_violations: usize,
    pub monotonicity_violations: usize,
    pub rate_violations: usize,
    pub in_cone_positives: usize,
    pub max_scaled_residual: f64,
}

pub fn generator_limit_audit(
    cones: &[ConstraintSet],
    samples: usize,
    seed: u64,
) -> Result<GeneratorAuditReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ladder = [1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 0.6, 1.0];
    let mut report = GeneratorAuditReport { samples, ..Default::default() };

    for _ in 0..samples {
        let cone = &cones[rng.gen_range(0..cones.len())];
        if !cone.is_cone() {
            return Err(QbsdeError::NotACone("audit set must contain cones only".into()));
        }
        let d = cone.dim();
        let mvec = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
            DVector::from_fn(d, |_, _| rng.gen_range(lo..hi))
        };
        let theta = mvec(&mut rng, -1.0, 1.0);
        let z_ref = mvec(&mut rng, -2.0, 2.0);
        let h = mvec(&mut rng, -2.0, 2.0);
        let base = DriverContext::new(1.0, theta.clone(), cone, DMatrix::identity(d, d))?;
        let lower = base.price_generator_lower(&h, &z_ref)?;
        let m_cap = z_ref.norm() + theta.norm();
        let upper = 0.5 * h.norm_squared() + h.norm() * m_cap;
        let tol = 1e-9 * (1.0 + lower.abs() + upper.abs());

        let mut prev = f64::NEG_INFINITY;
        for &alpha in &ladder {
            let g = base.with_alpha(alpha).price_generator(&h, &z_ref)?;
            if g < lower - tol || g > upper + tol {
                report.bound_violations += 1;
            }
            if g < prev - 1e-12 {
                report.monotonicity_violations += 1;
            }
            prev = g;
            // O(alpha) rate with the explicit Lipschitz-gradient constant.
            let excess = g - lower;
            if excess < -tol || excess > 0.5 * alpha * h.norm_squared() + tol {
                report.rate_violations += 1;
            }
            report.max_scaled_residual =
                report.max_scaled_residual.max((excess / (1.0 + alpha)).abs());
        }

        // h inside the cone: g^alpha <= 0 for every alpha.
        let h_in = cone.project(&h)?;
        for &alpha in &[0.05, 0.5, 5.0, 50.0] {
            let g = base.with_alpha(alpha).price_generator(&h_in, &z_ref)?;
            if g > 1e-9 * (1.0 + z_ref.norm_squared()) {
                report.in_cone_positives += 1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MarketState;
    use crate::paths::{simulate, TimeGrid};
    use std::sync::Arc;

    fn factor_model(theta: f64, kappa1: f64, kappa2: f64) -> MarketModel {
        MarketModel::stochastic_factor(
            Arc::new(move |_| theta),
            Arc::new(|_| 1.0),
            Arc::new(|_| 0.0),
            kappa1,
            kappa2,
            1.0,
            1.0,
            0.0,
        )
        .unwrap()
    }

    fn quick_options() -> LsmcOptions {
        LsmcOptions { se_blocks: 4, ..LsmcOptions::default() }
    }

    fn digital() -> Payoff {
        Payoff::of_factor("digital", |v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    #[test]
    fn small_alpha_zero_set_is_plain_mean() {
        let model = factor_model(0.3, 1.0, 0.0);
        let cset = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate(&model, grid, 20_000, 51).unwrap();
        let rep = small_alpha_price(
            &model,
            &cset,
            &digital(),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        // Q^Z is the physical measure: the limit is P(B_T > 0) = 1/2.
        assert!((rep.value - 0.5).abs() < 4.0 * rep.se + 0.005, "{rep:?}");
        // Z1(0) vanishes exactly here, so the density is identically one.
        assert!((rep.density_mean - 1.0).abs() <= 4.0 * rep.density_mean_se + 1e-12);
        assert!(!rep.ess_warning);
    }

    #[test]
    fn small_alpha_full_space_is_mlmm_mean() {
        // Full space: density integrand -theta, so the limit is
        // E^{Q_theta}[F]; for F = 1_{B_T > 0} that is Phi(-theta sqrt(T)).
        let theta = 0.4;
        let model = factor_model(theta, 1.0, 0.0);
        let cset = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate(&model, grid, 30_000, 52).unwrap();
        let rep = small_alpha_price(
            &model,
            &cset,
            &digital(),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        use statrs::distribution::ContinuousCDF;
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        let oracle = normal.cdf(-theta);
        assert!((rep.value - oracle).abs() < 4.0 * rep.se + 0.005, "{rep:?} vs {oracle}");
    }

    #[test]
    fn hjb_zero_set_digital_reaches_one() {
        // Barrier cone = R^2: controls push the factor anywhere, so the
        // superreplication value of the digital tends to its sup, 1.
        let model = factor_model(0.3, 1.0, 0.0);
        let cset = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let sol = large_alpha_price(&model, &cset, &digital(), grid, &HjbParams::default())
            .unwrap();
        assert!(sol.monotone_in_m, "{:?}", sol.ladder);
        assert!((sol.value - 1.0).abs() < 0.01, "{:?}", sol.ladder);
        assert!(sol.saturated);
    }

    #[test]
    fn hjb_full_space_is_mlmm_expectation() {
        // Barrier cone = {v1 = 0} meets kappa2 = 0: no controllable
        // direction, so the value is E^{Q_theta}[F] at every m.
        let theta = 0.4;
        let model = factor_model(theta, 1.0, 0.0);
        let cset = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let payoff = Payoff::of_factor("capped", |v: f64| v.clamp(-1.0, 1.0));
        let sol =
            large_alpha_price(&model, &cset, &payoff, grid, &HjbParams::default()).unwrap();
        let spread = sol.ladder.last().unwrap().1 - sol.ladder.first().unwrap().1;
        assert!(spread.abs() < 1e-9, "{:?}", sol.ladder);
        let oracle = {
            // E[g(V_T)] with V_T ~ N(-theta, 1) by quadrature.
            let n = 4000;
            let lo = -theta - 10.0;
            let hi = -theta + 10.0;
            let h = (hi - lo) / n as f64;
            let pdf = |x: f64| {
                (-(x + theta) * (x + theta) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
            };
            let g = |x: f64| x.clamp(-1.0, 1.0);
            let mut acc = g(lo) * pdf(lo) + g(hi) * pdf(hi);
            for i in 1..n {
                let x = lo + h * i as f64;
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(x) * pdf(x);
            }
            acc * h / 3.0
        };
        assert!((sol.value - oracle).abs() < 0.01, "{} vs {oracle}", sol.value);
    }

    #[test]
    fn hjb_rejects_unbounded_payoffs() {
        let model = factor_model(0.0, 1.0, 0.0);
        let cset = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let bad = Payoff::of_factor("exp", |v| (5.0 * v).exp());
        let params = HjbParams { payoff_cap: 1e3, ..HjbParams::default() };
        assert!(matches!(
            large_alpha_price(&model, &cset, &bad, grid, &params),
            Err(QbsdeError::UnboundedPayoff(_))
        ));
    }

    #[test]
    fn control_lattice_lower_bound_digital() {
        let model = factor_model(0.0, 1.0, 0.0);
        let cset = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let ens = simulate(&model, grid, 20_000, 53).unwrap();
        let rep =
            control_lattice_lower_bound(&model, &cset, &digital(), &ens, 2.0, 8).unwrap();
        // Pushing the factor upward with v = (2, 0) gives
        // P(N(2, 1) > 0) = Phi(2) ~ 0.977; the lattice must reach it.
        assert!(rep.value > 0.93, "{rep:?}");
        // And it stays a lower bound of the true sup (1).
        assert!(rep.value <= 1.0 + 3.0 * rep.se);
    }

    #[test]
    fn sweep_is_monotone_and_flat_cases() {
        let grid = TimeGrid::new(1.0, 20).unwrap();

        // Constant payoff: all prices equal the constant.
        let model = factor_model(0.2, 1.0, 0.0);
        let cset = ConstraintSet::zero_set(1);
        let ens = simulate(&model, grid, 8_000, 54).unwrap();
        let rep = alpha_sweep(
            &model,
            &cset,
            &Payoff::constant(0.7),
            &[0.5, 1.0, 2.0],
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        for p in &rep.points {
            assert!((p.price - 0.7).abs() < 1e-8, "{p:?}");
        }
        assert!(rep.monotone_ok);

        // Digital payoff without trading: prices climb along the
        // certainty-equivalent curve (1/a) ln((1 + e^a)/2). The kinked
        // payoff carries a basis-projection bias that grows with alpha,
        // so the tolerance widens beyond the pure Monte Carlo noise.
        let model = factor_model(0.0, 1.0, 0.0);
        let ens = simulate(&model, grid, 30_000, 55).unwrap();
        let alphas = [0.25, 0.5, 1.0];
        let rich = RegressionBasis { degree: 7, ..RegressionBasis::default() };
        let rep = alpha_sweep(
            &model,
            &cset,
            &digital(),
            &alphas,
            &ens,
            &rich,
            &quick_options(),
        )
        .unwrap();
        assert!(rep.monotone_ok, "{:?}", rep.points);
        for p in &rep.points {
            let curve = ((1.0 + p.alpha.exp()) / 2.0).ln() / p.alpha;
            assert!(
                (p.price - curve).abs() < 3.0 * p.se + 0.012 + 0.015 * p.alpha,
                "alpha {}: {} vs {}",
                p.alpha,
                p.price,
                curve
            );
        }

        // Complete market: flat in alpha.
        let model = MarketModel::single_asset(|_, _| 0.3, |_, _| 1.0, 1.0, 1.0).unwrap();
        let cset = ConstraintSet::full_space(1);
        let ens = simulate(&model, grid, 20_000, 56).unwrap();
        let payoff = Payoff::terminal("log", |st: &MarketState| st.s[0].ln().clamp(-2.0, 2.0));
        let rep = alpha_sweep(
            &model,
            &cset,
            &payoff,
            &[0.25, 1.0, 4.0],
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let spread = rep.points.iter().map(|p| p.price).fold(f64::NEG_INFINITY, f64::max)
            - rep.points.iter().map(|p| p.price).fold(f64::INFINITY, f64::min);
        let paired = paired_block_se(
            &rep.points.last().unwrap().block_prices,
            &rep.points.first().unwrap().block_prices,
        );
        assert!(spread <= 3.0 * paired + 0.01, "spread {spread}, paired se {paired}");
    }

    #[test]
    fn generator_audit_runs_clean() {
        let cones = vec![
            ConstraintSet::full_space(2),
            ConstraintSet::zero_set(2),
            ConstraintSet::subspace(2, vec![DVector::from_vec(vec![1.0, 0.5])]).unwrap(),
            ConstraintSet::polyhedral_cone(
                2,
                vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.7, 1.0])],
            )
            .unwrap(),
        ];
        let report = generator_limit_audit(&cones, 2_000, 99).unwrap();
        assert_eq!(report.bound_violations, 0, "{report:?}");
        assert_eq!(report.monotonicity_violations, 0, "{report:?}");
        assert_eq!(report.rate_violations, 0, "{report:?}");
        assert_eq!(report.in_cone_positives, 0, "{report:?}");
    }
}
