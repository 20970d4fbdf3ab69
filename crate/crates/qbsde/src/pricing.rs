//! Indifference prices, optimal strategies, hedges, and the value
//! function verification along the implemented strategy.
//!
//! Both BSDE legs (with and without the payoff) run on the same ensemble
//! and basis, so prices are differences under common random numbers with
//! paired block standard errors.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::drivers::DriverField;
use crate::error::Result;
use crate::geometry::ConstraintSet;
use crate::model::{MarketModel, MarketState, Payoff, RiskParams};
use crate::paths::PathEnsemble;
use crate::solver::{
    bounds, solve_lsmc, BoundsReport, BsdeSolution, BsdeSpec, LsmcOptions, RegressionBasis,
};
use crate::util::{det_sum_vec, REDUCE_CHUNK};

/// Price summary of an indifference-pricing run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PriceReport {
    pub payoff_label: String,
    pub alpha: f64,
    pub y0_with: f64,
    pub y0_with_se: f64,
    pub y0_without: f64,
    pub y0_without_se: f64,
    /// C0 = Y0(F) - Y0(0) with its paired standard error.
    pub price: f64,
    pub price_se: f64,
    /// V(0, 0) = -exp(alpha Y0(F)).
    pub value_function_at_zero: f64,
    pub bounds: BoundsReport,
    pub clamp_fraction: f64,
    pub clamp_ok: bool,
}

impl PriceReport {
    /// Value function V(0, x) = -exp(-alpha (x - Y0(F))).
    pub fn value_function(&self, x: f64) -> f64 {
        -(-self.alpha * (x - self.y0_with)).exp()
    }
}

/// A full pricing run: both solved legs plus the report.
pub struct PriceRun<'a> {
    pub model: &'a MarketModel,
    pub constraint: &'a ConstraintSet,
    pub alpha: f64,
    pub payoff: Payoff,
    pub ensemble: &'a PathEnsemble,
    pub with_payoff: BsdeSolution,
    pub without_payoff: BsdeSolution,
    pub report: PriceReport,
}

/// Solve both legs on common random numbers and difference the values.
pub fn indifference_price<'a>(
    model: &'a MarketModel,
    constraint: &'a ConstraintSet,
    params: &RiskParams,
    payoff: Payoff,
    ensemble: &'a PathEnsemble,
    basis: &RegressionBasis,
    options: &LsmcOptions,
) -> Result<PriceRun<'a>> {
    let alpha = params.alpha;
    let spec_with = BsdeSpec::new(model, constraint, alpha, payoff.clone())?;
    let spec_without = BsdeSpec::new(model, constraint, alpha, Payoff::constant(0.0))?;
    let with_payoff = solve_lsmc(&spec_with, ensemble, basis, options)?;
    let without_payoff = solve_lsmc(&spec_without, ensemble, basis, options)?;
    let b = bounds(&spec_with, ensemble)?;

    let price = with_payoff.y0() - without_payoff.y0();
    let price_se = paired_block_se(with_payoff.block_y0(), without_payoff.block_y0());
    let clamp_fraction = with_payoff
        .diagnostics
        .clamp_fraction
        .max(without_payoff.diagnostics.clamp_fraction);

    let report = PriceReport {
        payoff_label: payoff.label.clone(),
        alpha,
        y0_with: with_payoff.y0(),
        y0_with_se: with_payoff.y0_se(),
        y0_without: without_payoff.y0(),
        y0_without_se: without_payoff.y0_se(),
        price,
        price_se,
        value_function_at_zero: -(alpha * with_payoff.y0()).exp(),
        bounds: b,
        clamp_fraction,
        clamp_ok: with_payoff.diagnostics.clamp_ok && without_payoff.diagnostics.clamp_ok,
    };

    Ok(PriceRun {
        model,
        constraint,
        alpha,
        payoff,
        ensemble,
        with_payoff,
        without_payoff,
        report,
    })
}

/// Paired standard error of a difference of two block-estimate sets
/// computed on common random numbers.
pub fn paired_block_se(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let j = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / j;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (j - 1.0);
    (var / j).sqrt()
}

/// The buying price -C0(-F), from a fresh run on the negated payoff.
pub fn buying_price(
    run: &PriceRun<'_>,
    basis: &RegressionBasis,
    options: &LsmcOptions,
) -> Result<f64> {
    let inner = run.payoff.clone();
    let negated =
        Payoff::path_functional(format!("-({})", run.payoff.label), move |pv| -inner.eval(pv));
    let params = RiskParams::new(run.alpha, 2, 1.0)?;
    let rerun = indifference_price(
        run.model,
        run.constraint,
        &params,
        negated,
        run.ensemble,
        basis,
        options,
    )?;
    Ok(-rerun.report.price)
}

/// Per-node strategies on a deterministic subsample of paths, with
/// membership and norm diagnostics.
#[derive(Debug, Clone)]
pub struct StrategySample {
    pub paths: Vec<usize>,
    /// (sample, step, asset) strategy values.
    pub values: Vec<f64>,
    pub d: usize,
    pub steps: usize,
    pub membership_violations: usize,
    /// max over nodes of |sigma^T pi| - (|Z| + |theta|/alpha).
    pub max_norm_excess: f64,
}

impl StrategySample {
    #[inline]
    pub fn strategy(&self, sample: usize, step: usize) -> &[f64] {
        let base = (sample * self.steps + step) * self.d;
        &self.values[base..base + self.d]
    }
}

/// Recover pi* attaining Proj_{sigma^T C}(Z + theta/alpha) from a solved
/// leg, on up to `max_paths` evenly spaced paths.
pub fn optimal_strategy(
    solution: &BsdeSolution,
    model: &MarketModel,
    constraint: &ConstraintSet,
    alpha: f64,
    ensemble: &PathEnsemble,
    max_paths: usize,
) -> Result<StrategySample> {
    let field = DriverField::new(model, constraint, alpha)?;
    let n = ensemble.n_paths();
    let take = max_paths.max(1).min(n);
    let stride = (n / take).max(1);
    let paths: Vec<usize> = (0..take).map(|i| i * stride).collect();
    let steps = ensemble.grid().steps;
    let m = ensemble.brownian_dim();
    let d = model.d;

    let mut values = vec![0.0f64; paths.len() * steps * d];
    let mut membership_violations = 0usize;
    let mut max_norm_excess = f64::NEG_INFINITY;

    let mut theta = vec![0.0f64; m];
    let mut x = vec![0.0f64; m];
    for (si, &p) in paths.iter().enumerate() {
        for k in 0..steps {
            let t = ensemble.grid().node(k);
            let state = ensemble.state(p, k);
            field.theta_into(t, &state, &mut theta)?;
            let z = solution.z(p, k);
            let mut z_norm2 = 0.0;
            for j in 0..m {
                x[j] = z[j] + theta[j] / alpha;
                z_norm2 += z[j] * z[j];
            }
            let (point, pi) = field.project_strategy(t, &state, &x)?;
            if !constraint.contains(&pi)? {
                membership_violations += 1;
            }
            let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let excess = point.norm() - (z_norm2.sqrt() + theta_norm / alpha);
            max_norm_excess = max_norm_excess.max(excess);
            let base = (si * steps + k) * d;
            values[base..base + d].copy_from_slice(pi.as_slice());
        }
    }

    Ok(StrategySample {
        paths,
        values,
        d,
        steps,
        membership_violations,
        max_norm_excess,
    })
}

/// Hedge = pi*(F) - pi*(0) on a shared path subsample.
#[derive(Debug, Clone)]
pub struct HedgeReport {
    pub with_payoff: StrategySample,
    pub without_payoff: StrategySample,
    /// (sample, step, asset) hedge values.
    pub hedge: Vec<f64>,
}

pub fn hedge(run: &PriceRun<'_>, max_paths: usize) -> Result<HedgeReport> {
    let with_payoff = optimal_strategy(
        &run.with_payoff,
        run.model,
        run.constraint,
        run.alpha,
        run.ensemble,
        max_paths,
    )?;
    let without_payoff = optimal_strategy(
        &run.without_payoff,
        run.model,
        run.constraint,
        run.alpha,
        run.ensemble,
        max_paths,
    )?;
    let hedge = with_payoff
        .values
        .iter()
        .zip(without_payoff.values.iter())
        .map(|(a, b)| a - b)
        .collect();
    Ok(HedgeReport { with_payoff, without_payoff, hedge })
}

/// Monte Carlo verification of the value function along a strategy.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct UtilityCheck {
    /// E[-exp(-alpha (X_T - F))] along the implemented strategy.
    pub estimate: f64,
    pub se: f64,
    /// -exp(-alpha (x - Y0(F))).
    pub predicted: f64,
    pub gap: f64,
    /// Paths whose utility exponent overflowed (flagged, not silently
    /// saturated).
    pub overflow_count: usize,
}

/// Accumulate wealth along pi*(F), optionally perturbed inside the
/// constraint set, and compare realized utility with the BSDE value.
pub fn utility_along_strategy(
    run: &PriceRun<'_>,
    initial_wealth: f64,
    perturbation: Option<&(dyn Fn(f64, &MarketState) -> DVector<f64> + Sync)>,
) -> Result<UtilityCheck> {
    let field = DriverField::new(run.model, run.constraint, run.alpha)?;
    let ensemble = run.ensemble;
    let n = ensemble.n_paths();
    let steps = ensemble.grid().steps;
    let m = ensemble.brownian_dim();
    let d = run.model.d;
    let dt = ensemble.grid().dt();
    let alpha = run.alpha;
    let solution = &run.with_payoff;

    let results: Vec<Result<Vec<(f64, usize)>>> = (0..n.div_ceil(REDUCE_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let lo = chunk * REDUCE_CHUNK;
            let hi = (lo + REDUCE_CHUNK).min(n);
            let mut out = Vec::with_capacity(hi - lo);
            let mut theta = vec![0.0f64; m];
            let mut x = vec![0.0f64; m];
            let mut state = MarketState { s: DVector::zeros(d), v: 0.0 };
            for p in lo..hi {
                let mut wealth = initial_wealth;
                for k in 0..steps {
                    let t = ensemble.grid().node(k);
                    for a in 0..d {
                        state.s[a] = ensemble.price(p, k, a);
                    }
                    state.v = ensemble.factor(p, k);
                    field.theta_into(t, &state, &mut theta)?;
                    let z = solution.z(p, k);
                    for j in 0..m {
                        x[j] = z[j] + theta[j] / alpha;
                    }
                    let (point, pi) = field.project_strategy(t, &state, &x)?;
                    let point = match perturbation {
                        None => point,
                        Some(delta) => {
                            let shifted = &pi + delta(t, &state);
                            let projected = run.constraint.project(&shifted)?;
                            let sigma_t = (run.model.vol)(t, &state).transpose();
                            &sigma_t * projected
                        }
                    };
                    let db = ensemble.increment(p, k);
                    let mut gain = 0.0;
                    for j in 0..m {
                        gain += point[j] * (db[j] + theta[j] * dt);
                    }
                    wealth += gain;
                }
                let f = run.payoff.eval(&ensemble.path_view(p));
                let expo = -alpha * (wealth - f);
                let overflow = usize::from(expo > 700.0);
                let u = if overflow == 1 { -f64::MAX } else { -expo.exp() };
                out.push((u, overflow));
            }
            Ok(out)
        })
        .collect();

    let mut utilities = Vec::with_capacity(n);
    let mut overflow_count = 0usize;
    for r in results {
        for (u, o) in r? {
            utilities.push(u);
            overflow_count += o;
        }
    }
    let sums = det_sum_vec(n, 2, |i, acc| {
        acc[0] += utilities[i];
        acc[1] += utilities[i] * utilities[i];
    });
    let nf = n as f64;
    let mean = sums[0] / nf;
    let var = ((sums[1] / nf) - mean * mean).max(0.0) * nf / (nf - 1.0);
    let se = (var / nf).sqrt();
    let predicted = -(-alpha * (initial_wealth - solution.y0())).exp();

    Ok(UtilityCheck {
        estimate: mean,
        se,
        predicted,
        gap: mean - predicted,
        overflow_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
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

    #[test]
    fn zero_payoff_prices_to_zero() {
        let model = factor_model(0.3, 0.6, 0.8);
        let cset = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let ens = simulate(&model, grid, 4_000, 31).unwrap();
        let params = RiskParams::new(1.0, 2, 1.0).unwrap();
        let run = indifference_price(
            &model,
            &cset,
            &params,
            Payoff::constant(0.0),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        assert_eq!(run.report.price, 0.0);
        assert!(run.report.value_function_at_zero < 0.0);
    }

    #[test]
    fn certainty_equivalent_price() {
        // No trading: C0 = (1/alpha) ln E[e^{alpha B_T}] = 0.5.
        let model = factor_model(0.0, 1.0, 0.0);
        let cset = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let ens = simulate(&model, grid, 50_000, 32).unwrap();
        let params = RiskParams::new(1.0, 2, 1.0).unwrap();
        let run = indifference_price(
            &model,
            &cset,
            &params,
            Payoff::of_factor("brownian", |v| v),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let tol = (3.0 * run.report.price_se).max(0.015);
        assert!((run.report.price - 0.5).abs() < tol, "{:?}", run.report.price);
    }

    #[test]
    fn complete_market_price_and_strategy() {
        // d = m = 1, sigma = 1, theta = 0.5, F = B_T: C0 = E^Q[B_T] = -0.5.
        let model = MarketModel::single_asset(|_, _| 0.5, |_, _| 1.0, 1.0, 1.0).unwrap();
        let cset = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let ens = simulate(&model, grid, 50_000, 33).unwrap();
        let params = RiskParams::new(1.0, 2, 1.0).unwrap();
        // With b = 0.5 and sigma = 1 the log-drift vanishes, so
        // B_T = ln(S_T / S_0) exactly.
        let payoff = Payoff::terminal("brownian", |st: &MarketState| st.s[0].ln());
        let run = indifference_price(
            &model,
            &cset,
            &params,
            payoff,
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let tol = (3.0 * run.report.price_se).max(0.02);
        assert!(
            (run.report.price + 0.5).abs() < tol,
            "price {} se {}",
            run.report.price,
            run.report.price_se
        );

        // Identity projection: pi* = Z + theta / alpha per node.
        let strat = optimal_strategy(&run.with_payoff, &model, &cset, 1.0, &ens, 16).unwrap();
        assert_eq!(strat.membership_violations, 0);
        for (si, &p) in strat.paths.iter().enumerate() {
            for k in (0..grid.steps).step_by(7) {
                let z = run.with_payoff.z(p, k)[0];
                let pi = strat.strategy(si, k)[0];
                assert!((pi - (z + 0.5)).abs() < 1e-9, "pi {pi} vs z+theta {}", z + 0.5);
            }
        }
        assert!(strat.max_norm_excess <= 1e-9);
    }

    #[test]
    fn zero_set_strategy_and_hedge_vanish() {
        let model = factor_model(0.3, 0.6, 0.8);
        let cset = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let ens = simulate(&model, grid, 4_000, 34).unwrap();
        let params = RiskParams::new(1.0, 2, 1.0).unwrap();
        let run = indifference_price(
            &model,
            &cset,
            &params,
            Payoff::of_factor("soft", |v| v.tanh()),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let h = hedge(&run, 8).unwrap();
        assert!(h.hedge.iter().all(|x| x.abs() < 1e-12));
        assert!(h.with_payoff.values.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn subspace_hedge_is_projected_difference() {
        // For subspace constraints the hedge equals the projection of
        // Z(F) - Z(0) + theta-term cancellation by linearity.
        let model = factor_model(0.25, 0.6, 0.8);
        let cset = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let ens = simulate(&model, grid, 8_000, 35).unwrap();
        let params = RiskParams::new(1.0, 2, 1.0).unwrap();
        let run = indifference_price(
            &model,
            &cset,
            &params,
            Payoff::of_factor("soft", |v| v.tanh()),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let h = hedge(&run, 8).unwrap();
        for (si, &p) in h.with_payoff.paths.iter().enumerate() {
            for k in (0..grid.steps).step_by(3) {
                let dz = run.with_payoff.z(p, k)[0] - run.without_payoff.z(p, k)[0];
                let hedge_val = h.hedge[(si * grid.steps + k) * 1];
                // sigma = 1: hedge in strategy units equals projected dz.
                assert!((hedge_val - dz).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn utility_matches_value_function() {
        let model = factor_model(0.0, 1.0, 0.0);
        let cset = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate(&model, grid, 20_000, 36).unwrap();
        let params = RiskParams::new(1.0, 2, 1.0).unwrap();

        // No trading, F = 0, theta = 0: exact equality with -e^{-alpha x}.
        let run = indifference_price(
            &model,
            &cset,
            &params,
            Payoff::constant(0.0),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let check = utility_along_strategy(&run, 0.7, None).unwrap();
        assert!((check.estimate - (-(-0.7f64).exp())).abs() < 1e-12);
        assert!((check.predicted - (-(-0.7f64).exp())).abs() < 1e-9);

        // Complete market: realized utility matches the value function.
        let model = MarketModel::single_asset(|_, _| 0.2, |_, _| 1.0, 1.0, 1.0).unwrap();
        let cset = ConstraintSet::full_space(1);
        let ens = simulate(&model, grid, 30_000, 37).unwrap();
        let payoff = Payoff::terminal("brownian", |st: &MarketState| st.s[0].ln() + 0.5 - 0.2);
        let run = indifference_price(
            &model,
            &cset,
            &params,
            payoff,
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let check = utility_along_strategy(&run, 0.0, None).unwrap();
        assert_eq!(check.overflow_count, 0);
        assert!(
            check.gap.abs() < 3.0 * check.se + 0.02,
            "gap {} se {}",
            check.gap,
            check.se
        );

        // A perturbed admissible strategy cannot beat the optimum.
        let bump = |_t: f64, state: &MarketState| DVector::from_vec(vec![0.4 * state.v.tanh() + 0.2]);
        let worse = utility_along_strategy(&run, 0.0, Some(&bump)).unwrap();
        assert!(
            worse.estimate <= check.estimate + 3.0 * (worse.se + check.se),
            "perturbed {} vs optimal {}",
            worse.estimate,
            check.estimate
        );
    }

    #[test]
    fn cash_translation_and_monotonicity() {
        let model = factor_model(0.2, 0.6, 0.8);
        let cone =
            ConstraintSet::polyhedral_cone(1, vec![DVector::from_vec(vec![1.0])]).unwrap();
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let ens = simulate(&model, grid, 16_000, 38).unwrap();
        let params = RiskParams::new(1.2, 2, 1.0).unwrap();
        let base = indifference_price(
            &model,
            &cone,
            &params,
            Payoff::of_factor("soft", |v| v.tanh()),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let shifted = indifference_price(
            &model,
            &cone,
            &params,
            Payoff::of_factor("soft+c", |v| v.tanh() + 0.25),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let diff = shifted.report.price - base.report.price;
        let tol = 3.0 * (shifted.report.price_se + base.report.price_se) + 1e-3;
        assert!((diff - 0.25).abs() < tol, "cash translation broke: {diff}");
        assert!(shifted.report.price >= base.report.price - tol);
    }

    #[test]
    fn larger_constraint_sets_weakly_lower_selling_prices() {
        let model = factor_model(0.25, 0.6, 0.8);
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let ens = simulate(&model, grid, 16_000, 39).unwrap();
        let params = RiskParams::new(1.0, 2, 1.0).unwrap();
        let payoff = Payoff::of_factor("pos", |v: f64| v.tanh() + 1.0);
        let mut prices = Vec::new();
        for cset in [
            ConstraintSet::zero_set(1),
            ConstraintSet::polyhedral_cone(1, vec![DVector::from_vec(vec![1.0])]).unwrap(),
            ConstraintSet::full_space(1),
        ] {
            let run = indifference_price(
                &model,
                &cset,
                &params,
                payoff.clone(),
                &ens,
                &RegressionBasis::default(),
                &quick_options(),
            )
            .unwrap();
            prices.push((run.report.price, run.report.price_se));
        }
        for w in prices.windows(2) {
            let (p_small, se_small) = w[0];
            let (p_big, se_big) = w[1];
            assert!(
                p_big <= p_small + 3.0 * (se_small + se_big) + 1e-3,
                "enlarging the constraint raised the price: {prices:?}"
            );
        }
    }
}
