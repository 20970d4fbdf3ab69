//! Numerical solution of the quadratic BSDEs: backward least-squares
//! Monte Carlo on path ensembles, a 1-D semilinear PDE solver for the
//! stochastic-factor family, and the explicit a-priori value bounds.

mod bounds;
mod lsmc;
mod pde;
mod regression;

pub use bounds::{bounds, BoundsReport};
pub use lsmc::{solve_lsmc, LsmcOptions};
pub use pde::{solve_pde_1d, PdeParams, PdeSolution};
pub use regression::RegressionBasis;

use std::io::Write;

use crate::error::{QbsdeError, Result};
use crate::geometry::ConstraintSet;
use crate::model::{MarketModel, Payoff};
use crate::paths::PathEnsemble;

/// What to solve: BSDE(F, f^alpha) for the primal driver of the
/// constrained exponential-utility problem.
pub struct BsdeSpec<'a> {
    pub model: &'a MarketModel,
    pub constraint: &'a ConstraintSet,
    pub alpha: f64,
    pub payoff: Payoff,
}

impl<'a> BsdeSpec<'a> {
    pub fn new(
        model: &'a MarketModel,
        constraint: &'a ConstraintSet,
        alpha: f64,
        payoff: Payoff,
    ) -> Result<Self> {
        if constraint.dim() != model.d {
            return Err(QbsdeError::dim(model.d, constraint.dim(), "constraint dimension"));
        }
        if alpha <= 0.0 {
            return Err(QbsdeError::Config("alpha must be positive".into()));
        }
        Ok(BsdeSpec { model, constraint, alpha, payoff })
    }
}

/// Regression and stability diagnostics of one LSMC solve.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct SolverDiagnostics {
    pub max_condition_number: f64,
    pub degree_downgrades: usize,
    pub clamp_activations: usize,
    pub clamp_fraction: f64,
    /// False when more than 1% of the path-step updates hit the corridor.
    pub clamp_ok: bool,
    pub warnings: Vec<String>,
}

/// Discrete (Y, Z) fields of a solved BSDE on a path ensemble.
pub struct BsdeSolution {
    y0: f64,
    /// Standard error from disjoint path-block re-solves.
    y0_se: f64,
    /// sd of the step-one targets / sqrt(N); understates regression noise.
    y0_se_quick: f64,
    block_y0: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    n_paths: usize,
    steps: usize,
    m: usize,
    pub diagnostics: SolverDiagnostics,
}

impl BsdeSolution {
    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn y0_se(&self) -> f64 {
        self.y0_se
    }

    pub fn y0_se_quick(&self) -> f64 {
        self.y0_se_quick
    }

    /// Per-block estimates of Y0 from disjoint path blocks; differences of
    /// these across paired solves give paired standard errors.
    pub fn block_y0(&self) -> &[f64] {
        &self.block_y0
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn brownian_dim(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn y(&self, path: usize, node: usize) -> f64 {
        self.y[path * (self.steps + 1) + node]
    }

    #[inline]
    pub fn z(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.steps + step) * self.m;
        &self.z[base..base + self.m]
    }

    /// CSV dump (node, y, z columns) of a bounded number of paths.
    pub fn export_csv<W: Write>(&self, out: &mut W, max_paths: usize) -> Result<()> {
        let paths = self.n_paths.min(max_paths);
        write!(out, "path,node,y")?;
        for j in 0..self.m {
            write!(out, ",z{j}")?;
        }
        writeln!(out)?;
        for p in 0..paths {
            for i in 0..=self.steps {
                write!(out, "{p},{i},{}", self.y(p, i))?;
                if i < self.steps {
                    for j in 0..self.m {
                        write!(out, ",{}", self.z(p, i)[j])?;
                    }
                } else {
                    for _ in 0..self.m {
                        write!(out, ",")?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn payoff_values(payoff: &Payoff, ensemble: &PathEnsemble) -> Vec<f64> {
    (0..ensemble.n_paths())
        .map(|p| payoff.eval(&ensemble.path_view(p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::{simulate, TimeGrid};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    /// Factor model with constant theta and unit sigma: V is driven by
    /// (kappa1, kappa2), the stock loads on B1.
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
    fn constant_payoff_no_trading() {
        let model = factor_model(0.3, 1.0, 0.0);
        let zero = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate(&model, grid, 4_000, 21).unwrap();
        let spec = BsdeSpec::new(&model, &zero, 1.0, Payoff::constant(2.0)).unwrap();
        let sol = solve_lsmc(&spec, &ens, &RegressionBasis::default(), &quick_options()).unwrap();
        assert_relative_eq!(sol.y0(), 2.0, epsilon = 1e-6);
        // Z vanishes along paths.
        for p in (0..ens.n_paths()).step_by(503) {
            for k in 0..grid.steps {
                for j in 0..2 {
                    assert!(sol.z(p, k)[j].abs() < 1e-6);
                }
            }
        }
        // Terminal consistency is exact.
        for p in (0..ens.n_paths()).step_by(101) {
            assert_eq!(sol.y(p, grid.steps), 2.0);
        }
    }

    #[test]
    fn martingale_case_driver_vanishes() {
        // theta = 0, full space: F = B1_T gives Y_t = B1_t, Z = (1, 0).
        let model = factor_model(0.0, 1.0, 0.0);
        let full = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate(&model, grid, 20_000, 22).unwrap();
        let payoff = Payoff::of_factor("brownian", |v| v);
        let spec = BsdeSpec::new(&model, &full, 1.0, payoff).unwrap();
        let sol = solve_lsmc(&spec, &ens, &RegressionBasis::default(), &quick_options()).unwrap();
        assert!(sol.y0().abs() < 0.02, "y0 = {}", sol.y0());
        // Spot-check Y tracks the Brownian motion and Z ~ (1, 0).
        let mut max_err: f64 = 0.0;
        for p in (0..ens.n_paths()).step_by(977) {
            for k in (1..grid.steps).step_by(5) {
                max_err = max_err.max((sol.y(p, k) - ens.factor(p, k)).abs());
            }
            let z = sol.z(p, grid.steps / 2);
            max_err = max_err.max((z[0] - 1.0).abs()).max(z[1].abs());
        }
        assert!(max_err < 0.1, "max deviation {max_err}");
    }

    #[test]
    fn certainty_equivalent_oracle() {
        // No trading, F = B1_T, alpha = 1: Y0 = (1/alpha) ln E[e^{alpha F}]
        // = T/2 by the Gaussian mgf.
        let model = factor_model(0.0, 1.0, 0.0);
        let zero = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let ens = simulate(&model, grid, 50_000, 23).unwrap();
        let payoff = Payoff::of_factor("brownian", |v| v);
        let spec = BsdeSpec::new(&model, &zero, 1.0, payoff).unwrap();
        let sol = solve_lsmc(&spec, &ens, &RegressionBasis::default(), &quick_options()).unwrap();
        let tol = (3.0 * sol.y0_se()).max(0.015);
        assert!((sol.y0() - 0.5).abs() < tol, "y0 {} se {}", sol.y0(), sol.y0_se());
        assert!(sol.diagnostics.clamp_ok);
    }

    #[test]
    fn bounds_frozen_and_corridor() {
        let model = factor_model(0.0, 1.0, 0.0);
        let zero = ConstraintSet::zero_set(1);
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate(&model, grid, 30_000, 24).unwrap();

        // F = 0, theta = 0: both bounds vanish.
        let spec0 = BsdeSpec::new(&model, &zero, 1.0, Payoff::constant(0.0)).unwrap();
        let b0 = bounds(&spec0, &ens).unwrap();
        assert_relative_eq!(b0.lower, 0.0, epsilon = 1e-12);
        assert_relative_eq!(b0.upper, 0.0, epsilon = 1e-12);

        // F >= 0 with no trading: Y0 equals the upper bound.
        let payoff = Payoff::of_factor("call", |v| v.max(0.0));
        let spec = BsdeSpec::new(&model, &zero, 1.0, payoff).unwrap();
        let b = bounds(&spec, &ens).unwrap();
        let sol = solve_lsmc(&spec, &ens, &RegressionBasis::default(), &quick_options()).unwrap();
        assert!(
            (sol.y0() - b.upper).abs() <= 3.0 * (sol.y0_se() + b.upper_se) + 0.01,
            "y0 {} vs upper {}",
            sol.y0(),
            b.upper
        );
        assert!(!b.upper_divergence);

        // Upper bound against the Gaussian-integral oracle
        // E[e^{B+}] = 1/2 + e^{T/2} Phi(sqrt(T)).
        let payoff = Payoff::of_factor("brownian", |v| v);
        let spec = BsdeSpec::new(&model, &zero, 1.0, payoff).unwrap();
        let b = bounds(&spec, &ens).unwrap();
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        let oracle = (0.5 + 0.5f64.exp() * normal.cdf(1.0)).ln();
        assert!((b.upper - oracle).abs() < 4.0 * b.upper_se + 0.01, "{} vs {oracle}", b.upper);

        // Corridor at t = 0 for the solved value.
        assert!(sol.y0() >= b.lower - 3.0 * (sol.y0_se() + b.lower_se) - 1e-9);
        assert!(sol.y0() <= b.upper + 3.0 * (sol.y0_se() + b.upper_se) + 1e-9);
    }

    #[test]
    fn monotone_in_terminal_data() {
        let model = factor_model(0.2, 0.6, 0.8);
        let cone = ConstraintSet::polyhedral_cone(1, vec![nalgebra::DVector::from_vec(vec![1.0])])
            .unwrap();
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let ens = simulate(&model, grid, 20_000, 25).unwrap();
        let lowp = Payoff::of_factor("tanh", |v| v.tanh());
        let highp = Payoff::of_factor("tanh+", |v| v.tanh() + 0.3);
        let s_low = solve_lsmc(
            &BsdeSpec::new(&model, &cone, 1.0, lowp).unwrap(),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        let s_high = solve_lsmc(
            &BsdeSpec::new(&model, &cone, 1.0, highp).unwrap(),
            &ens,
            &RegressionBasis::default(),
            &quick_options(),
        )
        .unwrap();
        assert!(s_low.y0() <= s_high.y0() + 3.0 * (s_low.y0_se() + s_high.y0_se()));
    }

    #[test]
    fn solution_level_scaling_transfer() {
        // Cone constraint: alpha Y^alpha(F) = Y^1(alpha F) transfers to the
        // discrete scheme because every step of the recursion scales.
        let model = factor_model(0.25, 0.6, 0.8);
        let cone = ConstraintSet::polyhedral_cone(1, vec![nalgebra::DVector::from_vec(vec![1.0])])
            .unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let ens = simulate(&model, grid, 8_000, 26).unwrap();
        for alpha in [0.5, 2.0] {
            let payoff = Payoff::of_factor("tanh", |v| v.tanh());
            let scaled = Payoff::of_factor("tanh-scaled", move |v| alpha * v.tanh());
            let a = solve_lsmc(
                &BsdeSpec::new(&model, &cone, alpha, payoff).unwrap(),
                &ens,
                &RegressionBasis::default(),
                &quick_options(),
            )
            .unwrap();
            let b = solve_lsmc(
                &BsdeSpec::new(&model, &cone, 1.0, scaled).unwrap(),
                &ens,
                &RegressionBasis::default(),
                &quick_options(),
            )
            .unwrap();
            let resid = (alpha * a.y0() - b.y0()).abs();
            assert!(
                resid <= 3.0 * (alpha * a.y0_se() + b.y0_se()) + 1e-10,
                "alpha {alpha}: residual {resid}"
            );
        }
    }

    #[test]
    fn pde_constant_payoff_exact() {
        let model = factor_model(0.4, 0.6, 0.8);
        let line = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let sol = solve_pde_1d(
            &model,
            &line,
            2.0,
            &Payoff::of_factor("const", |_| 3.0),
            grid,
            &PdeParams { v_nodes: 101, ..PdeParams::default() },
        )
        .unwrap();
        // u = c - theta^2 T / (2 alpha) for constant theta; z2^2 term dies
        // since u is flat.
        let expected = 3.0 - 0.4 * 0.4 / (2.0 * 2.0);
        assert_relative_eq!(sol.y0, expected, epsilon = 1e-6);
        assert!(sol.z0[0].abs() < 1e-8 && sol.z0[1].abs() < 1e-8);
    }

    /// Simpson-rule quadrature of g against the N(mu, var) density.
    fn gaussian_quadrature(g: impl Fn(f64) -> f64, mu: f64, var: f64) -> f64 {
        let sd = var.sqrt();
        let lo = mu - 10.0 * sd;
        let hi = mu + 10.0 * sd;
        let n = 4_000;
        let h = (hi - lo) / n as f64;
        let pdf = |x: f64| (-((x - mu) * (x - mu)) / (2.0 * var)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let mut acc = g(lo) * pdf(lo) + g(hi) * pdf(hi);
        for i in 1..n {
            let x = lo + h * i as f64;
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * g(x) * pdf(x);
        }
        acc * h / 3.0
    }

    #[test]
    fn pde_kappa1_zero_oracle() {
        // kappa1 = 0 decouples the hedgeable part: Y0 = (1/a) ln E[e^{aF}]
        // - theta^2 T/(2a), with V_T ~ N(v0, T).
        let theta = 0.3;
        let alpha = 1.5;
        let model = factor_model(theta, 0.0, 1.0);
        let line = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let payoff = Payoff::of_factor("capped", |v: f64| v.min(1.0));
        let sol = solve_pde_1d(&model, &line, alpha, &payoff, grid, &PdeParams::default()).unwrap();
        let ce = gaussian_quadrature(|v| (alpha * v.min(1.0)).exp(), 0.0, 1.0).ln() / alpha;
        let expected = ce - theta * theta / (2.0 * alpha);
        assert!(
            (sol.y0 - expected).abs() < 0.01,
            "pde {} vs oracle {expected} (richardson {})",
            sol.y0,
            sol.richardson_error
        );
    }

    #[test]
    fn pde_kappa2_zero_oracle() {
        // kappa2 = 0 is a complete market: Y0(F) - Y0(0) = E^{Q_theta}[F],
        // with V_T ~ N(v0 - theta T, T) under the measure change.
        let theta = 0.4;
        let alpha = 2.0;
        let model = factor_model(theta, 1.0, 0.0);
        let line = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let payoff = Payoff::of_factor("capped", |v: f64| v.min(1.0));
        let with = solve_pde_1d(&model, &line, alpha, &payoff, grid, &PdeParams::default()).unwrap();
        let without = solve_pde_1d(
            &model,
            &line,
            alpha,
            &Payoff::of_factor("zero", |_| 0.0),
            grid,
            &PdeParams::default(),
        )
        .unwrap();
        let expected = gaussian_quadrature(|v| v.min(1.0), -theta, 1.0);
        let got = with.y0 - without.y0;
        assert!((got - expected).abs() < 0.01, "pde {got} vs oracle {expected}");
    }

    #[test]
    fn lsmc_cross_validates_pde() {
        let model = factor_model(0.25, 0.6, 0.8);
        let line = ConstraintSet::full_space(1);
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let alpha = 1.0;
        let payoff = Payoff::of_factor("capped", |v: f64| v.min(1.0));
        let pde = solve_pde_1d(&model, &line, alpha, &payoff, grid, &PdeParams::default()).unwrap();
        let ens = simulate(&model, grid, 50_000, 27).unwrap();
        let spec = BsdeSpec::new(&model, &line, alpha, payoff).unwrap();
        let lsmc = solve_lsmc(&spec, &ens, &RegressionBasis::default(), &quick_options()).unwrap();
        let tol = 3.0 * (lsmc.y0_se() + pde.richardson_error) + 0.01;
        assert!(
            (lsmc.y0() - pde.y0).abs() <= tol,
            "lsmc {} vs pde {} (tol {tol})",
            lsmc.y0(),
            pde.y0
        );
    }

    #[test]
    fn refinement_consistency() {
        // Halving dt moves Y0 by an amount consistent with first-order
        // convergence (coarse error roughly twice the fine error).
        let model = factor_model(0.3, 0.6, 0.8);
        let zero = ConstraintSet::zero_set(1);
        let alpha = 2.0;
        let payoff = Payoff::of_factor("soft", |v: f64| v.tanh());
        let solve_at = |steps: usize| {
            let grid = TimeGrid::new(1.0, steps).unwrap();
            let ens = simulate(&model, grid, 60_000, 28).unwrap();
            let spec = BsdeSpec::new(&model, &zero, alpha, payoff.clone()).unwrap();
            solve_lsmc(&spec, &ens, &RegressionBasis::default(), &quick_options()).unwrap()
        };
        let s8 = solve_at(8);
        let s16 = solve_at(16);
        let s32 = solve_at(32);
        let d1 = (s8.y0() - s16.y0()).abs();
        let d2 = (s16.y0() - s32.y0()).abs();
        let noise = 3.0 * (s8.y0_se() + s16.y0_se() + s32.y0_se());
        assert!(
            d2 <= 0.75 * d1 + noise,
            "refinement not contracting: {d1} then {d2} (noise {noise})"
        );
    }
}

