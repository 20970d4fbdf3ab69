//! Closed-form reference prices for the degenerate configurations where
//! the terminal state is Gaussian and the constraint collapses the
//! problem: no trading (certainty equivalent) or a complete market
//! (expectation under the minimal martingale measure).
//!
//! These references are quadrature-based and independent of the solvers;
//! the `oracle` command and the acceptance suite check the Monte Carlo
//! pipeline against them.

use crate::config::{ConstraintConfig, ModelConfig, RunConfig};
use crate::error::{QbsdeError, Result};
use crate::expr::{Expr, Var};

/// A reference value with its quadrature tolerance.
#[derive(Debug, Clone, serde::Serialize)]
pub struct OracleReport {
    pub price: f64,
    /// |S_n - S_{n/2}| of the Simpson rule, a discretization estimate.
    pub tolerance: f64,
    pub method: String,
}

/// Simpson quadrature of g against N(mean, var), with a refinement
/// tolerance.
pub fn gaussian_quadrature(g: impl Fn(f64) -> f64, mean: f64, var: f64) -> (f64, f64) {
    let fine = simpson(&g, mean, var, 8192);
    let coarse = simpson(&g, mean, var, 4096);
    (fine, (fine - coarse).abs())
}

fn simpson(g: &impl Fn(f64) -> f64, mean: f64, var: f64, n: usize) -> f64 {
    let sd = var.sqrt();
    let lo = mean - 10.0 * sd;
    let hi = mean + 10.0 * sd;
    let h = (hi - lo) / n as f64;
    let norm = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
    let pdf = |x: f64| (-((x - mean) * (x - mean)) / (2.0 * var)).exp() * norm;
    let mut acc = g(lo) * pdf(lo) + g(hi) * pdf(hi);
    for i in 1..n {
        let x = lo + h * i as f64;
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * g(x) * pdf(x);
    }
    acc * h / 3.0
}

/// Certainty equivalent (1/alpha) ln E[e^{alpha g(X)}] for Gaussian X.
pub fn certainty_equivalent(
    alpha: f64,
    g: impl Fn(f64) -> f64,
    mean: f64,
    var: f64,
) -> (f64, f64) {
    let (m, tol) = gaussian_quadrature(|x| (alpha * g(x)).exp(), mean, var);
    (m.ln() / alpha, tol / (alpha * m))
}

fn expr_is_constant(e: &Expr) -> bool {
    e.is_free_of(Var::T) && e.is_free_of(Var::S) && e.is_free_of(Var::V)
}

/// The Gaussian law of the payoff-relevant terminal variable, under the
/// physical measure and under the minimal martingale measure.
struct TerminalLaw {
    /// Maps the Gaussian variable to the payoff argument state.
    payoff_of: Box<dyn Fn(f64) -> f64>,
    mean_p: f64,
    mean_q: f64,
    var: f64,
}

fn terminal_law(cfg: &RunConfig) -> Result<TerminalLaw> {
    let payoff_expr = Expr::parse(&cfg.payoff.expr)?;
    match &cfg.model {
        ModelConfig::Factor { theta, sigma, eta, kappa, horizon, v0, .. } => {
            let th = Expr::parse(theta)?;
            let sg = Expr::parse(sigma)?;
            let et = Expr::parse(eta)?;
            if !(expr_is_constant(&th) && expr_is_constant(&sg) && expr_is_constant(&et)) {
                return Err(QbsdeError::Config(
                    "oracle needs constant factor coefficients".into(),
                ));
            }
            if !payoff_expr.is_free_of(Var::S) {
                return Err(QbsdeError::Config(
                    "oracle on a factor model needs a payoff on v only".into(),
                ));
            }
            let theta0 = th.eval(0.0, 0.0, 0.0);
            let eta0 = et.eval(0.0, 0.0, 0.0);
            let t_end = *horizon;
            let g = {
                let e = payoff_expr.clone();
                move |v: f64| e.eval(t_end, 1.0, v)
            };
            Ok(TerminalLaw {
                payoff_of: Box::new(g),
                mean_p: v0 + eta0 * t_end,
                mean_q: v0 + (eta0 - kappa[0] * theta0) * t_end,
                var: t_end,
            })
        }
        ModelConfig::SingleAsset { drift, vol, horizon, s0 } => {
            let b = Expr::parse(drift)?;
            let sg = Expr::parse(vol)?;
            if !(expr_is_constant(&b) && expr_is_constant(&sg)) {
                return Err(QbsdeError::Config("oracle needs constant coefficients".into()));
            }
            let b0 = b.eval(0.0, 0.0, 0.0);
            let s0v = *s0;
            let sig = sg.eval(0.0, 0.0, 0.0);
            if sig <= 0.0 {
                return Err(QbsdeError::Config("oracle needs positive volatility".into()));
            }
            let t_end = *horizon;
            let g = {
                let e = payoff_expr.clone();
                move |x: f64| e.eval(t_end, x.exp(), 0.0)
            };
            Ok(TerminalLaw {
                payoff_of: Box::new(g),
                mean_p: s0v.ln() + (b0 - 0.5 * sig * sig) * t_end,
                // theta = b/sigma shifts the log-drift to the martingale
                // one: ln s0 - sigma^2 T / 2.
                mean_q: s0v.ln() - 0.5 * sig * sig * t_end,
                var: sig * sig * t_end,
            })
        }
    }
}

/// Reference price for the degenerate cases: certainty equivalent under
/// the zero set, minimal-martingale-measure expectation under the full
/// space (complete single-asset market, or a factor model with
/// kappa2 = 0).
pub fn reference_price(cfg: &RunConfig, alpha: f64) -> Result<OracleReport> {
    let law = terminal_law(cfg)?;
    match &cfg.constraint {
        ConstraintConfig::Zero { .. } => {
            let (price, tolerance) =
                certainty_equivalent(alpha, &law.payoff_of, law.mean_p, law.var);
            Ok(OracleReport {
                price,
                tolerance,
                method: "certainty-equivalent quadrature".into(),
            })
        }
        ConstraintConfig::Full { .. } => {
            let complete = match &cfg.model {
                ModelConfig::SingleAsset { .. } => true,
                ModelConfig::Factor { kappa, .. } => kappa[1] == 0.0,
            };
            if !complete {
                return Err(QbsdeError::Config(
                    "oracle full-space reference needs a complete market (kappa2 = 0 or a single-asset model)".into(),
                ));
            }
            let (price, tolerance) = gaussian_quadrature(&law.payoff_of, law.mean_q, law.var);
            Ok(OracleReport {
                price,
                tolerance,
                method: "minimal-martingale-measure quadrature".into(),
            })
        }
        _ => Err(QbsdeError::Config(
            "oracle supports only the zero-set and full-space constraints".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn config(constraint: &str, payoff: &str, theta: f64) -> RunConfig {
        let text = format!(
            r#"{{
            "model": {{"kind": "factor", "theta": "{theta}", "sigma": "1.0", "eta": "0.0",
                      "kappa": [1.0, 0.0], "horizon": 1.0, "s0": 1.0, "v0": 0.0}},
            "constraint": {constraint},
            "payoff": {{"expr": "{payoff}"}},
            "risk": {{"alpha": 1.0}},
            "solver": {{"paths": 100, "steps": 4, "seed": 1}}
        }}"#
        );
        RunConfig::from_json(&text).unwrap()
    }

    #[test]
    fn certainty_equivalent_of_brownian() {
        // (1/alpha) ln E[e^{alpha B_T}] = alpha T / 2.
        let cfg = config(r#"{"kind": "zero", "dim": 1}"#, "v", 0.0);
        let rep = reference_price(&cfg, 1.0).unwrap();
        assert_relative_eq!(rep.price, 0.5, epsilon = 1e-9);
        let rep2 = reference_price(&cfg, 2.0).unwrap();
        assert_relative_eq!(rep2.price, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn digital_certainty_equivalent_curve() {
        // F = 1_{B_T > 0}: CE = (1/a) ln((1 + e^a)/2).
        let cfg = config(r#"{"kind": "zero", "dim": 1}"#, "max(min(v*1e9, 1), 0)", 0.0);
        for alpha in [0.25, 1.0, 4.0] {
            let rep = reference_price(&cfg, alpha).unwrap();
            let curve = ((1.0 + alpha.exp()) / 2.0).ln() / alpha;
            assert!((rep.price - curve).abs() < 5e-3, "{} vs {curve}", rep.price);
        }
    }

    #[test]
    fn complete_market_reference() {
        // kappa2 = 0, theta = 0.5: E^{Q}[B_T] = -0.5.
        let cfg = config(r#"{"kind": "full", "dim": 1}"#, "v", 0.5);
        let rep = reference_price(&cfg, 1.0).unwrap();
        assert_relative_eq!(rep.price, -0.5, epsilon = 1e-9);
    }

    #[test]
    fn oracle_rejects_unsupported_configs() {
        let cfg = config(r#"{"kind": "cone", "generators": [[1.0]]}"#, "v", 0.0);
        assert!(reference_price(&cfg, 1.0).is_err());
    }
}
