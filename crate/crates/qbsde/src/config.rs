//! JSON run configuration: model, constraint, payoff, risk, and solver
//! records, plus builders turning them into library objects.
//!
//! Coefficients and payoffs are declared in the small expression grammar
//! of [`crate::expr`]; all defaults are materialized on parse so the
//! config echoed into reports is complete.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{QbsdeError, Result};
use crate::expr::{Expr, Var};
use crate::geometry::ConstraintSet;
use crate::model::{MarketModel, Payoff, RiskParams};
use crate::solver::{LsmcOptions, RegressionBasis};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub constraint: ConstraintConfig,
    pub payoff: PayoffConfig,
    pub risk: RiskConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub asymptotics: AsymptoticsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// One asset, one Brownian motion; expressions over (t, s).
    SingleAsset { drift: String, vol: String, horizon: f64, s0: f64 },
    /// Stochastic-factor model; theta, sigma, eta are expressions over v.
    Factor {
        theta: String,
        sigma: String,
        eta: String,
        kappa: [f64; 2],
        horizon: f64,
        s0: f64,
        v0: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintConfig {
    Full { dim: usize },
    Zero { dim: usize },
    Subspace { basis: Vec<Vec<f64>> },
    Cone { generators: Vec<Vec<f64>> },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayoffConfig {
    /// Terminal payoff expression over (t, s, v), evaluated at t = T.
    pub expr: String,
    /// Optional truncation levels (n, k) applied as F+ /\ n - F- /\ k.
    #[serde(default)]
    pub truncate: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub alpha_grid: Option<Vec<f64>>,
    #[serde(default = "default_p")]
    pub p: u32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_p() -> u32 {
    2
}

fn default_epsilon() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub paths: usize,
    pub steps: usize,
    /// Mandatory unless supplied on the command line.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_true")]
    pub use_log_price: bool,
    #[serde(default = "default_blocks")]
    pub se_blocks: usize,
    #[serde(default = "default_true")]
    pub clamp: bool,
    #[serde(default)]
    pub picard: bool,
}

fn default_degree() -> usize {
    3
}

fn default_ridge() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

fn default_blocks() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsymptoticsConfig {
    #[serde(default = "default_ladder")]
    pub control_bounds: Vec<f64>,
    #[serde(default = "default_v_nodes")]
    pub v_nodes: usize,
    #[serde(default = "default_directions")]
    pub lattice_directions: usize,
}

fn default_ladder() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0, 16.0]
}

fn default_v_nodes() -> usize {
    401
}

fn default_directions() -> usize {
    16
}

impl Default for AsymptoticsConfig {
    fn default() -> Self {
        AsymptoticsConfig {
            control_bounds: default_ladder(),
            v_nodes: default_v_nodes(),
            lattice_directions: default_directions(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| QbsdeError::Config(format!("config schema violation: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.solver.paths < 2 {
            return Err(QbsdeError::Config("solver.paths must be at least 2".into()));
        }
        if self.solver.steps == 0 {
            return Err(QbsdeError::Config("solver.steps must be at least 1".into()));
        }
        if self.risk.alpha.is_none() && self.risk.alpha_grid.is_none() {
            return Err(QbsdeError::Config(
                "risk.alpha or risk.alpha_grid must be provided".into(),
            ));
        }
        if let Some(grid) = &self.risk.alpha_grid {
            if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) || grid[0] <= 0.0 {
                return Err(QbsdeError::Config(
                    "risk.alpha_grid must be positive and strictly increasing".into(),
                ));
            }
        }
        if let Some(a) = self.risk.alpha {
            if a <= 0.0 {
                return Err(QbsdeError::Config("risk.alpha must be positive".into()));
            }
        }
        match &self.model {
            ModelConfig::SingleAsset { drift, vol, horizon, s0 } => {
                let d = Expr::parse(drift)?;
                let v = Expr::parse(vol)?;
                if !d.is_free_of(Var::V) || !v.is_free_of(Var::V) {
                    return Err(QbsdeError::Config(
                        "model.drift/model.vol must not reference v in a single-asset model"
                            .into(),
                    ));
                }
                if *horizon <= 0.0 || *s0 <= 0.0 {
                    return Err(QbsdeError::Config(
                        "model.horizon and model.s0 must be positive".into(),
                    ));
                }
            }
            ModelConfig::Factor { theta, sigma, eta, kappa, horizon, s0, .. } => {
                for (field, text) in [("theta", theta), ("sigma", sigma), ("eta", eta)] {
                    let e = Expr::parse(text)?;
                    if !e.is_free_of(Var::S) || !e.is_free_of(Var::T) {
                        return Err(QbsdeError::Config(format!(
                            "model.{field} must be a function of v only"
                        )));
                    }
                }
                let norm2 = kappa[0] * kappa[0] + kappa[1] * kappa[1];
                if (norm2 - 1.0).abs() > 1e-10 {
                    return Err(QbsdeError::Config(format!(
                        "model.kappa must satisfy |kappa1|^2 + |kappa2|^2 = 1, got {norm2}"
                    )));
                }
                if *horizon <= 0.0 || *s0 <= 0.0 {
                    return Err(QbsdeError::Config(
                        "model.horizon and model.s0 must be positive".into(),
                    ));
                }
            }
        }
        Expr::parse(&self.payoff.expr)?;
        if let Some([n, k]) = self.payoff.truncate {
            if n <= 0.0 || k <= 0.0 {
                return Err(QbsdeError::Config("payoff.truncate levels must be positive".into()));
            }
        }
        let dim = self.constraint_dim();
        if dim != 1 {
            return Err(QbsdeError::Config(format!(
                "constraint dimension {dim} does not match the single traded asset"
            )));
        }
        Ok(())
    }

    fn constraint_dim(&self) -> usize {
        match &self.constraint {
            ConstraintConfig::Full { dim } | ConstraintConfig::Zero { dim } => *dim,
            ConstraintConfig::Subspace { basis } => basis.first().map_or(0, |b| b.len()),
            ConstraintConfig::Cone { generators } => generators.first().map_or(0, |g| g.len()),
            ConstraintConfig::Box { lower, .. } => lower.len(),
        }
    }

    pub fn build_model(&self) -> Result<MarketModel> {
        match &self.model {
            ModelConfig::SingleAsset { drift, vol, horizon, s0 } => {
                let d = Expr::parse(drift)?;
                let v = Expr::parse(vol)?;
                MarketModel::single_asset(
                    move |t, st| d.eval(t, st.s[0], 0.0),
                    move |t, st| v.eval(t, st.s[0], 0.0),
                    *horizon,
                    *s0,
                )
            }
            ModelConfig::Factor { theta, sigma, eta, kappa, horizon, s0, v0 } => {
                let th = Expr::parse(theta)?;
                let sg = Expr::parse(sigma)?;
                let et = Expr::parse(eta)?;
                MarketModel::stochastic_factor(
                    Arc::new(move |v| th.eval(0.0, 0.0, v)),
                    Arc::new(move |v| sg.eval(0.0, 0.0, v)),
                    Arc::new(move |v| et.eval(0.0, 0.0, v)),
                    kappa[0],
                    kappa[1],
                    *horizon,
                    *s0,
                    *v0,
                )
            }
        }
    }

    pub fn build_constraint(&self) -> Result<ConstraintSet> {
        let to_vecs = |rows: &Vec<Vec<f64>>| -> Vec<DVector<f64>> {
            rows.iter().map(|r| DVector::from_vec(r.clone())).collect()
        };
        match &self.constraint {
            ConstraintConfig::Full { dim } => Ok(ConstraintSet::full_space(*dim)),
            ConstraintConfig::Zero { dim } => Ok(ConstraintSet::zero_set(*dim)),
            ConstraintConfig::Subspace { basis } => {
                let vs = to_vecs(basis);
                let dim = vs.first().map_or(0, |v| v.len());
                ConstraintSet::subspace(dim, vs)
            }
            ConstraintConfig::Cone { generators } => {
                let vs = to_vecs(generators);
                let dim = vs.first().map_or(0, |v| v.len());
                ConstraintSet::polyhedral_cone(dim, vs)
            }
            ConstraintConfig::Box { lower, upper } => ConstraintSet::interval_box(
                DVector::from_vec(lower.clone()),
                DVector::from_vec(upper.clone()),
            ),
        }
    }

    pub fn build_payoff(&self) -> Result<Payoff> {
        let expr = Expr::parse(&self.payoff.expr)?;
        let horizon = match &self.model {
            ModelConfig::SingleAsset { horizon, .. } | ModelConfig::Factor { horizon, .. } => {
                *horizon
            }
        };
        let label = self.payoff.expr.clone();
        let payoff = if expr.is_free_of(Var::S) {
            // Factor-only payoffs keep the fast PDE/HJB route open.
            let e = expr.clone();
            Payoff::of_factor(label, move |v| e.eval(horizon, 1.0, v))
        } else {
            let e = expr.clone();
            Payoff::terminal(label, move |st: &crate::model::MarketState| {
                e.eval(horizon, st.s[0], st.v)
            })
        };
        match self.payoff.truncate {
            Some([n, k]) => payoff.truncate(n, k),
            None => Ok(payoff),
        }
    }

    pub fn risk_params(&self) -> Result<RiskParams> {
        let alpha = self
            .risk
            .alpha
            .or_else(|| self.risk.alpha_grid.as_ref().and_then(|g| g.first().copied()))
            .ok_or_else(|| QbsdeError::Config("no alpha provided".into()))?;
        RiskParams::new(alpha, self.risk.p, self.risk.epsilon)
    }

    pub fn basis(&self) -> RegressionBasis {
        RegressionBasis {
            degree: self.solver.basis_degree,
            ridge: self.solver.ridge,
            use_log_price: self.solver.use_log_price,
        }
    }

    pub fn lsmc_options(&self) -> LsmcOptions {
        LsmcOptions {
            clamp: self.solver.clamp,
            picard: self.solver.picard,
            se_blocks: self.solver.se_blocks,
        }
    }
}
