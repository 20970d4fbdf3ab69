//! Market and payoff specification: coefficients, risk premium, the
//! single-stochastic-factor example model, and integrability diagnostics.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{QbsdeError, Result};
use crate::paths::PathEnsemble;
use crate::util::{kronecker_point, mean_se};

pub type ScalarOfFactor = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(f64, &MarketState) -> DVector<f64> + Send + Sync>;
pub type VolFn = Arc<dyn Fn(f64, &MarketState) -> DMatrix<f64> + Send + Sync>;

/// Market state at a node: asset prices plus the scalar factor (zero when
/// the model has no factor block).
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub s: DVector<f64>,
    pub v: f64,
}

impl fmt::Display for MarketState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s={:?}, v={}", self.s.as_slice(), self.v)
    }
}

/// Factor block dV = eta(V) dt + kappa1 dB1 + kappa2 dB2.
#[derive(Clone)]
pub struct FactorDynamics {
    pub eta: ScalarOfFactor,
    pub kappa: [f64; 2],
}

/// Declared coefficient caps and the state box used for sampling checks.
#[derive(Debug, Clone)]
pub struct CoefficientBounds {
    pub drift_max: f64,
    pub vol_max: f64,
    pub theta_max: f64,
    pub s_lo: f64,
    pub s_hi: f64,
    pub v_lo: f64,
    pub v_hi: f64,
}

impl Default for CoefficientBounds {
    fn default() -> Self {
        CoefficientBounds {
            drift_max: 10.0,
            vol_max: 10.0,
            theta_max: 10.0,
            s_lo: 0.25,
            s_hi: 4.0,
            v_lo: -6.0,
            v_hi: 6.0,
        }
    }
}

/// Market with d traded assets on an m-dimensional Brownian motion,
/// Markovian coefficients, and an optional one-dimensional factor.
#[derive(Clone)]
pub struct MarketModel {
    pub m: usize,
    pub d: usize,
    pub drift: DriftFn,
    pub vol: VolFn,
    pub factor: Option<FactorDynamics>,
    pub horizon: f64,
    pub s0: DVector<f64>,
    pub v0: f64,
    pub bounds: CoefficientBounds,
    /// Set by [`MarketModel::stochastic_factor`]: the scalar theta(v) and
    /// sigma(v) closures, which unlock fast driver evaluation.
    factor_coeffs: Option<(ScalarOfFactor, ScalarOfFactor)>,
}

impl MarketModel {
    pub fn new(
        m: usize,
        d: usize,
        drift: DriftFn,
        vol: VolFn,
        factor: Option<FactorDynamics>,
        horizon: f64,
        s0: DVector<f64>,
        v0: f64,
    ) -> Result<Self> {
        if d > m {
            return Err(QbsdeError::ModelValidation(format!(
                "asset count d={d} must not exceed Brownian dimension m={m}"
            )));
        }
        if s0.len() != d {
            return Err(QbsdeError::dim(d, s0.len(), "initial prices"));
        }
        if horizon <= 0.0 {
            return Err(QbsdeError::ModelValidation("horizon must be positive".into()));
        }
        if let Some(f) = &factor {
            let norm2 = f.kappa[0] * f.kappa[0] + f.kappa[1] * f.kappa[1];
            if (norm2 - 1.0).abs() > 1e-10 {
                return Err(QbsdeError::ModelValidation(format!(
                    "|kappa1|^2 + |kappa2|^2 must equal 1, got {norm2}"
                )));
            }
            if m != 2 {
                return Err(QbsdeError::ModelValidation(
                    "the factor block requires m = 2".into(),
                ));
            }
        }
        Ok(MarketModel {
            m,
            d,
            drift,
            vol,
            factor,
            horizon,
            s0,
            v0,
            bounds: CoefficientBounds::default(),
            factor_coeffs: None,
        })
    }

    /// Single traded asset on a one-dimensional Brownian motion with
    /// constant-in-state coefficients supplied as closures of (t, state).
    pub fn single_asset(
        drift: impl Fn(f64, &MarketState) -> f64 + Send + Sync + 'static,
        vol: impl Fn(f64, &MarketState) -> f64 + Send + Sync + 'static,
        horizon: f64,
        s0: f64,
    ) -> Result<Self> {
        MarketModel::new(
            1,
            1,
            Arc::new(move |t, st| DVector::from_vec(vec![drift(t, st)])),
            Arc::new(move |t, st| DMatrix::from_vec(1, 1, vec![vol(t, st)])),
            None,
            horizon,
            DVector::from_vec(vec![s0]),
            0.0,
        )
    }

    /// The stochastic-factor example: one stock driven by B1 with
    /// coefficients depending on a factor V driven by both Brownian
    /// components,
    ///
    /// ```text
    /// dS/S = theta(V) sigma(V) dt + sigma(V) dB1
    /// dV   = eta(V) dt + kappa1 dB1 + kappa2 dB2.
    /// ```
    pub fn stochastic_factor(
        theta_fn: ScalarOfFactor,
        sigma_fn: ScalarOfFactor,
        eta_fn: ScalarOfFactor,
        kappa1: f64,
        kappa2: f64,
        horizon: f64,
        s0: f64,
        v0: f64,
    ) -> Result<Self> {
        let norm2 = kappa1 * kappa1 + kappa2 * kappa2;
        if (norm2 - 1.0).abs() > 1e-10 {
            return Err(QbsdeError::ModelValidation(format!(
                "|kappa1|^2 + |kappa2|^2 must equal 1, got {norm2}"
            )));
        }
        // sigma(.) > 0 sampled on a coarse factor range.
        for i in 0..64 {
            let v = -6.0 + 12.0 * (i as f64) / 63.0;
            if sigma_fn(v) <= 0.0 {
                return Err(QbsdeError::ModelValidation(format!(
                    "sigma(v) must be positive, got {} at v={v}",
                    sigma_fn(v)
                )));
            }
        }
        let th = theta_fn.clone();
        let sg = sigma_fn.clone();
        let drift: DriftFn = Arc::new(move |_t, st| {
            DVector::from_vec(vec![th(st.v) * sg(st.v)])
        });
        let sg2 = sigma_fn.clone();
        let vol: VolFn = Arc::new(move |_t, st| {
            DMatrix::from_vec(1, 2, vec![sg2(st.v), 0.0])
        });
        let mut model = MarketModel::new(
            2,
            1,
            drift,
            vol,
            Some(FactorDynamics { eta: eta_fn, kappa: [kappa1, kappa2] }),
            horizon,
            DVector::from_vec(vec![s0]),
            v0,
        )?;
        model.factor_coeffs = Some((theta_fn, sigma_fn));
        Ok(model)
    }

    /// The factor-model scalar coefficients (theta(v), sigma(v)), when the
    /// model was built by [`MarketModel::stochastic_factor`].
    pub fn factor_coefficients(&self) -> Option<(ScalarOfFactor, ScalarOfFactor)> {
        self.factor_coeffs.clone()
    }

    pub fn state0(&self) -> MarketState {
        MarketState { s: self.s0.clone(), v: self.v0 }
    }

    pub fn has_factor(&self) -> bool {
        self.factor.is_some()
    }

    /// Risk premium theta = sigma^T (sigma sigma^T)^{-1} b at (t, state).
    pub fn theta(&self, t: f64, state: &MarketState) -> Result<DVector<f64>> {
        let b = (self.drift)(t, state);
        let sigma = (self.vol)(t, state);
        if b.iter().any(|x| !x.is_finite()) || sigma.iter().any(|x| !x.is_finite()) {
            return Err(QbsdeError::NonFiniteCoefficient {
                t,
                state: state.to_string(),
                what: "drift or volatility".into(),
            });
        }
        let gram = &sigma * sigma.transpose();
        let svd = gram.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(smin > smax * 1e-12) {
            return Err(QbsdeError::SingularVolatility {
                t,
                state: state.to_string(),
                condition,
            });
        }
        let y = svd.solve(&b, 1e-14).expect("svd solve");
        let theta = sigma.tr_mul(&y);
        let residual = (&sigma * &theta - &b).norm();
        if residual > 1e-12 * (1.0 + b.norm()) {
            return Err(QbsdeError::Solver(format!(
                "market price of risk residual {residual:.3e} exceeds tolerance"
            )));
        }
        Ok(theta)
    }

    /// Sample-based validation of the declared coefficient bounds and the
    /// rank condition over a quasi-random sweep of the state box.
    pub fn validate(&self, samples: usize) -> Result<()> {
        let mut point = [0.0f64; 4];
        let bounds = &self.bounds;
        for i in 0..samples {
            kronecker_point(i, 4, &mut point);
            let t = point[0] * self.horizon;
            let s = DVector::from_fn(self.d, |k, _| {
                let span = bounds.s_hi - bounds.s_lo;
                self.s0[k] * (bounds.s_lo + span * point[1])
            });
            let v = bounds.v_lo + (bounds.v_hi - bounds.v_lo) * point[2];
            let state = MarketState { s, v };
            let b = (self.drift)(t, &state);
            let sigma = (self.vol)(t, &state);
            if b.amax() > bounds.drift_max {
                return Err(QbsdeError::ModelValidation(format!(
                    "drift bound {} exceeded at t={t}, {state}",
                    bounds.drift_max
                )));
            }
            if sigma.amax() > bounds.vol_max {
                return Err(QbsdeError::ModelValidation(format!(
                    "volatility bound {} exceeded at t={t}, {state}",
                    bounds.vol_max
                )));
            }
            let theta = self.theta(t, &state)?;
            if theta.norm() > bounds.theta_max {
                return Err(QbsdeError::ModelValidation(format!(
                    "risk premium bound {} exceeded at t={t}, {state}",
                    bounds.theta_max
                )));
            }
        }
        Ok(())
    }
}

/// One simulated path as seen by payoffs: node times and the per-node
/// prices and factor values.
pub struct PathView<'a> {
    pub times: &'a [f64],
    /// Row-major (node, asset) prices.
    pub s: &'a [f64],
    pub v: &'a [f64],
    pub d: usize,
}

impl<'a> PathView<'a> {
    pub fn terminal_state(&self) -> MarketState {
        let last = self.times.len() - 1;
        MarketState {
            s: DVector::from_fn(self.d, |k, _| self.s[last * self.d + k]),
            v: self.v[last],
        }
    }
}

type TerminalFn = Arc<dyn Fn(&MarketState) -> f64 + Send + Sync>;
type PathFn = Arc<dyn Fn(&PathView<'_>) -> f64 + Send + Sync>;

/// Payoff kinds mirror what the solvers can consume.
#[derive(Clone)]
enum PayoffBody {
    Terminal(TerminalFn),
    Path(PathFn),
}

/// A derivative payoff evaluated on a simulated path.
#[derive(Clone)]
pub struct Payoff {
    pub label: String,
    body: PayoffBody,
    /// Set when the payoff reads only the terminal factor value.
    factor_fn: Option<ScalarOfFactor>,
}

impl Payoff {
    pub fn terminal(
        label: impl Into<String>,
        f: impl Fn(&MarketState) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Payoff { label: label.into(), body: PayoffBody::Terminal(Arc::new(f)), factor_fn: None }
    }

    /// Payoff depending on the terminal factor value only; eligible for
    /// the one-dimensional PDE solver.
    pub fn of_factor(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        let f: ScalarOfFactor = Arc::new(f);
        let g = f.clone();
        Payoff {
            label: label.into(),
            body: PayoffBody::Terminal(Arc::new(move |st: &MarketState| g(st.v))),
            factor_fn: Some(f),
        }
    }

    pub fn path_functional(
        label: impl Into<String>,
        f: impl Fn(&PathView<'_>) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Payoff { label: label.into(), body: PayoffBody::Path(Arc::new(f)), factor_fn: None }
    }

    pub fn constant(c: f64) -> Self {
        Payoff::terminal(format!("const({c})"), move |_| c)
    }

    pub fn eval(&self, path: &PathView<'_>) -> f64 {
        match &self.body {
            PayoffBody::Terminal(f) => f(&path.terminal_state()),
            PayoffBody::Path(f) => f(path),
        }
    }

    pub fn factor_fn(&self) -> Option<ScalarOfFactor> {
        self.factor_fn.clone()
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.body, PayoffBody::Terminal(_))
    }

    /// Truncation F^{n,k} = F^+ /\ n - F^- /\ k, monotone up in n and
    /// down in k.
    pub fn truncate(&self, n: f64, k: f64) -> Result<Payoff> {
        if n <= 0.0 || k <= 0.0 {
            return Err(QbsdeError::Config("truncation levels must be positive".into()));
        }
        let label = format!("{}^({n},{k})", self.label);
        let clip = move |f: f64| f.max(0.0).min(n) - (-f).max(0.0).min(k);
        let out = match &self.body {
            PayoffBody::Terminal(f) => {
                let f = f.clone();
                let mut p = Payoff::terminal(label, move |st| clip(f(st)));
                if let Some(g) = &self.factor_fn {
                    let g = g.clone();
                    p.factor_fn = Some(Arc::new(move |v| clip(g(v))));
                }
                p
            }
            PayoffBody::Path(f) => {
                let f = f.clone();
                Payoff::path_functional(label, move |pv| clip(f(pv)))
            }
        };
        Ok(out)
    }
}

/// Risk-aversion and integrability parameters.
#[derive(Debug, Clone, Copy)]
pub struct RiskParams {
    pub alpha: f64,
    pub p: u32,
    pub epsilon: f64,
    pub lower_bound_k: Option<f64>,
}

impl RiskParams {
    pub fn new(alpha: f64, p: u32, epsilon: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(QbsdeError::Config("alpha must be positive".into()));
        }
        if p <= 1 {
            return Err(QbsdeError::Config("integrability order p must exceed 1".into()));
        }
        if epsilon <= 0.0 {
            return Err(QbsdeError::Config("epsilon must be positive".into()));
        }
        Ok(RiskParams { alpha, p, epsilon, lower_bound_k: None })
    }

    pub fn with_lower_bound(mut self, k: f64) -> Self {
        self.lower_bound_k = Some(k);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Verdict {
    Pass,
    Warn,
    Fail,
}

/// Monte Carlo diagnostics for the exponential integrability condition.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AssumptionReport {
    /// Estimate and standard error of E[exp(p alpha F^+)].
    pub exp_pos: (f64, f64),
    /// Estimate and standard error of E[exp(epsilon F^-)].
    pub exp_neg: (f64, f64),
    /// Estimate grows materially when the sample doubles.
    pub tail_growth: bool,
    pub verdict: Verdict,
}

/// Sampled check of the exponential integrability condition
/// E[e^{p alpha F+}] < inf, E[e^{eps F-}] < inf.
///
/// Advisory only: integrability can be sampled, never proven, by Monte
/// Carlo, so the report carries a verdict instead of failing hard.
pub fn check_assumption1(
    payoff: &Payoff,
    params: &RiskParams,
    ensemble: &PathEnsemble,
) -> AssumptionReport {
    let n = ensemble.n_paths();
    let values: Vec<f64> = (0..n).map(|i| payoff.eval(&ensemble.path_view(i))).collect();
    let pa = params.p as f64 * params.alpha;
    let pos = |f: f64| (pa * f.max(0.0)).exp();
    let neg = |f: f64| (params.epsilon * (-f).max(0.0)).exp();

    let (mp_full, se_p) = mean_se(n, |i| pos(values[i]));
    let (mn_full, se_n) = mean_se(n, |i| neg(values[i]));
    let half = n / 2;
    let (mp_half, se_ph) = mean_se(half.max(2), |i| pos(values[i]));
    let (mn_half, se_nh) = mean_se(half.max(2), |i| neg(values[i]));

    let grows = |full: f64, half: f64, se_f: f64, se_h: f64| {
        !full.is_finite()
            || (full > 1.5 * half && (full - half) > 3.0 * (se_f + se_h))
    };
    let tail_growth = grows(mp_full, mp_half, se_p, se_ph) || grows(mn_full, mn_half, se_n, se_nh);

    let verdict = if !mp_full.is_finite() || !mn_full.is_finite() {
        Verdict::Fail
    } else if tail_growth || se_p > 0.2 * mp_full || se_n > 0.2 * mn_full {
        Verdict::Warn
    } else {
        Verdict::Pass
    };

    AssumptionReport {
        exp_pos: (mp_full, se_p),
        exp_neg: (mn_full, se_n),
        tail_growth,
        verdict,
    }
}
