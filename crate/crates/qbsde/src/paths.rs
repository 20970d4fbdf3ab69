//! Seeded path simulation, stochastic exponentials, measure changes, and
//! relative entropy estimation.
//!
//! Draws come from a counter-based RNG keyed by (seed, path, step), so an
//! ensemble is bit-reproducible for a given (seed, N, K) regardless of how
//! paths are scheduled across workers. Densities accumulate in log space.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{QbsdeError, Result};
use crate::model::{MarketModel, MarketState, PathView};
use crate::util::{cell_normals, det_sum, mean_se};

/// Uniform time grid t_i = i T / K.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if horizon <= 0.0 || steps == 0 {
            return Err(QbsdeError::Config("time grid needs T > 0 and K >= 1".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }
}

/// Simulated ensemble: Brownian increments and the induced state paths.
pub struct PathEnsemble {
    grid: TimeGrid,
    n_paths: usize,
    m: usize,
    d: usize,
    seed: u64,
    has_factor: bool,
    /// (path, step, component) Brownian increments.
    increments: Vec<f64>,
    /// (path, node, asset) prices.
    s: Vec<f64>,
    /// (path, node) factor values.
    v: Vec<f64>,
    times: Vec<f64>,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn brownian_dim(&self) -> usize {
        self.m
    }

    pub fn asset_dim(&self) -> usize {
        self.d
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn has_factor(&self) -> bool {
        self.has_factor
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let base = (path * self.grid.steps + step) * self.m;
        &self.increments[base..base + self.m]
    }

    #[inline]
    pub fn price(&self, path: usize, node: usize, asset: usize) -> f64 {
        self.s[(path * (self.grid.steps + 1) + node) * self.d + asset]
    }

    #[inline]
    pub fn factor(&self, path: usize, node: usize) -> f64 {
        self.v[path * (self.grid.steps + 1) + node]
    }

    pub fn state(&self, path: usize, node: usize) -> MarketState {
        MarketState {
            s: DVector::from_fn(self.d, |a, _| self.price(path, node, a)),
            v: self.factor(path, node),
        }
    }

    pub fn path_view(&self, path: usize) -> PathView<'_> {
        let nodes = self.grid.steps + 1;
        PathView {
            times: &self.times,
            s: &self.s[path * nodes * self.d..(path + 1) * nodes * self.d],
            v: &self.v[path * nodes..(path + 1) * nodes],
            d: self.d,
        }
    }

    /// Debug export, one row per (path, node); refuses oversized dumps.
    pub fn export_csv<W: Write>(&self, out: &mut W, max_paths: usize) -> Result<()> {
        let paths = self.n_paths.min(max_paths);
        if paths * (self.grid.steps + 1) > 2_000_000 {
            return Err(QbsdeError::Config(
                "csv export too large; lower max_paths".into(),
            ));
        }
        write!(out, "path,node,t")?;
        for a in 0..self.d {
            write!(out, ",s{a}")?;
        }
        writeln!(out, ",v")?;
        for p in 0..paths {
            for i in 0..=self.grid.steps {
                write!(out, "{p},{i},{}", self.times[i])?;
                for a in 0..self.d {
                    write!(out, ",{}", self.price(p, i, a))?;
                }
                writeln!(out, ",{}", self.factor(p, i))?;
            }
        }
        Ok(())
    }
}

/// Simulate `n_paths` state paths of `model` on `grid`.
///
/// Prices use a log-Euler step (exact for constant coefficients); the
/// factor uses Euler-Maruyama.
pub fn simulate(
    model: &MarketModel,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths < 2 {
        return Err(QbsdeError::Config("need at least two paths".into()));
    }
    let k_steps = grid.steps;
    let m = model.m;
    let d = model.d;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();

    let mut increments = vec![0.0f64; n_paths * k_steps * m];
    let mut s = vec![0.0f64; n_paths * (k_steps + 1) * d];
    let mut v = vec![0.0f64; n_paths * (k_steps + 1)];

    let inc_chunks = increments.par_chunks_mut(k_steps * m);
    let s_chunks = s.par_chunks_mut((k_steps + 1) * d);
    let v_chunks = v.par_chunks_mut(k_steps + 1);

    inc_chunks
        .zip(s_chunks)
        .zip(v_chunks)
        .enumerate()
        .try_for_each(|(path, ((inc, sp), vp))| -> Result<()> {
            let mut state = model.state0();
            let mut log_s: Vec<f64> = (0..d).map(|a| state.s[a].ln()).collect();
            for a in 0..d {
                sp[a] = state.s[a];
            }
            vp[0] = state.v;
            let mut draws = vec![0.0f64; m];
            for step in 0..k_steps {
                let t = grid.node(step);
                cell_normals(seed, path as u64, step as u64, m, &mut draws);
                let base = step * m;
                for j in 0..m {
                    inc[base + j] = draws[j] * sqrt_dt;
                }
                let b = (model.drift)(t, &state);
                let sigma = (model.vol)(t, &state);
                if b.iter().any(|x| !x.is_finite()) || sigma.iter().any(|x| !x.is_finite()) {
                    return Err(QbsdeError::NonFiniteCoefficient {
                        t,
                        state: state.to_string(),
                        what: "drift or volatility during simulation".into(),
                    });
                }
                for a in 0..d {
                    let row = sigma.row(a);
                    let mut diffu = 0.0;
                    let mut row2 = 0.0;
                    for j in 0..m {
                        diffu += row[j] * inc[base + j];
                        row2 += row[j] * row[j];
                    }
                    log_s[a] += (b[a] - 0.5 * row2) * dt + diffu;
                    sp[(step + 1) * d + a] = log_s[a].exp();
                    state.s[a] = sp[(step + 1) * d + a];
                }
                if let Some(f) = &model.factor {
                    let eta = (f.eta)(state.v);
                    if !eta.is_finite() {
                        return Err(QbsdeError::NonFiniteCoefficient {
                            t,
                            state: state.to_string(),
                            what: "factor drift".into(),
                        });
                    }
                    state.v += eta * dt + f.kappa[0] * inc[base] + f.kappa[1] * inc[base + 1];
                }
                vp[step + 1] = state.v;
            }
            Ok(())
        })?;

    Ok(PathEnsemble {
        grid,
        n_paths,
        m,
        d,
        seed,
        has_factor: model.has_factor(),
        increments,
        s,
        v,
        times: grid.nodes(),
    })
}

/// Density process L^q = exp( int q' dB - 1/2 int |q|^2 dt ), per path.
pub struct MeasureChange {
    /// (path, node) log densities, node 0 is zero.
    log_density: Vec<f64>,
    /// int_0^T 1/2 |q|^2 dt per path, for the Girsanov-form entropy.
    half_quadratic: Vec<f64>,
    n_paths: usize,
    nodes: usize,
}

impl MeasureChange {
    /// Build from an integrand callback `q(path, step, t, state)` written
    /// into `out`.
    pub fn from_fn<F>(ensemble: &PathEnsemble, q: F) -> Result<MeasureChange>
    where
        F: Fn(usize, usize, f64, &MarketState, &mut [f64]) + Sync,
    {
        let n = ensemble.n_paths();
        let k_steps = ensemble.grid().steps;
        let m = ensemble.brownian_dim();
        let dt = ensemble.grid().dt();
        let nodes = k_steps + 1;
        let mut log_density = vec![0.0f64; n * nodes];
        let mut half_quadratic = vec![0.0f64; n];

        log_density
            .par_chunks_mut(nodes)
            .zip(half_quadratic.par_iter_mut())
            .enumerate()
            .try_for_each(|(path, (ld, hq))| -> Result<()> {
                let mut qv = vec![0.0f64; m];
                let mut acc = 0.0f64;
                let mut quad = 0.0f64;
                ld[0] = 0.0;
                for step in 0..k_steps {
                    let t = ensemble.grid().node(step);
                    let state = ensemble.state(path, step);
                    q(path, step, t, &state, &mut qv);
                    if qv.iter().any(|x| !x.is_finite()) {
                        return Err(QbsdeError::NonFiniteCoefficient {
                            t,
                            state: state.to_string(),
                            what: "measure-change integrand".into(),
                        });
                    }
                    let db = ensemble.increment(path, step);
                    let mut dot = 0.0;
                    let mut norm2 = 0.0;
                    for j in 0..m {
                        dot += qv[j] * db[j];
                        norm2 += qv[j] * qv[j];
                    }
                    acc += dot - 0.5 * norm2 * dt;
                    quad += 0.5 * norm2 * dt;
                    ld[step + 1] = acc;
                }
                *hq = quad;
                Ok(())
            })?;

        Ok(MeasureChange { log_density, half_quadratic, n_paths: n, nodes })
    }

    /// Build from stored per-(path, step) integrand values, laid out as
    /// (path, step, component).
    pub fn from_values(ensemble: &PathEnsemble, values: &[f64]) -> Result<MeasureChange> {
        let m = ensemble.brownian_dim();
        let expected = ensemble.n_paths() * ensemble.grid().steps * m;
        if values.len() != expected {
            return Err(QbsdeError::dim(expected, values.len(), "integrand value array"));
        }
        MeasureChange::from_fn(ensemble, |path, step, _t, _state, out| {
            let base = (path * ensemble.grid().steps + step) * m;
            out.copy_from_slice(&values[base..base + m]);
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    #[inline]
    pub fn log_density_at(&self, path: usize, node: usize) -> f64 {
        self.log_density[path * self.nodes + node]
    }

    /// Terminal Radon-Nikodym weight of one path.
    #[inline]
    pub fn weight(&self, path: usize) -> f64 {
        self.log_density[path * self.nodes + self.nodes - 1].exp()
    }

    pub fn half_quadratic(&self, path: usize) -> f64 {
        self.half_quadratic[path]
    }

    /// Sample mean of L_T with its standard error (should be ~1).
    pub fn weight_mean(&self) -> (f64, f64) {
        mean_se(self.n_paths, |i| self.weight(i))
    }
}

/// Two estimators of E[L ln L] and their discrepancy.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EntropyEstimate {
    pub direct: f64,
    pub direct_se: f64,
    /// E^Q[ int 1/2 |q|^2 dt ] via reweighting.
    pub girsanov: f64,
    pub girsanov_se: f64,
    pub discrepancy: f64,
}

/// Relative entropy E[L_T ln L_T] of the change of measure.
pub fn relative_entropy(mc: &MeasureChange) -> EntropyEstimate {
    let (direct, direct_se) = mean_se(mc.n_paths(), |i| {
        let l = mc.weight(i);
        let ll = mc.log_density_at(i, mc.nodes - 1);
        l * ll
    });
    let (girsanov, girsanov_se) =
        mean_se(mc.n_paths(), |i| mc.weight(i) * mc.half_quadratic(i));
    EntropyEstimate {
        direct,
        direct_se,
        girsanov,
        girsanov_se,
        discrepancy: (direct - girsanov).abs(),
    }
}

/// A reweighted Monte Carlo estimate with effective-sample-size data.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct WeightedEstimate {
    pub value: f64,
    pub se: f64,
    pub ess: f64,
    pub ess_warning: bool,
}

/// E^Q[functional] = E[L_T functional], with an ESS warning when the
/// weights have degenerated below 5% of the sample.
pub fn reweighted_expectation<F>(mc: &MeasureChange, functional: F) -> WeightedEstimate
where
    F: Fn(usize) -> f64 + Sync,
{
    let n = mc.n_paths();
    let (value, se) = mean_se(n, |i| mc.weight(i) * functional(i));
    let sum_w = det_sum(n, |i| mc.weight(i));
    let sum_w2 = det_sum(n, |i| mc.weight(i).powi(2));
    let ess = if sum_w2 > 0.0 { sum_w * sum_w / sum_w2 } else { 0.0 };
    WeightedEstimate { value, se, ess, ess_warning: ess < 0.05 * n as f64 }
}
