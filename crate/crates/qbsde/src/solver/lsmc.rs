//! Backward least-squares Monte Carlo for the quadratic BSDE.
//!
//! Explicit scheme: Z from the Brownian-increment projection estimator,
//! Y from the regressed continuation value plus the driver evaluated at
//! the estimated Z, clamped into a regression estimate of the explicit
//! value corridor. Standard errors come from disjoint path-block
//! re-solves rather than the (optimistic) step-one target spread.

use rayon::prelude::*;

use crate::drivers::DriverField;
use crate::error::{QbsdeError, Result};
use crate::model::MarketState;
use crate::paths::PathEnsemble;
use crate::util::{det_sum, mean_se, REDUCE_CHUNK};

use super::regression::StepRegression;
use super::{payoff_values, BsdeSolution, BsdeSpec, RegressionBasis, SolverDiagnostics};

/// Solver switches; the defaults match the production configuration.
#[derive(Debug, Clone, Copy)]
pub struct LsmcOptions {
    /// Clamp Y into the regressed explicit-bound corridor.
    pub clamp: bool,
    /// One Picard re-substitution pass: regress the driver-inclusive
    /// target instead of adding the driver pathwise.
    pub picard: bool,
    /// Number of disjoint path blocks used for the standard error.
    pub se_blocks: usize,
}

impl Default for LsmcOptions {
    fn default() -> Self {
        LsmcOptions { clamp: true, picard: false, se_blocks: 8 }
    }
}

/// Sample envelope of the explicit value corridor: the upper process is
/// dominated by sup F+ and the lower one by -sup F- minus the remaining
/// risk-premium integral. Both envelopes are exact given the sample, so
/// clamping against them cannot feed regression noise back into Y.
struct CorridorData {
    upper_cap: f64,
    lower_cap: f64,
    /// Sampled sup of |theta| over the ensemble nodes.
    theta_max: f64,
}

struct StepBuffers {
    c_pred: Vec<f64>,
    z_pred: Vec<f64>,
    y_next: Vec<f64>,
}

/// Solve BSDE(F, f^alpha) by backward regression Monte Carlo.
pub fn solve_lsmc(
    spec: &BsdeSpec<'_>,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
    options: &LsmcOptions,
) -> Result<BsdeSolution> {
    basis.validate()?;
    if ensemble.brownian_dim() != spec.model.m {
        return Err(QbsdeError::dim(spec.model.m, ensemble.brownian_dim(), "ensemble dimension"));
    }
    let n = ensemble.n_paths();
    let k_steps = ensemble.grid().steps;
    let m = ensemble.brownian_dim();
    let field = DriverField::new(spec.model, spec.constraint, spec.alpha)?;
    let f_vals = payoff_values(&spec.payoff, ensemble);
    if f_vals.iter().any(|x| !x.is_finite()) {
        return Err(QbsdeError::Solver("payoff evaluated to a non-finite value".into()));
    }
    let corridor = if options.clamp {
        Some(prepare_corridor(spec, ensemble, &f_vals)?)
    } else {
        None
    };

    let mut y = vec![0.0f64; n * (k_steps + 1)];
    let mut z = vec![0.0f64; n * k_steps * m];
    let mut diagnostics = SolverDiagnostics {
        clamp_ok: true,
        ..SolverDiagnostics::default()
    };

    let (y0, y0_se_quick) = induction(
        spec,
        ensemble,
        basis,
        options,
        &field,
        &f_vals,
        corridor.as_ref(),
        0,
        n,
        Some((&mut y, &mut z)),
        &mut diagnostics,
    )?;

    // Disjoint-block re-solves for the reported standard error.
    let blocks = options.se_blocks.max(2).min(n / 64).max(2);
    let mut block_y0 = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let lo = b * n / blocks;
        let hi = (b + 1) * n / blocks;
        let mut scratch = SolverDiagnostics::default();
        let (yb, _) = induction(
            spec,
            ensemble,
            basis,
            options,
            &field,
            &f_vals,
            corridor.as_ref(),
            lo,
            hi,
            None,
            &mut scratch,
        )?;
        block_y0.push(yb);
    }
    let bf = blocks as f64;
    let bmean = block_y0.iter().sum::<f64>() / bf;
    let bvar = block_y0.iter().map(|v| (v - bmean).powi(2)).sum::<f64>() / (bf - 1.0);
    let y0_se = (bvar / bf).sqrt();

    let updates = (n * k_steps) as f64;
    diagnostics.clamp_fraction = diagnostics.clamp_activations as f64 / updates;
    diagnostics.clamp_ok = diagnostics.clamp_fraction <= 0.01;
    if !diagnostics.clamp_ok {
        diagnostics.warnings.push(format!(
            "corridor clamp fired on {:.2}% of updates",
            100.0 * diagnostics.clamp_fraction
        ));
    }

    Ok(BsdeSolution {
        y0,
        y0_se,
        y0_se_quick,
        block_y0,
        y,
        z,
        n_paths: n,
        steps: k_steps,
        m,
        diagnostics,
    })
}

fn prepare_corridor(
    spec: &BsdeSpec<'_>,
    ensemble: &PathEnsemble,
    f_vals: &[f64],
) -> Result<CorridorData> {
    let f_pos_max = f_vals.iter().cloned().fold(0.0f64, |a, b| a.max(b.max(0.0)));
    let f_neg_max = f_vals.iter().cloned().fold(0.0f64, |a, b| a.max((-b).max(0.0)));

    // Sampled sup of |theta| over a slice of the ensemble.
    let n = ensemble.n_paths();
    let k_steps = ensemble.grid().steps;
    let probes = 512.min(n);
    let mut theta_max = 0.0f64;
    let mut theta_buf = vec![0.0f64; ensemble.brownian_dim()];
    let field = DriverField::new(spec.model, spec.constraint, spec.alpha)?;
    for pi in 0..probes {
        let p = pi * n / probes;
        let node = (pi * 7) % (k_steps + 1);
        let state = ensemble.state(p, node);
        field.theta_into(ensemble.grid().node(node.min(k_steps - 1)), &state, &mut theta_buf)?;
        let norm = theta_buf.iter().map(|x| x * x).sum::<f64>().sqrt();
        theta_max = theta_max.max(norm);
    }

    Ok(CorridorData { upper_cap: f_pos_max, lower_cap: -f_neg_max, theta_max })
}

/// One backward induction over the path range `lo..hi`. Returns
/// (y0, quick standard error) and optionally stores the fields.
#[allow(clippy::too_many_arguments)]
fn induction(
    spec: &BsdeSpec<'_>,
    ensemble: &PathEnsemble,
    basis: &RegressionBasis,
    options: &LsmcOptions,
    field: &DriverField<'_>,
    f_vals: &[f64],
    corridor: Option<&CorridorData>,
    lo: usize,
    hi: usize,
    mut store: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
    diagnostics: &mut SolverDiagnostics,
) -> Result<(f64, f64)> {
    let n_local = hi - lo;
    let k_steps = ensemble.grid().steps;
    let m = ensemble.brownian_dim();
    let dt = ensemble.grid().dt();
    let horizon = ensemble.grid().horizon;
    let alpha = spec.alpha;

    let mut buf = StepBuffers {
        c_pred: vec![0.0; n_local],
        z_pred: vec![0.0; n_local * m],
        y_next: f_vals[lo..hi].to_vec(),
    };
    if let Some((y, _)) = store.as_mut() {
        for l in 0..n_local {
            y[(lo + l) * (k_steps + 1) + k_steps] = buf.y_next[l];
        }
    }

    for node in (1..k_steps).rev() {
        let reg = StepRegression::fit(ensemble, node, lo, hi, basis)?;
        step_update(
            spec, ensemble, options, field, corridor, lo, node, &reg, &mut buf, diagnostics,
        )?;
        diagnostics.max_condition_number = diagnostics.max_condition_number.max(reg.condition);
        if reg.downgraded {
            diagnostics.degree_downgrades += 1;
            if diagnostics.warnings.len() < 8 {
                diagnostics.warnings.push(format!(
                    "node {node}: ill-conditioned basis, rank reduced (condition {:.2e})",
                    reg.condition
                ));
            }
        }
        if let Some((y, z)) = store.as_mut() {
            for l in 0..n_local {
                y[(lo + l) * (k_steps + 1) + node] = buf.y_next[l];
                let zb = ((lo + l) * k_steps + node) * m;
                z[zb..zb + m].copy_from_slice(&buf.z_pred[l * m..(l + 1) * m]);
            }
        }
    }

    // Node 0: all paths share the initial state, so conditioning reduces
    // to plain means.
    let quick_se = {
        let (_, se) = mean_se(n_local, |l| buf.y_next[l]);
        se
    };
    let c0 = det_sum(n_local, |l| buf.y_next[l]) / n_local as f64;
    let mut z0 = vec![0.0f64; m];
    for (j, zj) in z0.iter_mut().enumerate() {
        *zj = det_sum(n_local, |l| {
            (buf.y_next[l] - c0) * ensemble.increment(lo + l, 0)[j]
        }) / (n_local as f64 * dt);
    }
    let state0 = spec.model.state0();
    let f0 = field.primal(0.0, &state0, &z0)?;
    let mut y0 = c0 + f0 * dt;
    if let Some(cor) = corridor {
        let (lower, upper) = corridor_caps(cor, alpha, horizon, 0.0);
        if y0 < lower || y0 > upper {
            diagnostics.clamp_activations += 1;
            y0 = y0.clamp(lower, upper);
        }
    }
    if let Some((y, z)) = store.as_mut() {
        for l in 0..n_local {
            y[(lo + l) * (k_steps + 1)] = y0;
            let zb = (lo + l) * k_steps * m;
            z[zb..zb + m].copy_from_slice(&z0);
        }
    }
    Ok((y0, quick_se))
}

/// Corridor envelope at time t. The pad leaves headroom so solutions
/// sitting at a cap keep their two-sided regression noise, and shrinks
/// like 1/alpha: an excursion of size eps feeds back into the driver at
/// rate (alpha/2) eps^2, so the tolerable slack scale is alpha-dependent.
fn corridor_caps(cor: &CorridorData, alpha: f64, horizon: f64, t: f64) -> (f64, f64) {
    let tail = (horizon - t) * cor.theta_max * cor.theta_max / (2.0 * alpha);
    let upper = cor.upper_cap;
    let lower = cor.lower_cap - tail;
    let pad = 0.5 * (1.0 + (upper - lower).abs()) / (1.0 + alpha * alpha);
    (lower - pad, upper + pad)
}

#[allow(clippy::too_many_arguments)]
fn step_update(
    spec: &BsdeSpec<'_>,
    ensemble: &PathEnsemble,
    options: &LsmcOptions,
    field: &DriverField<'_>,
    corridor: Option<&CorridorData>,
    lo: usize,
    node: usize,
    reg: &StepRegression,
    buf: &mut StepBuffers,
    diagnostics: &mut SolverDiagnostics,
) -> Result<()> {
    let n_local = reg.n_local();
    let m = ensemble.brownian_dim();
    let dt = ensemble.grid().dt();
    let t = ensemble.grid().node(node);
    let alpha = spec.alpha;

    // Continuation value.
    let coef_c = reg.solve(|l| buf.y_next[l]);
    reg.predict_into(&coef_c, &mut buf.c_pred);

    // Z via the centered Brownian-increment projection estimator.
    for j in 0..m {
        let coef_z = {
            let y_next = &buf.y_next;
            let c_pred = &buf.c_pred;
            reg.solve(move |l| {
                (y_next[l] - c_pred[l]) * ensemble.increment(lo + l, node)[j] / dt
            })
        };
        let mut col = vec![0.0f64; n_local];
        reg.predict_into(&coef_z, &mut col);
        for l in 0..n_local {
            buf.z_pred[l * m + j] = col[l];
        }
    }

    // Corridor envelope at this node.
    let caps = corridor.map(|cor| corridor_caps(cor, alpha, ensemble.grid().horizon, t));

    // Driver update, parallel over fixed chunks.
    let d = ensemble.asset_dim();
    let y_next = &mut buf.y_next;
    let z_pred = &buf.z_pred;
    let c_pred = &buf.c_pred;
    let picard_target: Option<Vec<f64>> = if options.picard { Some(y_next.clone()) } else { None };

    let clamp_counts: Vec<Result<usize>> = y_next
        .par_chunks_mut(REDUCE_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let base = c * REDUCE_CHUNK;
            let mut state = MarketState {
                s: nalgebra::DVector::zeros(d),
                v: 0.0,
            };
            let mut clamps = 0usize;
            for (off, slot) in chunk.iter_mut().enumerate() {
                let l = base + off;
                let p = lo + l;
                for a in 0..d {
                    state.s[a] = ensemble.price(p, node, a);
                }
                state.v = ensemble.factor(p, node);
                let zrow = &z_pred[l * m..(l + 1) * m];
                let f = field.primal(t, &state, zrow)?;
                let mut y_new = c_pred[l] + f * dt;
                if let Some((lo_bound, hi_bound)) = caps {
                    if y_new > hi_bound || y_new < lo_bound {
                        clamps += 1;
                        y_new = y_new.clamp(lo_bound, hi_bound);
                    }
                }
                *slot = y_new;
            }
            Ok(clamps)
        })
        .collect();
    for c in clamp_counts {
        diagnostics.clamp_activations += c?;
    }

    if let Some(prev) = picard_target {
        // Re-substitution: regress the driver-inclusive target.
        let z_pred = &buf.z_pred;
        let coef_y = {
            reg.solve(move |l| {
                let p = lo + l;
                let mut state = MarketState { s: nalgebra::DVector::zeros(d), v: 0.0 };
                for a in 0..d {
                    state.s[a] = ensemble.price(p, node, a);
                }
                state.v = ensemble.factor(p, node);
                let zrow = &z_pred[l * m..(l + 1) * m];
                let f = field
                    .primal(t, &state, zrow)
                    .unwrap_or(f64::NAN);
                prev[l] + f * dt
            })
        };
        reg.predict_into(&coef_y, y_next);
    }

    if y_next.iter().any(|x| !x.is_finite()) {
        return Err(QbsdeError::Solver(format!(
            "non-finite Y at node {node}; driver exploded"
        )));
    }
    Ok(())
}
