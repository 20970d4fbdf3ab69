//! Run orchestration behind the command-line interface: one command per
//! analysis, each reading a JSON config and writing a JSON report plus
//! CSV tables into an output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::asymptotics::{
    alpha_sweep, control_lattice_lower_bound, generator_limit_audit, large_alpha_price,
    small_alpha_price, HjbParams,
};
use crate::config::RunConfig;
use crate::duality::{build_candidate, duality_gap, extract_optimal, fenchel_closure_max_residual};
use crate::error::{QbsdeError, Result};
use crate::geometry::QP_KKT_TOL;
use crate::model::check_assumption1;
use crate::oracle::reference_price;
use crate::paths::{simulate, PathEnsemble, TimeGrid};
use crate::pricing::{hedge, indifference_price, utility_along_strategy, PriceRun};
use crate::report::{
    fmt, ReportWriter, DUAL_AUDIT_CSV, HEDGE_CSV, HJB_GRID_CSV, ORACLE_CSV, PRICE_CSV, REPORT_JSON,
    SWEEP_CSV,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CliCommand {
    Validate,
    Price,
    Hedge,
    DualAudit,
    Sweep,
    Asymptotics,
    Oracle,
}

impl CliCommand {
    pub fn name(&self) -> &'static str {
        match self {
            CliCommand::Validate => "validate",
            CliCommand::Price => "price",
            CliCommand::Hedge => "hedge",
            CliCommand::DualAudit => "dual-audit",
            CliCommand::Sweep => "sweep",
            CliCommand::Asymptotics => "asymptotics",
            CliCommand::Oracle => "oracle",
        }
    }
}

/// Command-line overrides merged into the config before validation.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub alpha: Option<f64>,
    pub alpha_grid: Option<Vec<f64>>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report_path: PathBuf,
}

/// Map an error onto the documented exit codes: 2 for config/validation
/// problems, 3 for numerical failures, 4 for I/O.
pub fn exit_code(err: &QbsdeError) -> i32 {
    if err.is_validation() {
        2
    } else if matches!(err, QbsdeError::Io(_) | QbsdeError::Json(_)) {
        4
    } else {
        3
    }
}

pub fn run(
    command: CliCommand,
    config_path: &Path,
    out_dir: &Path,
    overrides: &Overrides,
) -> Result<RunOutcome> {
    let started = Instant::now();
    let text = std::fs::read_to_string(config_path)?;
    let mut cfg = RunConfig::from_json(&text)?;
    if let Some(seed) = overrides.seed {
        cfg.solver.seed = Some(seed);
    }
    if let Some(paths) = overrides.paths {
        cfg.solver.paths = paths;
    }
    if let Some(steps) = overrides.steps {
        cfg.solver.steps = steps;
    }
    if let Some(alpha) = overrides.alpha {
        cfg.risk.alpha = Some(alpha);
    }
    if let Some(grid) = &overrides.alpha_grid {
        cfg.risk.alpha_grid = Some(grid.clone());
    }
    cfg.validate()?;
    let seed = cfg
        .solver
        .seed
        .ok_or_else(|| QbsdeError::Config("a seed is mandatory (config or --seed)".into()))?;

    let model = cfg.build_model()?;
    let constraint = cfg.build_constraint()?;
    let payoff = cfg.build_payoff()?;
    model.validate(10_000)?;

    let writer = ReportWriter::new(out_dir)?;
    let grid = TimeGrid::new(model.horizon, cfg.solver.steps)?;

    let results = match command {
        CliCommand::Validate => {
            let ensemble = simulate(&model, grid, cfg.solver.paths, seed)?;
            let params = cfg.risk_params()?;
            let assumption = check_assumption1(&payoff, &params, &ensemble);
            json!({
                "model_ok": true,
                "assumption1": assumption,
            })
        }
        CliCommand::Price => {
            let ensemble = simulate(&model, grid, cfg.solver.paths, seed)?;
            let run = price_run(&cfg, &model, &constraint, payoff.clone(), &ensemble)?;
            write_price_csv(&writer, seed, &run)?;
            serde_json::to_value(&run.report)?
        }
        CliCommand::Hedge => {
            let ensemble = simulate(&model, grid, cfg.solver.paths, seed)?;
            let run = price_run(&cfg, &model, &constraint, payoff.clone(), &ensemble)?;
            let h = hedge(&run, 64)?;
            let utility = utility_along_strategy(&run, 0.0, None)?;
            let mut rows = Vec::new();
            for (si, &p) in h.with_payoff.paths.iter().enumerate() {
                for k in 0..ensemble.grid().steps {
                    rows.push(vec![
                        p.to_string(),
                        k.to_string(),
                        fmt(ensemble.grid().node(k)),
                        fmt(h.with_payoff.strategy(si, k)[0]),
                        fmt(h.without_payoff.strategy(si, k)[0]),
                        fmt(h.hedge[(si * ensemble.grid().steps + k) * h.with_payoff.d]),
                        fmt(QP_KKT_TOL),
                    ]);
                }
            }
            writer.write_csv(
                HEDGE_CSV,
                "path,step,t,pi_with,pi_without,hedge,projection_tol",
                &rows,
            )?;
            write_price_csv(&writer, seed, &run)?;
            json!({
                "price": run.report,
                "utility_check": utility,
                "membership_violations": h.with_payoff.membership_violations
                    + h.without_payoff.membership_violations,
                "max_norm_excess": h.with_payoff.max_norm_excess.max(h.without_payoff.max_norm_excess),
            })
        }
        CliCommand::DualAudit => {
            let ensemble = simulate(&model, grid, cfg.solver.paths, seed)?;
            let run = price_run(&cfg, &model, &constraint, payoff.clone(), &ensemble)?;
            dual_audit(&cfg, &writer, &run, seed)?
        }
        CliCommand::Sweep => {
            let alphas = cfg
                .risk
                .alpha_grid
                .clone()
                .ok_or_else(|| QbsdeError::Config("sweep needs risk.alpha_grid".into()))?;
            let ensemble = simulate(&model, grid, cfg.solver.paths, seed)?;
            sweep(&cfg, &writer, &model, &constraint, &payoff, &alphas, &ensemble, grid)?
        }
        CliCommand::Asymptotics => {
            let ensemble = simulate(&model, grid, cfg.solver.paths, seed)?;
            asymptotics(&cfg, &writer, &model, &constraint, &payoff, &ensemble, grid)?
        }
        CliCommand::Oracle => {
            let params = cfg.risk_params()?;
            let oracle = reference_price(&cfg, params.alpha)?;
            writer.write_csv(
                ORACLE_CSV,
                "alpha,price,tolerance,method",
                &[vec![
                    fmt(params.alpha),
                    fmt(oracle.price),
                    fmt(oracle.tolerance),
                    oracle.method.clone(),
                ]],
            )?;
            serde_json::to_value(&oracle)?
        }
    };

    let report = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "config": cfg,
        "results": results,
    });
    writer.write_json(REPORT_JSON, &report)?;
    Ok(RunOutcome { report_path: writer.dir().join(REPORT_JSON) })
}

fn price_run<'a>(
    cfg: &RunConfig,
    model: &'a crate::model::MarketModel,
    constraint: &'a crate::geometry::ConstraintSet,
    payoff: crate::model::Payoff,
    ensemble: &'a PathEnsemble,
) -> Result<PriceRun<'a>> {
    let params = cfg.risk_params()?;
    indifference_price(
        model,
        constraint,
        &params,
        payoff,
        ensemble,
        &cfg.basis(),
        &cfg.lsmc_options(),
    )
}

fn write_price_csv(writer: &ReportWriter, seed: u64, run: &PriceRun<'_>) -> Result<()> {
    let r = &run.report;
    writer.write_csv(
        PRICE_CSV,
        "run_id,alpha,c0,c0_se,y0_with,y0_with_se,y0_without,y0_without_se,\
         bound_lower,bound_lower_se,bound_upper,bound_upper_se,clamp_fraction,clamp_limit",
        &[vec![
            format!("price-{seed}"),
            fmt(r.alpha),
            fmt(r.price),
            fmt(r.price_se),
            fmt(r.y0_with),
            fmt(r.y0_with_se),
            fmt(r.y0_without),
            fmt(r.y0_without_se),
            fmt(r.bounds.lower),
            fmt(r.bounds.lower_se),
            fmt(r.bounds.upper),
            fmt(r.bounds.upper_se),
            fmt(r.clamp_fraction),
            fmt(0.01),
        ]],
    )
}

fn dual_audit(
    _cfg: &RunConfig,
    writer: &ReportWriter,
    run: &PriceRun<'_>,
    seed: u64,
) -> Result<serde_json::Value> {
    let sol = &run.with_payoff;
    let ensemble = run.ensemble;
    let alpha = run.alpha;
    let field = crate::drivers::DriverField::new(run.model, run.constraint, alpha)?;

    let mut rows = Vec::new();
    let mut audits = Vec::new();
    let mut push = |label: &str, cand: &crate::duality::DualCandidate| {
        let gap = duality_gap(sol, cand, &run.payoff, ensemble);
        let weak_ok = gap.gap >= -3.0 * gap.se;
        rows.push(vec![
            label.to_string(),
            fmt(gap.dual_value),
            fmt(gap.dual_se),
            fmt(cand.entropy.direct),
            fmt(cand.entropy.direct_se),
            fmt(gap.gap),
            fmt(gap.se),
            (weak_ok as u8).to_string(),
        ]);
        audits.push(json!({
            "candidate": label,
            "dual_value": gap.dual_value,
            "dual_se": gap.dual_se,
            "entropy": cand.entropy.direct,
            "entropy_se": cand.entropy.direct_se,
            "gap": gap.gap,
            "gap_se": gap.se,
            "weak_duality_ok": weak_ok,
        }));
    };

    let optimal = extract_optimal(sol, run.model, run.constraint, alpha, ensemble)?;
    push("optimal", &optimal);

    // Perturbed admissible candidates: gradient densities at distorted Z.
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xd0a1);
    let m = ensemble.brownian_dim();
    for j in 0..5 {
        let scale: f64 = rng.gen_range(0.25..1.75);
        let shift: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let cand = build_candidate(
            run.model,
            run.constraint,
            alpha,
            ensemble,
            format!("perturbed-{j}"),
            |path, step, t, state, out| {
                let z = sol.z(path, step);
                let mut z2 = [0.0f64; 8];
                for k in 0..m {
                    z2[k] = scale * z[k] + shift[k];
                }
                if field.optimal_q_into(t, state, &z2[..m], out).is_err() {
                    out.fill(f64::NAN);
                }
            },
        )?;
        push(&format!("perturbed-{j}"), &cand);
    }

    writer.write_csv(
        DUAL_AUDIT_CSV,
        "candidate,dual_value,dual_se,entropy,entropy_se,gap,gap_se,weak_duality_ok",
        &rows,
    )?;

    let fenchel = fenchel_closure_max_residual(sol, run.model, run.constraint, alpha, ensemble, 64)?;
    Ok(json!({
        "price": run.report,
        "candidates": audits,
        "fenchel_max_scaled_residual": fenchel,
        "fenchel_tolerance": crate::drivers::FENCHEL_TOL,
    }))
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    cfg: &RunConfig,
    writer: &ReportWriter,
    model: &crate::model::MarketModel,
    constraint: &crate::geometry::ConstraintSet,
    payoff: &crate::model::Payoff,
    alphas: &[f64],
    ensemble: &PathEnsemble,
    grid: TimeGrid,
) -> Result<serde_json::Value> {
    let report = alpha_sweep(
        model,
        constraint,
        payoff,
        alphas,
        ensemble,
        &cfg.basis(),
        &cfg.lsmc_options(),
    )?;
    let small = small_alpha_price(
        model,
        constraint,
        payoff,
        ensemble,
        &cfg.basis(),
        &cfg.lsmc_options(),
    )?;
    let large = if model.factor_coefficients().is_some() && payoff.factor_fn().is_some() {
        let params = HjbParams {
            control_bounds: cfg.asymptotics.control_bounds.clone(),
            v_nodes: cfg.asymptotics.v_nodes,
            ..HjbParams::default()
        };
        match large_alpha_price(model, constraint, payoff, grid, &params) {
            Ok(sol) => Some(sol),
            Err(QbsdeError::UnboundedPayoff(_)) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let large_tol = large.as_ref().map(|l| {
        let ladder = &l.ladder;
        if ladder.len() >= 2 {
            (ladder[ladder.len() - 1].1 - ladder[ladder.len() - 2].1).abs() + 1e-3
        } else {
            1e-3
        }
    });
    let mut rows = Vec::new();
    for p in &report.points {
        let (large_s, large_tol_s, corridor) = match (&large, large_tol) {
            (Some(l), Some(tol)) => {
                let ok = p.price >= small.value - 3.0 * (small.se + p.se)
                    && p.price <= l.value + tol + 3.0 * p.se;
                (fmt(l.value), fmt(tol), (ok as u8).to_string())
            }
            _ => {
                let ok = p.price >= small.value - 3.0 * (small.se + p.se);
                (String::new(), String::new(), (ok as u8).to_string())
            }
        };
        rows.push(vec![
            fmt(p.alpha),
            fmt(p.price),
            fmt(p.se),
            fmt(small.value),
            fmt(small.se),
            large_s,
            large_tol_s,
            corridor,
        ]);
    }
    writer.write_csv(
        SWEEP_CSV,
        "alpha,c0,c0_se,small_alpha_ref,small_alpha_se,large_alpha_ref,large_alpha_tol,in_corridor",
        &rows,
    )?;

    Ok(json!({
        "points": report.points,
        "monotone_ok": report.monotone_ok,
        "small_alpha": small,
        "large_alpha": large,
    }))
}

fn asymptotics(
    cfg: &RunConfig,
    writer: &ReportWriter,
    model: &crate::model::MarketModel,
    constraint: &crate::geometry::ConstraintSet,
    payoff: &crate::model::Payoff,
    ensemble: &PathEnsemble,
    grid: TimeGrid,
) -> Result<serde_json::Value> {
    let small = small_alpha_price(
        model,
        constraint,
        payoff,
        ensemble,
        &cfg.basis(),
        &cfg.lsmc_options(),
    )?;
    let m_max = cfg.asymptotics.control_bounds.iter().cloned().fold(1.0f64, f64::max);
    let lattice = control_lattice_lower_bound(
        model,
        constraint,
        payoff,
        ensemble,
        m_max,
        cfg.asymptotics.lattice_directions,
    )?;
    let hjb = if model.factor_coefficients().is_some() && payoff.factor_fn().is_some() {
        let params = HjbParams {
            control_bounds: cfg.asymptotics.control_bounds.clone(),
            v_nodes: cfg.asymptotics.v_nodes,
            ..HjbParams::default()
        };
        let sol = large_alpha_price(model, constraint, payoff, grid, &params)?;
        let tol = if sol.ladder.len() >= 2 {
            (sol.ladder[sol.ladder.len() - 1].1 - sol.ladder[sol.ladder.len() - 2].1).abs()
        } else {
            0.0
        };
        let rows: Vec<Vec<String>> = sol
            .v_grid
            .iter()
            .zip(sol.u0.iter())
            .map(|(v, u)| vec![fmt(*v), fmt(*u), fmt(tol)])
            .collect();
        writer.write_csv(HJB_GRID_CSV, "v,u,value_tol", &rows)?;
        Some(sol)
    } else {
        None
    };

    // The generator audit runs on the configured constraint when it is a
    // cone, as a built-in sanity sweep.
    let audit = generator_limit_audit(std::slice::from_ref(constraint), 2_000, ensemble.seed())?;

    Ok(json!({
        "small_alpha": small,
        "control_lattice_lower_bound": lattice,
        "hjb": hjb,
        "generator_audit": audit,
    }))
}
