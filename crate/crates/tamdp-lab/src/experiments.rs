//! Config-driven experiment grids. Every experiment expands into
//! independent (grid value, seed) cells that run concurrently; each cell
//! writes `runlog.csv` and `report.json` under
//! `out_dir/<experiment>/cell-<value>/seed-<seed>/` atomically, and the
//! runner assembles a flat `summary.csv` plus a grid-level `report.json`
//! at the experiment root. Identical config and seeds reproduce identical
//! outputs byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::analysis::{
    alignment_with_se, empirical_prompt_distribution, fit_rate_exponent, generalization_bound,
    grad_tail_norm, iters_to_threshold, make_decaying_distribution, make_tilted_distribution,
    mc_component_samples, mc_eval, measure_decomposition_gap, measure_generalization_gap,
    GenGapParams,
};
use crate::config::{
    offset_seed, Experiment, ExperimentConfig, GridVariable,
};
use crate::env::{build_env, TaMdp, TaMdpSpec};
use crate::error::{LabError, Result};
use crate::optim::{grad_variance, grpo_train_with, GrpoConfig, RunLog};
use crate::parallel;
use crate::policy::PolicyParams;
use crate::rewards::{RewardKind, RewardSpec};
use crate::seeding;

/// Format a grid value for directory names and CSV cells: integers print
/// without a decimal point.
pub fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().ok_or_else(|| {
        LabError::Config {
            field: path.display().to_string(),
            message: "output path has no parent directory".into(),
        }
    })?;
    fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp.as_file(), bytes)?;
    tmp.persist(path).map_err(|e| LabError::Io(e.error))?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// Materialize the per-cell settings by applying one grid value.
fn cell_settings(
    cfg: &ExperimentConfig,
    variable: GridVariable,
    value: f64,
) -> (TaMdpSpec, RewardSpec, GrpoConfig) {
    let mut env = cfg.env.clone();
    let mut rewards = cfg.rewards.clone();
    let mut optim = cfg.optim.clone();
    match variable {
        GridVariable::K => {
            rewards = RewardSpec::default_for_k(
                value as usize,
                cfg.rewards.alpha_target,
                cfg.rewards.reward_seed,
            );
        }
        GridVariable::GroupSize => optim.group_size = value as usize,
        GridVariable::Alpha => rewards.alpha_target = value,
        GridVariable::Depth => env.d_max = value as usize,
        GridVariable::Beta => optim.kl_coef = value,
    }
    (env, rewards, optim)
}

/// Result of one (grid value, seed) cell.
struct CellOutcome {
    value: f64,
    seed: u64,
    rows: Vec<Vec<String>>,
    report: serde_json::Value,
    runlog: Option<RunLog>,
}

struct TrainedCell {
    env: TaMdp,
    rewards: RewardSpec,
    optim: GrpoConfig,
    reference: PolicyParams,
    policy: PolicyParams,
    log: RunLog,
    checkpoints: Vec<(usize, PolicyParams)>,
}

fn train_cell(
    cfg: &ExperimentConfig,
    variable: GridVariable,
    value: f64,
    run_seed: u64,
    keep_checkpoints: bool,
    train_dist: Option<&[f64]>,
) -> Result<TrainedCell> {
    let (env_spec, rewards, optim) = cell_settings(cfg, variable, value);
    let env = build_env(&env_spec)?;
    let reference = PolicyParams::uniform(&env);
    let every = cfg.analysis.checkpoint_every;
    let mut checkpoints: Vec<(usize, PolicyParams)> = Vec::new();
    if keep_checkpoints {
        checkpoints.push((0, reference.clone()));
    }
    let (policy, log) = grpo_train_with(
        &env,
        &rewards,
        &optim,
        &reference,
        train_dist,
        run_seed,
        |t, p| {
            if keep_checkpoints && (t + 1) % every == 0 {
                checkpoints.push((t + 1, p.clone()));
            }
        },
    )?;
    if keep_checkpoints && checkpoints.last().map(|(t, _)| *t) != Some(optim.iters) {
        checkpoints.push((optim.iters, policy.clone()));
    }
    Ok(TrainedCell {
        env,
        rewards,
        optim,
        reference,
        policy,
        log,
        checkpoints,
    })
}

fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.10e}")
    }
}

fn run_convergence_like(
    cfg: &ExperimentConfig,
    variable: GridVariable,
    value: f64,
    run_seed: u64,
) -> Result<CellOutcome> {
    let cell = train_cell(cfg, variable, value, run_seed, false, None)?;
    let series: Vec<f64> = cell
        .log
        .grad_norm_series()
        .iter()
        .map(|g| g.max(1e-12))
        .collect();
    let fit = fit_rate_exponent(&series)?;
    let grad_norm_at_t = grad_tail_norm(&series);
    let hit = iters_to_threshold(&series, cfg.analysis.threshold_eps);
    let var = grad_variance(
        &cell.policy,
        &cell.env,
        &cell.rewards,
        &cell.optim,
        cfg.analysis.variance_replicates,
        seeding::mix(&[run_seed, 0x61]),
    )?;
    let effective_sigma2 = cell.optim.group_size as f64 * var;
    let e_final = mc_eval(
        &cell.env,
        &cell.policy,
        &cell.rewards,
        cell.env.initial_dist(),
        cfg.analysis.n_eval,
        seeding::mix(&[run_seed, 0x62]),
    )?;
    let e_ref = mc_eval(
        &cell.env,
        &cell.reference,
        &cell.rewards,
        cell.env.initial_dist(),
        cfg.analysis.n_eval,
        seeding::mix(&[run_seed, 0x63]),
    )?;
    let j_gap = (e_final.composite_mean - e_ref.composite_mean).max(0.0);
    let bound_rhs = crate::analysis::convergence_bound(
        j_gap,
        cell.optim.lipschitz_estimate,
        effective_sigma2,
        0.0,
        cell.rewards.k,
        cell.optim.group_size,
        cell.optim.kl_coef,
        cell.rewards.r_max(),
        cell.optim.iters,
    );
    let row = vec![
        fmt_value(value),
        run_seed.to_string(),
        fmt_f(fit.gamma_hat),
        fmt_f(fit.stderr),
        fmt_f(grad_norm_at_t),
        fmt_f(effective_sigma2),
        hit.map_or(String::new(), |h| h.to_string()),
        fmt_f(bound_rhs),
    ];
    let report = json!({
        "grid_value": value,
        "seed": run_seed,
        "gamma_hat": fit.gamma_hat,
        "gamma_stderr": fit.stderr,
        "grad_norm_at_t": grad_norm_at_t,
        "effective_sigma2": effective_sigma2,
        "grad_variance": var,
        "iters_to_threshold": hit,
        "threshold": cfg.analysis.threshold_eps,
        "j_gap_estimate": j_gap,
        "bound_rhs": bound_rhs,
        "objective_final": e_final.composite_mean,
        "objective_reference": e_ref.composite_mean,
    });
    Ok(CellOutcome {
        value,
        seed: run_seed,
        rows: vec![row],
        report,
        runlog: Some(cell.log),
    })
}

fn run_decomposition_cell(
    cfg: &ExperimentConfig,
    value: f64,
    run_seed: u64,
) -> Result<CellOutcome> {
    let (env_spec, rewards, optim) = cell_settings(cfg, GridVariable::Alpha, value);
    let env = build_env(&env_spec)?;
    let rep = measure_decomposition_gap(&env, &rewards, &optim, cfg.analysis.n_eval, run_seed)?;
    let row = vec![
        fmt_value(value),
        run_seed.to_string(),
        fmt_f(rep.empirical_gap),
        fmt_f(rep.gap_stderr),
        fmt_f(rep.bound_rhs),
        fmt_f(rep.sigma_norm2),
        rep.tightness.map_or(String::new(), fmt_f),
        fmt_f(rep.j_joint),
        fmt_f(rep.j_dec),
    ];
    let report = serde_json::to_value(&rep)?;
    Ok(CellOutcome {
        value,
        seed: run_seed,
        rows: vec![row],
        report,
        runlog: None,
    })
}

/// Depth cell: the policy is fit to a finite sample of `n_train_prompts`
/// prompts drawn from a source distribution that decays with state index,
/// then evaluated on the population source versus a tilted target that
/// up-weights exactly the rarely-sampled tail. Prompts outside the training
/// sample stay near the reference policy, so the shift has a real cost that
/// deeper tool budgets can offset.
fn run_depth_cell(cfg: &ExperimentConfig, value: f64, run_seed: u64) -> Result<CellOutcome> {
    let (env_spec, _, _) = cell_settings(cfg, GridVariable::Depth, value);
    let env = build_env(&env_spec)?;
    let source = make_decaying_distribution(env.initial_dist(), cfg.analysis.source_decay)?;
    let target = make_tilted_distribution(&source, cfg.analysis.kl_target)?;
    let train_dist = empirical_prompt_distribution(
        &source,
        cfg.n_train_prompts,
        seeding::mix(&[run_seed, 0x72]),
    )?;
    let cell = train_cell(
        cfg,
        GridVariable::Depth,
        value,
        run_seed,
        false,
        Some(&train_dist),
    )?;
    let params = GenGapParams {
        n_train: cfg.n_train_prompts,
        delta: cfg.delta,
        ridge: cfg.analysis.ridge,
        seed: seeding::mix(&[run_seed, 0x71]),
    };
    let rep = measure_generalization_gap(
        &cell.policy,
        &cell.reference,
        &cell.env,
        &cell.rewards,
        cell.optim.group_size,
        &source,
        &target,
        cfg.analysis.n_eval,
        &params,
    )?;
    let row = vec![
        fmt_value(value),
        run_seed.to_string(),
        fmt_f(rep.gap),
        fmt_f(rep.kl_shift),
        fmt_f(rep.d_eff),
        fmt_f(rep.dims_ratio),
        fmt_f(rep.shift_term),
        fmt_f(rep.complexity_term),
        fmt_f(rep.group_term),
        fmt_f(rep.bound_total),
        fmt_f(rep.v_source),
        fmt_f(rep.v_target),
    ];
    let report = serde_json::to_value(&rep)?;
    Ok(CellOutcome {
        value,
        seed: run_seed,
        rows: vec![row],
        report,
        runlog: Some(cell.log),
    })
}

fn run_alignment_cell(cfg: &ExperimentConfig, value: f64, run_seed: u64) -> Result<CellOutcome> {
    let cell = train_cell(cfg, GridVariable::Alpha, value, run_seed, true, None)?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    // Every checkpoint is evaluated with the same rollout streams (common
    // random numbers): each estimate keeps its stated standard error, while
    // consecutive differences are paired so sampling noise mostly cancels
    // and the reported trajectory reflects the policy's movement.
    let eval_seed = seeding::mix(&[run_seed, 0x81]);
    for (t, policy) in cell.checkpoints.iter() {
        let samples = mc_component_samples(
            &cell.env,
            policy,
            &cell.rewards,
            cell.env.initial_dist(),
            cfg.analysis.n_eval,
            eval_seed,
        )?;
        let (alpha_hat, se) = alignment_with_se(&samples, &cell.rewards.weights)?;
        rows.push(vec![
            fmt_value(value),
            run_seed.to_string(),
            t.to_string(),
            alpha_hat.map_or(String::new(), fmt_f),
            fmt_f(se),
        ]);
        points.push(json!({"t": t, "alpha_hat": alpha_hat, "alpha_se": se}));
    }
    let report = json!({
        "grid_value": value,
        "seed": run_seed,
        "checkpoints": points,
    });
    Ok(CellOutcome {
        value,
        seed: run_seed,
        rows,
        report,
        runlog: Some(cell.log),
    })
}

fn run_beta_cell(cfg: &ExperimentConfig, value: f64, run_seed: u64) -> Result<CellOutcome> {
    let cell = train_cell(cfg, GridVariable::Beta, value, run_seed, false, None)?;
    let tail = cfg.analysis.tail_window.min(cell.log.records.len());
    let last = &cell.log.records[cell.log.records.len() - tail..];
    let final_objective =
        last.iter().map(|r| r.objective_estimate).sum::<f64>() / tail as f64;
    let r_max = cell.rewards.r_max();
    // Lab convention: proxy performance is the trailing training composite
    // normalized by r_max; ground truth is the raw accuracy component on
    // fresh held-out rollouts.
    let proxy = last
        .iter()
        .map(|r| {
            r.component_means
                .iter()
                .zip(&cell.rewards.weights)
                .map(|(c, w)| c * w)
                .sum::<f64>()
        })
        .sum::<f64>()
        / (tail as f64 * r_max);
    let eval = mc_eval(
        &cell.env,
        &cell.policy,
        &cell.rewards,
        cell.env.initial_dist(),
        cfg.analysis.n_eval,
        seeding::mix(&[run_seed, 0x91]),
    )?;
    let truth = match cell
        .rewards
        .kinds
        .iter()
        .position(|k| *k == RewardKind::Accuracy)
    {
        Some(idx) => eval.raw_component_means[idx],
        None => eval.composite_mean / r_max,
    };
    let overopt_gap = proxy - truth;
    let kl_final = cell.log.records.last().map_or(0.0, |r| r.kl_value);
    let row = vec![
        fmt_value(value),
        run_seed.to_string(),
        fmt_f(final_objective),
        fmt_f(proxy),
        fmt_f(truth),
        fmt_f(overopt_gap),
        fmt_f(kl_final),
    ];
    let report = json!({
        "grid_value": value,
        "seed": run_seed,
        "final_objective": final_objective,
        "proxy_performance": proxy,
        "truth_performance": truth,
        "overoptimization_gap": overopt_gap,
        "kl_final": kl_final,
    });
    Ok(CellOutcome {
        value,
        seed: run_seed,
        rows: vec![row],
        report,
        runlog: Some(cell.log),
    })
}

fn summary_header(exp: Experiment) -> Vec<&'static str> {
    match exp {
        Experiment::ConvergenceK => vec![
            "K",
            "seed",
            "gamma_hat",
            "gamma_stderr",
            "grad_norm_at_T",
            "effective_sigma2",
            "iters_to_eps",
            "bound_rhs",
        ],
        Experiment::GroupSize => vec![
            "G",
            "seed",
            "gamma_hat",
            "gamma_stderr",
            "grad_norm_at_T",
            "effective_sigma2",
            "iters_to_eps",
            "bound_rhs",
        ],
        Experiment::Decomposition => vec![
            "alpha",
            "seed",
            "empirical_gap",
            "gap_stderr",
            "bound_rhs",
            "sigma_norm2",
            "tightness",
            "j_joint",
            "j_dec",
        ],
        Experiment::GeneralizationDepth => vec![
            "d_max",
            "seed",
            "gap",
            "kl_shift",
            "d_eff",
            "dims_ratio",
            "shift_term",
            "complexity_term",
            "group_term",
            "bound_total",
            "v_source",
            "v_target",
        ],
        Experiment::AlignmentDynamics => {
            vec!["alpha_target", "seed", "t", "alpha_hat", "alpha_se"]
        }
        Experiment::BetaSweep => vec![
            "beta",
            "seed",
            "final_objective",
            "proxy",
            "truth",
            "overopt_gap",
            "kl_final",
        ],
        Experiment::BoundCheck => vec![
            "r_max",
            "kl_shift",
            "n",
            "d_eff",
            "delta",
            "d_max",
            "G",
            "shift_term",
            "complexity_term",
            "group_term",
            "total",
        ],
    }
}

fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, my, 0.0);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Per-grid-value seed means of one numeric summary column.
fn cell_means(outcomes: &[&CellOutcome], col: usize) -> Vec<(f64, f64)> {
    let mut values: Vec<f64> = outcomes.iter().map(|o| o.value).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    values
        .into_iter()
        .map(|v| {
            let rows: Vec<f64> = outcomes
                .iter()
                .filter(|o| o.value == v)
                .flat_map(|o| o.rows.iter())
                .filter_map(|r| r[col].parse::<f64>().ok())
                .collect();
            let mean = rows.iter().sum::<f64>() / rows.len().max(1) as f64;
            (v, mean)
        })
        .collect()
}

fn grid_report(exp: Experiment, outcomes: &[&CellOutcome]) -> serde_json::Value {
    match exp {
        Experiment::ConvergenceK => {
            let gammas = cell_means(outcomes, 2);
            let sigmas = cell_means(outcomes, 5);
            let xs: Vec<f64> = sigmas.iter().map(|(v, _)| *v).collect();
            let ys: Vec<f64> = sigmas.iter().map(|(_, s)| *s).collect();
            let (slope, intercept, r2) = ols(&xs, &ys);
            json!({
                "gamma_by_k": gammas,
                "effective_sigma2_by_k": sigmas,
                "sigma_comp2_fit": slope,
                "sigma_base2_fit": intercept,
                "sigma_fit_r2": r2,
            })
        }
        Experiment::GroupSize => {
            let norms = cell_means(outcomes, 4);
            let ratios: Vec<serde_json::Value> = norms
                .iter()
                .flat_map(|(g1, n1)| {
                    norms.iter().filter_map(move |(g2, n2)| {
                        if g2 > g1 && *n1 > 0.0 {
                            Some(json!({"g_small": g1, "g_large": g2, "ratio": n2 / n1}))
                        } else {
                            None
                        }
                    })
                })
                .collect();
            json!({"grad_norm_by_g": norms, "pairwise_ratios": ratios})
        }
        Experiment::Decomposition => {
            json!({"gap_by_alpha": cell_means(outcomes, 2), "bound_by_alpha": cell_means(outcomes, 4)})
        }
        Experiment::GeneralizationDepth => {
            json!({
                "gap_by_depth": cell_means(outcomes, 2),
                "dims_ratio_by_depth": cell_means(outcomes, 5),
                "bound_by_depth": cell_means(outcomes, 9),
            })
        }
        Experiment::AlignmentDynamics => {
            json!({"alpha_hat_by_alpha_target": cell_means(outcomes, 3)})
        }
        Experiment::BetaSweep => {
            json!({
                "objective_by_beta": cell_means(outcomes, 2),
                "overopt_gap_by_beta": cell_means(outcomes, 5),
            })
        }
        Experiment::BoundCheck => json!({}),
    }
}

fn write_summary(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut wtr = csv::Writer::from_writer(&mut buf);
        wtr.write_record(header)?;
        for row in rows {
            wtr.write_record(row)?;
        }
        wtr.flush()?;
    }
    atomic_write(path, &buf)
}

/// Execute the configured experiment. Returns the experiment output
/// directory on success; on partial failure, writes `failures.json` there
/// and returns the first error.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_override: Option<&Path>,
    seed_offset: i64,
) -> Result<PathBuf> {
    let out_root = out_override.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.clone());
    let exp_dir = out_root.join(cfg.experiment.name());
    fs::create_dir_all(&exp_dir)?;

    if cfg.experiment == Experiment::BoundCheck {
        return run_bound_check(cfg, &exp_dir).map(|_| exp_dir);
    }

    let grid = cfg.grid.as_ref().ok_or_else(|| LabError::Config {
        field: "grid".into(),
        message: "this experiment requires a grid".into(),
    })?;
    let jobs: Vec<(f64, u64)> = grid
        .values
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, offset_seed(s, seed_offset))))
        .collect();

    let results: Vec<Result<CellOutcome>> = parallel::map_indexed(jobs.len(), |i| {
        let (value, run_seed) = jobs[i];
        match cfg.experiment {
            Experiment::ConvergenceK => {
                run_convergence_like(cfg, GridVariable::K, value, run_seed)
            }
            Experiment::GroupSize => {
                run_convergence_like(cfg, GridVariable::GroupSize, value, run_seed)
            }
            Experiment::Decomposition => run_decomposition_cell(cfg, value, run_seed),
            Experiment::GeneralizationDepth => run_depth_cell(cfg, value, run_seed),
            Experiment::AlignmentDynamics => run_alignment_cell(cfg, value, run_seed),
            Experiment::BetaSweep => run_beta_cell(cfg, value, run_seed),
            Experiment::BoundCheck => unreachable!(),
        }
    });

    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for ((value, seed), res) in jobs.iter().zip(results) {
        match res {
            Ok(o) => outcomes.push(o),
            Err(e) => failures.push(json!({
                "cell": fmt_value(*value),
                "seed": seed,
                "error": e.to_string(),
            })),
        }
    }

    for o in &outcomes {
        let cell_dir = exp_dir
            .join(format!("cell-{}", fmt_value(o.value)))
            .join(format!("seed-{}", o.seed));
        write_json(&cell_dir.join("report.json"), &o.report)?;
        if let Some(log) = &o.runlog {
            let mut buf = Vec::new();
            log.write_csv(&mut buf)?;
            atomic_write(&cell_dir.join("runlog.csv"), &buf)?;
        }
    }

    let mut sorted: Vec<&CellOutcome> = outcomes.iter().collect();
    sorted.sort_by(|a, b| {
        a.value
            .partial_cmp(&b.value)
            .unwrap()
            .then(a.seed.cmp(&b.seed))
    });
    let rows: Vec<Vec<String>> = sorted.iter().flat_map(|o| o.rows.clone()).collect();
    write_summary(&exp_dir.join("summary.csv"), &summary_header(cfg.experiment), &rows)?;
    let report = json!({
        "experiment": cfg.experiment.name(),
        "config_echo": serde_json::to_value(cfg)?,
        "seed_offset": seed_offset,
        "n_cells": jobs.len(),
        "n_failed": failures.len(),
        "summary": grid_report(cfg.experiment, &sorted),
    });
    write_json(&exp_dir.join("report.json"), &report)?;

    if !failures.is_empty() {
        write_json(&exp_dir.join("failures.json"), &json!(failures))?;
        return Err(LabError::TrainingAbort {
            iter: 0,
            message: format!(
                "{} of {} cells failed; see {}",
                failures.len(),
                jobs.len(),
                exp_dir.join("failures.json").display()
            ),
        });
    }
    Ok(exp_dir)
}

/// The bound-check experiment: evaluate the generalization-bound
/// calculator on externally published inputs. This calculator is the only
/// point of contact with real-benchmark numbers; nothing here re-runs or
/// reproduces those benchmarks.
fn run_bound_check(cfg: &ExperimentConfig, exp_dir: &Path) -> Result<()> {
    let bc = cfg.bound_check.as_ref().ok_or_else(|| LabError::Config {
        field: "bound_check".into(),
        message: "missing [bound_check] section".into(),
    })?;
    let (shift, complexity, group, total) = generalization_bound(
        bc.r_max,
        bc.kl_shift,
        bc.n,
        bc.d_eff,
        bc.delta,
        bc.d_max,
        bc.group_size,
    )?;
    let row = vec![
        fmt_f(bc.r_max),
        fmt_f(bc.kl_shift),
        bc.n.to_string(),
        fmt_f(bc.d_eff),
        fmt_f(bc.delta),
        bc.d_max.to_string(),
        bc.group_size.to_string(),
        fmt_f(shift),
        fmt_f(complexity),
        fmt_f(group),
        fmt_f(total),
    ];
    write_summary(
        &exp_dir.join("summary.csv"),
        &summary_header(Experiment::BoundCheck),
        &[row],
    )?;
    let report = json!({
        "experiment": "bound-check",
        "inputs": serde_json::to_value(bc)?,
        "shift_term": shift,
        "complexity_term": complexity,
        "group_term": group,
        "total": total,
        "note": "external benchmark scores are not reproducible here; this \
                 calculator evaluates the bound on published inputs only",
    });
    write_json(&exp_dir.join("report.json"), &report)
}
