//! Bound calculators, rate-exponent fitting, and gap measurement.
//!
//! The three bound calculators are pure arithmetic: convergence
//! (`2 L j_gap / sqrt(T) + L (s_b + K s_c) / (G sqrt(T)) + 2 beta r_max^2 /
//! sqrt(T)`), decomposition (cross-component covariance plus normalization
//! discrepancy, both divided by G), and generalization (shift, complexity,
//! and group-estimation terms). The measurement routines run paired
//! training or evaluation jobs and report empirical gaps next to the
//! corresponding bound values.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::env::{sample_categorical, sample_trajectory, TaMdp};
use crate::error::{LabError, Result};
use crate::optim::{
    grpo_train, group_advantages, GroupBatch, GrpoConfig, OptimMode,
};
use crate::parallel;
use crate::policy::{exact_fisher, FisherPair, PolicyParams};
use crate::rewards::{composite, estimate_alignment, eval_components, eval_raw_components, LatentSampler, RewardSpec};
use crate::seeding;

const TAG_EVAL_PROMPT: u64 = 0x31;
const TAG_EVAL_TRAJ: u64 = 0x32;
const TAG_EVAL_LATENT: u64 = 0x33;

/// Result of fitting `||g_t|| ~ c t^{-gamma}` by log-log least squares.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateFit {
    pub gamma_hat: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub n_points: usize,
}

/// Fit the decay exponent of a gradient-norm series. Discards a 20%
/// burn-in, then subsamples the tail geometrically (about 200 points) so
/// late iterations are not swamped by early ones, and regresses
/// `ln g_t` on `ln t` (t is 1-based).
pub fn fit_rate_exponent(series: &[f64]) -> Result<RateFit> {
    if series.len() < 50 {
        return Err(LabError::Shape(format!(
            "need >= 50 points to fit a rate, got {}",
            series.len()
        )));
    }
    if series.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
        return Err(LabError::Numeric(
            "rate fit requires strictly positive finite gradient norms".into(),
        ));
    }
    let n = series.len();
    let burn = (n / 5).max(1);
    let last = (n - 1) as f64;
    let target_points = 200usize;
    let ratio = (last / burn as f64)
        .powf(1.0 / (target_points.saturating_sub(1)).max(1) as f64)
        .max(1.0 + 1e-12);
    let mut idxs: Vec<usize> = Vec::new();
    let mut x = burn as f64;
    while x <= last + 0.5 {
        let i = (x.round() as usize).min(n - 1);
        if idxs.last() != Some(&i) {
            idxs.push(i);
        }
        x *= ratio;
    }
    if idxs.last() != Some(&(n - 1)) {
        idxs.push(n - 1);
    }
    let m = idxs.len();
    let xs: Vec<f64> = idxs.iter().map(|&i| ((i + 1) as f64).ln()).collect();
    let ys: Vec<f64> = idxs.iter().map(|&i| series[i].ln()).collect();
    let mx = xs.iter().sum::<f64>() / m as f64;
    let my = ys.iter().sum::<f64>() / m as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(LabError::Numeric("degenerate abscissa in rate fit".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let stderr = if m > 2 {
        (sse / (m as f64 - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(RateFit {
        gamma_hat: -slope,
        stderr,
        intercept,
        n_points: m,
    })
}

/// Centered median filter of odd `window`, clamped at the edges.
pub fn median_filter(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1, "window must be odd");
    let half = window / 2;
    let n = series.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let mut w: Vec<f64> = series[lo..hi].to_vec();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            w[w.len() / 2]
        })
        .collect()
}

/// Stable final gradient norm: the median of the last (up to) 51 entries.
pub fn grad_tail_norm(series: &[f64]) -> f64 {
    if series.is_empty() {
        return f64::NAN;
    }
    let w = series.len().min(51);
    let mut tail = series[series.len() - w..].to_vec();
    tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
    tail[tail.len() / 2]
}

/// First iteration at which the median-filtered (window 51) series drops
/// to or below `threshold`.
pub fn iters_to_threshold(series: &[f64], threshold: f64) -> Option<usize> {
    let smoothed = median_filter(series, 51);
    smoothed.iter().position(|&g| g <= threshold)
}

/// Right-hand side of the convergence guarantee:
/// `2 L j_gap / sqrt(T) + L (s_base + K s_comp) / (G sqrt(T)) + 2 beta
/// r_max^2 / sqrt(T)`.
#[allow(clippy::too_many_arguments)]
pub fn convergence_bound(
    j_gap: f64,
    l: f64,
    sigma_base2: f64,
    sigma_comp2: f64,
    k: usize,
    g: usize,
    beta: f64,
    r_max: f64,
    t: usize,
) -> f64 {
    let rt = (t as f64).sqrt();
    2.0 * l * j_gap / rt
        + l * (sigma_base2 + k as f64 * sigma_comp2) / (g as f64 * rt)
        + 2.0 * beta * r_max * r_max / rt
}

/// Iteration budget `L^2 (s_base + K s_comp)^2 / (G^2 eps^4)` needed to
/// reach expected gradient norm `eps` (leading constant taken as 1).
pub fn sample_complexity(
    l: f64,
    sigma_base2: f64,
    sigma_comp2: f64,
    k: usize,
    g: usize,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(LabError::config("eps", "must be > 0"));
    }
    let s = sigma_base2 + k as f64 * sigma_comp2;
    Ok(l * l * s * s / ((g * g) as f64 * eps.powi(4)))
}

/// Decomposition sub-optimality bound:
/// `(K(K-1)/(2G)) sum_{k<k'} w_k w_k' |Cov| + ((K-1)/G) sigma_norm2`.
pub fn decomposition_bound(
    covariances: &[Vec<f64>],
    weights: &[f64],
    g: usize,
    sigma_norm2: f64,
) -> Result<f64> {
    let k = weights.len();
    if covariances.len() != k || covariances.iter().any(|row| row.len() != k) {
        return Err(LabError::Shape("covariance matrix is not K x K".into()));
    }
    for i in 0..k {
        for j in 0..i {
            if (covariances[i][j] - covariances[j][i]).abs() > 1e-9 {
                return Err(LabError::Numeric(format!(
                    "covariance matrix asymmetric at ({i},{j})"
                )));
            }
        }
    }
    let mut cross = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            cross += weights[i] * weights[j] * covariances[i][j].abs();
        }
    }
    let kf = k as f64;
    let gf = g as f64;
    Ok(kf * (kf - 1.0) / (2.0 * gf) * cross + (kf - 1.0) / gf * sigma_norm2)
}

/// Normalization discrepancy of a batch: the largest within-group sample
/// variance (1/(n-1)) of per-component minus composite advantages.
pub fn estimate_sigma_norm2(batch: &GroupBatch, weights: &[f64], norm_eps: f64) -> Result<f64> {
    let g = batch.composite_rewards.len();
    if g < 2 {
        return Err(LabError::Shape(format!("group size {g} < 2")));
    }
    let k = weights.len();
    if k <= 1 {
        return Ok(0.0);
    }
    let comp_adv = group_advantages(&batch.composite_rewards, norm_eps)?;
    let mut worst = 0.0f64;
    for ki in 0..k {
        let col: Vec<f64> = batch.component_rewards.iter().map(|r| r[ki]).collect();
        let adv = group_advantages(&col, norm_eps)?;
        let diffs: Vec<f64> = adv.iter().zip(&comp_adv).map(|(a, c)| a - c).collect();
        let mean = diffs.iter().sum::<f64>() / g as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (g as f64 - 1.0);
        worst = worst.max(var);
    }
    Ok(worst)
}

/// Trace of `(H_S + ridge I)^{-1} H_T` via Cholesky; reports the smallest
/// eigenvalue on failure.
pub fn effective_dimension(fishers: &FisherPair) -> Result<f64> {
    let d = fishers.h_source.nrows();
    let regularized = &fishers.h_source + DMatrix::identity(d, d) * fishers.ridge;
    match regularized.clone().cholesky() {
        Some(chol) => {
            let solved = chol.solve(&fishers.h_target);
            Ok(solved.trace())
        }
        None => {
            let min_eig = regularized
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            Err(LabError::Singular { min_eig })
        }
    }
}

/// The three generalization-bound terms and their sum:
/// shift `r_max sqrt(2 kl / n)`, complexity
/// `r_max d_max sqrt(d_eff ln(n/delta) / n)` (natural log), and group
/// `2 r_max d_max / sqrt(G)`.
#[allow(clippy::too_many_arguments)]
pub fn generalization_bound(
    r_max: f64,
    kl_shift: f64,
    n: usize,
    d_eff: f64,
    delta: f64,
    d_max: usize,
    g: usize,
) -> Result<(f64, f64, f64, f64)> {
    if n < 1 {
        return Err(LabError::config("n", "must be >= 1"));
    }
    if !(0.0..1.0).contains(&delta) || delta == 0.0 {
        return Err(LabError::config("delta", "must lie in (0, 1)"));
    }
    let nf = n as f64;
    let shift = r_max * (2.0 * kl_shift / nf).sqrt();
    let complexity = r_max * d_max as f64 * (d_eff * (nf / delta).ln() / nf).sqrt();
    let group = 2.0 * r_max * d_max as f64 / (g as f64).sqrt();
    Ok((shift, complexity, group, shift + complexity + group))
}

/// KL divergence between two categorical distributions; infinite when the
/// first puts mass where the second has none.
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi == 0.0 {
                0.0
            } else if qi == 0.0 {
                f64::INFINITY
            } else {
                pi * (pi / qi).ln()
            }
        })
        .sum()
}

/// Exponentially tilt `source` by state index, with the rate chosen by
/// bisection so that `KL(target || source)` hits `kl_target` within 1e-6.
pub fn make_tilted_distribution(source: &[f64], kl_target: f64) -> Result<Vec<f64>> {
    tilted_distribution(source, kl_target, 1.0)
}

/// The opposite tilt: mass decays with state index instead of growing,
/// again with `KL(tilted || source)` driven to `kl_target`.
pub fn make_decaying_distribution(source: &[f64], kl_target: f64) -> Result<Vec<f64>> {
    tilted_distribution(source, kl_target, -1.0)
}

fn tilted_distribution(source: &[f64], kl_target: f64, sign: f64) -> Result<Vec<f64>> {
    if kl_target < 0.0 {
        return Err(LabError::config("kl_target", "must be >= 0"));
    }
    if kl_target == 0.0 {
        return Ok(source.to_vec());
    }
    let tilt = |lambda: f64| -> Vec<f64> {
        let mx = source
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, _)| sign * lambda * s as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut t: Vec<f64> = source
            .iter()
            .enumerate()
            .map(|(s, &p)| p * (sign * lambda * s as f64 - mx).exp())
            .collect();
        let z: f64 = t.iter().sum();
        for v in &mut t {
            *v /= z;
        }
        t
    };
    let kl_at = |lambda: f64| kl_categorical(&tilt(lambda), source);
    let mut hi = 1.0;
    let mut guard = 0;
    while kl_at(hi) < kl_target {
        hi *= 2.0;
        guard += 1;
        if guard > 80 {
            return Err(LabError::config(
                "kl_target",
                "exceeds the maximum achievable divergence for this support",
            ));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kl_at(mid) < kl_target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (kl_at(hi) - kl_target).abs() < 1e-9 {
            break;
        }
    }
    let out = tilt(hi);
    let achieved = kl_categorical(&out, source);
    if (achieved - kl_target).abs() > 1e-6 {
        return Err(LabError::Numeric(format!(
            "tilt bisection missed the divergence target: {achieved} vs {kl_target}"
        )));
    }
    Ok(out)
}

/// Empirical distribution of `n` i.i.d. prompt draws from `source`: the
/// finite training set whose size enters the generalization bound. States
/// never drawn get zero mass, so a policy fit to this distribution has
/// genuinely untrained prompts in the source tail.
pub fn empirical_prompt_distribution(source: &[f64], n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(LabError::config("n_train_prompts", "must be >= 1"));
    }
    let mut rng = seeding::stream(&[seed, 0xD1A7]);
    let mut counts = vec![0usize; source.len()];
    for _ in 0..n {
        counts[sample_categorical(source, &mut rng)] += 1;
    }
    Ok(counts.iter().map(|&c| c as f64 / n as f64).collect())
}

/// Monte-Carlo evaluation statistics for a policy under a prompt
/// distribution, including reward-alignment diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalStats {
    pub n: usize,
    pub composite_mean: f64,
    pub composite_stderr: f64,
    pub mixed_component_means: Vec<f64>,
    pub raw_component_means: Vec<f64>,
    pub alpha_hat: Option<f64>,
}

/// Estimate the expected composite reward (and component diagnostics) by
/// `n_rollouts` fresh rollouts, each on its own derived stream.
pub fn mc_eval(
    env: &TaMdp,
    policy: &PolicyParams,
    reward_spec: &RewardSpec,
    dist: &[f64],
    n_rollouts: usize,
    seed: u64,
) -> Result<EvalStats> {
    if n_rollouts < 2 {
        return Err(LabError::config("n_rollouts", "must be >= 2"));
    }
    let sampler = LatentSampler::new(reward_spec.alpha_target, reward_spec.k)?;
    let rows: Vec<Result<(f64, Vec<f64>, Vec<f64>)>> = parallel::map_indexed(n_rollouts, |i| {
        let mut prng = seeding::stream(&[seed, TAG_EVAL_PROMPT, i as u64]);
        let prompt = sample_categorical(dist, &mut prng);
        let mut trng = seeding::stream(&[seed, TAG_EVAL_TRAJ, i as u64]);
        let traj = sample_trajectory(env, policy, prompt, &mut trng)?;
        let latent = sampler.draw(&mut seeding::stream(&[
            seed,
            TAG_EVAL_LATENT,
            i as u64,
            reward_spec.reward_seed,
        ]));
        let mixed = eval_components(&traj, env, reward_spec, &latent)?;
        let raw = eval_raw_components(&traj, env, reward_spec);
        let c = composite(&mixed, &reward_spec.weights)?;
        Ok((c, mixed, raw))
    });
    let mut composites = Vec::with_capacity(n_rollouts);
    let mut mixed_all = Vec::with_capacity(n_rollouts);
    let mut raw_means = vec![0.0; reward_spec.k];
    for r in rows {
        let (c, mixed, raw) = r?;
        composites.push(c);
        for (m, v) in raw_means.iter_mut().zip(&raw) {
            *m += v / n_rollouts as f64;
        }
        mixed_all.push(mixed);
    }
    let nf = n_rollouts as f64;
    let mean = composites.iter().sum::<f64>() / nf;
    let var = composites.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let mut mixed_means = vec![0.0; reward_spec.k];
    for row in &mixed_all {
        for (m, v) in mixed_means.iter_mut().zip(row) {
            *m += v / nf;
        }
    }
    let alpha_hat = estimate_alignment(&mixed_all, &reward_spec.weights)
        .ok()
        .and_then(|e| e.alpha_hat);
    Ok(EvalStats {
        n: n_rollouts,
        composite_mean: mean,
        composite_stderr: (var / nf).sqrt(),
        mixed_component_means: mixed_means,
        raw_component_means: raw_means,
        alpha_hat,
    })
}

/// Draw `n` fresh mixed component vectors under the policy, one derived
/// stream per rollout. Used for alignment estimates with block-split
/// standard errors.
pub fn mc_component_samples(
    env: &TaMdp,
    policy: &PolicyParams,
    reward_spec: &RewardSpec,
    dist: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let sampler = LatentSampler::new(reward_spec.alpha_target, reward_spec.k)?;
    let rows: Vec<Result<Vec<f64>>> = parallel::map_indexed(n, |i| {
        let mut prng = seeding::stream(&[seed, TAG_EVAL_PROMPT, i as u64]);
        let prompt = sample_categorical(dist, &mut prng);
        let mut trng = seeding::stream(&[seed, TAG_EVAL_TRAJ, i as u64]);
        let traj = sample_trajectory(env, policy, prompt, &mut trng)?;
        let latent = sampler.draw(&mut seeding::stream(&[
            seed,
            TAG_EVAL_LATENT,
            i as u64,
            reward_spec.reward_seed,
        ]));
        eval_components(&traj, env, reward_spec, &latent)
    });
    rows.into_iter().collect()
}

/// Alignment estimate with a block-split standard error (8 blocks).
pub fn alignment_with_se(
    samples: &[Vec<f64>],
    weights: &[f64],
) -> Result<(Option<f64>, f64)> {
    let full = estimate_alignment(samples, weights)?;
    let blocks = 8usize.min(samples.len() / 2).max(1);
    let mut vals = Vec::new();
    for b in 0..blocks {
        let lo = b * samples.len() / blocks;
        let hi = (b + 1) * samples.len() / blocks;
        if hi - lo < 2 {
            continue;
        }
        if let Ok(e) = estimate_alignment(&samples[lo..hi], weights) {
            if let Some(a) = e.alpha_hat {
                vals.push(a);
            }
        }
    }
    let se = if vals.len() >= 2 {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vals.len() as f64 - 1.0);
        (var / vals.len() as f64).sqrt()
    } else {
        f64::NAN
    };
    Ok((full.alpha_hat, se))
}

/// Summary of fitting one training run against the convergence bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub gamma_hat: f64,
    pub gamma_stderr: f64,
    pub grad_norm_at_t: f64,
    pub bound_rhs: f64,
    pub effective_sigma2: f64,
    pub iters_to_threshold: Option<usize>,
    pub threshold: f64,
}

/// Joint-vs-decomposed comparison on matched seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub empirical_gap: f64,
    pub gap_stderr: f64,
    pub bound_rhs: f64,
    pub sigma_norm2: f64,
    pub covariances: Vec<Vec<f64>>,
    pub tightness: Option<f64>,
    pub j_joint: f64,
    pub j_dec: f64,
}

/// Train joint and decomposed runs from the same reference and seed, then
/// estimate the composite objective of both final policies with fresh
/// rollouts. The bound side uses covariances and the normalization
/// discrepancy pooled along the joint run.
pub fn measure_decomposition_gap(
    env: &TaMdp,
    reward_spec: &RewardSpec,
    config: &GrpoConfig,
    n_eval: usize,
    run_seed: u64,
) -> Result<DecompositionReport> {
    let reference = PolicyParams::uniform(env);
    let joint_cfg = GrpoConfig {
        mode: OptimMode::Joint,
        ..config.clone()
    };
    let dec_cfg = GrpoConfig {
        mode: OptimMode::Decomposed,
        ..config.clone()
    };
    let (theta_joint, joint_log) =
        grpo_train(env, reward_spec, &joint_cfg, &reference, None, run_seed)?;
    let (theta_dec, _) = grpo_train(env, reward_spec, &dec_cfg, &reference, None, run_seed)?;
    let ej = mc_eval(
        env,
        &theta_joint,
        reward_spec,
        env.initial_dist(),
        n_eval,
        seeding::mix(&[run_seed, 0x41]),
    )?;
    let ed = mc_eval(
        env,
        &theta_dec,
        reward_spec,
        env.initial_dist(),
        n_eval,
        seeding::mix(&[run_seed, 0x42]),
    )?;
    let gap = ej.composite_mean - ed.composite_mean;
    let gap_stderr = (ej.composite_stderr.powi(2) + ed.composite_stderr.powi(2)).sqrt();
    let sigma_norm2 = joint_log.mean_sigma_norm2;
    let bound_rhs = decomposition_bound(
        &joint_log.pooled_cov,
        &reward_spec.weights,
        config.group_size,
        sigma_norm2,
    )?;
    let tightness = if gap > 0.0 { Some(bound_rhs / gap) } else { None };
    Ok(DecompositionReport {
        empirical_gap: gap,
        gap_stderr,
        bound_rhs,
        sigma_norm2,
        covariances: joint_log.pooled_cov.clone(),
        tightness,
        j_joint: ej.composite_mean,
        j_dec: ed.composite_mean,
    })
}

/// Inputs for [`measure_generalization_gap`] beyond the distributions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenGapParams {
    /// Training prompt count plugged into the bound.
    pub n_train: usize,
    pub delta: f64,
    pub ridge: f64,
    pub seed: u64,
}

/// Source/target value gap next to the generalization bound's three terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub v_source: f64,
    pub v_source_stderr: f64,
    pub v_target: f64,
    pub v_target_stderr: f64,
    pub gap: f64,
    pub shift_term: f64,
    pub complexity_term: f64,
    pub group_term: f64,
    pub bound_total: f64,
    pub d_eff: f64,
    pub d_eff_ref: f64,
    pub dims_ratio: f64,
    pub kl_shift: f64,
    pub infinite_kl: bool,
    pub n: usize,
    pub delta: f64,
}

/// Evaluate a trained policy under source and target prompt distributions
/// and assemble the full generalization report, including effective
/// dimensions at both the trained and the reference policy.
#[allow(clippy::too_many_arguments)]
pub fn measure_generalization_gap(
    policy: &PolicyParams,
    ref_policy: &PolicyParams,
    env: &TaMdp,
    reward_spec: &RewardSpec,
    group_size: usize,
    source_dist: &[f64],
    target_dist: &[f64],
    n_rollouts: usize,
    params: &GenGapParams,
) -> Result<GeneralizationReport> {
    let es = mc_eval(
        env,
        policy,
        reward_spec,
        source_dist,
        n_rollouts,
        seeding::mix(&[params.seed, 0x51]),
    )?;
    let et = mc_eval(
        env,
        policy,
        reward_spec,
        target_dist,
        n_rollouts,
        seeding::mix(&[params.seed, 0x52]),
    )?;
    let kl_shift = kl_categorical(target_dist, source_dist);
    let infinite_kl = !kl_shift.is_finite();

    // Fisher matrices are evaluated in closed form: the environment is small
    // enough to propagate the exact decision occupancy, so the effective
    // dimension carries no sampling noise.
    let d_eff = effective_dimension(&FisherPair {
        h_source: exact_fisher(policy, env, source_dist)?,
        h_target: exact_fisher(policy, env, target_dist)?,
        ridge: params.ridge,
    })?;
    let d_eff_ref = effective_dimension(&FisherPair {
        h_source: exact_fisher(ref_policy, env, source_dist)?,
        h_target: exact_fisher(ref_policy, env, target_dist)?,
        ridge: params.ridge,
    })?;

    let d = policy.dim() as f64;
    let (shift, complexity, group, total) = if infinite_kl {
        let (_, complexity, group, _) = generalization_bound(
            reward_spec.r_max(),
            0.0,
            params.n_train,
            d_eff,
            params.delta,
            env.spec().d_max,
            group_size,
        )?;
        (f64::INFINITY, complexity, group, f64::INFINITY)
    } else {
        generalization_bound(
            reward_spec.r_max(),
            kl_shift,
            params.n_train,
            d_eff,
            params.delta,
            env.spec().d_max,
            group_size,
        )?
    };
    Ok(GeneralizationReport {
        v_source: es.composite_mean,
        v_source_stderr: es.composite_stderr,
        v_target: et.composite_mean,
        v_target_stderr: et.composite_stderr,
        gap: (et.composite_mean - es.composite_mean).abs(),
        shift_term: shift,
        complexity_term: complexity,
        group_term: group,
        bound_total: total,
        d_eff,
        d_eff_ref,
        dims_ratio: d_eff / d,
        kl_shift,
        infinite_kl,
        n: params.n_train,
        delta: params.delta,
    })
}
