//! GRPO training: group sampling, group-relative advantages, clipped
//! surrogate with KL penalty, joint vs. decomposed composite-reward modes,
//! and gradient-variance instrumentation.
//!
//! Conventions: the advantage denominator is the population standard
//! deviation (divide by G) plus `norm_eps`; the clipped `min` term is
//! differentiated pathwise, so a clipped-and-worse sample contributes no
//! policy-gradient term; the step size is always `1 / (L sqrt(T))`.

use serde::{Deserialize, Serialize};

use crate::env::{sample_categorical, sample_trajectory, TaMdp, TaMdpSpec, Trajectory};
use crate::error::{LabError, Result};
use crate::parallel;
use crate::policy::PolicyParams;
use crate::rewards::{
    composite, estimate_alignment, eval_components, LatentSampler, RewardSpec,
};
use crate::seeding;

const TAG_PROMPT: u64 = 0x21;
const TAG_TRAJ: u64 = 0x22;
const TAG_LATENT: u64 = 0x23;
const TAG_VAR: u64 = 0x24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimMode {
    /// Advantages of the composite reward, normalized once.
    Joint,
    /// Per-component advantages with per-component normalization, combined
    /// with the component weights; one sampled group is shared across all
    /// components.
    Decomposed,
    /// Raw rewards with a mean baseline and no std normalization (control).
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coef: f64,
    pub norm_eps: f64,
    pub clip_eps: f64,
    pub iters: usize,
    pub lipschitz_estimate: f64,
    pub mode: OptimMode,
    pub inner_epochs: usize,
    pub prompts_per_iter: usize,
    pub opt_seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 16,
            kl_coef: 0.01,
            norm_eps: 1e-4,
            clip_eps: 0.2,
            iters: 1000,
            lipschitz_estimate: 1.0,
            mode: OptimMode::Joint,
            inner_epochs: 1,
            prompts_per_iter: 4,
            opt_seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(LabError::config("optim.group_size", "must be >= 2"));
        }
        if self.kl_coef < 0.0 {
            return Err(LabError::config("optim.kl_coef", "must be >= 0"));
        }
        if self.norm_eps <= 0.0 {
            return Err(LabError::config("optim.norm_eps", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.clip_eps) || self.clip_eps == 0.0 {
            return Err(LabError::config("optim.clip_eps", "must lie in (0, 1)"));
        }
        if self.iters < 1 {
            return Err(LabError::config("optim.iters", "must be >= 1"));
        }
        if self.lipschitz_estimate <= 0.0 {
            return Err(LabError::config("optim.lipschitz_estimate", "must be > 0"));
        }
        if self.inner_epochs < 1 {
            return Err(LabError::config("optim.inner_epochs", "must be >= 1"));
        }
        if self.prompts_per_iter < 1 {
            return Err(LabError::config("optim.prompts_per_iter", "must be >= 1"));
        }
        Ok(())
    }

    /// Derived step size `eta = 1 / (L sqrt(T))`; never stored.
    pub fn step_size(&self) -> f64 {
        1.0 / (self.lipschitz_estimate * (self.iters as f64).sqrt())
    }
}

/// One prompt's group of G responses with their rewards and the sampling
/// policy's log-probabilities.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub prompt_id: usize,
    pub trajectories: Vec<Trajectory>,
    /// G x K.
    pub component_rewards: Vec<Vec<f64>>,
    pub composite_rewards: Vec<f64>,
    pub old_log_probs: Vec<f64>,
}

/// Group-relative advantages: mean-centered, divided by the population
/// standard deviation plus `norm_eps`. All-equal rewards give exact zeros.
pub fn group_advantages(rewards: &[f64], norm_eps: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(LabError::Shape(format!("group size {g} < 2")));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / (std + norm_eps)).collect())
}

/// Mean-baseline advantages without std normalization (plain mode).
fn plain_advantages(rewards: &[f64]) -> Vec<f64> {
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// Mean over the group of `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], clip_eps: f64) -> Result<f64> {
    if ratios.len() != advantages.len() {
        return Err(LabError::Shape("ratios/advantages length mismatch".into()));
    }
    if ratios.iter().any(|&r| r <= 0.0) {
        return Err(LabError::Numeric("non-positive importance ratio".into()));
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a))
        .sum();
    Ok(total / ratios.len() as f64)
}

/// Pathwise clip gate: true when the sample's clipped branch is active and
/// constant in theta, so it contributes no gradient.
fn clipped_out(ratio: f64, advantage: f64, clip_eps: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + clip_eps) || (advantage < 0.0 && ratio < 1.0 - clip_eps)
}

/// Sample a group of G responses for one prompt. Trajectory and latent
/// streams are derived per sample, so rollouts parallelize without sharing
/// generator state.
pub fn sample_group(
    env: &TaMdp,
    policy: &PolicyParams,
    reward_spec: &RewardSpec,
    latent_sampler: &LatentSampler,
    prompt_id: usize,
    group_size: usize,
    seed_parts: &[u64],
) -> Result<GroupBatch> {
    let samples: Vec<Result<(Trajectory, Vec<f64>, f64)>> =
        parallel::map_indexed(group_size, |i| {
            let mut tags = seed_parts.to_vec();
            tags.push(TAG_TRAJ);
            tags.push(i as u64);
            let mut rng = seeding::stream(&tags);
            let mut traj = sample_trajectory(env, policy, prompt_id, &mut rng)?;
            let mut ltags = seed_parts.to_vec();
            ltags.push(TAG_LATENT);
            ltags.push(i as u64);
            ltags.push(reward_spec.reward_seed);
            let latent = latent_sampler.draw(&mut seeding::stream(&ltags));
            let comps = eval_components(&traj, env, reward_spec, &latent)?;
            traj.components = comps.clone();
            let lp = policy.log_prob(env, &traj)?;
            Ok((traj, comps, lp))
        });
    let mut trajectories = Vec::with_capacity(group_size);
    let mut component_rewards = Vec::with_capacity(group_size);
    let mut composite_rewards = Vec::with_capacity(group_size);
    let mut old_log_probs = Vec::with_capacity(group_size);
    for s in samples {
        let (traj, comps, lp) = s?;
        composite_rewards.push(composite(&comps, &reward_spec.weights)?);
        trajectories.push(traj);
        component_rewards.push(comps);
        old_log_probs.push(lp);
    }
    Ok(GroupBatch {
        prompt_id,
        trajectories,
        component_rewards,
        composite_rewards,
        old_log_probs,
    })
}

/// Diagnostics attached to a gradient evaluation.
#[derive(Debug, Clone, Default)]
pub struct GradDiagnostics {
    pub mean_composite: f64,
    pub component_means: Vec<f64>,
    pub kl_value: f64,
    pub clip_fraction: f64,
    pub surrogate: f64,
}

/// Per-sample gradient coefficients for one batch under the configured
/// mode, with the clip gate applied.
fn sample_coefficients(
    batch: &GroupBatch,
    ratios: &[f64],
    config: &GrpoConfig,
    reward_spec: &RewardSpec,
) -> Result<(Vec<f64>, f64)> {
    let g = batch.composite_rewards.len();
    let mut coeffs = vec![0.0; g];
    let mut clipped = 0usize;
    let mut terms = 0usize;
    match config.mode {
        OptimMode::Joint => {
            let adv = group_advantages(&batch.composite_rewards, config.norm_eps)?;
            for i in 0..g {
                terms += 1;
                if clipped_out(ratios[i], adv[i], config.clip_eps) {
                    clipped += 1;
                } else {
                    coeffs[i] = ratios[i] * adv[i];
                }
            }
        }
        OptimMode::Decomposed => {
            for k in 0..reward_spec.k {
                let col: Vec<f64> = batch.component_rewards.iter().map(|r| r[k]).collect();
                let adv = group_advantages(&col, config.norm_eps)?;
                for i in 0..g {
                    terms += 1;
                    if clipped_out(ratios[i], adv[i], config.clip_eps) {
                        clipped += 1;
                    } else {
                        coeffs[i] += reward_spec.weights[k] * ratios[i] * adv[i];
                    }
                }
            }
        }
        OptimMode::Plain => {
            let adv = plain_advantages(&batch.composite_rewards);
            for i in 0..g {
                terms += 1;
                if clipped_out(ratios[i], adv[i], config.clip_eps) {
                    clipped += 1;
                } else {
                    coeffs[i] = ratios[i] * adv[i];
                }
            }
        }
    }
    Ok((coeffs, clipped as f64 / terms.max(1) as f64))
}

/// Accumulate one batch's policy-gradient part, scaled by `scale`, into
/// `out`. Returns the clip fraction.
fn accumulate_batch_gradient(
    policy: &PolicyParams,
    batch: &GroupBatch,
    env: &TaMdp,
    config: &GrpoConfig,
    reward_spec: &RewardSpec,
    scale: f64,
    out: &mut [f64],
) -> Result<f64> {
    let g = batch.trajectories.len();
    let ratios: Vec<f64> = (0..g)
        .map(|i| {
            let lp = policy.log_prob(env, &batch.trajectories[i])?;
            Ok((lp - batch.old_log_probs[i]).exp())
        })
        .collect::<Result<_>>()?;
    let (coeffs, clip_fraction) = sample_coefficients(batch, &ratios, config, reward_spec)?;
    let w = scale / g as f64;
    for (i, traj) in batch.trajectories.iter().enumerate() {
        if coeffs[i] == 0.0 {
            continue;
        }
        for (idx, v) in policy.score_entries(env, traj)? {
            out[idx] += w * coeffs[i] * v;
        }
    }
    Ok(clip_fraction)
}

/// Empirical visitation distribution over policy rows from a set of
/// batches.
pub fn empirical_visitation(env: &TaMdp, batches: &[GroupBatch]) -> Vec<f64> {
    let mut counts = vec![0.0; env.spec().n_policy_states()];
    let mut total = 0.0;
    for b in batches {
        for t in &b.trajectories {
            for s in &t.steps {
                if let Some(row) = env.policy_row(s.state) {
                    counts[row] += 1.0;
                    total += 1.0;
                }
            }
        }
    }
    if total == 0.0 {
        let n = counts.len();
        return vec![1.0 / n as f64; n];
    }
    for c in &mut counts {
        *c /= total;
    }
    counts
}

/// Full GRPO gradient for one batch: mode-dependent policy-gradient part
/// plus the exact KL-penalty gradient under the given visitation.
#[allow(clippy::too_many_arguments)]
pub fn grpo_gradient(
    policy: &PolicyParams,
    batch: &GroupBatch,
    env: &TaMdp,
    config: &GrpoConfig,
    reward_spec: &RewardSpec,
    ref_policy: &PolicyParams,
    visitation: &[f64],
) -> Result<(Vec<f64>, GradDiagnostics)> {
    let mut grad = vec![0.0; policy.dim()];
    let clip_fraction =
        accumulate_batch_gradient(policy, batch, env, config, reward_spec, 1.0, &mut grad)?;
    if config.kl_coef > 0.0 {
        policy.kl_grad(ref_policy, env, visitation, -config.kl_coef, &mut grad)?;
    }
    let g = batch.composite_rewards.len() as f64;
    let mean_composite = batch.composite_rewards.iter().sum::<f64>() / g;
    let mut component_means = vec![0.0; reward_spec.k];
    for r in &batch.component_rewards {
        for (m, &v) in component_means.iter_mut().zip(r) {
            *m += v / g;
        }
    }
    let kl_value = policy.kl_to_ref(ref_policy, env, visitation)?;
    let ratios: Vec<f64> = (0..batch.trajectories.len())
        .map(|i| {
            let lp = policy.log_prob(env, &batch.trajectories[i])?;
            Ok((lp - batch.old_log_probs[i]).exp())
        })
        .collect::<Result<_>>()?;
    let adv = match config.mode {
        OptimMode::Plain => plain_advantages(&batch.composite_rewards),
        _ => group_advantages(&batch.composite_rewards, config.norm_eps)?,
    };
    let surrogate = clipped_surrogate(&ratios, &adv, config.clip_eps)?;
    Ok((
        grad,
        GradDiagnostics {
            mean_composite,
            component_means,
            kl_value,
            clip_fraction,
            surrogate,
        },
    ))
}

/// Per-iteration record of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterRecord {
    pub t: usize,
    pub grad_norm: f64,
    pub objective_estimate: f64,
    pub kl_value: f64,
    pub alpha_hat: Option<f64>,
    pub component_means: Vec<f64>,
    pub grad_variance_estimate: f64,
    pub sigma_norm2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub env: TaMdpSpec,
    pub rewards: RewardSpec,
    pub optim: GrpoConfig,
    pub run_seed: u64,
}

/// Append-only log of a training run, one record per iteration, plus
/// pooled covariance statistics over every reward sample seen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLog {
    pub meta: RunMeta,
    pub records: Vec<IterRecord>,
    /// K x K sample covariance of components pooled over the whole run.
    pub pooled_cov: Vec<Vec<f64>>,
    /// Mean of the per-batch normalization discrepancy over the run.
    pub mean_sigma_norm2: f64,
}

impl RunLog {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let k = self.meta.rewards.k;
        let mut header = vec![
            "t".to_string(),
            "grad_norm".to_string(),
            "objective_estimate".to_string(),
            "kl_value".to_string(),
            "alpha_hat".to_string(),
        ];
        for i in 0..k {
            header.push(format!("component_mean_{}", i + 1));
        }
        header.push("grad_variance_estimate".to_string());
        header.push("sigma_norm2".to_string());
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.t.to_string(),
                format!("{:.17e}", r.grad_norm),
                format!("{:.17e}", r.objective_estimate),
                format!("{:.17e}", r.kl_value),
                r.alpha_hat.map_or(String::new(), |a| format!("{a:.17e}")),
            ];
            for m in &r.component_means {
                row.push(format!("{m:.17e}"));
            }
            row.push(format!("{:.17e}", r.grad_variance_estimate));
            row.push(format!("{:.17e}", r.sigma_norm2));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn grad_norm_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.grad_norm).collect()
    }
}

/// Online pooled covariance accumulator (1/(n-1) convention).
struct CovAccumulator {
    n: usize,
    sum: Vec<f64>,
    prod: Vec<Vec<f64>>,
}

impl CovAccumulator {
    fn new(k: usize) -> Self {
        CovAccumulator {
            n: 0,
            sum: vec![0.0; k],
            prod: vec![vec![0.0; k]; k],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for i in 0..x.len() {
            self.sum[i] += x[i];
            for j in 0..x.len() {
                self.prod[i][j] += x[i] * x[j];
            }
        }
    }

    fn cov(&self) -> Vec<Vec<f64>> {
        let k = self.sum.len();
        let n = self.n as f64;
        let mut out = vec![vec![0.0; k]; k];
        if self.n < 2 {
            return out;
        }
        for i in 0..k {
            for j in 0..k {
                out[i][j] = (self.prod[i][j] - self.sum[i] * self.sum[j] / n) / (n - 1.0);
            }
        }
        out
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Run T iterations of GRPO from `ref_policy`, returning the final policy
/// and the run log. Fully reproducible from (config, seeds).
pub fn grpo_train(
    env: &TaMdp,
    reward_spec: &RewardSpec,
    config: &GrpoConfig,
    ref_policy: &PolicyParams,
    prompt_dist: Option<&[f64]>,
    run_seed: u64,
) -> Result<(PolicyParams, RunLog)> {
    grpo_train_with(env, reward_spec, config, ref_policy, prompt_dist, run_seed, |_, _| {})
}

/// [`grpo_train`] with a per-iteration observer called after each update.
pub fn grpo_train_with<F>(
    env: &TaMdp,
    reward_spec: &RewardSpec,
    config: &GrpoConfig,
    ref_policy: &PolicyParams,
    prompt_dist: Option<&[f64]>,
    run_seed: u64,
    on_iter: F,
) -> Result<(PolicyParams, RunLog)>
where
    F: FnMut(usize, &PolicyParams),
{
    grpo_train_from_with(
        env,
        reward_spec,
        config,
        ref_policy,
        ref_policy,
        prompt_dist,
        run_seed,
        on_iter,
    )
}

/// [`grpo_train_with`] starting from an arbitrary policy instead of the
/// reference itself.
#[allow(clippy::too_many_arguments)]
pub fn grpo_train_from(
    env: &TaMdp,
    reward_spec: &RewardSpec,
    config: &GrpoConfig,
    start: &PolicyParams,
    ref_policy: &PolicyParams,
    prompt_dist: Option<&[f64]>,
    run_seed: u64,
) -> Result<(PolicyParams, RunLog)> {
    grpo_train_from_with(
        env,
        reward_spec,
        config,
        start,
        ref_policy,
        prompt_dist,
        run_seed,
        |_, _| {},
    )
}

#[allow(clippy::too_many_arguments)]
pub fn grpo_train_from_with<F>(
    env: &TaMdp,
    reward_spec: &RewardSpec,
    config: &GrpoConfig,
    start: &PolicyParams,
    ref_policy: &PolicyParams,
    prompt_dist: Option<&[f64]>,
    run_seed: u64,
    mut on_iter: F,
) -> Result<(PolicyParams, RunLog)>
where
    F: FnMut(usize, &PolicyParams),
{
    config.validate()?;
    reward_spec.validate()?;
    ref_policy.check_shape(env)?;
    let dist = prompt_dist.unwrap_or_else(|| env.initial_dist());
    let latent_sampler = LatentSampler::new(reward_spec.alpha_target, reward_spec.k)?;
    let eta = config.step_size();
    let d = ref_policy.dim();
    let p = config.prompts_per_iter;

    start.check_shape(env)?;
    let mut policy = start.clone();
    let mut records = Vec::with_capacity(config.iters);
    let mut cov_acc = CovAccumulator::new(reward_spec.k);
    let mut sigma_norm2_sum = 0.0;

    for t in 0..config.iters {
        let mut prng = seeding::stream(&[run_seed, TAG_PROMPT, t as u64]);
        let prompts: Vec<usize> = (0..p).map(|_| sample_categorical(dist, &mut prng)).collect();

        let batches: Vec<GroupBatch> = {
            let cur = &policy;
            let results: Vec<Result<GroupBatch>> = parallel::map_indexed(p, |pi| {
                sample_group(
                    env,
                    cur,
                    reward_spec,
                    &latent_sampler,
                    prompts[pi],
                    config.group_size,
                    &[run_seed, t as u64, pi as u64],
                )
            });
            results.into_iter().collect::<Result<_>>()?
        };

        let visitation = empirical_visitation(env, &batches);

        // Diagnostics from the freshly sampled batches (ratios are 1 here).
        let mut mean_composite = 0.0;
        let mut component_means = vec![0.0; reward_spec.k];
        let mut sigma_norm2 = 0.0;
        let mut pooled: Vec<Vec<f64>> = Vec::with_capacity(p * config.group_size);
        for b in &batches {
            let g = b.composite_rewards.len() as f64;
            mean_composite += b.composite_rewards.iter().sum::<f64>() / (g * p as f64);
            for r in &b.component_rewards {
                for (m, &v) in component_means.iter_mut().zip(r) {
                    *m += v / (g * p as f64);
                }
                cov_acc.push(r);
                pooled.push(r.clone());
            }
            sigma_norm2 += crate::analysis::estimate_sigma_norm2(
                b,
                &reward_spec.weights,
                config.norm_eps,
            )? / p as f64;
        }
        sigma_norm2_sum += sigma_norm2;
        let alpha_hat = estimate_alignment(&pooled, &reward_spec.weights)
            .ok()
            .and_then(|e| e.alpha_hat);
        let kl_value = policy.kl_to_ref(ref_policy, env, &visitation)?;

        // First-epoch gradient, kept per prompt for the variance estimate.
        let mut first_grad_norm = 0.0;
        for epoch in 0..config.inner_epochs {
            let mut per_prompt: Vec<Vec<f64>> = Vec::with_capacity(p);
            for b in &batches {
                let mut gp = vec![0.0; d];
                accumulate_batch_gradient(
                    &policy,
                    b,
                    env,
                    config,
                    reward_spec,
                    1.0,
                    &mut gp,
                )?;
                per_prompt.push(gp);
            }
            let mut grad = vec![0.0; d];
            for gp in &per_prompt {
                for (g, &v) in grad.iter_mut().zip(gp) {
                    *g += v / p as f64;
                }
            }
            if config.kl_coef > 0.0 {
                policy.kl_grad(ref_policy, env, &visitation, -config.kl_coef, &mut grad)?;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(LabError::TrainingAbort {
                    iter: t,
                    message: "non-finite gradient".into(),
                });
            }
            if epoch == 0 {
                first_grad_norm = l2_norm(&grad);
                let grad_variance_estimate = if p >= 2 {
                    let mut tr = 0.0;
                    for j in 0..d {
                        let mean_j: f64 = per_prompt.iter().map(|g| g[j]).sum::<f64>() / p as f64;
                        let var_j: f64 = per_prompt
                            .iter()
                            .map(|g| (g[j] - mean_j).powi(2))
                            .sum::<f64>()
                            / (p as f64 - 1.0);
                        tr += var_j;
                    }
                    tr / p as f64
                } else {
                    0.0
                };
                records.push(IterRecord {
                    t,
                    grad_norm: first_grad_norm,
                    objective_estimate: mean_composite - config.kl_coef * kl_value,
                    kl_value,
                    alpha_hat,
                    component_means: component_means.clone(),
                    grad_variance_estimate,
                    sigma_norm2,
                });
            }
            policy = policy.apply_update(&grad, eta)?;
        }
        let _ = first_grad_norm;
        on_iter(t, &policy);
    }

    let log = RunLog {
        meta: RunMeta {
            env: env.spec().clone(),
            rewards: reward_spec.clone(),
            optim: config.clone(),
            run_seed,
        },
        records,
        pooled_cov: cov_acc.cov(),
        mean_sigma_norm2: sigma_norm2_sum / config.iters as f64,
    };
    Ok((policy, log))
}

/// Trace of the sample covariance of the gradient estimator over
/// `n_replicates` independent iterations' worth of groups at fixed theta.
pub fn grad_variance(
    policy: &PolicyParams,
    env: &TaMdp,
    reward_spec: &RewardSpec,
    config: &GrpoConfig,
    n_replicates: usize,
    seed: u64,
) -> Result<f64> {
    if n_replicates < 2 {
        return Err(LabError::config("n_replicates", "must be >= 2"));
    }
    let latent_sampler = LatentSampler::new(reward_spec.alpha_target, reward_spec.k)?;
    let dist = env.initial_dist();
    let d = policy.dim();
    let grads: Vec<Result<Vec<f64>>> = parallel::map_indexed(n_replicates, |r| {
        let mut prng = seeding::stream(&[seed, TAG_VAR, r as u64, TAG_PROMPT]);
        let p = config.prompts_per_iter;
        let mut grad = vec![0.0; d];
        for pi in 0..p {
            let prompt = sample_categorical(dist, &mut prng);
            let batch = sample_group(
                env,
                policy,
                reward_spec,
                &latent_sampler,
                prompt,
                config.group_size,
                &[seed, TAG_VAR, r as u64, pi as u64],
            )?;
            accumulate_batch_gradient(
                policy,
                &batch,
                env,
                config,
                reward_spec,
                1.0 / p as f64,
                &mut grad,
            )?;
        }
        Ok(grad)
    });
    let grads: Vec<Vec<f64>> = grads.into_iter().collect::<Result<_>>()?;
    let n = n_replicates as f64;
    let mut trace = 0.0;
    for j in 0..d {
        let mean: f64 = grads.iter().map(|g| g[j]).sum::<f64>() / n;
        trace += grads.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    Ok(trace)
}

/// Crude smoothness probe: max ||grad J(theta + delta) - grad J(theta)|| /
/// ||delta|| over random perturbations, using fixed sampling seeds so the
/// two evaluations share their randomness.
pub fn probe_lipschitz(
    env: &TaMdp,
    reward_spec: &RewardSpec,
    config: &GrpoConfig,
    policy: &PolicyParams,
    ref_policy: &PolicyParams,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    let latent_sampler = LatentSampler::new(reward_spec.alpha_target, reward_spec.k)?;
    let dist = env.initial_dist();
    let d = policy.dim();
    let mut best: f64 = 0.0;
    for probe in 0..n_probes {
        let mut rng = seeding::stream(&[seed, 0x11B, probe as u64]);
        let delta_scale = 0.05;
        let perturbed = policy.perturbed(delta_scale, &mut rng);
        let delta_norm = {
            let mut s = 0.0;
            for i in 0..d {
                let (r, a) = (i / policy.n_actions(), i % policy.n_actions());
                s += (perturbed.logit(r, a) - policy.logit(r, a)).powi(2);
            }
            s.sqrt()
        };
        let grad_at = |theta: &PolicyParams| -> Result<Vec<f64>> {
            let mut prng = seeding::stream(&[seed, 0x11C, probe as u64]);
            let prompt = sample_categorical(dist, &mut prng);
            let batch = sample_group(
                env,
                theta,
                reward_spec,
                &latent_sampler,
                prompt,
                config.group_size,
                &[seed, 0x11D, probe as u64],
            )?;
            let vis = empirical_visitation(env, std::slice::from_ref(&batch));
            let (g, _) = grpo_gradient(theta, &batch, env, config, reward_spec, ref_policy, &vis)?;
            Ok(g)
        };
        let g0 = grad_at(policy)?;
        let g1 = grad_at(&perturbed)?;
        let diff: f64 = g0
            .iter()
            .zip(&g1)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        best = best.max(diff / delta_norm);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, TaMdpSpec};
    use crate::rewards::RewardKind;
    use approx::assert_abs_diff_eq;

    fn env_small() -> TaMdp {
        build_env(&TaMdpSpec {
            n_gen: 10,
            n_tool: 2,
            n_ret: 3,
            n_vocab: 4,
            n_tools: 2,
            d_max: 2,
            gamma: 0.9,
            horizon: 10,
            env_seed: 42,
            branch: 3,
        })
        .unwrap()
    }

    fn spec_k(k: usize, alpha: f64) -> RewardSpec {
        RewardSpec::default_for_k(k, alpha, 5)
    }

    #[test]
    fn group_advantages_examples() {
        let a = group_advantages(&[0.5, 0.5, 0.5], 0.3).unwrap();
        assert_eq!(a, vec![0.0, 0.0, 0.0]);
        // (1, 0): mean 0.5, population std 0.5.
        let a = group_advantages(&[1.0, 0.0], 0.0).unwrap();
        assert_abs_diff_eq!(a[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], -1.0, epsilon = 1e-12);
        // Positive-affine invariance at eps = 0.
        let b = group_advantages(&[3.0, 1.0], 0.0).unwrap();
        assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-9);
        assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-9);
        assert!(group_advantages(&[1.0], 0.0).is_err());
    }

    #[test]
    fn group_advantages_mean_zero_unit_std() {
        let rewards = [0.3, 0.9, 0.1, 0.5, 0.7];
        let a = group_advantages(&rewards, 0.0).unwrap();
        let g = a.len() as f64;
        let mean = a.iter().sum::<f64>() / g;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        let var = a.iter().map(|x| x * x).sum::<f64>() / g;
        assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn clipped_surrogate_examples() {
        // All ratios 1: clip inactive, mean of centered advantages is 0.
        let adv = group_advantages(&[1.0, 0.0, 0.5, 0.25], 1e-4).unwrap();
        let ones = vec![1.0; 4];
        assert_abs_diff_eq!(
            clipped_surrogate(&ones, &adv, 0.2).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            clipped_surrogate(&[2.0], &[1.0], 0.2).unwrap(),
            1.2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            clipped_surrogate(&[0.5], &[-1.0], 0.2).unwrap(),
            -0.8,
            epsilon = 1e-12
        );
        assert!(clipped_surrogate(&[0.0], &[1.0], 0.2).is_err());
    }

    #[test]
    fn equal_rewards_leave_only_kl_term() {
        let env = env_small();
        // tool_exec is constantly 1, so every composite reward is equal.
        let spec = RewardSpec {
            k: 1,
            weights: vec![1.0],
            kinds: vec![RewardKind::ToolExec],
            alpha_target: 0.0,
            reward_seed: 5,
        };
        let mut rng = seeding::stream(&[1]);
        let policy = PolicyParams::uniform(&env).perturbed(0.5, &mut rng);
        let reference = PolicyParams::uniform(&env);
        let config = GrpoConfig {
            kl_coef: 0.05,
            ..GrpoConfig::default()
        };
        let sampler = LatentSampler::new(0.0, 1).unwrap();
        let batch =
            sample_group(&env, &policy, &spec, &sampler, 1, 8, &[9, 0, 0]).unwrap();
        let vis = empirical_visitation(&env, std::slice::from_ref(&batch));
        let (grad, _) =
            grpo_gradient(&policy, &batch, &env, &config, &spec, &reference, &vis).unwrap();
        let mut kl_only = vec![0.0; policy.dim()];
        policy
            .kl_grad(&reference, &env, &vis, -config.kl_coef, &mut kl_only)
            .unwrap();
        for (a, b) in grad.iter().zip(&kl_only) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_matches_straight_line_estimator_at_ratio_one() {
        // beta = 0, fresh batch: gradient must equal (1/G) sum A_i score_i,
        // recomputed by an independent straight-line loop.
        let env = env_small();
        let spec = spec_k(2, 0.0);
        let mut rng = seeding::stream(&[2]);
        let policy = PolicyParams::uniform(&env).perturbed(0.5, &mut rng);
        let config = GrpoConfig {
            kl_coef: 0.0,
            ..GrpoConfig::default()
        };
        let sampler = LatentSampler::new(0.0, 2).unwrap();
        let batch =
            sample_group(&env, &policy, &spec, &sampler, 1, 8, &[10, 0, 0]).unwrap();
        let vis = empirical_visitation(&env, std::slice::from_ref(&batch));
        let (grad, _) =
            grpo_gradient(&policy, &batch, &env, &config, &spec, &policy, &vis).unwrap();
        let adv = group_advantages(&batch.composite_rewards, config.norm_eps).unwrap();
        let mut expect = vec![0.0; policy.dim()];
        for (i, t) in batch.trajectories.iter().enumerate() {
            let s = policy.grad_log_prob(&env, t).unwrap();
            for (e, &sv) in expect.iter_mut().zip(&s) {
                *e += adv[i] * sv / 8.0;
            }
        }
        for (a, b) in grad.iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn joint_equals_decomposed_at_k1() {
        let env = env_small();
        let spec = spec_k(1, 0.0);
        let mut rng = seeding::stream(&[3]);
        let policy = PolicyParams::uniform(&env).perturbed(0.5, &mut rng);
        let sampler = LatentSampler::new(0.0, 1).unwrap();
        for trial in 0..5u64 {
            let batch =
                sample_group(&env, &policy, &spec, &sampler, 2, 8, &[20, trial, 0]).unwrap();
            let vis = empirical_visitation(&env, std::slice::from_ref(&batch));
            let joint = GrpoConfig {
                mode: OptimMode::Joint,
                kl_coef: 0.0,
                ..GrpoConfig::default()
            };
            let dec = GrpoConfig {
                mode: OptimMode::Decomposed,
                kl_coef: 0.0,
                ..GrpoConfig::default()
            };
            let (gj, _) =
                grpo_gradient(&policy, &batch, &env, &joint, &spec, &policy, &vis).unwrap();
            let (gd, _) =
                grpo_gradient(&policy, &batch, &env, &dec, &spec, &policy, &vis).unwrap();
            for (a, b) in gj.iter().zip(&gd) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn train_is_deterministic() {
        let env = env_small();
        let spec = spec_k(2, 0.3);
        let config = GrpoConfig {
            iters: 5,
            prompts_per_iter: 2,
            group_size: 4,
            ..GrpoConfig::default()
        };
        let reference = PolicyParams::uniform(&env);
        let (p1, l1) = grpo_train(&env, &spec, &config, &reference, None, 7).unwrap();
        let (p2, l2) = grpo_train(&env, &spec, &config, &reference, None, 7).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(
            serde_json::to_string(&l1.records).unwrap(),
            serde_json::to_string(&l2.records).unwrap()
        );
        assert_eq!(l1.records.len(), config.iters);
        assert!(l1.records.windows(2).all(|w| w[1].t == w[0].t + 1));
    }

    #[test]
    fn zero_variance_reward_keeps_policy_fixed() {
        let env = env_small();
        let spec = RewardSpec {
            k: 1,
            weights: vec![1.0],
            kinds: vec![RewardKind::ToolExec],
            alpha_target: 0.0,
            reward_seed: 5,
        };
        let config = GrpoConfig {
            iters: 1,
            kl_coef: 0.0,
            ..GrpoConfig::default()
        };
        let reference = PolicyParams::uniform(&env);
        let (p, _) = grpo_train(&env, &spec, &config, &reference, None, 3).unwrap();
        assert_eq!(p, reference);
    }

    #[test]
    fn kl_only_training_contracts_toward_reference() {
        let env = env_small();
        let spec = RewardSpec {
            k: 1,
            weights: vec![1.0],
            kinds: vec![RewardKind::ToolExec],
            alpha_target: 0.0,
            reward_seed: 5,
        };
        let config = GrpoConfig {
            iters: 300,
            kl_coef: 0.5,
            lipschitz_estimate: 0.2,
            prompts_per_iter: 2,
            group_size: 4,
            ..GrpoConfig::default()
        };
        let reference = PolicyParams::uniform(&env);
        let mut rng = seeding::stream(&[4]);
        let start = reference.perturbed(1.0, &mut rng);
        // Train from the perturbed start with the uniform reference.
        let (final_policy, _) = grpo_train_from(
            &env,
            &spec,
            &config,
            &start,
            &reference,
            None,
            11,
        )
        .unwrap();
        let n = reference.n_rows();
        let vis = vec![1.0 / n as f64; n];
        let before = start.kl_to_ref(&reference, &env, &vis).unwrap();
        let after = final_policy.kl_to_ref(&reference, &env, &vis).unwrap();
        assert!(after <= before, "KL grew: {before} -> {after}");
    }

    #[test]
    fn grad_variance_zero_for_deterministic_everything() {
        let env = env_small();
        let spec = RewardSpec {
            k: 1,
            weights: vec![1.0],
            kinds: vec![RewardKind::ToolExec],
            alpha_target: 0.0,
            reward_seed: 5,
        };
        let mut policy = PolicyParams::uniform(&env);
        for row in 0..policy.n_rows() {
            policy.set_logit(row, 2, 200.0);
        }
        let config = GrpoConfig::default();
        let v = grad_variance(&policy, &env, &spec, &config, 10, 1).unwrap();
        assert!(v <= 1e-12, "variance = {v:e}");
    }
}
