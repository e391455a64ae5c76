//! Composite verifiable reward components with a controllable
//! cross-component correlation dial, composite evaluation, and the
//! alignment statistic.
//!
//! Raw components are deterministic functions of a completed trajectory:
//! - `format`: the action sequence contains the open marker (action 0)
//!   before the close marker (action 1);
//! - `accuracy`: goal proximity `max(0, 1 - dist(terminal, goal)/diameter)`
//!   on the environment's decision graph;
//! - `tool_exec`: every issued tool call executed (deterministic tools make
//!   this 1 unless an out-of-range action is recorded).
//!
//! A correlated latent perturbs components toward the target alignment:
//! `R_k <- clamp(rho * latent_k + (1 - rho) * raw_k, 0, 1)` with
//! `rho = |alpha_target|`, so components stay purely verifiable at
//! `alpha_target = 0`.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::env::{TaMdp, Trajectory};
use crate::error::{LabError, Result};
use crate::policy::standard_normal;
use crate::seeding;

pub const OPEN_MARKER: usize = 0;
pub const CLOSE_MARKER: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Format,
    Accuracy,
    ToolExec,
}

/// K components, weights summing to `r_max`, and the correlation dial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub k: usize,
    pub weights: Vec<f64>,
    pub kinds: Vec<RewardKind>,
    pub alpha_target: f64,
    pub reward_seed: u64,
}

impl RewardSpec {
    /// Uniform-weight spec with kinds alternating format and accuracy. The
    /// tool_exec kind is excluded from defaults because deterministic tools
    /// make it constant, which would add inert components.
    pub fn default_for_k(k: usize, alpha_target: f64, reward_seed: u64) -> Self {
        let cycle = [RewardKind::Format, RewardKind::Accuracy];
        RewardSpec {
            k,
            weights: vec![1.0; k],
            kinds: (0..k).map(|i| cycle[i % cycle.len()]).collect(),
            alpha_target,
            reward_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(LabError::config("rewards.k", "must be >= 1"));
        }
        if self.weights.len() != self.k || self.kinds.len() != self.k {
            return Err(LabError::config(
                "rewards.weights/kinds",
                format!("must have length k = {}", self.k),
            ));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(LabError::config("rewards.weights", "must be positive"));
        }
        if self.alpha_target.abs() > 0.95 {
            return Err(LabError::config(
                "rewards.alpha_target",
                "must lie in [-0.95, 0.95]",
            ));
        }
        check_equicorrelation(self.alpha_target, self.k)?;
        Ok(())
    }

    /// Maximum composite reward: the sum of the weights.
    pub fn r_max(&self) -> f64 {
        self.weights.iter().sum()
    }
}

fn check_equicorrelation(alpha: f64, k: usize) -> Result<()> {
    if k > 1 && alpha <= -1.0 / (k as f64 - 1.0) {
        return Err(LabError::config(
            "rewards.alpha_target",
            format!(
                "{} is below the equicorrelation floor -1/(K-1) = {} for K = {}",
                alpha,
                -1.0 / (k as f64 - 1.0),
                k
            ),
        ));
    }
    Ok(())
}

/// Raw (latent-free) component values for a completed trajectory.
pub fn eval_raw_components(traj: &Trajectory, env: &TaMdp, spec: &RewardSpec) -> Vec<f64> {
    spec.kinds
        .iter()
        .map(|kind| match kind {
            RewardKind::Format => format_score(traj),
            RewardKind::Accuracy => accuracy_score(traj, env),
            RewardKind::ToolExec => tool_exec_score(traj, env),
        })
        .collect()
}

fn format_score(traj: &Trajectory) -> f64 {
    let open = traj
        .steps
        .iter()
        .position(|s| s.action == OPEN_MARKER);
    match open {
        Some(i) => {
            let closed = traj.steps[i + 1..].iter().any(|s| s.action == CLOSE_MARKER);
            if closed {
                1.0
            } else {
                0.0
            }
        }
        None => 0.0,
    }
}

fn accuracy_score(traj: &Trajectory, env: &TaMdp) -> f64 {
    let goal = env.goal_state(traj.prompt_id);
    match env.distance(traj.terminal_state, goal) {
        Some(d) => (1.0 - d as f64 / env.diameter() as f64).max(0.0),
        None => 0.0,
    }
}

/// Indicator that every issued tool call executed. Tools are deterministic
/// and disabled tools are masked at sampling time, so any recorded action
/// outside the environment's action range marks a failed call.
fn tool_exec_score(traj: &Trajectory, env: &TaMdp) -> f64 {
    let max_action = env.spec().n_actions();
    if traj.steps.iter().all(|s| s.action < max_action) {
        1.0
    } else {
        0.0
    }
}

/// Component values in [0,1]^K after mixing with the correlated latent.
pub fn eval_components(
    traj: &Trajectory,
    env: &TaMdp,
    spec: &RewardSpec,
    latent: &[f64],
) -> Result<Vec<f64>> {
    if latent.len() != spec.k {
        return Err(LabError::Shape(format!(
            "latent length {} != K = {}",
            latent.len(),
            spec.k
        )));
    }
    let rho = spec.alpha_target.abs();
    let raw = eval_raw_components(traj, env, spec);
    Ok(raw
        .iter()
        .zip(latent)
        .map(|(&r, &l)| (rho * l + (1.0 - rho) * r).clamp(0.0, 1.0))
        .collect())
}

/// Weighted sum of components; lies in [0, r_max].
pub fn composite(components: &[f64], weights: &[f64]) -> Result<f64> {
    if components.len() != weights.len() {
        return Err(LabError::Shape(format!(
            "components length {} != weights length {}",
            components.len(),
            weights.len()
        )));
    }
    Ok(components.iter().zip(weights).map(|(c, w)| c * w).sum())
}

/// Draws equicorrelated uniform K-vectors: Gaussian latents with pairwise
/// correlation `alpha_target`, mapped through the standard normal CDF.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    k: usize,
    a: f64,
    b: f64,
}

impl LatentSampler {
    pub fn new(alpha_target: f64, k: usize) -> Result<Self> {
        if alpha_target.abs() > 0.95 {
            return Err(LabError::config(
                "alpha_target",
                "must lie in [-0.95, 0.95]",
            ));
        }
        check_equicorrelation(alpha_target, k)?;
        // x = a z + b (sum z) gives an exact equicorrelation covariance:
        // a = sqrt(1 - rho), b = (sqrt(1 - rho + K rho) - a) / K.
        let rho = alpha_target;
        let a = (1.0 - rho).sqrt();
        let b = ((1.0 - rho + k as f64 * rho).sqrt() - a) / k as f64;
        Ok(LatentSampler { k, a, b })
    }

    pub fn draw(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let z: Vec<f64> = (0..self.k).map(|_| standard_normal(rng)).collect();
        let s: f64 = z.iter().sum();
        z.iter().map(|&zi| normal_cdf(self.a * zi + self.b * s)).collect()
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Batch draw of `n` correlated uniform K-vectors.
pub fn make_latents(
    alpha_target: f64,
    k: usize,
    reward_seed: u64,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    let sampler = LatentSampler::new(alpha_target, k)?;
    let mut rng = seeding::stream(&[reward_seed, 0x1A7E]);
    Ok((0..n).map(|_| sampler.draw(&mut rng)).collect())
}

/// The alignment statistic with its numerator and denominator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentEstimate {
    /// `None` when the composite variance is degenerate.
    pub alpha_hat: Option<f64>,
    pub n_samples: usize,
    pub numerator: f64,
    pub denominator: f64,
}

/// Sample covariance matrix of component vectors, 1/(n-1) convention.
pub fn component_covariance(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = samples.len();
    let k = samples.first().map_or(0, |s| s.len());
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; k]; k];
    for s in samples {
        for i in 0..k {
            for j in 0..k {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for row in &mut cov {
        for v in row {
            *v /= denom;
        }
    }
    cov
}

/// Weighted pairwise component covariance over composite variance.
pub fn estimate_alignment(samples: &[Vec<f64>], weights: &[f64]) -> Result<AlignmentEstimate> {
    if samples.len() < 2 {
        return Err(LabError::Shape("need at least 2 samples".into()));
    }
    let k = weights.len();
    if samples.iter().any(|s| s.len() != k) {
        return Err(LabError::Shape("sample length != weights length".into()));
    }
    let cov = component_covariance(samples);
    let mut numerator = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            numerator += weights[i] * weights[j] * cov[i][j];
        }
    }
    // Var of the composite, computed directly from composite samples.
    let comps: Vec<f64> = samples
        .iter()
        .map(|s| s.iter().zip(weights).map(|(c, w)| c * w).sum())
        .collect();
    let mean = comps.iter().sum::<f64>() / comps.len() as f64;
    let denominator =
        comps.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (comps.len() - 1) as f64;
    let alpha_hat = (denominator > 1e-12).then(|| numerator / denominator);
    Ok(AlignmentEstimate {
        alpha_hat,
        n_samples: samples.len(),
        numerator,
        denominator,
    })
}
