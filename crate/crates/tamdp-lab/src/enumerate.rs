//! Brute-force reference routines for the test suites.
//!
//! Everything here works by exhaustively enumerating the trajectories of a
//! tiny instance straight from the kernel tables, with gradients taken by
//! central finite differences of enumerated expectations. None of it goes
//! through the samplers or estimators it is used to check, so it can serve
//! as an independent oracle. Costs are exponential in the horizon; only use
//! on micro-instances.

use crate::env::{StateKind, Step, TaMdp, Trajectory};
use crate::policy::PolicyParams;

/// An enumerated trajectory with its total probability (policy times
/// kernel) and its policy-only probability.
#[derive(Debug, Clone)]
pub struct WeightedTrajectory {
    pub traj: Trajectory,
    pub prob: f64,
    pub policy_prob: f64,
}

/// Enumerate every trajectory from `prompt` with its exact probability.
pub fn enumerate_trajectories(
    env: &TaMdp,
    policy: &PolicyParams,
    prompt: usize,
) -> Vec<WeightedTrajectory> {
    let mut out = Vec::new();
    let mut steps = Vec::new();
    walk(env, policy, prompt, prompt, 0, 1.0, 1.0, &mut steps, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn walk(
    env: &TaMdp,
    policy: &PolicyParams,
    prompt: usize,
    state: usize,
    depth: usize,
    prob: f64,
    policy_prob: f64,
    steps: &mut Vec<Step>,
    out: &mut Vec<WeightedTrajectory>,
) {
    let spec = env.spec();
    if env.terminal(state) || steps.len() == spec.horizon {
        emit(prompt, state, depth, prob, policy_prob, steps, out);
        return;
    }
    let tools = env.tools_enabled(state, depth);
    let row = env.policy_row(state).expect("policy state");
    let probs = policy.action_probs(env, row, tools);
    let n = if tools { spec.n_actions() } else { spec.n_vocab };
    for a in 0..n {
        let pa = probs[a];
        if pa == 0.0 {
            continue;
        }
        steps.push(Step { state, action: a });
        if a == spec.stop_action() {
            emit(prompt, state, depth, prob * pa, policy_prob * pa, steps, out);
        } else if a >= spec.n_vocab {
            let (_, ret) = env.tool_hop(state, a - spec.n_vocab);
            walk(
                env,
                policy,
                prompt,
                ret,
                depth + 1,
                prob * pa,
                policy_prob * pa,
                steps,
                out,
            );
        } else {
            for &(succ, q) in env.transition_row(state, a) {
                walk(
                    env,
                    policy,
                    prompt,
                    succ,
                    depth,
                    prob * pa * q,
                    policy_prob * pa,
                    steps,
                    out,
                );
            }
        }
        steps.pop();
    }
}

fn emit(
    prompt: usize,
    state: usize,
    depth: usize,
    prob: f64,
    policy_prob: f64,
    steps: &[Step],
    out: &mut Vec<WeightedTrajectory>,
) {
    out.push(WeightedTrajectory {
        traj: Trajectory {
            steps: steps.to_vec(),
            depth,
            terminal_state: state,
            prompt_id: prompt,
            components: Vec::new(),
        },
        prob,
        policy_prob,
    });
}

/// Exact expected reward from `prompt` under the policy.
pub fn exact_expected_reward<F>(env: &TaMdp, policy: &PolicyParams, prompt: usize, reward: F) -> f64
where
    F: Fn(&Trajectory) -> f64,
{
    enumerate_trajectories(env, policy, prompt)
        .iter()
        .map(|w| w.prob * reward(&w.traj))
        .sum()
}

/// Exact policy gradient of the expected reward, by central finite
/// differences of the enumerated expectation. Fully independent of the
/// analytic score path.
pub fn exact_policy_gradient<F>(
    env: &TaMdp,
    policy: &PolicyParams,
    prompt: usize,
    reward: F,
    h: f64,
) -> Vec<f64>
where
    F: Fn(&Trajectory) -> f64 + Copy,
{
    let d = policy.dim();
    let na = policy.n_actions();
    let mut grad = vec![0.0; d];
    for i in 0..d {
        let (r, a) = (i / na, i % na);
        let mut plus = policy.clone();
        let mut minus = policy.clone();
        plus.set_logit(r, a, policy.logit(r, a) + h);
        minus.set_logit(r, a, policy.logit(r, a) - h);
        grad[i] = (exact_expected_reward(env, &plus, prompt, reward)
            - exact_expected_reward(env, &minus, prompt, reward))
            / (2.0 * h);
    }
    grad
}

/// Policy-only probability of a trajectory, recomputed straight-line from
/// masked softmax rows.
pub fn policy_only_prob(env: &TaMdp, policy: &PolicyParams, traj: &Trajectory) -> f64 {
    let spec = env.spec();
    let mut depth = 0usize;
    let mut p = 1.0;
    for step in &traj.steps {
        assert_ne!(env.state_kind(step.state), StateKind::ToolInvocation);
        let tools = env.tools_enabled(step.state, depth);
        let row = env.policy_row(step.state).unwrap();
        p *= policy.action_probs(env, row, tools)[step.action];
        if step.action >= spec.n_vocab {
            depth += 1;
        }
    }
    p
}

/// Exact Fisher information at `policy` under a prompt distribution,
/// with scores taken by finite differences of the enumerated log policy
/// probability.
pub fn exact_fisher(
    env: &TaMdp,
    policy: &PolicyParams,
    prompt_dist: &[f64],
    h: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = policy.dim();
    let na = policy.n_actions();
    let mut mean = vec![vec![0.0; d]; d];
    let mut second = vec![vec![0.0; d]; d]; // E[(s_i s_j)^2] for SE bands
    for (prompt, &pp) in prompt_dist.iter().enumerate() {
        if pp == 0.0 {
            continue;
        }
        for w in enumerate_trajectories(env, policy, prompt) {
            let mut score = vec![0.0; d];
            for i in 0..d {
                let (r, a) = (i / na, i % na);
                let mut plus = policy.clone();
                let mut minus = policy.clone();
                plus.set_logit(r, a, policy.logit(r, a) + h);
                minus.set_logit(r, a, policy.logit(r, a) - h);
                score[i] = (policy_only_prob(env, &plus, &w.traj).ln()
                    - policy_only_prob(env, &minus, &w.traj).ln())
                    / (2.0 * h);
            }
            for i in 0..d {
                for j in 0..d {
                    let v = score[i] * score[j];
                    mean[i][j] += pp * w.prob * v;
                    second[i][j] += pp * w.prob * v * v;
                }
            }
        }
    }
    (mean, second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, TaMdpSpec};

    fn micro_env() -> TaMdp {
        build_env(&TaMdpSpec {
            n_gen: 2,
            n_tool: 0,
            n_ret: 0,
            n_vocab: 2,
            n_tools: 0,
            d_max: 0,
            gamma: 0.9,
            horizon: 2,
            env_seed: 13,
            branch: 1,
        })
        .unwrap()
    }

    #[test]
    fn probabilities_sum_to_one() {
        let env = micro_env();
        let mut rng = crate::seeding::stream(&[1]);
        let policy = PolicyParams::uniform(&env).perturbed(0.5, &mut rng);
        for prompt in 0..2 {
            let total: f64 = enumerate_trajectories(&env, &policy, prompt)
                .iter()
                .map(|w| w.prob)
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "total = {total}");
        }
    }

    #[test]
    fn enumeration_matches_monte_carlo_value() {
        let env = micro_env();
        let mut rng = crate::seeding::stream(&[2]);
        let policy = PolicyParams::uniform(&env).perturbed(0.5, &mut rng);
        let reward = |t: &Trajectory| t.steps.len() as f64;
        let exact = exact_expected_reward(&env, &policy, 0, reward);
        let n = 200_000;
        let mut acc = 0.0;
        for i in 0..n {
            let mut r = crate::seeding::stream(&[3, i]);
            let t = crate::env::sample_trajectory(&env, &policy, 0, &mut r).unwrap();
            acc += reward(&t);
        }
        let mc = acc / n as f64;
        assert!((exact - mc).abs() < 0.01, "exact {exact} vs mc {mc}");
    }
}
