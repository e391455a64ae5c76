//! Tabular softmax policies with exact log-probabilities, score vectors,
//! KL divergence to a reference, and Monte-Carlo Fisher information.
//!
//! One logits row per generation/return state, one column per action
//! (vocabulary plus tools). Action masks are recomputed from the trajectory
//! itself, so log-probabilities and scores are exact for the distribution
//! the sampler actually used.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::env::{sample_categorical, sample_trajectory, TaMdp, Trajectory};
use crate::error::{LabError, Result};
use crate::parallel;
use crate::seeding;

/// Immutable parameter snapshot. Updates produce new snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    logits: Vec<f64>,
    n_rows: usize,
    n_actions: usize,
}

impl PolicyParams {
    /// All-zero logits: uniform over every allowed action set.
    pub fn uniform(env: &TaMdp) -> Self {
        let spec = env.spec();
        PolicyParams {
            logits: vec![0.0; spec.n_policy_states() * spec.n_actions()],
            n_rows: spec.n_policy_states(),
            n_actions: spec.n_actions(),
        }
    }

    pub fn from_logits(logits: Vec<f64>, n_rows: usize, n_actions: usize) -> Result<Self> {
        if logits.len() != n_rows * n_actions {
            return Err(LabError::Shape(format!(
                "logits length {} != {} rows x {} actions",
                logits.len(),
                n_rows,
                n_actions
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(LabError::Numeric("non-finite logit".into()));
        }
        Ok(PolicyParams {
            logits,
            n_rows,
            n_actions,
        })
    }

    /// Total parameter count d.
    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logit(&self, row: usize, action: usize) -> f64 {
        self.logits[row * self.n_actions + action]
    }

    pub fn set_logit(&mut self, row: usize, action: usize, value: f64) {
        self.logits[row * self.n_actions + action] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.logits
    }

    /// Gaussian perturbation of every logit, scale `sigma`.
    pub fn perturbed(&self, sigma: f64, rng: &mut ChaCha12Rng) -> Self {
        let mut out = self.clone();
        for x in &mut out.logits {
            *x += sigma * standard_normal(rng);
        }
        out
    }

    pub fn check_shape(&self, env: &TaMdp) -> Result<()> {
        let spec = env.spec();
        if self.n_rows != spec.n_policy_states() || self.n_actions != spec.n_actions() {
            return Err(LabError::Shape(format!(
                "policy is {}x{}, env wants {}x{}",
                self.n_rows,
                self.n_actions,
                spec.n_policy_states(),
                spec.n_actions()
            )));
        }
        Ok(())
    }

    /// Number of actions allowed in a row given tool availability.
    fn allowed(&self, env: &TaMdp, tools: bool) -> usize {
        if tools {
            self.n_actions
        } else {
            env.spec().n_vocab
        }
    }

    /// Masked softmax probabilities for one row. Entries past the allowed
    /// prefix are zero.
    pub fn action_probs(&self, env: &TaMdp, row: usize, tools: bool) -> Vec<f64> {
        let n = self.allowed(env, tools);
        let base = row * self.n_actions;
        let slice = &self.logits[base..base + n];
        let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = slice.iter().map(|&x| (x - max).exp()).collect();
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
        probs.resize(self.n_actions, 0.0);
        probs
    }

    pub fn sample_action(
        &self,
        env: &TaMdp,
        row: usize,
        tools: bool,
        rng: &mut ChaCha12Rng,
    ) -> usize {
        let n = self.allowed(env, tools);
        let probs = self.action_probs(env, row, tools);
        sample_categorical(&probs[..n], rng)
    }

    /// Sum of per-decision log softmax probabilities over policy-controlled
    /// steps. Tool-execution hops contribute zero.
    pub fn log_prob(&self, env: &TaMdp, traj: &Trajectory) -> Result<f64> {
        self.check_shape(env)?;
        let n_vocab = env.spec().n_vocab;
        let mut depth = 0usize;
        let mut total = 0.0;
        for step in &traj.steps {
            let tools = env.tools_enabled(step.state, depth);
            let row = env
                .policy_row(step.state)
                .ok_or_else(|| LabError::Shape("decision at tool-invocation state".into()))?;
            let probs = self.action_probs(env, row, tools);
            let p = probs[step.action];
            if p <= 0.0 {
                return Err(LabError::Numeric(format!(
                    "action {} has zero probability at state {}",
                    step.action, step.state
                )));
            }
            total += p.ln();
            if step.action >= n_vocab {
                depth += 1;
            }
        }
        Ok(total)
    }

    /// Sparse score entries (flat parameter index, value) for a trajectory:
    /// one-hot-minus-softmax per visited decision, summed.
    pub fn score_entries(&self, env: &TaMdp, traj: &Trajectory) -> Result<Vec<(usize, f64)>> {
        self.check_shape(env)?;
        let n_vocab = env.spec().n_vocab;
        let mut depth = 0usize;
        // Accumulate per (row, action); trajectories are short so a flat
        // assoc list is enough.
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for step in &traj.steps {
            let tools = env.tools_enabled(step.state, depth);
            let row = env
                .policy_row(step.state)
                .ok_or_else(|| LabError::Shape("decision at tool-invocation state".into()))?;
            let n = self.allowed(env, tools);
            let probs = self.action_probs(env, row, tools);
            for a in 0..n {
                let v = if a == step.action { 1.0 - probs[a] } else { -probs[a] };
                let idx = row * self.n_actions + a;
                match entries.iter_mut().find(|(i, _)| *i == idx) {
                    Some((_, acc)) => *acc += v,
                    None => entries.push((idx, v)),
                }
            }
            if step.action >= n_vocab {
                depth += 1;
            }
        }
        Ok(entries)
    }

    /// Dense exact score vector of length d.
    pub fn grad_log_prob(&self, env: &TaMdp, traj: &Trajectory) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        for (i, v) in self.score_entries(env, traj)? {
            out[i] += v;
        }
        Ok(out)
    }

    /// Visitation-weighted exact KL divergence to a reference policy:
    /// sum over rows of `visitation(row) * KL(pi(.|s) || ref(.|s))`.
    pub fn kl_to_ref(
        &self,
        reference: &PolicyParams,
        env: &TaMdp,
        visitation: &[f64],
    ) -> Result<f64> {
        self.check_visitation(reference, visitation)?;
        let mut total = 0.0;
        for (row, &v) in visitation.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            total += v * self.row_kl(reference, env, row);
        }
        Ok(total)
    }

    /// Accumulate `scale * grad_theta KL(pi || ref)` into `out`.
    pub fn kl_grad(
        &self,
        reference: &PolicyParams,
        env: &TaMdp,
        visitation: &[f64],
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_visitation(reference, visitation)?;
        for (row, &v) in visitation.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let state = env.row_state(row);
            let tools = env.tools_enabled_default(state);
            let n = self.allowed(env, tools);
            let p = self.action_probs(env, row, tools);
            let q = reference.action_probs(env, row, tools);
            let mut kl = 0.0;
            let mut t = vec![0.0; n];
            for a in 0..n {
                t[a] = (p[a] / q[a]).ln();
                kl += p[a] * t[a];
            }
            for a in 0..n {
                out[row * self.n_actions + a] += scale * v * p[a] * (t[a] - kl);
            }
        }
        Ok(())
    }

    fn row_kl(&self, reference: &PolicyParams, env: &TaMdp, row: usize) -> f64 {
        let state = env.row_state(row);
        let tools = env.tools_enabled_default(state);
        let n = self.allowed(env, tools);
        let p = self.action_probs(env, row, tools);
        let q = reference.action_probs(env, row, tools);
        (0..n).map(|a| p[a] * (p[a] / q[a]).ln()).sum()
    }

    fn check_visitation(&self, reference: &PolicyParams, visitation: &[f64]) -> Result<()> {
        if reference.n_rows != self.n_rows || reference.n_actions != self.n_actions {
            return Err(LabError::Shape("policy/reference shape mismatch".into()));
        }
        if visitation.len() != self.n_rows {
            return Err(LabError::Shape(format!(
                "visitation length {} != {} rows",
                visitation.len(),
                self.n_rows
            )));
        }
        let sum: f64 = visitation.iter().sum();
        if visitation.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(LabError::Numeric(format!(
                "visitation is not a distribution (sum = {sum})"
            )));
        }
        Ok(())
    }

    /// Gradient-ascent step: returns new parameters, old ones unchanged.
    pub fn apply_update(&self, gradient: &[f64], step_size: f64) -> Result<PolicyParams> {
        if gradient.len() != self.dim() {
            return Err(LabError::Shape(format!(
                "gradient length {} != d = {}",
                gradient.len(),
                self.dim()
            )));
        }
        if !step_size.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
            return Err(LabError::Numeric("non-finite update".into()));
        }
        let mut out = self.clone();
        for (x, g) in out.logits.iter_mut().zip(gradient) {
            *x += step_size * g;
        }
        Ok(out)
    }

    /// Flat CSV serialization: one row per (state, action, logit).
    pub fn to_csv<W: std::io::Write>(&self, env: &TaMdp, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["state", "action", "logit"])?;
        for row in 0..self.n_rows {
            let state = env.row_state(row);
            for a in 0..self.n_actions {
                wtr.write_record(&[
                    state.to_string(),
                    a.to_string(),
                    format!("{:.17e}", self.logit(row, a)),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Box-Muller standard normal draw.
pub fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Source/target Fisher information matrices with a shared ridge.
#[derive(Debug, Clone)]
pub struct FisherPair {
    pub h_source: DMatrix<f64>,
    pub h_target: DMatrix<f64>,
    pub ridge: f64,
}

/// Exact Fisher information `E[∇ log π ∇ log πᵀ]` of whole-trajectory scores
/// under `prompt_dist`, computed in closed form.
///
/// Per-step score cross terms vanish in expectation (the conditional mean of
/// every later step's score is zero), so the trajectory Fisher is the sum of
/// per-decision softmax Fisher blocks `diag(p) − p pᵀ` weighted by the
/// expected number of decisions taken at each (row, tool-mask) pair. That
/// occupancy is propagated exactly through the decision graph over
/// (state, running tool depth).
pub fn exact_fisher(
    policy: &PolicyParams,
    env: &TaMdp,
    prompt_dist: &[f64],
) -> Result<DMatrix<f64>> {
    policy.check_shape(env)?;
    let spec = env.spec();
    if prompt_dist.len() != spec.n_gen {
        return Err(LabError::Shape(format!(
            "prompt_dist length {} != n_gen = {}",
            prompt_dist.len(),
            spec.n_gen
        )));
    }
    let n_rows = spec.n_policy_states();
    let depths = spec.d_max + 1;
    // visits[row][mask as usize]: expected decision count with tools
    // disabled (0) or enabled (1).
    let mut visits = vec![[0.0f64; 2]; n_rows];
    let mut mass = vec![vec![0.0f64; depths]; n_rows];
    for (s, &p) in prompt_dist.iter().enumerate() {
        if p > 0.0 && !env.terminal(s) {
            mass[s][0] += p;
        }
    }
    for _ in 0..spec.horizon {
        let mut next = vec![vec![0.0f64; depths]; n_rows];
        let mut any = false;
        for row in 0..n_rows {
            let state = env.row_state(row);
            for depth in 0..depths {
                let m = mass[row][depth];
                if m <= 0.0 {
                    continue;
                }
                any = true;
                let tools = env.tools_enabled(state, depth);
                visits[row][tools as usize] += m;
                let probs = policy.action_probs(env, row, tools);
                for (a, &pa) in probs.iter().enumerate() {
                    if pa <= 0.0 || a == spec.stop_action() {
                        continue;
                    }
                    if a >= spec.n_vocab {
                        let (_, ret) = env.tool_hop(state, a - spec.n_vocab);
                        let ret_row = env.policy_row(ret).expect("return state");
                        next[ret_row][depth + 1] += m * pa;
                    } else {
                        for &(succ, ps) in env.transition_row(state, a) {
                            if !env.terminal(succ) {
                                next[succ][depth] += m * pa * ps;
                            }
                        }
                    }
                }
            }
        }
        mass = next;
        if !any {
            break;
        }
    }

    let na = policy.n_actions();
    let mut h = DMatrix::<f64>::zeros(policy.dim(), policy.dim());
    for (row, masks) in visits.iter().enumerate() {
        for (mask, &w) in masks.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let probs = policy.action_probs(env, row, mask == 1);
            let base = row * na;
            for i in 0..na {
                for j in 0..na {
                    let block = if i == j {
                        probs[i] * (1.0 - probs[i])
                    } else {
                        -probs[i] * probs[j]
                    };
                    h[(base + i, base + j)] += w * block;
                }
            }
        }
    }
    Ok(h)
}

/// Monte-Carlo Fisher information: average outer product of trajectory
/// scores over prompts drawn from `prompt_dist`, plus `ridge * I`.
pub fn fisher_matrix(
    policy: &PolicyParams,
    env: &TaMdp,
    prompt_dist: &[f64],
    n_samples: usize,
    seed: u64,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    if n_samples < 1 {
        return Err(LabError::config("n_samples", "must be >= 1"));
    }
    policy.check_shape(env)?;
    let scores: Vec<Result<Vec<(usize, f64)>>> = parallel::map_indexed(n_samples, |i| {
        let mut rng = seeding::stream(&[seed, 0xF15E, i as u64]);
        let prompt = sample_categorical(prompt_dist, &mut rng);
        let traj = sample_trajectory(env, policy, prompt, &mut rng)?;
        policy.score_entries(env, &traj)
    });
    let d = policy.dim();
    let mut h = DMatrix::<f64>::zeros(d, d);
    let w = 1.0 / n_samples as f64;
    for s in scores {
        let s = s?;
        for &(i, vi) in &s {
            for &(j, vj) in &s {
                h[(i, j)] += w * vi * vj;
            }
        }
    }
    for i in 0..d {
        h[(i, i)] += ridge;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_env, Step, TaMdpSpec, Trajectory};
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
            horizon: 12,
            env_seed: 42,
            branch: 3,
        })
        .unwrap()
    }

    fn traj(steps: Vec<Step>) -> Trajectory {
        Trajectory {
            steps,
            depth: 0,
            terminal_state: 0,
            prompt_id: 0,
            components: Vec::new(),
        }
    }

    #[test]
    fn rows_softmax_to_one() {
        let env = env_small();
        let mut rng = seeding::stream(&[1]);
        let policy = PolicyParams::uniform(&env).perturbed(2.0, &mut rng);
        for row in 0..policy.n_rows() {
            for tools in [false, true] {
                let probs = policy.action_probs(&env, row, tools);
                let sum: f64 = probs.iter().sum();
                assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn uniform_single_step_log_prob() {
        // Uniform logits over 4 vocab actions at a return state (tools
        // masked there) give log(1/4).
        let env = env_small();
        let policy = PolicyParams::uniform(&env);
        let ret_state = 12; // first return state: n_gen + n_tool
        let t = traj(vec![Step {
            state: ret_state,
            action: 1,
        }]);
        assert_abs_diff_eq!(
            policy.log_prob(&env, &t).unwrap(),
            (0.25f64).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_decision_list_log_prob_zero() {
        let env = env_small();
        let policy = PolicyParams::uniform(&env);
        assert_eq!(policy.log_prob(&env, &traj(vec![])).unwrap(), 0.0);
        assert!(policy
            .grad_log_prob(&env, &traj(vec![]))
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn three_step_log_prob_matches_per_step_product() {
        let env = env_small();
        let mut rng = seeding::stream(&[2]);
        let policy = PolicyParams::uniform(&env).perturbed(1.5, &mut rng);
        let t = traj(vec![
            Step { state: 0, action: 2 },
            Step { state: 3, action: 0 },
            Step { state: 5, action: 4 }, // tool action at depth 0
        ]);
        // Independent per-step product oracle.
        let mut product = 1.0;
        product *= policy.action_probs(&env, 0, true)[2];
        product *= policy.action_probs(&env, 3, true)[0];
        product *= policy.action_probs(&env, 5, true)[4];
        assert_abs_diff_eq!(
            policy.log_prob(&env, &t).unwrap(),
            product.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_action_score_is_plus_minus_half() {
        // Uniform two-action decision: score is +0.5 on the taken action,
        // -0.5 on the other. Build a no-tool env with 2 vocab actions.
        let env = build_env(&TaMdpSpec {
            n_gen: 4,
            n_tool: 0,
            n_ret: 0,
            n_vocab: 2,
            n_tools: 0,
            d_max: 0,
            gamma: 0.9,
            horizon: 4,
            env_seed: 1,
            branch: 2,
        })
        .unwrap();
        let policy = PolicyParams::uniform(&env);
        let t = traj(vec![Step { state: 1, action: 0 }]);
        let g = policy.grad_log_prob(&env, &t).unwrap();
        let na = policy.n_actions();
        assert_abs_diff_eq!(g[na], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(g[na + 1], -0.5, epsilon = 1e-12);
        assert!(g.iter().enumerate().all(|(i, &v)| v == 0.0 || i / na == 1));
    }

    #[test]
    fn score_matches_central_finite_differences() {
        let env = env_small();
        let mut rng = seeding::stream(&[3]);
        let policy = PolicyParams::uniform(&env).perturbed(1.0, &mut rng);
        let trajectory =
            crate::env::sample_trajectory(&env, &policy, 1, &mut seeding::stream(&[4])).unwrap();
        let analytic = policy.grad_log_prob(&env, &trajectory).unwrap();
        let h = 1e-5;
        let max_abs = analytic.iter().cloned().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut max_err = 0.0f64;
        for i in 0..policy.dim() {
            let mut plus = policy.clone();
            let mut minus = policy.clone();
            let (r, a) = (i / policy.n_actions(), i % policy.n_actions());
            plus.set_logit(r, a, policy.logit(r, a) + h);
            minus.set_logit(r, a, policy.logit(r, a) - h);
            let fd = (plus.log_prob(&env, &trajectory).unwrap()
                - minus.log_prob(&env, &trajectory).unwrap())
                / (2.0 * h);
            max_err = max_err.max((fd - analytic[i]).abs());
        }
        assert!(
            max_err <= 1e-5 * (1.0 + max_abs),
            "finite-difference mismatch: {max_err:e}"
        );
    }

    #[test]
    fn kl_zero_at_reference_and_nonnegative() {
        let env = env_small();
        let mut rng = seeding::stream(&[5]);
        let policy = PolicyParams::uniform(&env).perturbed(1.0, &mut rng);
        let n = policy.n_rows();
        let vis = vec![1.0 / n as f64; n];
        assert_abs_diff_eq!(policy.kl_to_ref(&policy, &env, &vis).unwrap(), 0.0);
        let other = policy.perturbed(0.7, &mut rng);
        assert!(policy.kl_to_ref(&other, &env, &vis).unwrap() >= 0.0);
    }

    #[test]
    fn two_point_kl_closed_form() {
        let env = build_env(&TaMdpSpec {
            n_gen: 3,
            n_tool: 0,
            n_ret: 0,
            n_vocab: 2,
            n_tools: 0,
            d_max: 0,
            gamma: 0.5,
            horizon: 3,
            env_seed: 9,
            branch: 1,
        })
        .unwrap();
        let policy = PolicyParams::uniform(&env); // (0, 0) -> (1/2, 1/2)
        let mut reference = PolicyParams::uniform(&env);
        reference.set_logit(0, 0, 3.0f64.ln()); // (ln 3, 0) -> (3/4, 1/4)
        let mut vis = vec![0.0; policy.n_rows()];
        vis[0] = 1.0;
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        let kl = policy.kl_to_ref(&reference, &env, &vis).unwrap();
        assert_abs_diff_eq!(kl, expected, epsilon = 1e-10);
        assert_abs_diff_eq!(kl, 0.14384, epsilon = 1e-5);
    }

    #[test]
    fn kl_grad_matches_finite_differences() {
        let env = env_small();
        let mut rng = seeding::stream(&[6]);
        let policy = PolicyParams::uniform(&env).perturbed(0.8, &mut rng);
        let reference = PolicyParams::uniform(&env).perturbed(0.8, &mut rng);
        let n = policy.n_rows();
        let vis = vec![1.0 / n as f64; n];
        let mut grad = vec![0.0; policy.dim()];
        policy.kl_grad(&reference, &env, &vis, 1.0, &mut grad).unwrap();
        let h = 1e-6;
        for i in (0..policy.dim()).step_by(7) {
            let (r, a) = (i / policy.n_actions(), i % policy.n_actions());
            let mut plus = policy.clone();
            let mut minus = policy.clone();
            plus.set_logit(r, a, policy.logit(r, a) + h);
            minus.set_logit(r, a, policy.logit(r, a) - h);
            let fd = (plus.kl_to_ref(&reference, &env, &vis).unwrap()
                - minus.kl_to_ref(&reference, &env, &vis).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(fd, grad[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let env = env_small();
        let mut rng = seeding::stream(&[7]);
        let policy = PolicyParams::uniform(&env).perturbed(1.0, &mut rng);
        let mut shifted = policy.clone();
        for a in 0..policy.n_actions() {
            shifted.set_logit(2, a, policy.logit(2, a) + 11.5);
        }
        let reference = PolicyParams::uniform(&env).perturbed(1.0, &mut rng);
        let trajectory =
            crate::env::sample_trajectory(&env, &policy, 2, &mut seeding::stream(&[8])).unwrap();
        let n = policy.n_rows();
        let vis = vec![1.0 / n as f64; n];
        assert_abs_diff_eq!(
            policy.log_prob(&env, &trajectory).unwrap(),
            shifted.log_prob(&env, &trajectory).unwrap(),
            epsilon = 1e-10
        );
        let ga = policy.grad_log_prob(&env, &trajectory).unwrap();
        let gb = shifted.grad_log_prob(&env, &trajectory).unwrap();
        for (a, b) in ga.iter().zip(&gb) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(
            policy.kl_to_ref(&reference, &env, &vis).unwrap(),
            shifted.kl_to_ref(&reference, &env, &vis).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn apply_update_identities() {
        let env = env_small();
        let policy = PolicyParams::uniform(&env);
        let zero = vec![0.0; policy.dim()];
        assert_eq!(policy.apply_update(&zero, 0.3).unwrap(), policy);
        let unit = vec![1.0; policy.dim()];
        assert_eq!(policy.apply_update(&unit, 0.0).unwrap(), policy);
        let stepped = policy.apply_update(&unit, 0.1).unwrap();
        for i in 0..policy.dim() {
            let (r, a) = (i / policy.n_actions(), i % policy.n_actions());
            assert_abs_diff_eq!(stepped.logit(r, a), 0.1, epsilon = 0.0);
        }
        let bad = vec![f64::NAN; policy.dim()];
        assert!(policy.apply_update(&bad, 0.1).is_err());
    }

    #[test]
    fn fisher_single_sample_is_outer_product_plus_ridge() {
        let env = env_small();
        let policy = PolicyParams::uniform(&env);
        let ridge = 1e-6;
        let h = fisher_matrix(&policy, &env, env.initial_dist(), 1, 77, ridge).unwrap();
        // Reproduce the single trajectory the estimator drew.
        let mut rng = seeding::stream(&[77, 0xF15E, 0]);
        let prompt = sample_categorical(env.initial_dist(), &mut rng);
        let t = sample_trajectory(&env, &policy, prompt, &mut rng).unwrap();
        let s = policy.grad_log_prob(&env, &t).unwrap();
        for i in 0..policy.dim() {
            for j in 0..policy.dim() {
                let expect = s[i] * s[j] + if i == j { ridge } else { 0.0 };
                assert_abs_diff_eq!(h[(i, j)], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fisher_vanishes_for_deterministic_policy() {
        let env = env_small();
        let mut policy = PolicyParams::uniform(&env);
        for row in 0..policy.n_rows() {
            policy.set_logit(row, 0, 200.0);
        }
        let ridge = 1e-6;
        let h = fisher_matrix(&policy, &env, env.initial_dist(), 50, 3, ridge).unwrap();
        for i in 0..policy.dim() {
            for j in 0..policy.dim() {
                let expect = if i == j { ridge } else { 0.0 };
                assert!((h[(i, j)] - expect).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn exact_fisher_matches_monte_carlo_estimate() {
        let env = env_small();
        let mut rng = seeding::stream(&[21]);
        let policy = PolicyParams::uniform(&env).perturbed(0.4, &mut rng);
        let exact = exact_fisher(&policy, &env, env.initial_dist()).unwrap();
        let sampled = fisher_matrix(&policy, &env, env.initial_dist(), 30_000, 11, 0.0).unwrap();
        let mut max_diff = 0.0f64;
        for i in 0..policy.dim() {
            for j in 0..policy.dim() {
                max_diff = max_diff.max((exact[(i, j)] - sampled[(i, j)]).abs());
            }
        }
        assert!(max_diff < 0.05, "max entry gap {max_diff}");
        let rel_trace = (exact.trace() - sampled.trace()).abs() / exact.trace();
        assert!(rel_trace < 0.02, "trace rel err {rel_trace}");
    }

    #[test]
    fn exact_fisher_vanishes_for_deterministic_policy() {
        let env = env_small();
        let mut policy = PolicyParams::uniform(&env);
        for row in 0..policy.n_rows() {
            policy.set_logit(row, 0, 200.0);
        }
        let h = exact_fisher(&policy, &env, env.initial_dist()).unwrap();
        for i in 0..policy.dim() {
            for j in 0..policy.dim() {
                assert!(h[(i, j)].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn exact_fisher_is_block_diagonal_symmetric_psd() {
        let env = env_small();
        let mut rng = seeding::stream(&[33]);
        let policy = PolicyParams::uniform(&env).perturbed(0.6, &mut rng);
        let h = exact_fisher(&policy, &env, env.initial_dist()).unwrap();
        let na = policy.n_actions();
        for i in 0..policy.dim() {
            for j in 0..i {
                assert!((h[(i, j)] - h[(j, i)]).abs() < 1e-12);
                if i / na != j / na {
                    assert_abs_diff_eq!(h[(i, j)], 0.0, epsilon = 0.0);
                }
            }
        }
        let eig = h.symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn fisher_is_symmetric_psd() {
        let env = env_small();
        let mut rng = seeding::stream(&[9]);
        let policy = PolicyParams::uniform(&env).perturbed(0.5, &mut rng);
        let h = fisher_matrix(&policy, &env, env.initial_dist(), 200, 5, 0.0).unwrap();
        for i in 0..policy.dim() {
            for j in 0..i {
                assert!((h[(i, j)] - h[(j, i)]).abs() < 1e-8);
            }
        }
        let eig = h.symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l >= -1e-8));
    }
}
