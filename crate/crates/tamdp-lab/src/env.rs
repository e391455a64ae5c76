//! Tool-augmented MDP construction and trajectory sampling.
//!
//! States are laid out in three contiguous blocks: generation states first,
//! then tool-invocation states, then tool-return states. The policy acts in
//! generation and return states over a vocabulary plus one action per tool;
//! issuing a tool routes deterministically through an invocation state to a
//! return state without consuming policy randomness. Tool actions are masked
//! once the running call depth reaches `d_max`.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::PolicyParams;
use crate::seeding;

const TAG_KERNEL: u64 = 0x01;
const TAG_TOOL_ROUTE: u64 = 0x02;
const TAG_TOOL_FN: u64 = 0x03;
const TAG_TERMINAL: u64 = 0x04;
const TAG_GOAL: u64 = 0x05;

/// Full description of a synthetic tool-augmented MDP instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaMdpSpec {
    /// Number of generation states.
    pub n_gen: usize,
    /// Number of tool-invocation states.
    pub n_tool: usize,
    /// Number of tool-return states.
    pub n_ret: usize,
    /// Number of token-generation actions; the last one is the stop action.
    pub n_vocab: usize,
    /// Number of tools.
    pub n_tools: usize,
    /// Maximum tool-call depth.
    pub d_max: usize,
    /// Discount factor, in [0, 1). Retained for serialization; rewards in
    /// this lab are trajectory-level, so it does not enter returns.
    pub gamma: f64,
    /// Maximum number of policy decisions per trajectory.
    pub horizon: usize,
    /// Seed determining the kernel, tool functions, terminals, and goals.
    pub env_seed: u64,
    /// Successor states per (state, action) pair.
    pub branch: usize,
}

impl TaMdpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_gen < 1 {
            return Err(LabError::config("n_gen", "must be >= 1"));
        }
        if self.n_vocab < 1 {
            return Err(LabError::config("n_vocab", "must be >= 1"));
        }
        if self.horizon < 1 {
            return Err(LabError::config("horizon", "must be >= 1"));
        }
        if self.n_tools > 0 && (self.n_tool < 1 || self.n_ret < 1) {
            return Err(LabError::config(
                "n_tool/n_ret",
                "must be >= 1 when n_tools > 0",
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(LabError::config("gamma", "must lie in [0, 1)"));
        }
        if self.branch < 1 {
            return Err(LabError::config("branch", "must be >= 1"));
        }
        if self.branch > self.n_gen {
            return Err(LabError::config(
                "branch",
                format!("{} exceeds n_gen = {}", self.branch, self.n_gen),
            ));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_gen + self.n_tool + self.n_ret
    }

    /// Total actions available to the policy: vocabulary plus tools.
    pub fn n_actions(&self) -> usize {
        self.n_vocab + self.n_tools
    }

    /// States the policy acts in: generation and return states.
    pub fn n_policy_states(&self) -> usize {
        self.n_gen + self.n_ret
    }

    /// Index of the designated stop action.
    pub fn stop_action(&self) -> usize {
        self.n_vocab - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateKind {
    Generation,
    ToolInvocation,
    ToolReturn,
}

/// One policy decision: the state the decision was taken in and the action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
}

/// A sampled episode. Only policy decisions are recorded; the deterministic
/// tool-invocation hop never appears as a step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub depth: usize,
    pub terminal_state: usize,
    pub prompt_id: usize,
    /// Per-component reward values in [0, 1]^K, filled by the rewards module
    /// once the trajectory is complete.
    pub components: Vec<f64>,
}

/// Realized tool-call depth: every tool invocation increments the running
/// level and it never decrements (calls are sequential).
pub fn trajectory_depth(traj: &Trajectory) -> usize {
    traj.depth
}

/// Effective state-space dimension under a depth bound:
/// `|S_gen| + depth * |S_ret|`.
pub fn effective_state_dim(spec: &TaMdpSpec, depth: usize) -> Result<usize> {
    if depth > spec.d_max {
        return Err(LabError::config(
            "depth",
            format!("{} exceeds d_max = {}", depth, spec.d_max),
        ));
    }
    Ok(spec.n_gen + depth * spec.n_ret)
}

/// A constructed environment. Immutable after [`build_env`]; safe to share
/// across workers.
#[derive(Debug, Clone)]
pub struct TaMdp {
    spec: TaMdpSpec,
    /// Categorical successor rows, indexed by `policy_row * n_vocab + action`.
    transitions: Vec<Vec<(usize, f64)>>,
    /// Invocation state reached when tool `t` is issued in generation state
    /// `s`, indexed by `s * n_tools + t`.
    tool_route: Vec<usize>,
    /// Deterministic tool execution: `tool_fn[t][local invocation]` is the
    /// return state.
    tool_fn: Vec<Vec<usize>>,
    terminal: Vec<bool>,
    /// Initial distribution over generation states.
    initial_dist: Vec<f64>,
    /// `dist_to_goal[g][row]`: shortest decision count from the policy state
    /// at `row` to generation state `g`; `u32::MAX` if unreachable.
    dist_to_goal: Vec<Vec<u32>>,
    diameter: u32,
}

/// Construct an environment as a pure function of the spec.
pub fn build_env(spec: &TaMdpSpec) -> Result<TaMdp> {
    spec.validate()?;
    let n_rows = spec.n_policy_states();
    let seed = spec.env_seed;

    // Transition rows: `branch` distinct successor generation states with
    // Dirichlet(1,..,1) weights from a stream keyed by (seed, state, action).
    let mut transitions = Vec::with_capacity(n_rows * spec.n_vocab);
    for row in 0..n_rows {
        let state = row_to_state(spec, row);
        for a in 0..spec.n_vocab {
            let mut rng = seeding::stream(&[seed, TAG_KERNEL, state as u64, a as u64]);
            transitions.push(sample_row(spec, &mut rng));
        }
    }

    let mut tool_route = vec![0usize; spec.n_gen * spec.n_tools];
    for s in 0..spec.n_gen {
        for t in 0..spec.n_tools {
            let h = seeding::mix(&[seed, TAG_TOOL_ROUTE, s as u64, t as u64]);
            tool_route[s * spec.n_tools + t] = spec.n_gen + (h as usize % spec.n_tool);
        }
    }

    let mut tool_fn = Vec::with_capacity(spec.n_tools);
    for t in 0..spec.n_tools {
        let mut per_state = Vec::with_capacity(spec.n_tool);
        for inv in 0..spec.n_tool {
            let h = seeding::mix(&[seed, TAG_TOOL_FN, t as u64, inv as u64]);
            per_state.push(spec.n_gen + spec.n_tool + (h as usize % spec.n_ret));
        }
        tool_fn.push(per_state);
    }

    // A small fraction of generation states is terminal; at least two stay
    // open so the initial distribution is never empty.
    let mut terminal = vec![false; spec.n_states()];
    let mut rng = seeding::stream(&[seed, TAG_TERMINAL]);
    let mut open = spec.n_gen;
    for s in 0..spec.n_gen {
        if open > 2 && rng.random::<f64>() < 0.08 {
            terminal[s] = true;
            open -= 1;
        }
    }

    let n_open = terminal[..spec.n_gen].iter().filter(|&&t| !t).count();
    let initial_dist: Vec<f64> = (0..spec.n_gen)
        .map(|s| if terminal[s] { 0.0 } else { 1.0 / n_open as f64 })
        .collect();

    let mut env = TaMdp {
        spec: spec.clone(),
        transitions,
        tool_route,
        tool_fn,
        terminal,
        initial_dist,
        dist_to_goal: Vec::new(),
        diameter: 1,
    };
    env.compute_distances();
    Ok(env)
}

fn row_to_state(spec: &TaMdpSpec, row: usize) -> usize {
    if row < spec.n_gen {
        row
    } else {
        // Return-state rows follow the generation block.
        row + spec.n_tool
    }
}

fn sample_row(spec: &TaMdpSpec, rng: &mut ChaCha12Rng) -> Vec<(usize, f64)> {
    // Draw `branch` distinct generation states by rejection, then
    // Dirichlet(1,..,1) weights as normalized exponentials.
    let mut succ: Vec<usize> = Vec::with_capacity(spec.branch);
    while succ.len() < spec.branch {
        let s = rng.random_range(0..spec.n_gen);
        if !succ.contains(&s) {
            succ.push(s);
        }
    }
    let mut weights: Vec<f64> = (0..spec.branch)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    succ.into_iter().zip(weights).collect()
}

impl TaMdp {
    pub fn spec(&self) -> &TaMdpSpec {
        &self.spec
    }

    pub fn state_kind(&self, state: usize) -> StateKind {
        if state < self.spec.n_gen {
            StateKind::Generation
        } else if state < self.spec.n_gen + self.spec.n_tool {
            StateKind::ToolInvocation
        } else {
            StateKind::ToolReturn
        }
    }

    /// Row in the policy table for a generation or return state.
    pub fn policy_row(&self, state: usize) -> Option<usize> {
        match self.state_kind(state) {
            StateKind::Generation => Some(state),
            StateKind::ToolInvocation => None,
            StateKind::ToolReturn => Some(state - self.spec.n_tool),
        }
    }

    /// Global state index for a policy row.
    pub fn row_state(&self, row: usize) -> usize {
        row_to_state(&self.spec, row)
    }

    /// Whether tool actions are available in `state` at the given running
    /// depth. Tools can only be issued from generation states.
    pub fn tools_enabled(&self, state: usize, depth: usize) -> bool {
        self.spec.n_tools > 0
            && depth < self.spec.d_max
            && self.state_kind(state) == StateKind::Generation
    }

    /// Default tool availability used for state-level quantities (KL,
    /// Fisher rows) that carry no depth context: generation states get the
    /// depth-zero mask.
    pub fn tools_enabled_default(&self, state: usize) -> bool {
        self.tools_enabled(state, 0)
    }

    pub fn transition_row(&self, state: usize, action: usize) -> &[(usize, f64)] {
        let row = self.policy_row(state).expect("policy state");
        &self.transitions[row * self.spec.n_vocab + action]
    }

    pub fn terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// Goal generation state attached to a prompt.
    pub fn goal_state(&self, prompt_id: usize) -> usize {
        (seeding::mix(&[self.spec.env_seed, TAG_GOAL, prompt_id as u64]) as usize) % self.spec.n_gen
    }

    /// Shortest decision count from a policy state to a goal generation
    /// state, or `None` if unreachable.
    pub fn distance(&self, state: usize, goal: usize) -> Option<u32> {
        let row = self.policy_row(state)?;
        let d = self.dist_to_goal[goal][row];
        (d != u32::MAX).then_some(d)
    }

    /// Largest finite pairwise distance in the decision graph.
    pub fn diameter(&self) -> u32 {
        self.diameter
    }

    pub fn sample_initial(&self, rng: &mut ChaCha12Rng) -> usize {
        sample_categorical(&self.initial_dist, rng)
    }

    /// Return state reached when tool `tool` is issued in `state`; the
    /// intermediate invocation state is also returned for inspection.
    pub fn tool_hop(&self, state: usize, tool: usize) -> (usize, usize) {
        let inv = self.tool_route[state * self.spec.n_tools + tool];
        let local = inv - self.spec.n_gen;
        (inv, self.tool_fn[tool][local])
    }

    /// Dump the full kernel as CSV rows (state, action, successor,
    /// probability). Tool hops appear with probability 1.
    pub fn kernel_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["state", "action", "successor", "probability"])?;
        for row in 0..self.spec.n_policy_states() {
            let state = self.row_state(row);
            for a in 0..self.spec.n_vocab {
                for &(succ, p) in &self.transitions[row * self.spec.n_vocab + a] {
                    wtr.write_record(&[
                        state.to_string(),
                        a.to_string(),
                        succ.to_string(),
                        format!("{p:.17e}"),
                    ])?;
                }
            }
            if self.state_kind(state) == StateKind::Generation {
                for t in 0..self.spec.n_tools {
                    let (inv, ret) = self.tool_hop(state, t);
                    let a = self.spec.n_vocab + t;
                    wtr.write_record(&[
                        state.to_string(),
                        a.to_string(),
                        inv.to_string(),
                        "1".to_string(),
                    ])?;
                    wtr.write_record(&[
                        inv.to_string(),
                        a.to_string(),
                        ret.to_string(),
                        "1".to_string(),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    fn compute_distances(&mut self) {
        // Forward adjacency over policy rows: vocab successors plus tool
        // landings. Distances are decision counts, BFS on the reverse graph
        // from every generation state.
        let n_rows = self.spec.n_policy_states();
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n_rows];
        for row in 0..n_rows {
            let state = self.row_state(row);
            for a in 0..self.spec.n_vocab {
                for &(succ, _) in &self.transitions[row * self.spec.n_vocab + a] {
                    let succ_row = succ; // successors are generation states
                    if !reverse[succ_row].contains(&row) {
                        reverse[succ_row].push(row);
                    }
                }
            }
            if self.state_kind(state) == StateKind::Generation {
                for t in 0..self.spec.n_tools {
                    let (_, ret) = self.tool_hop(state, t);
                    let ret_row = self.policy_row(ret).expect("return state");
                    if !reverse[ret_row].contains(&row) {
                        reverse[ret_row].push(row);
                    }
                }
            }
        }

        let mut diameter = 1u32;
        let mut dist_to_goal = Vec::with_capacity(self.spec.n_gen);
        let mut queue = std::collections::VecDeque::new();
        for g in 0..self.spec.n_gen {
            let mut dist = vec![u32::MAX; n_rows];
            dist[g] = 0;
            queue.clear();
            queue.push_back(g);
            while let Some(r) = queue.pop_front() {
                for &p in &reverse[r] {
                    if dist[p] == u32::MAX {
                        dist[p] = dist[r] + 1;
                        diameter = diameter.max(dist[p]);
                        queue.push_back(p);
                    }
                }
            }
            dist_to_goal.push(dist);
        }
        self.dist_to_goal = dist_to_goal;
        self.diameter = diameter;
    }
}

pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Sample one trajectory. Policy randomness is consumed only at generation
/// and return states; tool hops are deterministic. Equal `rng` states give
/// identical trajectories.
pub fn sample_trajectory(
    env: &TaMdp,
    policy: &PolicyParams,
    prompt_id: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Trajectory> {
    policy.check_shape(env)?;
    if prompt_id >= env.spec.n_gen {
        return Err(LabError::Shape(format!(
            "prompt_id {} out of range (n_gen = {})",
            prompt_id, env.spec.n_gen
        )));
    }
    let spec = &env.spec;
    let mut state = prompt_id;
    let mut depth = 0usize;
    let mut steps = Vec::new();

    while steps.len() < spec.horizon && !env.terminal(state) {
        let tools = env.tools_enabled(state, depth);
        let row = env.policy_row(state).expect("policy state");
        let action = policy.sample_action(env, row, tools, rng);
        steps.push(Step { state, action });
        if action == spec.stop_action() {
            break;
        }
        if action >= spec.n_vocab {
            depth += 1;
            let (_, ret) = env.tool_hop(state, action - spec.n_vocab);
            state = ret;
        } else {
            let succ_row = env.transition_row(state, action);
            let probs: Vec<f64> = succ_row.iter().map(|&(_, p)| p).collect();
            let idx = sample_categorical(&probs, rng);
            state = succ_row[idx].0;
        }
    }

    Ok(Trajectory {
        steps,
        depth,
        terminal_state: state,
        prompt_id,
        components: Vec::new(),
    })
}
