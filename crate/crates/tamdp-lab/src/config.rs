//! Experiment configuration: a TOML file with one section per subsystem
//! (`[env]`, `[rewards]`, `[optim]`, `[grid]`, `[analysis]`) plus top-level
//! run settings. Validation collects every violation with its field path
//! instead of stopping at the first.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::TaMdpSpec;
use crate::error::{LabError, Result};
use crate::optim::GrpoConfig;
use crate::rewards::RewardSpec;

pub const SEED_OFFSET_ENV: &str = "TAMDP_LAB_SEED_OFFSET";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ConvergenceK,
    GroupSize,
    Decomposition,
    GeneralizationDepth,
    AlignmentDynamics,
    BetaSweep,
    BoundCheck,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::ConvergenceK => "convergence-k",
            Experiment::GroupSize => "group-size",
            Experiment::Decomposition => "decomposition",
            Experiment::GeneralizationDepth => "generalization-depth",
            Experiment::AlignmentDynamics => "alignment-dynamics",
            Experiment::BetaSweep => "beta-sweep",
            Experiment::BoundCheck => "bound-check",
        }
    }

    /// The grid variable this experiment sweeps, when it needs one.
    pub fn expected_variable(&self) -> Option<GridVariable> {
        match self {
            Experiment::ConvergenceK => Some(GridVariable::K),
            Experiment::GroupSize => Some(GridVariable::GroupSize),
            Experiment::Decomposition => Some(GridVariable::Alpha),
            Experiment::GeneralizationDepth => Some(GridVariable::Depth),
            Experiment::AlignmentDynamics => Some(GridVariable::Alpha),
            Experiment::BetaSweep => Some(GridVariable::Beta),
            Experiment::BoundCheck => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridVariable {
    K,
    GroupSize,
    Alpha,
    Depth,
    Beta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub variable: GridVariable,
    pub values: Vec<f64>,
}

/// Analysis knobs with defaults sized for the desk-scale environments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisParams {
    /// Gradient-norm threshold for the iterations-to-threshold column.
    pub threshold_eps: f64,
    /// Rollouts per Monte-Carlo value estimate.
    pub n_eval: usize,
    /// Ridge added to the source Fisher before solving.
    pub ridge: f64,
    /// Divergence of the tilted target distribution from the source.
    pub kl_target: f64,
    /// Divergence of the decaying training/source distribution from the
    /// uniform initial distribution (depth experiment only). Steeper decay
    /// leaves a thinner, rarely-sampled prompt tail for the target to hit.
    pub source_decay: f64,
    /// Checkpoint cadence (iterations) for alignment dynamics.
    pub checkpoint_every: usize,
    /// Replicates for the gradient-variance estimator.
    pub variance_replicates: usize,
    /// Trailing window (iterations) for final-performance averages.
    pub tail_window: usize,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            threshold_eps: 0.05,
            n_eval: 10_000,
            ridge: 1e-6,
            kl_target: 0.2,
            source_decay: 1.0,
            checkpoint_every: 500,
            variance_replicates: 16,
            tail_window: 100,
        }
    }
}

/// Externally supplied inputs for the bound-check experiment: the
/// generalization-bound calculator evaluated on published numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundCheckInputs {
    pub r_max: f64,
    pub kl_shift: f64,
    pub n: usize,
    pub d_eff: f64,
    pub delta: f64,
    pub d_max: usize,
    pub group_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seeds: Vec<u64>,
    pub n_train_prompts: usize,
    pub delta: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub env: TaMdpSpec,
    pub rewards: RewardSpec,
    pub optim: GrpoConfig,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub analysis: AnalysisParams,
    #[serde(default)]
    pub bound_check: Option<BoundCheckInputs>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One validation failure with the config field path it refers to.
#[derive(Debug, Clone, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| LabError::Config {
        field: path.display().to_string(),
        message: e.to_string(),
    })
}

fn push_err(diags: &mut Vec<Diagnostic>, result: Result<()>) {
    if let Err(e) = result {
        match e {
            LabError::Config { field, message } => diags.push(Diagnostic { field, message }),
            other => diags.push(Diagnostic {
                field: String::new(),
                message: other.to_string(),
            }),
        }
    }
}

/// Schema-plus-feasibility validation; returns every violation found.
pub fn validate_config(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    push_err(&mut diags, cfg.env.validate());
    push_err(&mut diags, cfg.rewards.validate());
    push_err(&mut diags, cfg.optim.validate());
    if cfg.seeds.is_empty() {
        diags.push(Diagnostic {
            field: "seeds".into(),
            message: "must list at least one seed".into(),
        });
    }
    if cfg.n_train_prompts < 1 {
        diags.push(Diagnostic {
            field: "n_train_prompts".into(),
            message: "must be >= 1".into(),
        });
    }
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        diags.push(Diagnostic {
            field: "delta".into(),
            message: "must lie in (0, 1)".into(),
        });
    }
    if cfg.env.d_max > cfg.env.horizon {
        diags.push(Diagnostic {
            field: "env.d_max".into(),
            message: format!(
                "tool-depth budget {} exceeds the horizon {}",
                cfg.env.d_max, cfg.env.horizon
            ),
        });
    }
    let eta = cfg.optim.step_size();
    if !eta.is_finite() || eta > 1.0 {
        diags.push(Diagnostic {
            field: "optim".into(),
            message: format!("derived step size {eta} is not in (0, 1]"),
        });
    }
    if cfg.analysis.checkpoint_every == 0 || cfg.analysis.tail_window == 0 {
        diags.push(Diagnostic {
            field: "analysis".into(),
            message: "checkpoint_every and tail_window must be >= 1".into(),
        });
    }
    if cfg.analysis.variance_replicates < 2 {
        diags.push(Diagnostic {
            field: "analysis.variance_replicates".into(),
            message: "must be >= 2".into(),
        });
    }

    match (cfg.experiment.expected_variable(), &cfg.grid) {
        (Some(expected), Some(grid)) => {
            if grid.variable != expected {
                diags.push(Diagnostic {
                    field: "grid.variable".into(),
                    message: format!(
                        "experiment {} sweeps {:?}, not {:?}",
                        cfg.experiment.name(),
                        expected,
                        grid.variable
                    ),
                });
            }
            if grid.values.is_empty() {
                diags.push(Diagnostic {
                    field: "grid.values".into(),
                    message: "must be non-empty".into(),
                });
            }
            for (i, &v) in grid.values.iter().enumerate() {
                let field = format!("grid.values[{i}]");
                match grid.variable {
                    GridVariable::K => {
                        if v.fract() != 0.0 || v < 1.0 {
                            diags.push(Diagnostic {
                                field,
                                message: format!("K value {v} must be a positive integer"),
                            });
                        } else {
                            let k = v as usize;
                            let floor = if k > 1 { -1.0 / (k as f64 - 1.0) } else { -1.0 };
                            if k > 1 && cfg.rewards.alpha_target <= floor {
                                diags.push(Diagnostic {
                                    field,
                                    message: format!(
                                        "alpha_target {} is infeasible for K={k} (needs > {floor:.4})",
                                        cfg.rewards.alpha_target
                                    ),
                                });
                            }
                        }
                    }
                    GridVariable::GroupSize => {
                        if v.fract() != 0.0 || v < 2.0 {
                            diags.push(Diagnostic {
                                field,
                                message: format!("group size {v} must be an integer >= 2"),
                            });
                        }
                    }
                    GridVariable::Alpha => {
                        let k = cfg.rewards.k;
                        let floor = if k > 1 { -1.0 / (k as f64 - 1.0) } else { -1.0 };
                        if v.abs() > 0.95 || (k > 1 && v <= floor) {
                            diags.push(Diagnostic {
                                field,
                                message: format!(
                                    "alpha value {v} is infeasible for K={k} (|alpha| <= 0.95 and alpha > {floor:.4})"
                                ),
                            });
                        }
                    }
                    GridVariable::Depth => {
                        if v.fract() != 0.0 || v < 0.0 {
                            diags.push(Diagnostic {
                                field,
                                message: format!("depth value {v} must be a nonnegative integer"),
                            });
                        } else if v as usize > cfg.env.horizon {
                            diags.push(Diagnostic {
                                field,
                                message: format!(
                                    "depth value {v} exceeds the horizon {}",
                                    cfg.env.horizon
                                ),
                            });
                        } else if v > 0.0 && cfg.env.n_tools == 0 {
                            diags.push(Diagnostic {
                                field,
                                message: "positive depth requires env.n_tools > 0".into(),
                            });
                        }
                    }
                    GridVariable::Beta => {
                        if v < 0.0 {
                            diags.push(Diagnostic {
                                field,
                                message: format!("beta value {v} must be >= 0"),
                            });
                        }
                    }
                }
            }
        }
        (Some(_), None) => diags.push(Diagnostic {
            field: "grid".into(),
            message: format!("experiment {} requires a grid section", cfg.experiment.name()),
        }),
        (None, _) => {
            if cfg.bound_check.is_none() {
                diags.push(Diagnostic {
                    field: "bound_check".into(),
                    message: "bound-check requires a [bound_check] section".into(),
                });
            }
        }
    }
    if let Some(bc) = &cfg.bound_check {
        if !(bc.delta > 0.0 && bc.delta < 1.0) {
            diags.push(Diagnostic {
                field: "bound_check.delta".into(),
                message: "must lie in (0, 1)".into(),
            });
        }
        if bc.n < 1 {
            diags.push(Diagnostic {
                field: "bound_check.n".into(),
                message: "must be >= 1".into(),
            });
        }
        if bc.group_size < 1 {
            diags.push(Diagnostic {
                field: "bound_check.group_size".into(),
                message: "must be >= 1".into(),
            });
        }
    }
    diags
}

/// Parse the seed-offset environment variable (default 0).
pub fn seed_offset_from_env() -> Result<i64> {
    match std::env::var(SEED_OFFSET_ENV) {
        Ok(v) => v.trim().parse::<i64>().map_err(|_| LabError::Config {
            field: SEED_OFFSET_ENV.into(),
            message: format!("expected an integer, got {v:?}"),
        }),
        Err(std::env::VarError::NotPresent) => Ok(0),
        Err(e) => Err(LabError::Config {
            field: SEED_OFFSET_ENV.into(),
            message: e.to_string(),
        }),
    }
}

/// Apply the offset to a configured seed, wrapping on overflow.
pub fn offset_seed(seed: u64, offset: i64) -> u64 {
    seed.wrapping_add(offset as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_toml() -> String {
        r#"
experiment = "convergence-k"
seeds = [0, 1]
n_train_prompts = 32
delta = 0.1

[env]
n_gen = 20
n_tool = 2
n_ret = 4
n_vocab = 6
n_tools = 2
d_max = 2
gamma = 0.9
horizon = 10
env_seed = 7
branch = 3

[rewards]
k = 2
weights = [1.0, 1.0]
kinds = ["accuracy", "format"]
alpha_target = 0.0
reward_seed = 5

[optim]
group_size = 8
kl_coef = 0.01
norm_eps = 1e-4
clip_eps = 0.2
iters = 100
lipschitz_estimate = 1.0
mode = "joint"
inner_epochs = 1
prompts_per_iter = 2
opt_seed = 0

[grid]
variable = "k"
values = [1, 2, 4]
"#
        .to_string()
    }

    #[test]
    fn valid_config_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(&base_toml()).unwrap();
        assert!(validate_config(&cfg).is_empty());
        assert_eq!(cfg.out_dir, PathBuf::from("out"));
        assert_eq!(cfg.analysis.n_eval, 10_000);
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seeds, cfg.seeds);
    }

    #[test]
    fn missing_weights_is_a_schema_error_with_field_path() {
        let broken = base_toml().replace("weights = [1.0, 1.0]\n", "");
        let err = toml::from_str::<ExperimentConfig>(&broken).unwrap_err();
        assert!(err.to_string().contains("weights"), "{err}");
    }

    #[test]
    fn infeasible_alpha_for_k_is_reported() {
        let bad = base_toml()
            .replace("alpha_target = 0.0", "alpha_target = -0.9")
            .replace(
                "experiment = \"convergence-k\"",
                "experiment = \"decomposition\"",
            )
            .replace("variable = \"k\"", "variable = \"alpha\"")
            .replace("values = [1, 2, 4]", "values = [-0.9, 0.0]")
            .replace("k = 2", "k = 3")
            .replace(
                "weights = [1.0, 1.0]",
                "weights = [1.0, 1.0, 1.0]",
            )
            .replace(
                "kinds = [\"accuracy\", \"format\"]",
                "kinds = [\"accuracy\", \"format\", \"tool_exec\"]",
            );
        let cfg: ExperimentConfig = toml::from_str(&bad).unwrap();
        let diags = validate_config(&cfg);
        assert!(
            diags.iter().any(|d| d.message.contains("infeasible")),
            "{diags:?}"
        );
    }

    #[test]
    fn all_violations_are_collected() {
        let bad = base_toml()
            .replace("seeds = [0, 1]", "seeds = []")
            .replace("delta = 0.1", "delta = 1.5")
            .replace("group_size = 8", "group_size = 1");
        let cfg: ExperimentConfig = toml::from_str(&bad).unwrap();
        let diags = validate_config(&cfg);
        assert!(diags.len() >= 3, "{diags:?}");
        assert!(diags.iter().any(|d| d.field == "seeds"));
        assert!(diags.iter().any(|d| d.field == "delta"));
        assert!(diags.iter().any(|d| d.field.contains("group_size")));
    }

    #[test]
    fn grid_variable_must_match_experiment() {
        let bad = base_toml().replace("variable = \"k\"", "variable = \"beta\"");
        let cfg: ExperimentConfig = toml::from_str(&bad).unwrap();
        let diags = validate_config(&cfg);
        assert!(diags.iter().any(|d| d.field == "grid.variable"), "{diags:?}");
    }

    #[test]
    fn seed_offset_wraps() {
        assert_eq!(offset_seed(5, 3), 8);
        assert_eq!(offset_seed(5, -3), 2);
        assert_eq!(offset_seed(0, -1), u64::MAX);
    }
}
