//! End-to-end checks of the command-line interface: exit codes, validation
//! diagnostics, artifact layout, determinism, and the seed-offset variable.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tamdp-lab"))
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn tiny_config(seeds: &str, out: &Path) -> String {
    format!(
        r#"
experiment = "convergence-k"
seeds = {seeds}
n_train_prompts = 8
delta = 0.1
out_dir = "{}"

[env]
n_gen = 12
n_tool = 2
n_ret = 3
n_vocab = 4
n_tools = 1
d_max = 2
gamma = 0.9
horizon = 6
env_seed = 7
branch = 2

[rewards]
k = 2
weights = [1.0, 1.0]
kinds = ["format", "accuracy"]
alpha_target = 0.0
reward_seed = 5

[optim]
group_size = 4
kl_coef = 0.01
norm_eps = 1e-4
clip_eps = 0.2
iters = 80
lipschitz_estimate = 1.0
mode = "joint"
inner_epochs = 1
prompts_per_iter = 2
opt_seed = 0

[grid]
variable = "k"
values = [2]

[analysis]
n_eval = 50
variance_replicates = 2
"#,
        out.display()
    )
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn version_prints_name_and_number() {
    let out = bin().arg("version").output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("tamdp-lab "), "{text}");
    assert!(text.contains(env!("CARGO_PKG_VERSION")), "{text}");
}

#[test]
fn validate_accepts_a_good_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "good.toml", &tiny_config("[0]", tmp.path()));
    let out = bin().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("ok:"));
}

#[test]
fn validate_reports_every_violation_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let body = tiny_config("[]", tmp.path())
        .replace("delta = 0.1", "delta = 2.0")
        .replace("group_size = 4", "group_size = 1");
    let cfg = write_config(tmp.path(), "bad.toml", &body);
    let out = bin().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let text = stdout(&out) + &stderr(&out);
    for field in ["seeds", "delta", "group_size"] {
        assert!(text.contains(field), "missing {field} in: {text}");
    }
}

#[test]
fn malformed_or_missing_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "broken.toml", "experiment = [not toml");
    let out = bin().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args(["validate", "--config"])
        .arg(tmp.path().join("nonexistent.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Unknown fields are schema errors too.
    let body = tiny_config("[0]", tmp.path()) + "\nunknown_knob = 3\n";
    let cfg = write_config(tmp.path(), "unknown.toml", &body);
    let out = bin().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_produces_expected_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg = write_config(tmp.path(), "run.toml", &tiny_config("[0]", &out_dir));
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let exp = out_dir.join("convergence-k");
    assert!(exp.join("summary.csv").is_file());
    assert!(exp.join("report.json").is_file());
    assert!(exp.join("cell-2/seed-0/report.json").is_file());
    assert!(exp.join("cell-2/seed-0/runlog.csv").is_file());
}

#[test]
fn out_flag_overrides_configured_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        &tiny_config("[0]", &tmp.path().join("ignored")),
    );
    let over = tmp.path().join("override");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&over)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(over.join("convergence-k/summary.csv").is_file());
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = tmp.path().join(name);
        let cfg = write_config(
            tmp.path(),
            &format!("{name}.toml"),
            &tiny_config("[0]", &out_dir),
        );
        let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        outputs.push(
            std::fs::read(out_dir.join("convergence-k/cell-2/seed-0/runlog.csv")).unwrap(),
        );
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn seed_offset_shifts_seeds_exactly() {
    let tmp = tempfile::tempdir().unwrap();

    // seeds [3] with offset 7 must equal seeds [10] with no offset.
    let dir_a = tmp.path().join("a");
    let cfg_a = write_config(tmp.path(), "a.toml", &tiny_config("[3]", &dir_a));
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg_a)
        .env("TAMDP_LAB_SEED_OFFSET", "7")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let dir_b = tmp.path().join("b");
    let cfg_b = write_config(tmp.path(), "b.toml", &tiny_config("[10]", &dir_b));
    let out = bin().args(["run", "--config"]).arg(&cfg_b).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let a = std::fs::read(dir_a.join("convergence-k/cell-2/seed-10/runlog.csv")).unwrap();
    let b = std::fs::read(dir_b.join("convergence-k/cell-2/seed-10/runlog.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_seed_offset_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", &tiny_config("[0]", tmp.path()));
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .env("TAMDP_LAB_SEED_OFFSET", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn runtime_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    // 30 iterations is a valid config but too short for the rate fit, which
    // needs at least 50 points: a runtime error, not a config error.
    let body = tiny_config("[0]", tmp.path()).replace("iters = 80", "iters = 30");
    let cfg = write_config(tmp.path(), "short.toml", &body);
    let out = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
