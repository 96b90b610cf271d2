use std::path::Path;
use std::process::{Command, Output};

const LIGHT: [&str; 8] = [
    "--critic-steps",
    "10",
    "--ensemble-size",
    "2",
    "--gp-restarts",
    "4",
    "--acquisition-restarts",
    "4",
];

fn abs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abs"))
        .args(args)
        .env_remove("ABS_OUT_DIR")
        .env_remove("RUST_LOG")
        .output()
        .expect("abs binary runs")
}

fn run_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    abs(&args)
}

fn history(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("history.csv")).unwrap()
}

fn column(csv_text: &str, name: &str) -> Vec<f64> {
    let mut lines = csv_text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn run_writes_history_config_and_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["--algo", "abs", "--env", "lqr2", "--seed", "0", "--iters", "3"];
    args.extend_from_slice(&LIGHT);
    let out = run_into(tmp.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));

    let text = history(tmp.path());
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "episode,env_steps,return,best_return,r2_val,r2_test,wall_ms"
    );
    // 3 iterations of N_c = 2 central and M = 6 acquisition episodes.
    assert_eq!(lines.count(), 3 * (2 + 6));
    let episodes = column(&text, "episode");
    assert_eq!(episodes.first(), Some(&1.0));
    assert_eq!(episodes.last(), Some(&24.0));

    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["search"]["iterations"], 3);
    assert_eq!(resolved["search"]["critic_steps"], 10);
    assert_eq!(resolved["search"]["algorithm"], "abs");

    let policy: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("final_policy.json")).unwrap()).unwrap();
    assert_eq!(policy["theta"].as_array().unwrap().len(), 1);
    assert_eq!(policy["theta"][0].as_array().unwrap().len(), 2);
    assert_eq!(policy["episodes"], 24);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["--algo", "abs", "--seed", "5", "--iters", "2"];
    args.extend_from_slice(&LIGHT);
    assert!(run_into(a.path(), &args).status.success());
    assert!(run_into(b.path(), &args).status.success());
    assert_eq!(history(a.path()), history(b.path()));
    assert_eq!(
        std::fs::read(a.path().join("final_policy.json")).unwrap(),
        std::fs::read(b.path().join("final_policy.json")).unwrap()
    );
}

#[test]
fn resolved_config_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut args = vec!["--algo", "mpd", "--seed", "11", "--iters", "2", "--step-size", "0.07"];
    args.extend_from_slice(&LIGHT);
    assert!(run_into(a.path(), &args).status.success());
    let resolved = a.path().join("config.resolved.json");
    let out = run_into(b.path(), &["--config", resolved.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(history(a.path()), history(b.path()));
}

#[test]
fn ars_best_return_is_non_decreasing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_into(tmp.path(), &["--algo", "ars", "--env", "lqr2", "--iters", "6"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = history(tmp.path());
    let best = column(&text, "best_return");
    let ret = column(&text, "return");
    assert_eq!(best.len(), 6 * 2 * 8);
    let mut running = f64::NEG_INFINITY;
    for (b, r) in best.iter().zip(&ret) {
        running = running.max(*r);
        assert_eq!(*b, running);
    }
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
    // ARS has no critic or GP: both score columns are empty.
    assert!(column(&text, "r2_val").iter().all(|v| v.is_nan()));
}

#[test]
fn semantic_config_error_names_file_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "log_every = 1\n[search]\niterations = 0\n").unwrap();
    let out = abs(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("bad.toml:3"), "{err}");
    assert!(err.contains("iterations"), "{err}");
}

#[test]
fn unknown_key_is_rejected_with_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"search\": {\n    \"iteratons\": 3\n  }\n}\n").unwrap();
    let out = abs(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("bad.json:3"), "{err}");
    assert!(err.contains("iteratons"), "{err}");
}

#[test]
fn flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[search]\nalgorithm = \"ars\"\niterations = 50\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = abs(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "1",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(column(&history(&out_dir), "episode").len(), 2 * 8);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let from_env = tmp.path().join("env");
    let from_flag = tmp.path().join("flag");
    let base = ["run", "--algo", "ars", "--iters", "1"];
    let out = Command::new(env!("CARGO_BIN_EXE_abs"))
        .args(base)
        .env("ABS_OUT_DIR", &from_env)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(from_env.join("history.csv").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_abs"))
        .args(base)
        .args(["--out-dir", from_flag.to_str().unwrap()])
        .env("ABS_OUT_DIR", from_env.join("unused"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(from_flag.join("history.csv").exists());
    assert!(!from_env.join("unused").exists());
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let out = run_into(&blocker.join("sub"), &["--algo", "ars", "--iters", "1"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn empty_campaign_verifies_cleanly() {
    let out = abs(&[
        "verify",
        "--pdl-mdps",
        "0",
        "--bound-pairs",
        "0",
        "--equivalence-checks",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["pdl"]["instances"], 0);
    assert_eq!(report["bound"]["violations"], 0);
    assert_eq!(report["equivalence"]["policy_violations"], 0);
}

#[test]
fn report_tolerance_is_separate_from_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let report_path = tmp.path().join("report.json");
    let out = abs(&[
        "verify",
        "--pdl-mdps",
        "3",
        "--pdl-pairs-per-mdp",
        "10",
        "--bound-pairs",
        "0",
        "--equivalence-checks",
        "5",
        "--report-tolerance",
        "1e-15",
        "--report",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report, serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap());
    assert_eq!(report["report_tolerance"], 1e-15);
    assert_eq!(report["contract_tolerance"], 1e-9);
    assert_eq!(report["pdl"]["violations"], 0);
    assert!(report["pdl"]["above_report_tolerance"].as_u64().unwrap() > 0);
}

#[test]
fn invalid_campaign_is_a_config_error() {
    let out = abs(&["verify", "--min-states", "5", "--max-states", "2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_runs_every_seed_in_its_own_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = abs(&[
        "sweep",
        "--out-dir",
        tmp.path().to_str().unwrap(),
        "--seeds",
        "0..2",
        "--envs",
        "lqr2,nav2",
        "--algo",
        "ars",
        "--iters",
        "1",
        "--jobs",
        "2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = std::fs::read_to_string(tmp.path().join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    for env in ["lqr2", "nav2"] {
        for seed in 0..2 {
            let dir = tmp.path().join(env).join(format!("seed-{seed}"));
            assert_eq!(column(&history(&dir), "episode").len(), 16);
        }
    }
    assert_ne!(
        history(&tmp.path().join("lqr2/seed-0")),
        history(&tmp.path().join("lqr2/seed-1"))
    );
}
