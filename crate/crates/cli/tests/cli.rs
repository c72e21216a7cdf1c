//! End-to-end checks of the compiled binary: exit codes, output formats,
//! flag/env precedence, and byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_difflab"))
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let body = format!(
        r#"{{
            "model_kind": "quadratic",
            "n_nodes": 3,
            "dim": 2,
            "mu": 1.5,
            "iterations": 60,
            "runs": 2,
            "master_seed": 5{extra}
        }}"#
    );
    std::fs::write(&path, body).unwrap();
    path
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn selftest_passes_and_exits_zero() {
    let out = bin().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("all 6 checks passed"), "{text}");
    assert!(!text.contains("FAILED"), "{text}");
}

#[test]
fn missing_config_is_a_config_error_naming_the_file() {
    let out = bin().args(["simulate", "--config", "/nonexistent/nowhere.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("nowhere.json"), "{err}");
}

#[test]
fn malformed_json_and_unknown_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");

    std::fs::write(&path, "{ not json").unwrap();
    let out = bin().args(["simulate", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));

    let cfg = write_config(dir.path(), r#", "bogus_key": 1"#);
    let out = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("bogus_key"), "{}", stderr_of(&out));

    let cfg = write_config(dir.path(), r#", "mu": -1"#);
    let out = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_strategy_flag_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--strategies", "noncoop,warpdrive"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("warpdrive"), "{}", stderr_of(&out));
}

#[test]
fn simulate_writes_deterministic_csv_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");

    let run = |path: &Path, threads: &str| {
        let out = bin()
            .args(["simulate", "--config"])
            .arg(&cfg)
            .args(["--output"])
            .arg(path)
            .args(["--threads", threads])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr_of(&out));
    };
    run(&out_a, "1");
    run(&out_b, "3");

    let bytes_a = std::fs::read(&out_a).unwrap();
    let bytes_b = std::fs::read(&out_b).unwrap();
    assert_eq!(bytes_a, bytes_b, "thread count changed the output");

    let text = String::from_utf8(bytes_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iteration,strategy,er_mean,er_db,er_stderr,runs");
    let first = lines.next().unwrap();
    assert!(first.starts_with("1,noncoop,"), "{first}");
    assert!(first.ends_with(",2"), "{first}");
    for name in ["noncoop", "centralized", "consensus", "diffusion"] {
        assert!(text.contains(&format!(",{name},")), "missing {name}");
    }

    let meta_path = dir.path().join("a.csv.meta.json");
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
    assert_eq!(meta["master_seed"], 5);
    assert_eq!(meta["config"]["n_nodes"], 3);
    assert_eq!(meta["common_random_numbers"], true);

    // a different seed must change the curve bytes
    let out_c = dir.path().join("c.csv");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--output"])
        .arg(&out_c)
        .args(["--seed", "6"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(std::fs::read(&out_c).unwrap(), bytes_b);
}

#[test]
fn simulate_honors_strategy_subset_and_stdout_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--strategies", "diffusion"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.starts_with("iteration,strategy,"), "{text}");
    assert!(text.contains(",diffusion,"));
    for absent in ["noncoop", "centralized", "consensus"] {
        assert!(!text.contains(&format!(",{absent},")), "unexpected {absent} rows");
    }
}

#[test]
fn simulate_takes_output_path_from_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_config.csv");
    let cfg = write_config(
        dir.path(),
        &format!(r#", "output": "{}""#, target.display()),
    );
    let out = bin().args(["simulate", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(target.exists());
}

#[test]
fn threads_env_var_is_honored_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_flag = dir.path().join("flag.csv");
    let out_env = dir.path().join("env.csv");

    let st = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--output"])
        .arg(&out_flag)
        .args(["--threads", "2"])
        .output()
        .unwrap();
    assert!(st.status.success());

    let st = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .args(["--output"])
        .arg(&out_env)
        .env("DIFFLAB_THREADS", "2")
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", stderr_of(&st));
    assert_eq!(std::fs::read(&out_flag).unwrap(), std::fs::read(&out_env).unwrap());

    let st = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .env("DIFFLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(stderr_of(&st).contains("DIFFLAB_THREADS"), "{}", stderr_of(&st));
}

#[test]
fn predict_emits_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin().args(["predict", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "i,predictor_exact,predictor_mlsp,transient_lower,transient_upper,cramer_rao"
    );
    assert!(lines.len() > 5);
    // row at i=1 sits below the bracket's validity threshold
    let early: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(early[0], "1");
    assert_eq!(early[3], "NaN");
    assert_eq!(early[4], "NaN");
    assert!(early[1].parse::<f64>().unwrap().is_finite());
    assert!(early[5].parse::<f64>().unwrap().is_finite());
    // the final row is fully populated and the bracket is ordered
    let last: Vec<&str> = lines.last().unwrap().split(',').collect();
    assert_eq!(last[0], "60");
    let lo: f64 = last[3].parse().unwrap();
    let up: f64 = last[4].parse().unwrap();
    assert!(lo.is_finite() && up.is_finite() && lo <= up);

    // without observation noise there is no information bound
    let quiet = dir.path().join("quiet.json");
    std::fs::write(
        &quiet,
        r#"{"model_kind": "quadratic", "n_nodes": 2, "dim": 1, "mu": 0.2,
            "sigma_v_sq": 0.0, "iterations": 40, "runs": 1, "master_seed": 5}"#,
    )
    .unwrap();
    let out = bin().args(["predict", "--config"]).arg(&quiet).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    let last = text.lines().last().unwrap();
    assert!(last.ends_with(",NaN"), "{last}");
}

#[test]
fn topology_prints_neighbor_lists_and_perron_norm() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin().args(["topology", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4); // 3 nodes + the perron line
    for k in 0..3 {
        assert!(lines[k].starts_with(&format!("{k}:")), "{}", lines[k]);
        // every node lists itself (self-loops are part of the model)
        let members: Vec<usize> =
            lines[k][2..].split_whitespace().map(|s| s.parse().unwrap()).collect();
        assert!(members.contains(&k), "{}", lines[k]);
    }
    assert!(lines[3].starts_with("perron_norm_sq="), "{}", lines[3]);
    let v: f64 = lines[3].split('=').nth(1).unwrap().parse().unwrap();
    assert!(v > 0.0 && v <= 1.0);

    let again = bin().args(["topology", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.stdout, again.stdout, "topology draw is not deterministic");

    let other_run = bin()
        .args(["topology", "--config"])
        .arg(&cfg)
        .args(["--run", "1"])
        .output()
        .unwrap();
    assert!(other_run.status.success());
}

#[test]
fn compare_summarizes_each_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bin().args(["compare", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    for name in ["noncoop", "centralized", "consensus", "diffusion"] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
    assert!(text.contains("strategy"), "{text}");
}
