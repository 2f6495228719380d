use std::path::Path;
use std::process::Command;

use rbsde_bench::zoo::{zoo_list, zoo_problem, BsdeStage, Provenance};
use serde_json::Value;

fn rbsde() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rbsde"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn small_schedule() -> &'static str {
    r#"[{"horizon": 4, "n_penalty": 5, "n_paths": 2000}, {"horizon": 4, "n_penalty": 10, "n_paths": 2000}]"#
}

fn run(args: &[&str]) -> (i32, String) {
    let out = rbsde().args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn tagged_numbers(v: &Value, path: &str, bad: &mut Vec<String>) {
    match v {
        Value::Number(_) => bad.push(path.to_string()),
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                tagged_numbers(x, &format!("{path}[{i}]"), bad);
            }
        }
        Value::Object(o) => {
            if let Some(val) = o.get("value") {
                if val.is_number() {
                    match o.get("error") {
                        Some(Value::Number(_)) => {}
                        Some(Value::String(s)) if s == "exact" => {}
                        _ => bad.push(format!("{path}.error")),
                    }
                    for (k, x) in o {
                        if k != "value" && k != "error" {
                            tagged_numbers(x, &format!("{path}.{k}"), bad);
                        }
                    }
                    return;
                }
            }
            for (k, x) in o {
                tagged_numbers(x, &format!("{path}.{k}"), bad);
            }
        }
        _ => {}
    }
}

#[test]
fn zoo_lists_every_problem_with_sourced_values() {
    let list = zoo_list();
    assert!(list.len() >= 5);
    for z in &list {
        assert_eq!(z.oracle == "none", z.known_value.is_none(), "{}", z.name);
    }
    let cv = list.iter().find(|z| z.name == "controlled-vol-1d").unwrap();
    assert_eq!(cv.oracle, "hjb-oracle");
    assert_eq!(cv.known_value.as_ref().unwrap().provenance, Provenance::HjbOracle);
    let md = zoo_problem("memory-drift").unwrap();
    match md.bsde_stage {
        BsdeStage::SummaryRegression { caveat } => assert!(!caveat.is_empty()),
        other => panic!("memory-drift stage {other:?}"),
    }
    assert!(!md.spec.is_markovian());
}

#[test]
fn zoo_list_subcommand_prints_json() {
    let out = rbsde().args(["zoo", "list"]).output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v.as_array().unwrap().len() >= 5);
}

#[test]
fn configuration_errors_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.json");
    assert_eq!(run(&["run", missing.to_str().unwrap()]).0, 3);
    let c = write_config(d.path(), r#"{"problem": "no-such-problem", "seeds": {"simulation": 1, "evaluation": 2}}"#);
    assert_eq!(run(&["run", c.to_str().unwrap()]).0, 3);
    let c = write_config(d.path(), r#"{"problem": "bangbang-1d"}"#);
    assert_eq!(run(&["validate", c.to_str().unwrap()]).0, 3);
    let c = write_config(
        d.path(),
        r#"{"problem": "memory-drift", "seeds": {"simulation": 1, "evaluation": 2}, "pipeline": ["solve-hjb"]}"#,
    );
    assert_eq!(run(&["run", c.to_str().unwrap()]).0, 3);
    let c = write_config(
        d.path(),
        r#"{"problem": "bangbang-1d", "seeds": {"simulation": 1, "evaluation": 2}, "pipeline": ["compare"]}"#,
    );
    assert_eq!(run(&["run", c.to_str().unwrap()]).0, 3);
}

#[test]
fn beta_below_growth_rate_fails_the_gate() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let c = write_config(
        d.path(),
        r#"{
            "problem": {
                "name": "slow-discount",
                "beta": 0.5,
                "x0": [0.0],
                "regime": {"kind": "A'", "r": 2.0, "m": 1.0},
                "lipschitz": 1.0,
                "control_space": {"finite": [-1.0, 1.0]},
                "coefficients": {"drift": "a - x", "diffusion": "1.0", "reward": "-x * x"}
            },
            "seeds": {"simulation": 1, "evaluation": 2},
            "pipeline": ["simulate"]
        }"#,
    );
    let (code, _) = run(&["--out-dir", out.to_str().unwrap(), "run", c.to_str().unwrap()]);
    assert_eq!(code, 2);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(rep["stages"][0]["status"], "fail");
    assert_eq!(rep["stages"][1]["status"], "skipped");
    assert!(!out.join("ensemble.csv").exists());
}

#[test]
fn constant_reward_pipeline_passes_with_tagged_report() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let c = write_config(
        d.path(),
        &format!(
            r#"{{"problem": "constant-reward", "seeds": {{"simulation": 5, "evaluation": 6}},
                "schedule": {}, "simulate": {{"horizon": 2, "n_paths": 500, "export_paths": 3}},
                "invariants": {{"samples": 2, "n_paths": 1000, "sigma": 3}}}}"#,
            r#"[{"horizon": 12, "n_penalty": 5, "n_paths": 2000}, {"horizon": 12, "n_penalty": 10, "n_paths": 2000}]"#
        ),
    );
    let (code, err) = run(&["--out-dir", out.to_str().unwrap(), "run", c.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    for f in ["report.json", "summary.csv", "ensemble.csv", "stages.csv", "feedback_table.csv", "hjb_grid.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let mut bad = Vec::new();
    tagged_numbers(&rep, "", &mut bad);
    assert!(bad.is_empty(), "untagged numbers at {bad:?}");
    let bsde = rep["stages"].as_array().unwrap().iter().find(|s| s["stage"] == "solve-bsde").unwrap();
    let y0 = bsde["quantities"].as_array().unwrap().iter().find(|q| q["name"] == "y0").unwrap();
    let y = y0["value"].as_f64().unwrap();
    let se = y0["error"].as_f64().unwrap();
    let tail = 2.0 * (-0.5f64 * 12.0).exp();
    assert!((y - 2.0).abs() <= tail + 3.0 * se + 1e-9, "{y}");
    let ens = std::fs::read_to_string(out.join("ensemble.csv")).unwrap();
    assert_eq!(ens.lines().count(), 1 + 3 * 201);
}

#[test]
fn summary_is_reproducible_single_threaded() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(
        d.path(),
        &format!(
            r#"{{"problem": "bangbang-1d", "seeds": {{"simulation": 11, "evaluation": 12}},
                "schedule": {}, "pipeline": ["simulate", "solve-bsde", "invariants"],
                "simulate": {{"horizon": 2, "n_paths": 500, "export_paths": 2}},
                "invariants": {{"samples": 2, "n_paths": 500, "sigma": 3}}}}"#,
            small_schedule()
        ),
    );
    let mut sums = Vec::new();
    for i in 0..2 {
        let out = d.path().join(format!("out{i}"));
        let (code, err) = run(&["--threads", "1", "--out-dir", out.to_str().unwrap(), "run", c.to_str().unwrap()]);
        assert!(code == 0 || code == 2, "{err}");
        sums.push(std::fs::read(out.join("summary.csv")).unwrap());
    }
    assert_eq!(sums[0], sums[1]);
    let text = String::from_utf8(sums[0].clone()).unwrap();
    assert!(text.starts_with("stage,quantity,value,error\n"));
}

#[test]
fn seed_flag_changes_the_estimate() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(
        d.path(),
        r#"{"problem": "bangbang-1d", "seeds": {"simulation": 1, "evaluation": 2},
            "simulate": {"horizon": 1, "n_paths": 200, "export_paths": 1}}"#,
    );
    let mut sums = Vec::new();
    for seed in ["3", "4"] {
        let out = d.path().join(format!("o{seed}"));
        let (code, err) = run(&["--seed", seed, "--out-dir", out.to_str().unwrap(), "simulate", c.to_str().unwrap()]);
        assert_eq!(code, 0, "{err}");
        sums.push(std::fs::read_to_string(out.join("summary.csv")).unwrap());
    }
    assert_ne!(sums[0], sums[1]);
}

#[test]
fn memory_drift_runs_forward_and_regression_stages() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("out");
    let c = write_config(
        d.path(),
        &format!(
            r#"{{"problem": "memory-drift", "seeds": {{"simulation": 2, "evaluation": 3}}, "schedule": {},
                "simulate": {{"horizon": 2, "n_paths": 500, "export_paths": 2}},
                "invariants": {{"samples": 2, "n_paths": 500, "sigma": 3}}}}"#,
            small_schedule()
        ),
    );
    let (code, err) = run(&["--out-dir", out.to_str().unwrap(), "run", c.to_str().unwrap()]);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(code, 0, "{err}\n{rep:#}");
    let names: Vec<&str> = rep["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(names, ["validate", "simulate", "solve-bsde", "invariants"]);
    assert_eq!(rep["bsde_stage"]["kind"], "summary-regression");
}
