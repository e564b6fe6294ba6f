use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn rayopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rayopt")).args(args).output().expect("binary runs")
}

fn write_json(dir: &Path, name: &str, v: &serde_json::Value) -> String {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_owned()
}

fn linear(w0: [f64; 4], w1: [f64; 4]) -> serde_json::Value {
    let weights: Vec<f64> = w0.iter().chain(w1.iter()).copied().collect();
    json!({"kind": "linear", "classes": 2, "dim": 4, "weights": weights, "bias": [0.0, 0.0]})
}

fn attack_config(budget: u64) -> serde_json::Value {
    json!({
        "target": linear([1.0, 0.2, 0.0, 0.0], [-1.0, 0.0, 0.3, 0.0]),
        "surrogates": [linear([1.0, 0.1, 0.0, 0.0], [-1.0, 0.0, 0.2, 0.1])],
        "goal": {"original": [1.0, 0.5, -0.2, 0.3], "mode": {"mode": "untargeted", "label": 0}},
        "attack": {"method": "prior_opt", "budget": budget, "init": {"strategy": "random", "n": 10},
                   "estimator": {"q": 3}}
    })
}

fn suite_config() -> serde_json::Value {
    json!({
        "instances": 2, "d": 12, "classes": 3, "seed": 3, "budgets": [150, 300],
        "family": {"kind": "linear_prototypes"},
        "surrogates": {"kind": "twin", "rho": 0.3, "count": 1},
        "methods": [
            {"name": "sign", "attack": {"method": "sign_opt", "estimator": {"q": 6}}},
            {"name": "prior", "attack": {"method": "prior_sign_opt", "estimator": {"q": 6}}, "surrogates": 1}
        ]
    })
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn attack_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "a.json", &attack_config(300));
    for format in ["csv", "jsonl"] {
        let a = rayopt(&["attack", "--config", &cfg, "--format", format]);
        let b = rayopt(&["attack", "--config", &cfg, "--format", format]);
        assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stderr));
        assert!(!a.stdout.is_empty());
        assert_eq!(a.stdout, b.stdout);
    }
    let csv = String::from_utf8(rayopt(&["attack", "--config", &cfg]).stdout).unwrap();
    assert!(csv.starts_with("query,distortion\n"));
    assert!(!csv.contains('\r'));
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "a.json", &attack_config(300));
    let a = rayopt(&["attack", "--config", &cfg, "--seed", "1"]);
    let b = rayopt(&["attack", "--config", &cfg, "--seed", "2"]);
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn attack_writes_into_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "a.json", &attack_config(300));
    let out = tmp.path().join("run");
    let o = rayopt(&["attack", "--config", &cfg, "--format", "jsonl", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let line = fs::read_to_string(out.join("run.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim_end()).unwrap();
    let costs = &v["costs"];
    let total: u64 = ["init", "sign", "finite_diff", "line_search"].iter().map(|k| costs[k].as_u64().unwrap()).sum();
    assert_eq!(total, v["queries"].as_u64().unwrap());
}

#[test]
fn suite_artifacts_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "s.json", &suite_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = rayopt(&["suite", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.iter().any(|(p, _)| p.ends_with("report.json")));
    assert!(ta.iter().any(|(p, _)| p.ends_with("sign_0001.csv")));
    assert_eq!(ta, tb);
}

#[test]
fn budget_flag_extends_suite_budgets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "s.json", &suite_config());
    let out = tmp.path().join("o");
    let o = rayopt(&["suite", "--config", &cfg, "--budget", "200", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["budgets"], json!([150, 200]));
}

#[test]
fn theory_and_lemmas_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let th = write_json(tmp.path(), "t.json", &json!({"kinds": ["sign_opt"], "trials": 300, "seed": 4}));
    let a = rayopt(&["theory", "--config", &th]);
    let b = rayopt(&["theory", "--config", &th]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let j = rayopt(&["theory", "--config", &th, "--format", "jsonl"]);
    let rows = String::from_utf8(j.stdout).unwrap();
    assert!(rows.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));

    let lm = write_json(tmp.path(), "l.json", &json!({"dims": [2, 3], "trials": 3000}));
    let a = rayopt(&["lemmas", "--config", &lm]);
    let b = rayopt(&["lemmas", "--config", &lm]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_json(tmp.path(), "bad.json", &json!({"bogus": 1}));
    assert_eq!(rayopt(&["attack", "--config", &bad]).status.code(), Some(2));
    assert_eq!(rayopt(&["suite", "--config", &bad]).status.code(), Some(2));
    assert_eq!(rayopt(&["attack", "--config", "/nonexistent/cfg.json"]).status.code(), Some(2));
    assert_eq!(rayopt(&["attack"]).status.code(), Some(2));

    let mut s = suite_config();
    s["methods"][0]["attack"]["estimator"]["q"] = json!(40);
    let p = write_json(tmp.path(), "q.json", &s);
    let o = rayopt(&["suite", "--config", &p, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("methods[0].attack.estimator.q"));

    let mut a = attack_config(300);
    a["goal"]["mode"]["label"] = json!(1);
    let p = write_json(tmp.path(), "g.json", &a);
    assert_eq!(rayopt(&["attack", "--config", &p]).status.code(), Some(2));
}

#[test]
fn exhausted_budget_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_json(tmp.path(), "a.json", &attack_config(3));
    let o = rayopt(&["attack", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "query,distortion\n3,inf\n");
}

#[test]
fn failed_validation_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let lm = write_json(tmp.path(), "l.json", &json!({"dims": [2, 3, 16, 256], "trials": 100}));
    // A 100-trial draw that lands one check outside its band.
    let o = rayopt(&["lemmas", "--config", &lm, "--seed", "35"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8(o.stdout).unwrap().contains(",false\n"));
    let few = write_json(tmp.path(), "few.json", &json!({"dims": [16], "trials": 4}));
    assert_eq!(rayopt(&["lemmas", "--config", &few]).status.code(), Some(2));
}
