use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn guardrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guardrl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(steps: u64, slip: f64) -> Value {
    json!({
        "variant": "guardian",
        "env": {
            "kind": "grid",
            "map": ["....", "....", "SXXG"],
            "step_reward": -1.0,
            "goal_reward": 10.0,
            "hazard_reward": -50.0,
            "slip_prob": slip,
            "gamma": 0.9
        },
        "learner": {
            "alpha": 0.05, "tau": 0.05, "gamma": 0.9, "critic_lr": 0.1, "actor_lr": 1.0,
            "entropy_sign": "soft_consistent", "backup_mode": "guarded", "ensemble_size": 2,
            "bootstrap_prob": 0.8
        },
        "dts": { "delta_min": 1, "delta_max": 8, "beta": 1.0, "horizon": steps.max(1) },
        "dss": { "lambda_min": 0.1, "lambda_max": 0.5, "k": 0.01, "horizon": steps.max(1) },
        "total_steps": steps,
        "batch_size": 16,
        "eval_every": 100,
        "seed": 3,
        "online_buffer_capacity": 2000,
        "generate_offline": { "behavior": { "kind": "uniform" }, "n_episodes": 20, "max_ep_len": 30, "guard": false },
        "output_dir": "out"
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn solve_corridor_with_zero_discount() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "env": { "kind": "grid", "map": ["S.G"], "step_reward": -1.0, "goal_reward": 1.0,
                 "hazard_reward": -1.0, "gamma": 0.0 }
    });
    let path = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("solve");
    let o = guardrl(&["solve", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(&out.join("solve.json"))["gap"], 0.0);
    let q = read_json(&out.join("q_star.json"));
    assert_eq!(q[1][3], 1.0);
}

#[test]
fn solve_random_mdp_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "env": { "kind": "random", "num_states": 15, "num_actions": 4, "safe_fraction": 0.5,
                 "gamma": 0.95, "seed": 21 },
        "output_dir": "solved"
    });
    let path = write_config(dir.path(), "r.json", &cfg);
    let o = guardrl(&["solve", s(&path)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    // relative output_dir resolves against the working directory
    let report = read_json(Path::new("solved/solve.json"));
    std::fs::remove_dir_all("solved").unwrap();
    assert!(report["gap"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn solve_reports_nonconvergence_as_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "env": { "kind": "random", "num_states": 10, "num_actions": 3, "safe_fraction": 0.5,
                 "gamma": 0.99, "seed": 1 },
        "solve": { "tol": 1e-12, "max_iters": 5 }
    });
    let path = write_config(dir.path(), "r.json", &cfg);
    let out = dir.path().join("o");
    let o = guardrl(&["solve", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_json_exits_two_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"env\": {\n    \"kind\": \"grid\",,\n}").unwrap();
    for cmd in ["solve", "train"] {
        let o = guardrl(&[cmd, s(&path), "--out", s(dir.path())]);
        assert_eq!(o.status.code(), Some(2));
        let msg = String::from_utf8_lossy(&o.stderr);
        assert!(msg.contains("line 3 column"), "{msg}");
    }
    let o = guardrl(&["train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(100, 0.0);
    cfg["dts"]["horizon"] = json!(7);
    let path = write_config(dir.path(), "c.json", &cfg);
    let o = guardrl(&["train", s(&path), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = guardrl(&["train", s(&path), "--steps", "50", "--variant", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_steps_writes_snapshot_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "c.json", &small_config(300, 0.0));
    let out = dir.path().join("o");
    let o = guardrl(&["train", s(&path), "--steps", "0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(out.join("summary.json").exists());
    assert_eq!(read_json(&out.join("effective_config.json"))["total_steps"], 0);
}

#[test]
fn guardian_on_zero_slip_grid_never_violates() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "c.json", &small_config(800, 0.0));
    let out = dir.path().join("o");
    let o = guardrl(&["train", s(&path), "--variant", "guardian", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(read_json(&out.join("summary.json"))["executed_violations"], 0);
}

#[test]
fn overrides_and_effective_config_reproduce_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), "c.json", &small_config(300, 0.1));
    let a = dir.path().join("a");
    let o = guardrl(&["train", s(&path), "--seed", "9", "--steps", "400", "--out", s(&a), "learner.alpha=0.2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let eff = read_json(&a.join("effective_config.json"));
    assert_eq!(eff["seed"], 9);
    assert_eq!(eff["total_steps"], 400);
    assert_eq!(eff["dss"]["horizon"], 400);
    assert_eq!(eff["learner"]["alpha"], 0.2);

    let b = dir.path().join("b");
    let o = guardrl(&["train", s(&a.join("effective_config.json")), "--out", s(&b)]);
    assert_eq!(o.status.code(), Some(0));
    for f in ["log.jsonl", "summary.json", "log.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn offline_dataset_path_resolves_next_to_config() {
    use guardrl_core::envs::{behavior_policy, build_cliff_grid, collect_offline_dataset, Behavior, CollectConfig, GridParams, GridWorldSpec};
    let dir = tempfile::tempdir().unwrap();
    let g = GridWorldSpec::from_ascii(
        &["....", "....", "SXXG"],
        GridParams { step_reward: -1.0, goal_reward: 10.0, hazard_reward: -50.0, slip_prob: 0.0, gamma: 0.9 },
    )
    .unwrap();
    let (mdp, spec) = build_cliff_grid(&g).unwrap();
    let beh = behavior_policy(Behavior::UniformSafe, &mdp, &spec).unwrap();
    let data = collect_offline_dataset(&mdp, &spec, &beh, &CollectConfig { n_episodes: 5, max_ep_len: 20, guard: true, seed: 1 }).unwrap();
    data.save(dir.path().join("data.jsonl")).unwrap();
    let mut cfg = small_config(200, 0.0);
    cfg.as_object_mut().unwrap().remove("generate_offline");
    cfg["offline_path"] = json!("data.jsonl");
    let path = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("o");
    let o = guardrl(&["train", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    cfg["offline_path"] = json!("missing.jsonl");
    let path = write_config(dir.path(), "c2.json", &cfg);
    let o = guardrl(&["train", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_and_report_medians() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(150, 0.1);
    cfg["sweep"] = json!({ "variants": ["guardian", "exec_mask_only"], "seeds": (0..10).collect::<Vec<u64>>() });
    let path = write_config(dir.path(), "c.json", &cfg);
    let out = dir.path().join("sweep");
    let o = guardrl(&["sweep", s(&path), "--jobs", "4", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let mut dirs = Vec::new();
    let mut returns: Vec<Vec<f64>> = vec![Vec::new(), Vec::new()];
    for (i, v) in ["guardian", "exec_mask_only"].iter().enumerate() {
        for seed in 0..10 {
            let d = out.join(v).join(format!("seed_{seed}"));
            returns[i].push(read_json(&d.join("summary.json"))["eval_return"].as_f64().unwrap());
            dirs.push(d);
        }
    }
    // a sequential rerun of one job gives the same bytes
    let single = dir.path().join("single");
    let o = guardrl(&["train", s(&path), "--variant", "exec_mask_only", "--seed", "4", "--out", s(&single)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(single.join("log.jsonl")).unwrap(),
        std::fs::read(out.join("exec_mask_only/seed_4/log.jsonl")).unwrap()
    );

    let csv_path = dir.path().join("report.csv");
    let mut args = vec!["report".to_string(), "--out".into(), s(&csv_path).into()];
    args.extend(dirs.iter().map(|d| s(d).to_string()));
    let o = guardrl(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "eval_return").unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for (i, row) in rows.iter().enumerate() {
        let mut r = returns[i].clone();
        r.sort_by(f64::total_cmp);
        let hand = (r[4] + r[5]) / 2.0;
        assert_eq!(row[0].to_string(), ["guardian", "exec_mask_only"][i]);
        assert_eq!(&row[1], "10");
        assert_eq!(row[col].parse::<f64>().unwrap(), hand);
    }

    let o = guardrl(&["report", s(&dirs[0])]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn report_rejects_bad_input() {
    let o = guardrl(&["report"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("nope");
    let o = guardrl(&["report", s(&bogus)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
    std::fs::create_dir_all(&bogus).unwrap();
    std::fs::write(bogus.join("log.jsonl"), "{not json}\n").unwrap();
    std::fs::write(bogus.join("summary.json"), "{}").unwrap();
    let o = guardrl(&["report", s(&bogus)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("log.jsonl"));
}
