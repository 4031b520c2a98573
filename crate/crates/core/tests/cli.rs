use std::path::Path;
use std::process::{Command, Output};

fn cmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmpc"))
        .args(args)
        .env_remove("CMPC_LOG")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_on_empty_scenario_writes_logs_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = cmpc(&["run", "--scenario", "empty", "--seeds", "2", "--planner", "cmpc,cmpc_0", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for kind in ["cmpc", "cmpc_0"] {
        for seed in 0..2 {
            for ext in ["ndjson", "csv"] {
                let f = dir.path().join(format!("{kind}_seed{seed}.{ext}"));
                assert!(f.is_file(), "missing {}", f.display());
            }
        }
        assert!(dir.path().join(format!("{kind}_metrics.json")).is_file());
    }
    let table = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("Method,Collision"));
    assert!(lines[1].starts_with("cmpc,NO,"));
    let header = std::fs::read_to_string(dir.path().join("cmpc_seed0.csv")).unwrap();
    assert!(header.starts_with("time,x,y,theta,v,omega,v_lat,branch_count,solve_ms,collision_flag"));
}

#[test]
fn missing_scenario_file_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.json");
    let m = missing.to_str().unwrap();
    let o = cmpc(&["run", "--scenario", m, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(m), "{}", stderr(&o));
}

#[test]
fn consensus_longer_than_horizon_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    // 7 s is 28 steps against a 24-step horizon
    let o = cmpc(&["run", "--scenario", "empty", "--consensus-sec", "7", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("consensus"), "{}", stderr(&o));
}

#[test]
fn unknown_planner_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmpc(&["run", "--scenario", "empty", "--planner", "mystery", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_covers_the_grid_and_routes_zero_to_cmpc_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmpc(&[
        "sweep",
        "--scenario",
        "empty",
        "--axis",
        "0,2",
        "--seeds",
        "3..5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("0,0,cmpc_0,"), "{}", rows[0]);
    assert!(rows[1].starts_with("2,8,cmpc,"), "{}", rows[1]);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap()).unwrap();
    let cells = json.as_array().unwrap();
    assert_eq!(cells.len(), 2);
    // |axis| x |seeds| episodes in total
    let episodes: u64 = cells.iter().map(|c| c["report"]["seeds"].as_u64().unwrap()).sum();
    assert_eq!(episodes, 4);
}

#[test]
fn verify_passes_and_repeats_exactly() {
    let a = cmpc(&["verify"]);
    let b = cmpc(&["verify"]);
    assert_eq!(a.status.code(), Some(0), "{}", String::from_utf8_lossy(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8_lossy(&a.stdout);
    assert!(text.lines().count() >= 9);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"scenario": "empty", "seeds": "1", "planner": "cmpc_0", "consensus_sec": 7.0}"#).unwrap();
    let out = dir.path().join("o");
    // the file's consensus length alone would be rejected
    let o = cmpc(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--consensus-sec",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(Path::new(&out.join("cmpc_0_seed0.ndjson")).is_file());
}

#[test]
fn shipped_scenario_files_match_the_builtins() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for (file, builtin) in [
        ("canonical.json", cmpc::sim::Scenario::canonical()),
        ("empty.json", cmpc::sim::Scenario::empty(28.0)),
    ] {
        let loaded = cmpc::sim::Scenario::load(&root.join(file)).unwrap();
        assert_eq!(loaded, builtin, "{file}");
    }
}
