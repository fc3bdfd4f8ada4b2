use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfmt::scenario::BUNDLED;

fn dfmt(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfmt"))
        .args(args)
        .env("DFMT_OUTPUT_DIR", out)
        .output()
        .expect("binary runs")
}

fn scenario(dir: &Path, name: &str) -> PathBuf {
    let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name).unwrap();
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, text).unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn free_world_plan_matches_direct_steering() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "free");
    let o = dfmt(&["plan", s.to_str().unwrap(), "--n", "40", "--seed", "2", "--radius", "1e9", "--planner", "dprm"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,N,seed,success,cost,wall_ms,steer_calls,collision_checks,cache_hit");
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(&row[..4], ["optimal", "40", "2", "true"]);
    assert_eq!(row[5], "");

    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("free.plan.json")).unwrap()).unwrap();
    let segs = plan["trajectory"]["segments"].as_array().unwrap();
    assert_eq!(segs.len(), 1);
    let end: Vec<f64> = serde_json::from_value(segs[0]["x1"].clone()).unwrap();
    let p = dfmt::scenario::bundled("free").unwrap();
    let steerer = dfmt::Steerer::new(p.system().clone(), Default::default()).unwrap();
    let direct = steerer.connection_cost(p.x_init(), &end).unwrap();
    let cost = plan["cost"].as_f64().unwrap();
    assert!((cost - direct).abs() <= 1e-9 * direct, "{cost} vs {direct}");
    assert_eq!(row[4].parse::<f64>().unwrap(), cost);
}

#[test]
fn blocked_scenario_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, text) = BUNDLED[0];
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    v["obstacles"] = serde_json::json!([{"lo": [0.45, -1.0], "hi": [0.55, 2.0]}]);
    let s = dir.path().join("blocked.json");
    std::fs::write(&s, v.to_string()).unwrap();
    let o = dfmt(&["plan", s.to_str().unwrap(), "--n", "100"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let row = stdout(&o).lines().nth(1).unwrap().to_string();
    let row: Vec<&str> = row.split(',').collect();
    assert_eq!((row[3], row[4]), ("false", ""));
    assert!(dir.path().join("blocked.plan.json").exists());
}

#[test]
fn malformed_json_exits_two_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("bad.json");
    std::fs::write(&s, "{\n  \"system\": {\n    \"A\": [[0, 1]],,\n").unwrap();
    let o = dfmt(&["plan", s.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3, column"), "{}", stderr(&o));

    let e = dir.path().join("exp.json");
    std::fs::write(&e, "{\"scenario\": \"builtin:free\",\n\"N\": [10],\n\"seeds\": [0], \"bogus\": 1}").unwrap();
    let o = dfmt(&["sweep", e.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = dfmt(&["plan", s.to_str().unwrap(), "--variant", "fixed:-1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn repeated_plans_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "maze");
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = dfmt(&["plan", s.to_str().unwrap(), "--n", "300", "--seed", "5"], &out);
        (stdout(&o), std::fs::read(out.join("maze.plan.json")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn cached_plan_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let s = scenario(dir.path(), "single_wall");
    let cache = dir.path().join("near.json");
    let svg = dir.path().join("plan.svg");
    let args = ["plan", s.to_str().unwrap(), "--n", "200", "--cache", cache.to_str().unwrap(), "--svg", svg.to_str().unwrap()];
    let first = dfmt(&args, dir.path());
    assert!(cache.exists());
    let second = dfmt(&args, dir.path());
    assert_eq!(first.status.code(), second.status.code());
    assert_eq!(stdout(&first), stdout(&second));
    assert!(stdout(&first).lines().nth(1).unwrap().starts_with("optimal+cache,200,0,"));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
}

#[test]
fn sweep_writes_detail_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let e = dir.path().join("exp.json");
    std::fs::write(&e, r#"{"scenario": "builtin:free", "N": [50, 100], "seeds": [0, 1, 2], "output_dir": "ignored"}"#).unwrap();
    let out = dir.path().join("out");
    let o = dfmt(&["sweep", e.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 6);
    assert_eq!(summary.lines().count(), 1 + 2);
    assert!(!dir.path().join("ignored").exists());
    let again = dfmt(&["sweep", e.to_str().unwrap()], &out);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(out.join("runs.csv")).unwrap(), runs);
}

#[test]
fn verify_suites() {
    let dir = tempfile::tempdir().unwrap();
    let o = dfmt(&["verify", "steering"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().last().unwrap().starts_with("PASS steering"));
    let o = dfmt(&["verify", "spectral"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(dfmt(&["verify", "nonsense"], dir.path()).status.code(), Some(2));
}
