use std::path::{Path, PathBuf};

use regstab::cli::{run_command, RunConfig, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE};

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("regstab-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn write_config(name: &str, json: &str) -> PathBuf {
    let p = scratch(name);
    std::fs::write(&p, json).unwrap();
    p
}

fn run(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("regstab").chain(args.iter().copied()).map(String::from).collect();
    run_command(argv)
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const LINE: &str = r#"{
  "system": { "id": "unit_speed_line", "with_cost": true },
  "mrf": "abs:2",
  "p0": 1.0,
  "r": 0.1,
  "R": 1.0,
  "initial": { "states": [[1.0]] },
  "partition": { "diameter": 0.5 },
  "tolerances": { "h_ode": 0.0625 },
  "seed": 1
}"#;

#[test]
fn shipped_configs_round_trip() {
    let mut seen = 0;
    for entry in std::fs::read_dir(repo_root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let cfg = RunConfig::load(&path).unwrap();
            assert_eq!(RunConfig::parse(&cfg.emit()).unwrap(), cfg, "{}", path.display());
            seen += 1;
        }
    }
    assert!(seen >= 4);
}

#[test]
fn trajectory_row_at_half() {
    let cfg = write_config("row.json", LINE);
    let (csv, rep) = (scratch("row.csv"), scratch("row_rep.json"));
    let code = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--report",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{}", std::fs::read_to_string(&rep).unwrap());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x0,u0,cost,dist,W"));
    assert!(text.lines().any(|l| l == "0.5,0.5,-1,0.5,0.5,1"), "{text}");
    assert!(text.lines().skip(1).all(|l| l.split(',').count() == 4 + 1 + 1));
    assert!(!text.contains('\r'));
    let report = read_json(&rep);
    assert_eq!(report["stable"], true);
    assert!(report["cost_at_bar_T"].as_f64().unwrap() <= report["bound_W_over_p0"].as_f64().unwrap());
}

#[test]
fn inverted_radii_are_a_usage_error() {
    let cfg = write_config("bad_radii.json", &LINE.replace("\"r\": 0.1", "\"r\": 2.0"));
    assert_eq!(run(&["certify", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
}

#[test]
fn unknown_ids_are_usage_errors() {
    let cfg = write_config("bad_mrf.json", &LINE.replace("abs:2", "w7"));
    assert_eq!(run(&["certify", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
    let cfg = write_config("bad_sys.json", &LINE.replace("unit_speed_line", "pendulum"));
    assert_eq!(run(&["certify", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
    assert_eq!(run(&["certify"]), EXIT_USAGE);
    assert_eq!(run(&["frobnicate", "--config", cfg.to_str().unwrap()]), EXIT_USAGE);
}

#[test]
fn certify_violation_exits_two_with_report() {
    // W = x² has H = p0 − 2|x| > 0 near the target when p0 = 1.
    let json = r#"{
      "system": { "id": "unit_speed_line", "with_cost": true },
      "mrf": "square",
      "p0": 1.0,
      "region": { "by": "distance", "lo": 0.05, "hi": 1.0 },
      "seed": 1
    }"#;
    let cfg = write_config("violation.json", json);
    let rep = scratch("violation_rep.json");
    assert_eq!(
        run(&["certify", "--config", cfg.to_str().unwrap(), "--report", rep.to_str().unwrap()]),
        EXIT_CHECK_FAILED
    );
    let report = read_json(&rep);
    assert_eq!(report["stable"], false);
    assert!(report["margins"]["min"].as_f64().unwrap() < 0.0);
    assert!(report["notes"].as_array().unwrap().iter().any(|n| n.as_str().unwrap().contains("violat")));
}

#[test]
fn sweep_is_byte_deterministic() {
    let cfg = repo_root().join("configs/line_abs.json");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let (csv, rep) = (scratch(&format!("det{k}.csv")), scratch(&format!("det{k}.json")));
        let code = run(&[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            csv.to_str().unwrap(),
            "--report",
            rep.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        let first = scratch(&format!("det{k}_0.csv"));
        outputs.push((std::fs::read(&first).unwrap(), std::fs::read(&rep).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn run_starting_on_target_has_one_row() {
    let cfg = write_config("on_target.json", &LINE.replace("[[1.0]]", "[[0.0]]"));
    let (csv, rep) = (scratch("on_target.csv"), scratch("on_target_rep.json"));
    let code = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
        "--report",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 2);
    let report = read_json(&rep);
    assert_eq!(report["cost_at_bar_T"].as_f64(), Some(0.0));
    assert!(report["notes"].as_array().unwrap().iter().any(|n| n.as_str().unwrap().contains("vacuous cost bound")));
}
