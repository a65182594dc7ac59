use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn powertalk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_powertalk"))
        .args(args)
        .env_remove("POWERTALK_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/case_study.json")
        .display()
        .to_string()
}

fn error_category(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(line.trim()).expect("machine-readable error");
    v["error"]["category"].as_str().unwrap().to_string()
}

#[test]
fn solve_prints_case_study_voltages() {
    let text = stdout(&powertalk(&["solve", "--grid", &fixture()]));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "bus,name,v_V,i_A,p_W,kappa,r_bus_ohm");
    assert!(lines[1].starts_with("0,A,396.453905,"));
    assert!(lines[2].starts_with("1,B,397.997196,"));
    assert!(lines[3].starts_with("2,C,394.705408,,,1.00237233,"));
    // bundled grid is the default
    assert_eq!(stdout(&powertalk(&["solve"])), text);
    let newton = stdout(&powertalk(&["solve", "--method", "newton"]));
    assert_eq!(newton.lines().nth(1), lines.get(1).copied());
}

#[test]
fn sweep_csv_is_monotone() {
    let text = stdout(&powertalk(&["sweep", "--pi", "1:20:1"]));
    let mut rows = text.lines();
    assert_eq!(
        rows.next().unwrap(),
        "pi_W,capacity_nominal_bits,capacity_opt_bits,r_a_star_ohm,r_b_star_ohm,snr_nominal,snr_opt"
    );
    let table: Vec<Vec<f64>> = rows
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(table.len(), 20);
    for w in table.windows(2) {
        assert!(w[1][1] >= w[0][1] && w[1][2] >= w[0][2]);
    }
    assert!(table.iter().all(|r| r[2] >= r[1]));
}

#[test]
fn outputs_are_reproducible_and_written_to_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("sim.json");
    let trace = dir.path().join("trace.csv");
    let args = |o: &str| {
        vec![
            "simulate".to_string(),
            "--slots".into(),
            "5000".into(),
            "--seed".into(),
            "42".into(),
            "--out".into(),
            o.to_string(),
            "--trace".into(),
            trace.display().to_string(),
        ]
    };
    let first = args(&out.display().to_string());
    let first: Vec<&str> = first.iter().map(String::as_str).collect();
    assert!(powertalk(&first).status.success());
    let a = std::fs::read_to_string(&out).unwrap();
    assert!(powertalk(&first).status.success());
    let b = std::fs::read_to_string(&out).unwrap();
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(report["report"]["slots_run"], 5000);
    assert_eq!(report["config"]["rng_seed"], 42);
    let t = std::fs::read_to_string(&trace).unwrap();
    assert!(t.starts_with("slot,bit,observation_V,decision\n0,"));
    assert_eq!(t.lines().count(), 5001);

    let other = stdout(&powertalk(&["simulate", "--slots", "5000", "--seed", "43"]));
    assert_ne!(other, a);
}

#[test]
fn channel_budget_and_optimize_commands() {
    let ch = stdout(&powertalk(&["channel"]));
    assert!(ch.contains("B,A,0.24138545,-245.095601,1"));
    let budget = stdout(&powertalk(&["budget", "--pi", "10"]));
    assert!(budget.starts_with("bus,pi_W,dp_vr_W,slack_W2,s_V2,feasible\nA,10,0,0,"));
    let opt = stdout(&powertalk(&["optimize", "--pi", "10", "--tx", "A", "--rx", "B"]));
    let v: serde_json::Value = serde_json::from_str(&opt).unwrap();
    assert_eq!(v["result"]["r_star"], serde_json::json!([0.44, 0.48]));
    assert_eq!(v["result"]["snr"], 1.19904668);
}

#[test]
fn logging_does_not_touch_stdout() {
    let quiet = stdout(&powertalk(&["solve"]));
    let loud = Command::new(env!("CARGO_BIN_EXE_powertalk"))
        .arg("solve")
        .env("POWERTALK_LOG", "debug")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(loud.stdout).unwrap(), quiet);
}

#[test]
fn exit_codes_by_category() {
    let out = powertalk(&["bogus"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = TempDir::new().unwrap();
    let no_lines = dir.path().join("no_lines.json");
    std::fs::write(
        &no_lines,
        r#"{"buses": [{"id": 0, "vsc": {"x_nom": 400, "r_nom": 0.4}}, {"id": 1}]}"#,
    )
    .unwrap();
    let out = powertalk(&["solve", "--grid", no_lines.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_category(&out), "config");

    let heavy = dir.path().join("heavy.json");
    std::fs::write(
        &heavy,
        r#"{"buses": [{"id": 0, "vsc": {"x_nom": 400, "r_nom": 0.39}, "load": {"d_cp": 200000}}], "lines": []}"#,
    )
    .unwrap();
    let out = powertalk(&["solve", "--grid", heavy.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_category(&out), "numeric");

    let out = powertalk(&["budget", "--r", "1.0", "--pi", "1"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_category(&out), "budget");
}
