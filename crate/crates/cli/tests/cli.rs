use std::process::Command;

fn normprop() -> Command {
    Command::new(env!("CARGO_BIN_EXE_normprop"))
}

#[test]
fn grad_check_writes_csv_to_stdout() {
    let out = normprop()
        .args(["grad-check", "--seed", "4"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("experiment,normalizer,params,arch,seed,metric,layer,value")
    );
    let amhm = lines.find(|l| l.contains(",amhm_violations,")).unwrap();
    assert!(amhm.ends_with(",0.000000000"));
    assert!(amhm.contains(",4,"));
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "instances = 3\nnot_a_key = 1\n").unwrap();
    let out = normprop()
        .args(["grad-check", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_key"));
}

#[test]
fn json_file_output_carries_schema_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "instances = 5\nmonte_carlo_draws = 1000\n").unwrap();
    let path = dir.path().join("out.json");
    let out = normprop()
        .args(["grad-check", "--format", "json", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["config"]["instances"], 5);
}

#[test]
fn defaults_round_trip_through_config() {
    let out = normprop()
        .args(["defaults", "rank-sweep"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("d.toml");
    std::fs::write(&cfg, out.stdout).unwrap();
    let check = normprop()
        .args(["rank-sweep", "--seed", "0", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("r.csv"))
        .output()
        .unwrap();
    assert!(
        check.status.success(),
        "{}",
        String::from_utf8_lossy(&check.stderr)
    );
}

#[test]
fn bad_format_is_rejected() {
    let out = normprop()
        .args(["grad-check", "--format", "xml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
