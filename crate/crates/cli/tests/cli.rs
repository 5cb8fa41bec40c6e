use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fairmesh(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairmesh"))
        .args(args)
        .env("FAIRMESH_OUT", out)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_LINK: &str = r#"{
  "schema_version": 1,
  "kind": "standalone-scheduler",
  "seed": 3,
  "link": {
    "flows": [
      { "rate": 0.08, "size": { "kind": "uniform", "lo": 1, "hi": 8 } },
      { "rate": 0.08, "size": { "kind": "uniform", "lo": 1, "hi": 8 } }
    ],
    "horizon": 2000
  },
  "schedulers": [{ "kind": "RR" }, { "kind": "RR" }]
}"#;

#[test]
fn run_writes_report_and_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL_LINK);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(fairmesh(&["run", &cfg], &a).status.code(), Some(0));
    assert_eq!(fairmesh(&["run", &cfg], &b).status.code(), Some(0));
    let ra = fs::read(a.join("report.json")).unwrap();
    let rb = fs::read(b.join("report.json")).unwrap();
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);
    assert_eq!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL_LINK);
    let out = tmp.path().join("o");
    assert_eq!(
        fairmesh(&["run", &cfg, "--seed", "11"], &out).status.code(),
        Some(0)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"][0]["seed"], 11);
    assert_eq!(report["runs"].as_array().unwrap().len(), 1);
}

#[test]
fn identical_schedulers_compare_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL_LINK);
    let out = tmp.path().join("o");
    let o = fairmesh(&["compare", &cfg], &out);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for flow in ["0", "1"] {
        let same: Vec<_> = rows
            .iter()
            .filter(|r| r[3] == flow)
            .map(|r| &r[4..])
            .collect();
        assert_eq!(same.len(), 2);
        assert_eq!(same[0], same[1]);
    }
}

#[test]
fn compare_needs_two_schedulers() {
    let tmp = TempDir::new().unwrap();
    let single = SMALL_LINK.replace(
        r#"[{ "kind": "RR" }, { "kind": "RR" }]"#,
        r#"[{ "kind": "DRR" }]"#,
    );
    let cfg = write(tmp.path(), "c.json", &single);
    let o = fairmesh(&["compare", &cfg], &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("schedulers"));
}

#[test]
fn missing_seed_is_a_config_error_naming_the_key() {
    let tmp = TempDir::new().unwrap();
    let body = SMALL_LINK.replace(r#""seed": 3,"#, "");
    let cfg = write(tmp.path(), "c.json", &body);
    let o = fairmesh(&["run", &cfg], &tmp.path().join("o"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(
        fairmesh(&["run", "/nonexistent/c.json"], &out)
            .status
            .code(),
        Some(2)
    );
    let bad = write(tmp.path(), "bad.json", "{ not json");
    assert_eq!(fairmesh(&["run", &bad], &out).status.code(), Some(2));
    assert_eq!(
        fairmesh(&["run", "preset:nope"], &out).status.code(),
        Some(2)
    );
    assert_eq!(fairmesh(&["frobnicate"], &out).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let tmp = TempDir::new().unwrap();
    let junk = write(tmp.path(), "report.json", r#"{"hello": 1}"#);
    assert_eq!(
        fairmesh(&["analyze", &junk], tmp.path()).status.code(),
        Some(3)
    );
    // Output directory path is an existing file.
    let cfg = write(tmp.path(), "c.json", SMALL_LINK);
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, "x").unwrap();
    assert_eq!(fairmesh(&["run", &cfg], &blocker).status.code(), Some(3));
}

#[test]
fn analyze_reads_a_stored_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", SMALL_LINK);
    let out = tmp.path().join("o");
    assert_eq!(fairmesh(&["run", &cfg], &out).status.code(), Some(0));
    let report = out.join("report.json");
    let o = fairmesh(&["analyze", report.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0));
    let analysis: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("analysis.json")).unwrap()).unwrap();
    assert_eq!(analysis["runs"].as_array().unwrap().len(), 2);
}

#[test]
fn hotspot_shares_cover_every_sender() {
    let tmp = TempDir::new().unwrap();
    let body = r#"{
      "schema_version": 1,
      "kind": "mesh-hotspot",
      "seed": 1,
      "mesh": {
        "k": 8,
        "injection": { "rate": 1.0, "pattern": { "kind": "hotspot", "dest": 7 } },
        "horizon": 20000,
        "warmup": 2000
      }
    }"#;
    let cfg = write(tmp.path(), "m.json", body);
    let out = tmp.path().join("o");
    assert_eq!(fairmesh(&["run", &cfg], &out).status.code(), Some(0));
    let shares = fs::read_to_string(out.join("shares.csv")).unwrap();
    assert_eq!(shares.lines().count(), 1 + 7);
    let total: f64 = shares
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn presets_are_listed() {
    let tmp = TempDir::new().unwrap();
    let o = fairmesh(&["presets"], tmp.path());
    let names = String::from_utf8_lossy(&o.stdout);
    for n in ["hotspot-rr", "pathology", "arb-convergence"] {
        assert!(names.contains(n));
    }
}
