use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_markov-icl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn xstar_writes_stamped_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("x.json");
    fs::write(&cfg, r#"{"d": 1, "n": 10, "p": 0.3, "exact": true}"#).unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "xstar"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("X* = ["));
    let csv = fs::read_to_string(dir.path().join("xstar.csv")).unwrap();
    let mut lines = csv.lines();
    let stamp = lines.next().unwrap();
    assert!(
        stamp.starts_with("# experiment=xstar config_hash="),
        "{stamp}"
    );
    assert!(stamp.ends_with("seed=0"));
    assert_eq!(lines.next(), Some("block,i,ip,jp,j,kp,lp,value,se"));
}

#[test]
fn same_config_gives_same_hash_and_values() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = cli(&["--mc-samples", "2000", "--seed", "9", "xstar"], d.path());
        assert!(o.status.success());
    }
    let read = |d: &tempfile::TempDir| fs::read_to_string(d.path().join("xstar.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn unknown_config_field_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"dimension": 3}"#).unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "xstar"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn reduce_exit_code_reflects_the_layout_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("r.json");
    fs::write(&cfg, r#"{"layout": "column_one_repair"}"#).unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "reduce"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(dir.path().join("reduction.txt").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("reduce_summary.json")).unwrap())
            .unwrap();
    assert!(summary["checks"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["passed"] == true));

    let standard = cli(&["reduce"], dir.path());
    assert_eq!(standard.status.code(), Some(1));
    assert!(stdout(&standard).contains("FAIL"));
}

#[test]
fn verify_single_criterion_reports_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["verify", "--quick", "--criterion", "4"], dir.path());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    assert!(
        text.starts_with("criterion  4 PASS parameter recovery"),
        "{text}"
    );
    assert!(o.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("verify_summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["outcomes"][0]["id"], 4);
}

#[test]
fn version_flag_prints_build_version() {
    let o = Command::new(env!("CARGO_BIN_EXE_markov-icl"))
        .arg("--version")
        .output()
        .unwrap();
    assert!(stdout(&o).starts_with(&format!("markov-icl {}", env!("CARGO_PKG_VERSION"))));
}
