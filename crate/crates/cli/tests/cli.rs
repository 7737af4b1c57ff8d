use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn epiwatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiwatch")).args(args).output().unwrap()
}

fn gen_fixture(dir: &Path) {
    let out = epiwatch(&["gen-fixture", "--dir", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn detect_writes_artifacts_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    gen_fixture(tmp.path());
    let config = tmp.path().join("config.toml");
    let out_dir = tmp.path().join("run");
    let out = epiwatch(&[
        "detect",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let listed = String::from_utf8(out.stdout).unwrap();
    assert!(listed.lines().any(|l| l.ends_with("manifest.json")));
    let alarms = fs::read_to_string(out_dir.join("detect/alarms.csv")).unwrap();
    assert!(alarms.contains("ehec,C1,2011-05-20,"), "{alarms}");
}

#[test]
fn seed_override_reaches_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    gen_fixture(tmp.path());
    let config = tmp.path().join("config.toml");
    let out = epiwatch(&["detect", "--config", config.to_str().unwrap(), "--seed", "99"]);
    assert!(out.status.success());
    let manifest = fs::read_to_string(tmp.path().join("out/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 99"), "{manifest}");
}

#[test]
fn config_errors_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    gen_fixture(tmp.path());
    fs::remove_file(tmp.path().join("gazetteers/locations.txt")).unwrap();
    let config = tmp.path().join("config.toml");
    let out = epiwatch(&["all", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gazetteers.location"));
    assert!(!tmp.path().join("out").exists());

    let out = epiwatch(&["all", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(&config, "seed = \"x\"\n").unwrap();
    assert_eq!(epiwatch(&["detect", "--config", config.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_status_one() {
    let tmp = tempfile::tempdir().unwrap();
    gen_fixture(tmp.path());
    fs::write(tmp.path().join("corpus.jsonl"), "{not json}\n").unwrap();
    let config = tmp.path().join("config.toml");
    let out = epiwatch(&["detect", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
