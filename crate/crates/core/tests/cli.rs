use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");

fn latstab(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latstab"))
        .args(args)
        .args(["--config", SMOKE, "--workspace"])
        .arg(ws)
        .output()
        .expect("binary runs")
}

#[test]
fn seven_commands_then_check() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["generate-data", "stability-ref", "train-cae", "train-esn", "predict", "stability-latent", "compare"] {
        let out = latstab(dir.path(), &[cmd]);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with(cmd));
    }
    let out = latstab(dir.path(), &["check"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.matches("] ").count(), 7, "{text}");
    // smoke-scale numbers cannot meet desk-scale criteria
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = latstab(dir.path(), &["predict"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate-data"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[grid]\nlength = 22.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_latstab"))
        .args(["generate-data", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = latstab(dir.path(), &["train-esn", "--members", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn members_override_and_show_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = latstab(dir.path(), &["show-config", "--members", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("members = 3"));
    assert!(latstab::pipeline::RunConfig::from_toml(&text).is_ok());
}
