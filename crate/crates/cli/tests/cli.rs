use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn refsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refsplat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("REFSPLAT_PRIOR_URL")
        .output()
        .expect("spawning refsplat")
}

fn ok(args: &[&str]) -> String {
    let out = refsplat(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expected: [(&str, &[&str]); 7] = [
        ("label", &["--scene", "--cameras", "--masks", "--tau", "--tau-prime", "--out"]),
        ("init", &["--scene", "--labels", "--reference", "--ref-depth", "--camera-id", "--out"]),
        ("train", &["--config", "--prior", "--depth-oracle", "--out"]),
        ("render", &["--scene", "--cameras", "--out-dir"]),
        ("eval", &["--pred", "--gt", "--masks", "--dilate"]),
        ("outpaint-mask", &["--cameras", "--distance", "--radius", "--out"]),
        ("toy", &["--seed", "--out"]),
    ];
    for (cmd, flags) in expected {
        let help = ok(&[cmd, "--help"]);
        for flag in flags {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}:\n{help}");
        }
    }
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = refsplat(&["train", "--config", "x.toml", "--prior", "sdxl", "--out", "o"]);
    assert!(!out.status.success());
    let out = refsplat(&["render", "--scene", "/nonexistent.ply", "--cameras", "/nonexistent.json", "--out-dir", "/tmp"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn toy_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["toy", "--out", s(dir)]);
    ok(&["label", "--scene", s(&dir.join("input.ply")), "--cameras", s(&dir.join("cameras.json")), "--masks", s(&dir.join("masks")), "--out", s(&dir.join("labeled"))]);
    let labels = fs::read_to_string(dir.join("labeled/labels.txt")).unwrap();
    assert!(labels.lines().any(|l| l == "1") && labels.lines().any(|l| l == "0"));

    let reference: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("reference.json")).unwrap()).unwrap();
    let id = reference[0]["id"].to_string();
    ok(&[
        "init",
        "--scene",
        s(&dir.join("labeled/labeled.ply")),
        "--labels",
        s(&dir.join("labeled/labels.txt")),
        "--reference",
        s(&dir.join("reference.json")),
        "--ref-depth",
        s(&dir.join("reference_depth.pfm")),
        "--camera-id",
        &id,
        "--out",
        s(&dir.join("init.ply")),
    ]);

    let config = dir.join("train.toml");
    let text = fs::read_to_string(&config).unwrap().replace("iterations = 300", "iterations = 12");
    fs::write(&config, text).unwrap();
    ok(&["train", "--config", s(&config), "--out", s(&dir.join("run"))]);
    let log = fs::read_to_string(dir.join("run/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 13);

    // No address configured anywhere.
    let out = refsplat(&["train", "--config", s(&config), "--prior", "remote", "--out", s(&dir.join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("REFSPLAT_PRIOR_URL"));

    ok(&["render", "--scene", s(&dir.join("run/scene.ply")), "--cameras", s(&dir.join("holdout.json")), "--out-dir", s(&dir.join("renders"))]);
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--pred", s(&dir.join("renders")), "--gt", s(&dir.join("gt")), "--masks", s(&dir.join("masks"))])).unwrap();
    assert_eq!(report["views"].as_array().unwrap().len(), 4);
    let l1 = report["mean"]["l1"].as_f64().unwrap();
    assert!(l1 > 0.0 && l1 < 0.05, "{l1}");

    ok(&["outpaint-mask", "--cameras", s(&dir.join("holdout.json")), "--out", s(&dir.join("outpaint"))]);
    assert_eq!(fs::read_dir(dir.join("outpaint")).unwrap().count(), 4);
}
