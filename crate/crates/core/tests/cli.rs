//! Exit codes and output shape of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gscodec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gscodec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is one JSON document")
}

fn scene(dir: &Path, n: &str) {
    json(&gscodec(dir, &["synth", "--n", n, "--seed", "3"]));
}

#[test]
fn synth_single_gaussian() {
    let dir = tempfile::tempdir().unwrap();
    let v = json(&gscodec(dir.path(), &["synth", "--n", "1"]));
    assert_eq!(v["n"], 1);
    let cloud = gscodec::model::load_ply(&std::fs::read(dir.path().join("scene.ply")).unwrap()).unwrap();
    assert_eq!(cloud.len(), 1);
    let cams = std::fs::read_to_string(dir.path().join("cameras.json")).unwrap();
    assert_eq!(gscodec::splat::parse_cameras(&cams).unwrap().len(), 6);
}

#[test]
fn encode_decode_info_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "1500");
    let enc = json(&gscodec(
        d,
        &["encode", "scene.ply", "-o", "a.gsz", "--bits", "16", "--codebook", "16", "--blocks", "5"],
    ));
    assert_eq!(enc["sizes"]["total"].as_u64().unwrap(), std::fs::metadata(d.join("a.gsz")).unwrap().len());
    let info = json(&gscodec(d, &["info", "a.gsz"]));
    assert_eq!(info["info"]["blocks"], 5);
    assert_eq!(info["info"]["q"].as_array().unwrap().len(), 10);
    let dec = json(&gscodec(d, &["decode", "a.gsz", "-o", "out.ply", "--reference", "scene.ply"]));
    assert_eq!(dec["count"], enc["leaf_count"]);
    assert!(dec["reference"]["matched"].as_u64().unwrap() > 0);
    let same = json(&gscodec(d, &["render-eval", "scene.ply", "scene.ply", "cameras.json"]));
    assert_eq!(same["mean"], "inf");
    assert!(same["views"].as_array().unwrap().iter().all(|v| v == "inf"));
    let lossy = json(&gscodec(d, &["render-eval", "scene.ply", "a.gsz", "cameras.json"]));
    assert!(lossy["mean"].as_f64().unwrap() >= 50.0);
    assert_eq!(lossy["views"].as_array().unwrap().len(), 6);
}

#[test]
fn search_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "2000");
    let args = [
        "search", "scene.ply", "-o", "s.gsz", "--cameras", "cameras.json", "--budget", "40KB", "--codebook", "16",
        "--blocks", "6", "--tau-grid", "0.5,1", "--report", "r.json",
    ];
    let v = json(&gscodec(d, &args));
    let file: Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(v, file);
    assert_eq!(v["q"].as_array().unwrap().len(), 10);
    assert!(v["q"].as_array().unwrap().iter().all(|r| r.as_array().unwrap().len() == 6));
    assert_eq!(v["per_tau"].as_array().unwrap().len(), 2);
    let size = std::fs::metadata(d.join("s.gsz")).unwrap().len() as f64;
    assert!((size - 40960.0).abs() / 40960.0 < 0.05);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d, "800");
    // parse errors
    assert_eq!(gscodec(d, &["search", "scene.ply", "-o", "x", "--budget", "lots"]).status.code(), Some(2));
    assert_eq!(gscodec(d, &["encode", "scene.ply", "-o", "x", "--tau", "1.5"]).status.code(), Some(2));
    std::fs::write(d.join("bad.ply"), b"ply\nformat ascii 1.0\nend_header\n").unwrap();
    assert_eq!(gscodec(d, &["encode", "bad.ply", "-o", "x"]).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), b"{").unwrap();
    assert_eq!(gscodec(d, &["render-eval", "scene.ply", "scene.ply", "bad.json"]).status.code(), Some(2));
    // infeasible
    let out = gscodec(d, &["search", "scene.ply", "-o", "x", "--budget", "1KB", "--codebook", "16", "--blocks", "4"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("closest"));
    // I/O
    assert_eq!(gscodec(d, &["info", "missing.gsz"]).status.code(), Some(4));
    // container
    std::fs::write(d.join("junk.gsz"), b"NOPE and more bytes").unwrap();
    assert_eq!(gscodec(d, &["decode", "junk.gsz", "-o", "y.ply"]).status.code(), Some(5));
    assert_eq!(gscodec(d, &["info", "junk.gsz"]).status.code(), Some(5));
}
