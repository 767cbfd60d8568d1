use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn agex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agex")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = agex(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn staged_run_is_reproducible_and_stage_isolated() {
    let d = tempfile::tempdir().unwrap();
    let fx = d.path().join("fx");
    let list = ok(&["make-fixture", "--dir", fx.to_str().unwrap(), "--count", "2"]).trim().to_string();
    let out = d.path().join("out");
    let o = out.to_str().unwrap();
    for stage in ["derive-masks", "extract-artifacts", "select-concepts", "augment-bage", "annotate", "assemble"] {
        ok(&[stage, "--images", &list, "--out", o, "--seed", "3", "--backend", "mock"]);
    }
    let echo: serde_json::Value = serde_json::from_slice(&fs::read(out.join("corpus/config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 3);

    let art: serde_json::Value = serde_json::from_slice(&fs::read(out.join("artifacts/face0001.json")).unwrap()).unwrap();
    assert_eq!(art["whole_area"], (0.05f64 * 256.0 * 256.0).ceil() as u64);

    let first = tree_bytes(&out);
    fs::remove_dir_all(out.join("boxes")).unwrap();
    fs::remove_dir_all(out.join("annotations")).unwrap();
    fs::remove_dir_all(out.join("corpus")).unwrap();
    for stage in ["augment-bage", "annotate", "assemble"] {
        ok(&[stage, "--images", &list, "--out", o, "--seed", "3", "--backend", "mock"]);
    }
    assert_eq!(tree_bytes(&out), first);

    let table = ok(&["stats", "--corpus", out.join("corpus").to_str().unwrap()]);
    assert!(table.contains("I-AGE"), "{table}");

    let age = ["train", "dev", "test"].iter().map(|s| out.join(format!("corpus/{s}/i_age.jsonl"))).find(|p| p.exists()).unwrap();
    {
        let report = ok(&["eval", "--task", "I_AGE", "--pred", age.to_str().unwrap(), "--gt", age.to_str().unwrap(), "--json"]);
        let v: serde_json::Value = serde_json::from_str(&report).unwrap();
        assert_eq!(v["miou"], 1.0);
    }

    ok(&["render", "--images", &list, "--out", o]);
    assert!(out.join("render/face0001_artifact.png").exists());
}

#[test]
fn errors_are_json_on_stderr() {
    let o = agex(&["stats", "--corpus", "/nonexistent/corpus"]);
    assert!(!o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(v["error"].is_string() && v["message"].is_string());

    let o = agex(&["derive-masks", "--images", "/nonexistent/images.json", "--backend", "carrier-pigeon"]);
    assert!(!o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(v["message"].as_str().unwrap().contains("carrier-pigeon"));
}

#[test]
fn kernels_selftest_passes() {
    let s = ok(&["kernels-selftest", "--seed", "5"]);
    assert!(s.lines().count() >= 6 && !s.contains("FAIL"), "{s}");
}
