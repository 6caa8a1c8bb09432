use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evseg::train::Checkpoint;

const SMALL: [&str; 6] = [
    "dataset.sequences=4",
    "dataset.test_sequences=2",
    "dataset.width=32",
    "dataset.height=32",
    "teacher.pretrain_steps=2",
    "train.learning_rate=1e-3",
];

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn evseg(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evseg"));
    cmd.args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("EVSEG_") {
            cmd.env_remove(k);
        }
    }
    cmd.output().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    for s in SMALL {
        v.push("--set");
        v.push(s);
    }
    v
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthesize_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&evseg(&with_small(&["synthesize", "--seed", "4", "--out", d.to_str().unwrap()])));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.contains_key(Path::new("manifest.json")));
    assert!(ta.len() > 6);
    assert_eq!(ta, tb);
}

#[test]
fn train_eval_segment_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());
    ok(&evseg(&with_small(&["synthesize", "--out", data_s])));
    ok(&evseg(&with_small(&[
        "train", "--data", data_s, "--out", run_s, "--set", "train.steps=3", "--set", "reweight.kind=dn",
    ])));
    let log = std::fs::read_to_string(run.join("loss_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in ["step", "l_t", "l_f", "l_m", "l_c", "l_final"] {
            assert!(v.get(k).is_some(), "missing {k} in {line}");
        }
    }
    let ckpt = run.join("final.ckpt");
    let report = tmp.path().join("report.json");
    ok(&evseg(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data_s,
        "--report",
        report.to_str().unwrap(),
    ]));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let miou = r["miou"].as_f64().unwrap();
    assert_eq!(r["samples"], 2);
    assert!((0.0..=1.0).contains(&miou));

    let classes = tmp.path().join("classes.txt");
    std::fs::write(&classes, "background\ncircle\nsquare\ntriangle\nstar\n").unwrap();
    let seg = tmp.path().join("seg");
    let events = std::fs::read_dir(data.join("sequences")).unwrap().next().unwrap().unwrap().path().join("events.evt");
    ok(&evseg(&[
        "segment",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--events",
        events.to_str().unwrap(),
        "--classes",
        classes.to_str().unwrap(),
        "--out",
        seg.to_str().unwrap(),
    ]));
    let soft: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(seg.join("soft.json")).unwrap()).unwrap();
    assert_eq!(soft["width"], 32);
    assert_eq!(soft["vocabulary"].as_array().unwrap().len(), 5);
    let values = soft["soft"].as_array().unwrap();
    assert_eq!(values.len(), 32 * 32 * 5);
    for px in values.chunks(5) {
        let s: f64 = px.iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
    let labels = evseg::gray::load_label_png(&seg.join("labels.png")).unwrap();
    assert_eq!((labels.1, labels.2), (32, 32));
    assert!(labels.0.iter().all(|&l| l < 5));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&evseg(&with_small(&["train", "--out", a.to_str().unwrap(), "--set", "train.steps=6"])));
    ok(&evseg(&with_small(&["train", "--out", b.to_str().unwrap(), "--set", "train.steps=4"])));
    let ck = b.join("final.ckpt");
    let moved = tmp.path().join("step4.ckpt");
    std::fs::rename(&ck, &moved).unwrap();
    ok(&evseg(&with_small(&[
        "train",
        "--out",
        b.to_str().unwrap(),
        "--set",
        "train.steps=6",
        "--resume",
        moved.to_str().unwrap(),
    ])));
    assert_eq!(
        std::fs::read(a.join("loss_log.ndjson")).unwrap(),
        std::fs::read(b.join("loss_log.ndjson")).unwrap()
    );
    // The embedded configs differ in their output directory only.
    let ca = Checkpoint::load(&a.join("final.ckpt")).unwrap();
    let cb = Checkpoint::load(&b.join("final.ckpt")).unwrap();
    assert_eq!((ca.step, ca.optimizer_step), (6, 6));
    assert_eq!((cb.step, cb.optimizer_step), (6, 6));
    assert_eq!(ca.rng, cb.rng);
    assert_eq!(ca.tensors, cb.tensors);
}

#[test]
fn every_experiment_config_trains() {
    let mut files = Vec::new();
    for table in ["strategies", "ablations"] {
        for e in std::fs::read_dir(configs().join(table)).unwrap() {
            files.push(e.unwrap().path());
        }
    }
    files.push(configs().join("toy.toml"));
    files.sort();
    for f in files {
        let tmp = tempfile::tempdir().unwrap();
        let out = Command::new(env!("CARGO_BIN_EXE_evseg"))
            .args(with_small(&["train", "--config", f.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]))
            .env("EVSEG_TRAIN__STEPS", "2")
            .output()
            .unwrap();
        ok(&out);
        let log = std::fs::read_to_string(tmp.path().join("loss_log.ndjson")).unwrap();
        assert_eq!(log.lines().count(), 2, "{}", f.display());
    }
}

#[test]
fn flags_override_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_evseg"))
        .args(with_small(&["train", "--out", tmp.path().to_str().unwrap(), "--set", "train.steps=1"]))
        .env("EVSEG_TRAIN__STEPS", "3")
        .output()
        .unwrap();
    ok(&out);
    let log = std::fs::read_to_string(tmp.path().join("loss_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rat = 1.0\n").unwrap();
    assert_eq!(evseg(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(evseg(&["train", "--set", "train.steps"]).status.code(), Some(2));
    let missing = tmp.path().join("nope.ckpt");
    assert_eq!(
        evseg(&["eval", "--checkpoint", missing.to_str().unwrap()]).status.code(),
        Some(3)
    );
    let out = evseg(&["train", "--set", "train.learning_rate=-1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}
