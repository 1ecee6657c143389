use std::path::Path;
use std::process::{Command, Output};

fn hdyolo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdyolo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("HDYOLO_SEED")
        .output()
        .expect("spawn hdyolo")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn count(dir: &Path, ext: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == ext))
        .count()
}

#[test]
fn synth_writes_pairs_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("d");
    let o = hdyolo(&["synth", "--regime", "tiny", "--n", "16", "--seed", "7", "--size", "64", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(count(&out, "png"), 16);
    assert_eq!(count(&out, "txt"), 16);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn seed_env_is_used_when_flag_absent() {
    let d = tempfile::tempdir().unwrap();
    let run = |dir: &Path, env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_hdyolo"));
        c.args(["synth", "--regime", "large", "--n", "1", "--size", "32", "--out", dir.to_str().unwrap()]);
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        c.env_remove("HDYOLO_SEED");
        if let Some(s) = env {
            c.env("HDYOLO_SEED", s);
        }
        assert!(c.output().unwrap().status.success());
        std::fs::read(dir.join("img_0000.png")).unwrap()
    };
    let a = run(&d.path().join("a"), Some("5"), None);
    let b = run(&d.path().join("b"), None, Some("5"));
    let c = run(&d.path().join("c"), None, Some("6"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let o = hdyolo(&["synth", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(hdyolo(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn eval_reproduces_worked_example() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("d");
    std::fs::create_dir(&data).unwrap();
    // pixel content is irrelevant to eval; only the size matters
    let png = data.join("a.png");
    write_png(&png, 100, 100);
    std::fs::write(data.join("a.txt"), "0 0.1 0.1 0.1 0.1\n0 0.5 0.5 0.1 0.1\n0 0.8 0.8 0.1 0.1\n").unwrap();
    let preds = serde_json::json!({
        "a": [
            {"class_id": 0, "confidence": 0.9, "cx": 10.0, "cy": 10.0, "w": 10.0, "h": 10.0},
            {"class_id": 0, "confidence": 0.8, "cx": 30.0, "cy": 30.0, "w": 10.0, "h": 10.0},
            {"class_id": 0, "confidence": 0.7, "cx": 50.0, "cy": 50.0, "w": 10.0, "h": 10.0},
            {"class_id": 0, "confidence": 0.6, "cx": 80.0, "cy": 80.0, "w": 10.0, "h": 10.0}
        ]
    });
    let p = d.path().join("p.json");
    std::fs::write(&p, preds.to_string()).unwrap();
    let curves = d.path().join("pr.csv");
    let v = json(&hdyolo(&[
        "eval",
        "--preds",
        p.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--curves",
        curves.to_str().unwrap(),
    ]));
    assert!((v["map50"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-6);
    assert_eq!(v["counts"]["tp"], 3);
    assert_eq!(v["counts"]["fp"], 1);
    assert!(std::fs::read_to_string(curves).unwrap().lines().count() == 5);
}

fn write_png(path: &Path, w: u32, h: u32) {
    let d = tempfile::tempdir().unwrap();
    let o = hdyolo(&["synth", "--regime", "large", "--n", "1", "--size", &w.max(h).to_string(), "--out", d.path().to_str().unwrap()]);
    assert!(o.status.success());
    std::fs::copy(d.path().join("img_0000.png"), path).unwrap();
}

#[test]
fn inspect_hypergraph_reports_json() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("f.json");
    std::fs::write(&f, "[[0,0],[1,0],[10,10]]").unwrap();
    let v = json(&hdyolo(&["inspect-hypergraph", "--features", f.to_str().unwrap(), "--epsilon", "1.5"]));
    assert_eq!(v["n_vertices"], 3);
    assert_eq!(v["n_hyperedges"], 3);
    assert_eq!(v["epsilon"], 1.5);
    assert_eq!(v["degree_histogram"], serde_json::json!({"1": 1, "2": 2}));

    let v = json(&hdyolo(&["inspect-hypergraph", "--random", "20", "4", "--epsilon", "0"]));
    assert_eq!(v["degree_histogram"], serde_json::json!({"1": 20}));
    assert_eq!(hdyolo(&["inspect-hypergraph"]).status.code(), Some(2));
}

#[test]
fn selftest_exits_zero() {
    let o = hdyolo(&["selftest"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 6);
}

#[test]
fn train_then_infer_then_eval_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("d");
    let run = d.path().join("run");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    assert!(hdyolo(&["synth", "--regime", "tiny", "--n", "4", "--seed", "1", "--size", "64", "--out", &s(&data)])
        .status
        .success());
    let cfg = d.path().join("run.yaml");
    std::fs::write(&cfg, "preset: micro\ntrain:\n  epochs: 2\n  batch_size: 4\n").unwrap();
    let v = json(&hdyolo(&["train", "--data", &s(&data), "--config", &s(&cfg), "--out", &s(&run), "--seed", "3"]));
    assert_eq!(v["epochs_run"], 2);
    assert_eq!(v["train"]["seed"], 3);
    for f in ["best.ckpt", "last.ckpt", "history.json", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let preds = d.path().join("p.json");
    let o = hdyolo(&["infer", "--checkpoint", &s(&run.join("last.ckpt")), "--input", &s(&data), "--out", &s(&preds), "--conf", "0.001"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let from_file = json(&hdyolo(&["eval", "--preds", &s(&preds), "--data", &s(&data)]));
    let from_ckpt = json(&hdyolo(&["eval", "--checkpoint", &s(&run.join("last.ckpt")), "--data", &s(&data)]));
    assert_eq!(from_file["map50"], from_ckpt["map50"]);
}

#[test]
fn bad_checkpoint_is_an_error_not_a_panic() {
    let d = tempfile::tempdir().unwrap();
    let ck = d.path().join("x.ckpt");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    let o = hdyolo(&["infer", "--checkpoint", ck.to_str().unwrap(), "--input", d.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
