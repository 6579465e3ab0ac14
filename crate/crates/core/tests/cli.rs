use std::fs;
use std::path::Path;

use brltm::cli::run;
use serde_json::Value;

fn run_ok(args: &[&str]) {
    let mut argv = vec!["brltm"];
    argv.extend_from_slice(args);
    assert_eq!(run(argv.clone()), 0, "{argv:?}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"n_patients": 40}"#).unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    run_ok(&["gen-data", "--config", p(&cfg), "--seed", "7", "--out", p(&a)]);
    run_ok(&["gen-data", "--config", p(&cfg), "--seed", "7", "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 40);

    let m = json(&dir.path().join("a.jsonl.manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["n_patients"], 40);
    assert_eq!(m["config_hash"], json(&dir.path().join("b.jsonl.manifest.json"))["config_hash"]);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let c = dir.path().join("c.jsonl");
    run_ok(&["gen-data", "--config", p(&cfg), "--seed", "8", "--out", p(&c)]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn data_and_usage_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = dir.path().join("v.json");
    assert_eq!(run(["brltm", "build-vocab", "--records", p(&missing), "--out", p(&out)]), 3);
    assert_eq!(run(["brltm", "gen-data", "--preset", "nope", "--out", p(&out)]), 2);
    assert_eq!(run(["brltm", "inspect", "--records", p(&missing)]), 2);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let records = d.join("records.jsonl");
    let vocab = d.join("vocab.json");
    run_ok(&["gen-data", "--preset", "precursor", "--n-patients", "120", "--out", p(&records)]);
    run_ok(&["build-vocab", "--records", p(&records), "--out", p(&vocab)]);

    let pre = d.join("pre");
    run_ok(&[
        "pretrain", "--records", p(&records), "--vocab", p(&vocab), "--epochs", "1", "--batch-size", "32", "--out-dir",
        p(&pre),
    ]);
    for f in ["best.ckpt", "last.ckpt", "metrics.csv", "summary.json", "manifest.json"] {
        assert!(pre.join(f).exists(), "{f}");
    }
    let m = json(&pre.join("manifest.json"));
    assert_eq!(m["architecture"]["hidden_size"], 32);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);

    let ft = d.join("ft");
    run_ok(&[
        "finetune", "--records", p(&records), "--vocab", p(&vocab), "--checkpoint", p(&pre.join("best.ckpt")),
        "--window", "14d", "--window", "365d", "--epochs", "1", "--splits", "2", "--out-dir", p(&ft),
    ]);
    let results = json(&ft.join("results.json"));
    assert_eq!(results.as_array().unwrap().len(), 2);
    assert_eq!(results[1]["window"], "365d");
    assert_eq!(results[0]["splits"].as_array().unwrap().len(), 2);

    let eval = d.join("eval.json");
    run_ok(&[
        "evaluate", "--records", p(&records), "--vocab", p(&vocab), "--checkpoint", p(&ft.join("model.ckpt")),
        "--window", "14d", "--calibrate", "--out", p(&eval),
    ]);
    let e = json(&eval);
    assert_eq!(e["splits"].as_array().unwrap().len(), 10);
    assert_eq!(e["roc_auc"]["per_split"].as_array().unwrap().len(), 10);
    let text = e["roc_auc_text"].as_str().unwrap();
    assert!(text.contains(" (") && text.ends_with(')'), "{text}");
    assert!(e["splits"][0]["calibrated_confusion"].is_object());

    // a pretrained checkpoint has no classifier
    assert_eq!(
        run([
            "brltm", "evaluate", "--records", p(&records), "--vocab", p(&vocab), "--checkpoint",
            p(&pre.join("best.ckpt")), "--out", p(&eval),
        ]),
        3
    );

    let assoc = d.join("assoc.json");
    run_ok(&[
        "attend", "--records", p(&records), "--vocab", p(&vocab), "--checkpoint", p(&pre.join("best.ckpt")),
        "--patient", "P000000", "--top-k", "3", "--out", p(&assoc),
    ]);
    let a = json(&assoc);
    assert_eq!(a["layer"], 1);
    assert!(a["queries"].as_array().unwrap().iter().all(|q| q["associations"].as_array().unwrap().len() <= 3));

    run_ok(&["inspect", "--records", p(&records), "--vocab", p(&vocab), "--patient", "P000001"]);
    assert_eq!(run(["brltm", "inspect", "--records", p(&records), "--vocab", p(&vocab), "--patient", "X"]), 3);
}
