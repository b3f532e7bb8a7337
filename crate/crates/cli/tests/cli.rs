use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rxlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rxlora")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rxlora(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn line_count(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

const TINY_MODEL: &[&str] = &[
    "--d-model", "16", "--layers", "1", "--heads", "2", "--d-ff", "32", "--rank", "2", "--alpha", "4", "--max-seq-len",
    "128", "--batch-size", "4", "--accum", "2",
];

#[test]
fn gen_data_is_reproducible_and_writes_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["gen-data", "--n", "200", "--herbs", "50", "--seed", "1", "--out", s(&a)]);
    ok(&["gen-data", "--n", "200", "--herbs", "50", "--seed", "1", "--out", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(line_count(&a), 200);
    assert!(dir.path().join("a.jsonl.map.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["config"]["spec"]["n_records"], 200);
}

#[test]
fn infeasible_spec_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rxlora(&["gen-data", "--herbs", "3", "--herbs-mean", "6", "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(rxlora(&["train"]).status.code(), Some(1));
    assert_eq!(rxlora(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(rxlora(&["augment", "--input", "x", "--out", "y", "--k", "0"]).status.code(), Some(1));
    assert_eq!(rxlora(&["--help"]).status.code(), Some(0));
}

#[test]
fn augment_multiplies_records() {
    let dir = tempfile::tempdir().unwrap();
    let (src, aug) = (dir.path().join("c.jsonl"), dir.path().join("aug.jsonl"));
    ok(&["gen-data", "--n", "100", "--out", s(&src)]);
    ok(&["augment", "--input", s(&src), "--out", s(&aug), "--k", "20"]);
    assert_eq!(line_count(&aug), 2000);
    let stats = ok(&["stats", "--input", s(&aug)]);
    assert!(String::from_utf8_lossy(&stats.stdout).contains("\t2000\t"));
}

#[test]
fn eval_reproduces_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let truth = dir.path().join("truth.jsonl");
    fs::write(
        &truth,
        r#"{"chief_complaint":"x","history":"","tongue":"","prescription":[{"herb":"a","grams":10},{"herb":"b","grams":5},{"herb":"c","grams":3},{"herb":"d","grams":2}]}"#,
    )
    .unwrap();
    let pred = dir.path().join("pred.jsonl");
    fs::write(
        &pred,
        r#"{"index":0,"text":"a 10g, b 5g, e 1g","prescription":[{"herb":"a","grams":10},{"herb":"b","grams":5},{"herb":"e","grams":1}],"warnings":[]}"#,
    )
    .unwrap();
    let report = dir.path().join("report.json");
    let out = ok(&["eval", "--truth", s(&truth), "--pred", s(&pred), "--train", s(&truth), "--out", s(&report)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.6667\t0.5000\t0.5714"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["precision"].as_f64().unwrap(), 2.0 / 3.0);
    assert_eq!(json["f1"].as_f64().unwrap(), 4.0 / 7.0);

    fs::write(&pred, "").unwrap();
    let out = rxlora(&["eval", "--truth", s(&truth), "--pred", s(&pred), "--train", s(&truth), "--out", s(&report)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_predict_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    ok(&["gen-data", "--n", "60", "--herbs", "12", "--symptoms", "8", "--out", s(&p("all.jsonl"))]);
    ok(&["split", "--input", s(&p("all.jsonl")), "--train-out", s(&p("train.jsonl")), "--test-out", s(&p("test.jsonl"))]);
    assert_eq!(line_count(&p("test.jsonl")), 6);

    let conf = p("run.conf");
    fs::write(&conf, "epochs = 5\nepoch_checkpoints = true\n").unwrap();
    let (train, model) = (p("train.jsonl"), p("model"));
    let mut args = vec!["--threads", "1", "--config", s(&conf), "train", "--corpus", s(&train)];
    args.extend(["--out-dir", s(&model), "--epochs", "2"]);
    args.extend(TINY_MODEL);
    ok(&args);
    for f in ["vocab.json", "base.ckpt", "adapters.ckpt", "train_log.csv", "manifest.json", "adapters.epoch2.ckpt"] {
        assert!(p("model").join(f).exists(), "{f}");
    }
    assert!(!p("model").join("adapters.epoch3.ckpt").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p("model").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["epochs"], 2);
    assert_eq!(manifest["threads"], 1);

    let predict = |out: &Path, input: &Path| {
        ok(&[
            "predict", "--model-dir", s(&p("model")), "--input", s(input), "--out", s(out), "--max-new-tokens", "30",
        ]);
    };
    predict(&p("pred1.jsonl"), &p("test.jsonl"));
    predict(&p("pred2.jsonl"), &p("test.jsonl"));
    assert_eq!(fs::read(p("pred1.jsonl")).unwrap(), fs::read(p("pred2.jsonl")).unwrap());
    assert_eq!(line_count(&p("pred1.jsonl")), 6);

    fs::write(p("empty.jsonl"), "").unwrap();
    predict(&p("pred_empty.jsonl"), &p("empty.jsonl"));
    assert_eq!(fs::read(p("pred_empty.jsonl")).unwrap(), b"");

    let out = ok(&[
        "eval", "--truth", s(&p("test.jsonl")), "--pred", s(&p("pred1.jsonl")), "--train", s(&p("train.jsonl")), "--out",
        s(&p("report.json")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("Precision\tRecall\tF1-score\tNMSE\tNMSE_base\n"));

    let (model2, vocab, base) = (p("model2"), p("model/vocab.json"), p("model/base.ckpt"));
    let mut args = vec!["train", "--corpus", s(&train), "--out-dir", s(&model2)];
    args.extend(["--vocab", s(&vocab), "--base", s(&base), "--epochs", "1"]);
    args.extend(TINY_MODEL);
    ok(&args);
    assert_eq!(fs::read(p("model/base.ckpt")).unwrap(), fs::read(p("model2/base.ckpt")).unwrap());
}

#[test]
fn non_finite_weights_are_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let (data, model) = (p("d.jsonl"), p("model"));
    ok(&["gen-data", "--n", "16", "--herbs", "12", "--symptoms", "8", "--out", s(&data)]);
    let mut args = vec!["train", "--corpus", s(&data), "--out-dir", s(&model), "--epochs", "1"];
    args.extend(TINY_MODEL);
    ok(&args);

    let base = model.join("base.ckpt");
    let mut bytes = fs::read(&base).unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&base, bytes).unwrap();

    let (vocab, out) = (model.join("vocab.json"), p("again"));
    let mut args = vec!["train", "--corpus", s(&data), "--out-dir", s(&out), "--vocab", s(&vocab), "--base", s(&base)];
    args.extend(TINY_MODEL);
    let result = rxlora(&args);
    assert_eq!(result.status.code(), Some(3), "{}", String::from_utf8_lossy(&result.stderr));
    assert!(String::from_utf8_lossy(&result.stderr).contains("non-finite loss"));
}
